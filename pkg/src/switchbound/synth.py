"""Safety supervisory synthesis on the lattice model and closed-loop checks.

``synthesize_safety`` computes the maximal controlled-invariant subset of
the lattice states inside a target box via a decreasing fixed point:
start from all in-target states, repeatedly drop states with no mode whose
successor survives. The controller then allows, per surviving state, every
mode whose successor survives.

``verify_closed_loop`` plays the synthesized switching signals open loop
against the continuous system, both delay-free and with randomized
switching delays, and reports containment and gap margins.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._batch import paired_rollout
from .certs import Box
from .sysmodel import SwitchingSignal, make_periodic_signal

__all__ = [
    "SafetyController",
    "shrink_box",
    "synthesize_safety",
    "extract_signal",
    "verify_closed_loop",
    "VerifyReport",
]


def shrink_box(box, margin):
    """Move every bound inward by ``margin``; error if any axis empties."""
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    lo = box.lower + margin
    hi = box.upper - margin
    for axis in range(box.dim):
        if lo[axis] >= hi[axis]:
            deficit = margin * 2 - (box.upper[axis] - box.lower[axis])
            raise ValueError(
                f"axis {axis + 1} empties under margin {margin} "
                f"(width {box.upper[axis] - box.lower[axis]}, deficit {deficit})"
            )
    return Box(lo, hi)


@dataclass
class SafetyController:
    """Maximal safe set plus, per safe state, the admissible mode set."""

    safe: np.ndarray          # bool over lattice states (Sink excluded)
    allowed: dict             # mode -> bool array; allowed[m][q] only valid on safe q
    target: Box
    modes: tuple

    @property
    def safe_count(self):
        return int(self.safe.sum())

    @property
    def is_empty(self):
        return not self.safe.any()

    def safe_states(self):
        return np.flatnonzero(self.safe)

    def allowed_modes(self, state):
        if not self.safe[state]:
            raise KeyError(f"state {state} is not in the safe set")
        return [m for m in self.modes if self.allowed[m][state]]

    def save(self, path, model):
        entries = {}
        for q in self.safe_states():
            key = ",".join(str(int(i)) for i in _unflatten(q, model.shape))
            entries[key] = sorted(str(m) for m in self.modes if self.allowed[m][q])
        obj = {
            "target": self.target.to_json_dict(),
            "modes": [str(m) for m in self.modes],
            "shape": list(model.shape),
            "safe_count": self.safe_count,
            "allowed": entries,
        }
        with open(path, "w") as fh:
            json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            obj = json.load(fh)
        shape = tuple(obj["shape"])
        n = int(np.prod(shape))
        modes = tuple(obj["modes"])
        safe = np.zeros(n, dtype=bool)
        allowed = {m: np.zeros(n, dtype=bool) for m in modes}
        for key, mode_list in obj["allowed"].items():
            ids = [int(v) for v in key.split(",")]
            q = 0
            for axis, j in enumerate(ids):
                q = q * shape[axis] + j
            safe[q] = True
            for m in mode_list:
                allowed[m][q] = True
        return cls(safe=safe, allowed=allowed, target=Box.from_json_dict(obj["target"]), modes=modes)


def _unflatten(q, shape):
    out = []
    for axis in range(len(shape) - 1, -1, -1):
        out.append(q % shape[axis])
        q = q // shape[axis]
    return tuple(reversed(out))


def _target_mask(model, target):
    masks = []
    for axis in range(len(model.shape)):
        coords = model.box.lower[axis] + np.arange(model.shape[axis]) * model.eta
        masks.append((coords >= target.lower[axis]) & (coords <= target.upper[axis]))
    full = masks[0]
    for m in masks[1:]:
        full = np.multiply.outer(full, m)
    return full.ravel()


def synthesize_safety(model, target):
    """Maximal controlled-invariant subset of the lattice states in ``target``.

    An empty result is valid and simply means no switching strategy can
    hold the sampled dynamics inside the target at this resolution.
    """
    for axis in range(target.dim):
        if target.lower[axis] < model.box.lower[axis] - 1e-12 or target.upper[axis] > model.box.upper[axis] + 1e-12:
            raise ValueError("target box must lie inside the model's grid box")
    n = model.n_states
    safe = np.zeros(n + 1, dtype=bool)  # final slot: Sink, never safe
    safe[:n] = _target_mask(model, target)
    while True:
        keep = np.zeros(n + 1, dtype=bool)
        for m in model.modes:
            keep[:n] |= safe[model.trans[m]]
        keep &= safe
        keep[n] = False
        if np.array_equal(keep, safe):
            break
        safe = keep
    safe = safe[:n]
    padded = np.concatenate([safe, [False]])  # index n = Sink
    allowed = {m: safe & padded[model.trans[m]] for m in model.modes}
    return SafetyController(safe=safe, allowed=allowed, target=target, modes=model.modes)


def extract_signal(ctrl, model, q0, horizon, policy="least-mode", seed=None):
    """Walk the symbolic closed loop for ``horizon`` periods and emit the
    resulting exactly periodic switching signal.

    policy: 'least-mode' (first admissible in mode order), 'round-robin'
    (rotate the preferred starting mode each step) or 'seeded-random'.
    """
    if not ctrl.safe[q0]:
        raise ValueError(f"initial state {q0} is not in the safe set")
    rng = np.random.default_rng(seed)
    modes = []
    q = q0
    for k in range(horizon):
        admissible = ctrl.allowed_modes(q)
        if policy == "least-mode":
            m = admissible[0]
        elif policy == "round-robin":
            names = list(ctrl.modes)
            start = k % len(names)
            rotated = names[start:] + names[:start]
            m = next(x for x in rotated if x in admissible)
        elif policy == "seeded-random":
            m = admissible[int(rng.integers(len(admissible)))]
        else:
            raise ValueError(f"unknown policy {policy!r}")
        modes.append(m)
        q = model.successor(q, m)
    return make_periodic_signal(model.tau, modes, horizon * model.tau)


@dataclass
class VerifyReport:
    """Closed-loop verification outcome across randomized-delay trials."""

    trials: int
    horizon: int
    gap_bound: float
    worst_gap: float = 0.0
    nominal_ok: bool = True
    delayed_ok: bool = True
    gap_ok: bool = True
    worst_margins: dict = field(default_factory=dict)
    per_trial: list = field(default_factory=list)

    @property
    def ok(self):
        return self.nominal_ok and self.delayed_ok and self.gap_ok

    def to_json_dict(self):
        return {
            "trials": self.trials,
            "horizon": self.horizon,
            "gap_bound": self.gap_bound,
            "worst_gap": self.worst_gap,
            "nominal_in_shrunk_box": self.nominal_ok,
            "delayed_in_safe_box": self.delayed_ok,
            "gap_within_bound": self.gap_ok,
            "worst_margins": {k: float(v) for k, v in self.worst_margins.items()},
            "per_trial": self.per_trial,
            "pass": self.ok,
        }


def verify_closed_loop(
    sys,
    ctrl,
    model,
    bound,
    delta0,
    trials,
    horizon,
    seed,
    dt=None,
    gap_slack=1e-6,
):
    """Randomized end-to-end containment check of the synthesized controller.

    Per trial: a random safe lattice state seeds both the open-loop signal
    (symbolic walk, seeded-random mode choices) and the continuous initial
    state; the delay-free and delayed rollouts must stay inside the safe
    box shrunk by the delay bound and inside the safe box respectively,
    with pointwise gap at most ``bound.fixed_point + gap_slack``.
    The all-zero and all-delta0 delay vectors are always included.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if ctrl.is_empty:
        raise ValueError("controller is empty; nothing to verify")
    if dt is None:
        dt = 1e-3 * model.tau
    cells = max(1, round(model.tau / dt))
    eps1 = bound.fixed_point
    safe_box = model.box
    nominal_box = shrink_box(safe_box, eps1)

    rng = np.random.default_rng(seed)
    states = ctrl.safe_states()
    q0s = states[rng.integers(len(states), size=trials)]
    mode_rows = np.empty((trials, horizon), dtype=np.int64)
    for i, q0 in enumerate(q0s):
        sig = extract_signal(ctrl, model, int(q0), horizon, policy="seeded-random",
                             seed=int(rng.integers(2**63)))
        mode_rows[i] = [sys.mode_index(m) for m in sig.mode_sequence]
    x0 = model.coords(q0s)

    delays = rng.uniform(0.0, delta0, size=(trials, horizon))
    delays[0, :] = 0.0
    if trials > 1:
        delays[1, :] = delta0
    delays[:, 0] = 0.0

    result = paired_rollout(sys, mode_rows, x0, model.tau, delays, cells)

    report = VerifyReport(trials=trials, horizon=horizon, gap_bound=eps1 + gap_slack)
    report.worst_gap = float(result.max_deviation.max())
    nom_lo_margin = float((result.nominal_lo - nominal_box.lower).min())
    nom_hi_margin = float((nominal_box.upper - result.nominal_hi).min())
    del_lo_margin = float((result.delayed_lo - safe_box.lower).min())
    del_hi_margin = float((safe_box.upper - result.delayed_hi).min())
    report.nominal_ok = nom_lo_margin >= 0 and nom_hi_margin >= 0
    report.delayed_ok = del_lo_margin >= 0 and del_hi_margin >= 0
    report.gap_ok = report.worst_gap <= eps1 + gap_slack
    report.worst_margins = {
        "nominal_lower": nom_lo_margin,
        "nominal_upper": nom_hi_margin,
        "delayed_lower": del_lo_margin,
        "delayed_upper": del_hi_margin,
        "gap": eps1 + gap_slack - report.worst_gap,
    }
    for i in range(trials):
        report.per_trial.append(
            {
                "initial_state": int(q0s[i]),
                "max_gap": float(result.max_deviation[i]),
            }
        )
    return report
