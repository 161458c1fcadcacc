"""Certified trajectory-error bounds for switching delays.

Given an incremental-stability certificate (contraction rate kappa, lower
envelope alpha), a cross-mode drift rate nu and the timing parameters
(period tau, delay bound delta0), the worst-case gap between the delayed
and the delay-free closed loop is

    fixed_point = alpha^{ -1}( nu * delta0 / (1 - mu * e^{-kappa (tau - delta0)}) )

(mu = 1 for a common certificate). The error after k switches follows the
one-step growth map

    g(e) = alpha^{-1}( mu * e^{-kappa (tau - delta0)} * alpha(e) + nu * delta0 )

whose iterates from 0 are reported as ``per_switch``. The fixed point is
finite only under the dwell-time condition tau - delta0 > log(mu) / kappa;
the per-switch sequence needs no such condition.

``check_bisimulation`` replays matched transition rounds of the delayed and
delay-free systems and verifies both the fixed-precision conditions
(output distance and relation membership at the given epsilon) and the
incrementing variant (membership at g^k(epsilon) after k rounds).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._batch import paired_rollout
from .certs import inverse_classK
from .sysmodel import flow_constant

__all__ = [
    "BoundResult",
    "TSState",
    "premetric",
    "bound_common",
    "bound_multiple",
    "growth_map",
    "check_bisimulation",
    "BisimReport",
    "delay_deviation_experiment",
]


@dataclass(frozen=True)
class TSState:
    """Transition-system state: continuous state, switching time, next mode."""

    x: np.ndarray
    t: float
    p: object

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))


def premetric(a, b, sys, tau, delta0, dt=None):
    """Output distance between a delayed-system state ``a`` and a delay-free
    state ``b``.

    Finite only when both share the next mode, ``b`` sits exactly on the
    period grid and ``a`` lags it by at most delta0; then it equals
    ``||a.x - flow(b.x, p, a.t - b.t)||``. Asymmetric by design: the first
    argument is the delayed system's state.
    """
    if dt is None:
        dt = 1e-3 * tau
    if a.p != b.p:
        return math.inf
    k = round(b.t / tau)
    if not math.isclose(b.t, k * tau, rel_tol=0.0, abs_tol=1e-9 * tau):
        return math.inf
    lag = a.t - b.t
    if lag < -1e-12 or lag > delta0 * (1 + 1e-12):
        return math.inf
    ref = flow_constant(sys, b.x, a.p, max(lag, 0.0), dt)
    return float(np.linalg.norm(a.x - ref))


@dataclass(frozen=True)
class BoundResult:
    """Delay-error bound: overall fixed point plus the per-switch ramp."""

    epsilon: float
    fixed_point: float
    per_switch: np.ndarray
    dwell_ok: bool
    params: dict

    def __post_init__(self):
        ps = np.asarray(self.per_switch, dtype=float)
        ps.setflags(write=False)
        object.__setattr__(self, "per_switch", ps)

    def to_json_dict(self):
        eps = self.epsilon if math.isfinite(self.epsilon) else "inf"
        return {
            "epsilon": eps,
            "per_switch": [float(v) for v in self.per_switch],
            "dwell_time_ok": self.dwell_ok,
            "params": dict(self.params),
        }


def growth_map(alpha_lo, kappa, mu, nu, tau, delta0):
    """One-switch error growth map g (in state units)."""
    lam = mu * math.exp(-kappa * (tau - delta0))
    c = nu * delta0

    def g(e):
        return inverse_classK(alpha_lo, lam * float(alpha_lo(e)) + c)

    return g


def _bound(alpha_lo, kappa, mu, nu, tau, delta0, n_switch, params):
    if not 0 <= delta0 < tau:
        raise ValueError("delay bound must satisfy 0 <= delta0 < tau")
    if nu < 0:
        raise ValueError("nu must be nonnegative")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    lam = mu * math.exp(-kappa * (tau - delta0))
    c = nu * delta0
    dwell_ok = lam < 1.0
    if c == 0.0:
        fixed = 0.0
    elif dwell_ok:
        fixed = inverse_classK(alpha_lo, c / (1.0 - lam))
    else:
        fixed = math.inf

    per = np.empty(n_switch + 1)
    per[0] = 0.0
    w = 0.0  # running value of alpha_lo at the current bound
    for k in range(1, n_switch + 1):
        w = lam * w + c
        per[k] = inverse_classK(alpha_lo, w)

    return BoundResult(
        epsilon=fixed,
        fixed_point=fixed,
        per_switch=per,
        dwell_ok=dwell_ok,
        params=params,
    )


def bound_common(cert, nu, tau, delta0, n_switch=64):
    """Delay-error bound from a common certificate (no dwell condition)."""
    params = {
        "kind": "common",
        "tau": tau,
        "delta0": delta0,
        "kappa": cert.kappa,
        "nu": nu,
        "mu": 1.0,
    }
    return _bound(cert.alpha_lo, cert.kappa, 1.0, nu, tau, delta0, n_switch, params)


def bound_multiple(cert, nu_prime, tau, delta0, n_switch=64):
    """Delay-error bound from a multiple certificate.

    The fixed point is finite only under the dwell-time condition
    ``tau - delta0 > log(mu)/kappa``; otherwise it is reported as +inf
    while the per-switch ramp remains finite and valid.
    """
    mu = cert.mu_for_bound
    params = {
        "kind": "multiple",
        "tau": tau,
        "delta0": delta0,
        "kappa": cert.kappa,
        "nu": nu_prime,
        "mu": mu,
    }
    return _bound(cert.alpha_lo, cert.kappa, mu, nu_prime, tau, delta0, n_switch, params)


# ---------------------------------------------------------------------------
# Empirical transition-matching check


@dataclass
class BisimViolation:
    sample: int
    step: int
    kind: str
    observed: float
    bound: float


@dataclass
class BisimReport:
    samples: int
    steps: int
    epsilon: float
    incrementing_violations: list = field(default_factory=list)
    fixed_violations: list = field(default_factory=list)
    max_premetric: float = 0.0
    max_slack: float = -math.inf  # observed minus incrementing bound (negative = margin)

    @property
    def violations(self):
        return self.incrementing_violations + self.fixed_violations

    @property
    def ok(self):
        return not self.incrementing_violations and not self.fixed_violations


def check_bisimulation(
    sys_delayed,
    sys_periodic,
    cert,
    epsilon,
    tau,
    delta0,
    samples,
    seed,
    steps,
    mode_policy=None,
    sample_box=None,
    nu=None,
    dt=None,
    slack=1e-7,
):
    """Empirically exercise the matched-transition conditions.

    Draws ``samples`` state pairs inside the relation at precision
    ``epsilon`` (by perturbing shared base points and rejection-sampling on
    the certificate value), then plays ``steps`` rounds of matching
    transitions with randomized delays in [0, delta0] (the endpoints 0 and
    delta0 are always forced into the delay mix). After round k it asserts

    * the fixed-precision conditions: output distance <= epsilon and
      certificate value <= alpha_lo(epsilon);
    * the incrementing conditions with bound g^k(epsilon) instead.

    Violations of the first kind witness that epsilon is below the true
    bisimulation threshold; violations of the second kind falsify the
    implementation (or the certificate data).

    ``mode_policy(state, k) -> mode`` chooses the shared next mode played at
    round k from the delay-free system's state; the default cycles through
    the system's modes round-robin.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    if dt is None:
        dt = 1e-3 * tau
    box = sample_box if sample_box is not None else cert.box
    modes = sys_periodic.modes
    if mode_policy is None:
        def mode_policy(state, k):
            return modes[k % len(modes)]

    rng = np.random.default_rng(seed)
    report = BisimReport(samples=samples, steps=steps, epsilon=epsilon)
    a_eps = float(cert.alpha_lo(epsilon))

    # per-round incrementing bounds: g^k(epsilon)
    if nu is None:
        nu = cert.nu
    if nu is None:
        if delta0 > 0:
            raise ValueError("cross-mode drift rate nu required when delta0 > 0")
        nu = 0.0
    g = growth_map(cert.alpha_lo, cert.kappa, cert.mu_for_bound, nu, tau, delta0)
    inc_bound = [epsilon]
    for _ in range(steps):
        inc_bound.append(g(inc_bound[-1]))

    for s in range(samples):
        z = box.lower + rng.random(box.dim) * box.widths
        p0 = mode_policy(z, 0)
        lag = rng.uniform(0.0, delta0) if delta0 > 0 else 0.0
        ref = flow_constant(sys_periodic, z, p0, lag, dt)
        # rejection-sample a perturbation keeping the pair inside the relation
        xd = ref.copy()
        if epsilon > 0:
            for _ in range(200):
                u = rng.normal(size=box.dim)
                u *= rng.uniform(0.0, epsilon) / max(np.linalg.norm(u), 1e-300)
                if cert.value(p0, ref + u, ref) <= a_eps:
                    xd = ref + u
                    break
        q_d = TSState(xd, lag, p0)
        q_n = TSState(z, 0.0, p0)

        # forced extreme delays on the first two rounds, uniform afterwards
        for k in range(1, steps + 1):
            if k == 1:
                d_next = 0.0
            elif k == 2:
                d_next = delta0
            else:
                d_next = rng.uniform(0.0, delta0) if delta0 > 0 else 0.0
            p_next = mode_policy(q_n.x, k)
            t_n = k * tau
            t_d = k * tau + d_next
            x_n = flow_constant(sys_periodic, q_n.x, q_n.p, tau, dt)
            x_d = flow_constant(sys_delayed, q_d.x, q_d.p, t_d - q_d.t, dt)
            q_n = TSState(x_n, t_n, p_next)
            q_d = TSState(x_d, t_d, p_next)

            d_out = premetric(q_d, q_n, sys_periodic, tau, delta0, dt=dt)
            v_ref = flow_constant(sys_periodic, q_n.x, q_n.p, t_d - t_n, dt)
            v_val = cert.value(p_next, q_d.x, v_ref)
            report.max_premetric = max(report.max_premetric, d_out)

            be = inc_bound[k]
            report.max_slack = max(report.max_slack, d_out - be)
            if d_out > be + slack:
                report.incrementing_violations.append(
                    BisimViolation(s, k, "premetric>g^k", d_out, be)
                )
            if v_val > float(cert.alpha_lo(be)) + slack:
                report.incrementing_violations.append(
                    BisimViolation(s, k, "V>alpha(g^k)", v_val, float(cert.alpha_lo(be)))
                )
            if d_out > epsilon + slack:
                report.fixed_violations.append(
                    BisimViolation(s, k, "premetric>epsilon", d_out, epsilon)
                )
            if v_val > a_eps + slack:
                report.fixed_violations.append(
                    BisimViolation(s, k, "V>alpha(epsilon)", v_val, a_eps)
                )
    return report


def delay_deviation_experiment(
    sys,
    mode_seq,
    x0,
    tau,
    delta0,
    n_sequences,
    periods,
    seed,
    dt=None,
):
    """Randomized empirical soundness run for the delay-error bound.

    Plays ``n_sequences`` random delay vectors (uniform over [0, delta0],
    plus the forced all-zero and all-delta0 extremes) against the fixed
    nominal mode sequence, and returns the batched rollout result with the
    per-period deviation maxima.
    """
    if dt is None:
        dt = 1e-3 * tau
    cells = max(1, round(tau / dt))
    rng = np.random.default_rng(seed)
    mode_idx = np.asarray([sys.mode_index(m) for m in mode_seq])
    K = len(mode_idx)
    B = n_sequences + 2
    delays = rng.uniform(0.0, delta0, size=(B, K))
    delays[0, :] = 0.0
    delays[1, :] = delta0
    delays[:, 0] = 0.0
    return paired_rollout(sys, mode_idx, x0, tau, delays, cells)
