"""Finite grid abstraction of the delay-free sampled dynamics.

The abstraction covers a compact box with a uniform lattice of spacing
eta; each (state, mode) pair has exactly one successor: the lattice point
nearest the one-period flow, or a distinguished absorbing Sink when the
flow leaves the box. The spacing needed for a target abstraction precision
eps2 follows from the certificate's variation bound gamma and decay rate:

    gamma(eta) <= (1 - e^{-kappa tau}) * alpha_lo(eps2)

Affine systems take an exact one-period affine map (matrix exponential)
instead of per-state integration; generic systems integrate with batched
RK4. The affine map is cross-checked against RK4 in the test suite.
"""

from __future__ import annotations

import json
import math
import warnings

import numpy as np
import scipy.linalg

from ._batch import ModeEvaluator, _rk4
from .certs import Box, inverse_classK
from .sysmodel import AffineField

__all__ = ["SymbolicModel", "max_eta", "build_symbolic", "GridSizeError", "period_affine_map"]

DEFAULT_GRID_CAP = 5_000_000


class GridSizeError(ValueError):
    """Requested grid exceeds the state cap; advise a coarser precision."""


def max_eta(cert, tau, eps2):
    """Largest lattice spacing consistent with abstraction precision eps2."""
    if eps2 <= 0:
        raise ValueError("eps2 must be positive")
    budget = (1.0 - math.exp(-cert.kappa * tau)) * float(cert.alpha_lo(eps2))
    return inverse_classK(cert.gamma, budget)


def period_affine_map(field, tau):
    """Exact one-period map x -> E x + c for an affine field."""
    n = field.dim
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = field.A
    aug[:n, n] = field.b
    E = scipy.linalg.expm(aug * tau)
    return E[:n, :n], E[:n, n]


class SymbolicModel:
    """Deterministic lattice transition system plus an absorbing Sink.

    States are flat indices into the lattice (row-major over axes); the
    Sink is the extra index ``n_states``.
    """

    def __init__(self, box, eta, tau, eps2, shape, trans):
        self.box = box
        self.eta = float(eta)
        self.tau = float(tau)
        self.eps2 = None if eps2 is None else float(eps2)
        self.shape = tuple(int(s) for s in shape)
        self.trans = {m: np.asarray(t, dtype=np.int32) for m, t in trans.items()}
        for t in self.trans.values():
            t.setflags(write=False)

    @property
    def n_states(self):
        return int(np.prod(self.shape))

    @property
    def sink(self):
        return self.n_states

    @property
    def modes(self):
        return tuple(self.trans)

    def coords(self, indices):
        """Continuous coordinates of flat lattice indices (vectorized)."""
        indices = np.asarray(indices)
        out = np.empty(indices.shape + (len(self.shape),))
        rem = indices
        for axis in range(len(self.shape) - 1, -1, -1):
            out[..., axis] = self.box.lower[axis] + (rem % self.shape[axis]) * self.eta
            rem = rem // self.shape[axis]
        return out

    def index_of(self, points):
        """Flat index of the nearest lattice point (clipped into the box)."""
        points = np.asarray(points, dtype=float)
        idx = np.zeros(points.shape[:-1], dtype=np.int64)
        for axis in range(len(self.shape)):
            frac = (points[..., axis] - self.box.lower[axis]) / self.eta
            j = np.ceil(frac - 0.5).astype(np.int64)  # ties toward the smaller index
            np.clip(j, 0, self.shape[axis] - 1, out=j)
            idx = idx * self.shape[axis] + j
        return idx

    def successor(self, state, mode):
        return int(self.trans[mode][state])

    def save(self, path):
        obj = {
            "box": self.box.to_json_dict(),
            "eta": self.eta,
            "tau": self.tau,
            "eps2": self.eps2,
            "shape": list(self.shape),
            "trans": {str(m): [int(v) for v in t] for m, t in self.trans.items()},
        }
        with open(path, "w") as fh:
            json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            obj = json.load(fh)
        return cls(
            box=Box.from_json_dict(obj["box"]),
            eta=obj["eta"],
            tau=obj["tau"],
            eps2=obj["eps2"],
            shape=obj["shape"],
            trans={m: np.array(t, dtype=np.int32) for m, t in obj["trans"].items()},
        )


def build_symbolic(
    sys,
    box,
    eta,
    tau,
    dt=None,
    eps2=None,
    cert=None,
    grid_cap=DEFAULT_GRID_CAP,
    chunk=500_000,
):
    """Build the lattice abstraction of the one-period sampled dynamics.

    A successor is Sink exactly when the continuous one-period flow leaves
    the box (independent of eta); otherwise the flow is snapped to the
    nearest lattice point, ties toward the lexicographically smaller index.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if dt is None:
        dt = 1e-3 * tau
    shape = tuple(int(math.floor((hi - lo) / eta + 1e-9)) + 1 for lo, hi in zip(box.lower, box.upper))
    n_states = int(np.prod(shape))
    if n_states > grid_cap:
        raise GridSizeError(
            f"grid of {n_states} states exceeds the cap of {grid_cap}; "
            "increase eps2 (coarser precision) or raise grid_cap"
        )
    if eps2 is not None and cert is not None:
        eta_max = max_eta(cert, tau, eps2)
        if eta > eta_max * (1 + 1e-9):
            warnings.warn(
                f"eta = {eta} exceeds the feasible spacing {eta_max} for eps2 = {eps2}",
                stacklevel=2,
            )

    strides = np.ones(len(shape), dtype=np.int64)
    for axis in range(len(shape) - 2, -1, -1):
        strides[axis] = strides[axis + 1] * shape[axis + 1]

    trans = {}
    for mode in sys.modes:
        f = sys.field(mode)
        affine = isinstance(f, AffineField)
        if affine:
            E, c = period_affine_map(f, tau)
        else:
            evaluator = ModeEvaluator(sys)
            n_steps = max(1, round(tau / dt))
            h = tau / n_steps
            mode_col = np.full(chunk, sys.mode_index(mode), dtype=np.int64)
        t_arr = np.empty(n_states, dtype=np.int32)
        for start in range(0, n_states, chunk):
            end = min(start + chunk, n_states)
            idx = np.arange(start, end, dtype=np.int64)
            pts = np.empty((end - start, len(shape)))
            rem = idx
            for axis in range(len(shape) - 1, -1, -1):
                pts[:, axis] = box.lower[axis] + (rem % shape[axis]) * eta
                rem = rem // shape[axis]
            if affine:
                flow = pts @ E.T + c
            else:
                flow = pts.copy()
                mc = mode_col[: end - start]
                for _ in range(n_steps):
                    flow = _rk4(lambda Z: evaluator(Z, mc), flow, h)
            inside = box.contains(flow)
            snapped = np.zeros(end - start, dtype=np.int64)
            for axis in range(len(shape)):
                frac = (flow[:, axis] - box.lower[axis]) / eta
                j = np.ceil(frac - 0.5).astype(np.int64)
                np.clip(j, 0, shape[axis] - 1, out=j)
                snapped += j * strides[axis]
            snapped[~inside] = n_states
            t_arr[start:end] = snapped.astype(np.int32)
        trans[mode] = t_arr

    return SymbolicModel(box=box, eta=eta, tau=tau, eps2=eps2, shape=shape, trans=trans)
