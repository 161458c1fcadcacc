"""Vectorized lockstep integration of nominal vs. delayed rollouts.

Internal helpers. All trials advance on a shared cell grid of width
tau / cells_per_period; a trial whose delayed switch falls inside a cell
takes two sub-steps there (old mode up to the switch instant, new mode for
the remainder). A zero-length RK4 step is exact, so trials without a
switch in the cell run through the same code path unchanged.
"""

from __future__ import annotations

import numpy as np

from .sysmodel import AffineField, IntegrationError, STATE_LIMIT

__all__ = [
    "ModeEvaluator",
    "paired_rollout",
    "policy_modes",
    "RolloutResult",
]


class ModeEvaluator:
    """Evaluate f_{mode[b]}(X[b]) for a batch of states and mode indices."""

    def __init__(self, sys):
        self.sys = sys
        self.modes = sys.modes
        if sys.is_affine:
            self._A = np.stack([sys.field(m).A for m in self.modes])
            self._b = np.stack([sys.field(m).b for m in self.modes])
        else:
            self._A = None

    def __call__(self, X, midx):
        if self._A is not None:
            return np.einsum("bij,bj->bi", self._A[midx], X) + self._b[midx]
        out = np.empty_like(X)
        for i, m in enumerate(self.modes):
            rows = midx == i
            if rows.any():
                out[rows] = self.sys.field(m)(X[rows])
        return out


def _rk4(F, X, h):
    """One RK4 step; ``h`` is scalar or (B, 1) for per-trial step sizes."""
    k1 = F(X)
    k2 = F(X + 0.5 * h * k1)
    k3 = F(X + 0.5 * h * k2)
    k4 = F(X + h * k3)
    return X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _guard(X, t):
    if not np.all(np.isfinite(X)) or np.max(np.abs(X)) > STATE_LIMIT:
        raise IntegrationError(f"batch state diverged at t = {t}", t)


class RolloutResult:
    """Per-trial deviation maxima and state envelopes of a paired rollout."""

    def __init__(self, per_period_max, nominal_lo, nominal_hi, delayed_lo, delayed_hi,
                 final_nominal, final_delayed):
        self.per_period_max = per_period_max      # (B, K+1)
        self.nominal_lo = nominal_lo              # (B, n)
        self.nominal_hi = nominal_hi
        self.delayed_lo = delayed_lo
        self.delayed_hi = delayed_hi
        self.final_nominal = final_nominal
        self.final_delayed = final_delayed

    @property
    def max_deviation(self):
        return self.per_period_max.max(axis=1)


def paired_rollout(sys, mode_idx, x0, tau, delays, cells_per_period):
    """Integrate nominal and delayed copies of every trial in lockstep.

    Parameters
    ----------
    mode_idx : (K,) or (B, K) int array
        Mode index active during period k (nominal timing).
    x0 : (n,) or (B, n)
        Shared or per-trial initial state.
    delays : (B, K) array
        delays[b, k] shifts the switch *into* period k; column 0 is ignored
        (the initial mode is never delayed).
    cells_per_period : int
        Number of RK4 cells per period; the cell width is tau / cells.

    Deviations are sampled at every cell boundary; the boundary at
    (k+1)*tau is attributed to period k+1.
    """
    delays = np.asarray(delays, dtype=float)
    B, K = delays.shape
    mode_idx = np.asarray(mode_idx)
    if mode_idx.ndim == 1:
        mode_idx = np.broadcast_to(mode_idx, (B, K))
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0, (B, len(x0)))
    n = x0.shape[1]
    dtc = tau / cells_per_period

    F = ModeEvaluator(sys)
    Xn = x0.astype(float).copy()
    Xd = x0.astype(float).copy()
    per_period_max = np.zeros((B, K + 1))
    nom_lo = Xn.copy(); nom_hi = Xn.copy()
    del_lo = Xd.copy(); del_hi = Xd.copy()

    def record(k_attr, t):
        dev = np.linalg.norm(Xd - Xn, axis=1)
        np.maximum(per_period_max[:, k_attr], dev, out=per_period_max[:, k_attr])
        np.minimum(nom_lo, Xn, out=nom_lo); np.maximum(nom_hi, Xn, out=nom_hi)
        np.minimum(del_lo, Xd, out=del_lo); np.maximum(del_hi, Xd, out=del_hi)

    for k in range(K):
        cur = mode_idx[:, k]
        d = delays[:, k] if k > 0 else np.zeros(B)
        jw = int(np.ceil(d.max() / dtc - 1e-12)) if d.max() > 0 else 0
        jw = min(jw, cells_per_period)
        prev = mode_idx[:, k - 1] if k > 0 else cur
        for j in range(jw):
            h1 = np.clip(d - j * dtc, 0.0, dtc)[:, None]
            Xd_new = _rk4(lambda Z: F(Z, prev), Xd, h1)
            Xd = _rk4(lambda Z: F(Z, cur), Xd_new, dtc - h1)
            Xn = _rk4(lambda Z: F(Z, cur), Xn, dtc)
            t = k * tau + (j + 1) * dtc
            record(k if j + 1 < cells_per_period else k + 1, t)
        for j in range(jw, cells_per_period):
            Xd = _rk4(lambda Z: F(Z, cur), Xd, dtc)
            Xn = _rk4(lambda Z: F(Z, cur), Xn, dtc)
            t = k * tau + (j + 1) * dtc
            record(k if j + 1 < cells_per_period else k + 1, t)
        _guard(Xn, (k + 1) * tau)
        _guard(Xd, (k + 1) * tau)

    return RolloutResult(per_period_max, nom_lo, nom_hi, del_lo, del_hi, Xn, Xd)


def policy_modes(sys, x0, tau, cells_per_period, policy, periods):
    """Roll the nominal batch forward period by period, choosing modes online.

    ``policy(X, k)`` maps the (B, n) states at the start of period k to a
    (B,) array of mode indices. Returns the (B, K) mode-index array.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = x0[None, :]
    B = x0.shape[0]
    F = ModeEvaluator(sys)
    X = x0.astype(float).copy()
    dtc = tau / cells_per_period
    out = np.empty((B, periods), dtype=np.int64)
    for k in range(periods):
        midx = np.asarray(policy(X, k), dtype=np.int64)
        out[:, k] = midx
        for j in range(cells_per_period):
            X = _rk4(lambda Z: F(Z, midx), X, dtc)
        _guard(X, (k + 1) * tau)
    return out
