"""Incremental-stability certificates and their numeric validation.

A certificate supplies, per mode, a distance-like function V(x, y) that is
sandwiched between two class-K envelopes of ||x - y|| and decays at rate
kappa along paired trajectories of the same mode. For multi-function
certificates, a link constant mu bounds how much V can jump when the
comparison function changes mode. The cross-mode drift rate nu (how fast V
can grow while the two arguments follow *different* modes) is either pinned
by the user or estimated by grid maximization over a compact box.

All certificate inequalities are checked by sampling, not proved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exprparse import Expression, evaluate, parse

__all__ = [
    "Box",
    "ClassK",
    "ClassKError",
    "InverseRangeError",
    "CertificateError",
    "QuadraticLyapunov",
    "ExprLyapunov",
    "LyapunovCertificate",
    "ValidationReport",
    "inverse_classK",
    "estimate_nu",
]

_BISECT_TOL = 1e-12
_CHECK_SLACK = 1e-9
_DIAG_EXCLUSION = 1e-6  # |x-y| below this skips gradient-based checks


class ClassKError(ValueError):
    """Function fails the class-K requirements (zero at zero, increasing)."""


class InverseRangeError(ValueError):
    """Requested inverse value above the function's range on [0, s_max]."""


class CertificateError(ValueError):
    """Certificate construction or validation failure."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned compact box with componentwise lower < upper."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("bounds must be 1-D arrays of equal length")
        if not np.all(lo < hi):
            raise ValueError("box must satisfy lower < upper componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return len(self.lower)

    @property
    def center(self):
        return (self.lower + self.upper) / 2.0

    @property
    def widths(self):
        return self.upper - self.lower

    def contains(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)

    def grid(self, points_per_axis):
        """All grid points: (points_per_axis ** dim, dim) array."""
        axes = [np.linspace(self.lower[i], self.upper[i], points_per_axis) for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def sample(self, rng, count):
        return self.lower + rng.random((count, self.dim)) * self.widths

    def to_json_dict(self):
        return {"lower": [float(v) for v in self.lower], "upper": [float(v) for v in self.upper]}

    @classmethod
    def from_json_dict(cls, obj):
        return cls(np.array(obj["lower"], dtype=float), np.array(obj["upper"], dtype=float))


class ClassK:
    """Strictly increasing function with value 0 at 0, plus an inverse.

    Three forms: linear ``c*s``, power ``c*s^q`` (both inverted in closed
    form) and a parsed expression in ``s`` on a declared domain [0, s_max]
    (inverted by bisection).
    """

    def __init__(self, kind, c=None, q=None, expr=None, s_max=math.inf):
        self.kind = kind
        self.c = c
        self.q = q
        self.expr = expr
        self.s_max = float(s_max)
        if kind == "linear":
            if not (c and c > 0):
                raise ClassKError("linear coefficient must be positive")
        elif kind == "power":
            if not (c and c > 0 and q and q > 0):
                raise ClassKError("power form needs c > 0 and q > 0")
        elif kind == "expr":
            if expr is None:
                raise ClassKError("expression form needs a parsed expression")
            if not math.isfinite(self.s_max) or self.s_max <= 0:
                raise ClassKError("expression form needs a finite positive s_max")
        else:
            raise ClassKError(f"unknown class-K form {kind!r}")
        self._sampled_check()

    @classmethod
    def linear(cls, c):
        return cls("linear", c=float(c))

    @classmethod
    def power(cls, c, q):
        return cls("power", c=float(c), q=float(q))

    @classmethod
    def from_expression(cls, source, s_max):
        return cls("expr", expr=parse(source, ["s"]), s_max=s_max)

    @classmethod
    def identity(cls):
        return cls("linear", c=1.0)

    def _sampled_check(self):
        probe = self.s_max if math.isfinite(self.s_max) else 1.0
        s = np.linspace(0.0, probe, 64)
        v = self(s)
        if abs(float(v[0])) > 1e-12:
            raise ClassKError("class-K function must vanish at 0")
        if np.any(np.diff(v) <= 1e-12 * max(1.0, float(v[-1]))):
            raise ClassKError("class-K function must be strictly increasing")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "linear":
            out = self.c * s
        elif self.kind == "power":
            out = self.c * np.power(s, self.q)
        else:
            out = evaluate(self.expr, {"s": s})
        if np.ndim(out) == 0:
            return float(out)
        return out

    def inverse(self, y):
        return inverse_classK(self, y)

    def to_json_dict(self):
        if self.kind == "linear":
            return {"linear": self.c}
        if self.kind == "power":
            return {"power": [self.c, self.q]}
        from .exprparse import pretty

        return {"expr": pretty(self.expr), "s_max": self.s_max}

    @classmethod
    def from_json_dict(cls, obj):
        if isinstance(obj, (int, float)):
            return cls.linear(float(obj))
        if "linear" in obj:
            return cls.linear(obj["linear"])
        if "power" in obj:
            c, q = obj["power"]
            return cls.power(c, q)
        if "expr" in obj:
            return cls.from_expression(obj["expr"], obj["s_max"])
        raise ClassKError(f"unrecognized class-K spec {obj!r}")


def inverse_classK(f, y):
    """Value s with f(s) = y. Closed form for linear/power, else bisection."""
    if y < 0:
        raise InverseRangeError("inverse argument must be nonnegative")
    if y == 0.0:
        return 0.0
    if f.kind == "linear":
        return y / f.c
    if f.kind == "power":
        return (y / f.c) ** (1.0 / f.q)
    hi = f.s_max
    f_hi = f(hi)
    if y > f_hi * (1 + 1e-12):
        raise InverseRangeError(f"value {y} above the range of the function on [0, {f.s_max}]")
    lo = 0.0
    while hi - lo > _BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if f(mid) < y:
            lo = mid
        else:
            hi = mid
    s = 0.5 * (lo + hi)
    if abs(f(s) - y) > 1e-10 * max(1.0, y):
        raise InverseRangeError(f"bisection failed to invert at y = {y}")
    return s


# ---------------------------------------------------------------------------
# Lyapunov-style distance functions


class QuadraticLyapunov:
    """V(x, y) = sqrt((x-y)^T M (x-y)) with analytic gradients."""

    def __init__(self, M):
        M = np.asarray(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise CertificateError("M must be square")
        if not np.allclose(M, M.T):
            raise CertificateError("M must be symmetric")
        if np.any(np.linalg.eigvalsh(M) <= 0):
            raise CertificateError("M must be positive definite")
        M.setflags(write=False)
        self.M = M

    def value(self, x, y):
        e = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        q = np.einsum("...i,ij,...j->...", e, self.M, e)
        out = np.sqrt(np.maximum(q, 0.0))
        return float(out) if np.ndim(out) == 0 else out

    def grad(self, x, y):
        """(dV/dx, dV/dy); undefined on the diagonal x = y."""
        e = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        me = e @ self.M.T
        v = np.sqrt(np.maximum(np.einsum("...i,...i->...", e, me), 1e-300))
        gx = me / v[..., None]
        return gx, -gx


class ExprLyapunov:
    """V given as an expression in x1..xn, y1..yn; central-difference gradients."""

    def __init__(self, expr, dim):
        self.expr = expr
        self.dim = dim
        self._xn = tuple(f"x{i + 1}" for i in range(dim))
        self._yn = tuple(f"y{i + 1}" for i in range(dim))

    def _env(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        env = {n: x[..., i] for i, n in enumerate(self._xn)}
        env.update({n: y[..., i] for i, n in enumerate(self._yn)})
        return env

    def value(self, x, y):
        out = evaluate(self.expr, self._env(x, y))
        if np.ndim(out) == 0:
            return float(out)
        return np.broadcast_to(out, np.asarray(x, dtype=float)[..., 0].shape).copy()

    def grad(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        hx = 1e-6 * (1.0 + np.linalg.norm(x, axis=-1, keepdims=True))
        hy = 1e-6 * (1.0 + np.linalg.norm(y, axis=-1, keepdims=True))
        gx = np.empty(np.broadcast_shapes(x.shape, y.shape))
        gy = np.empty_like(gx)
        for i in range(self.dim):
            dx = np.zeros_like(x)
            dx[..., i] = hx[..., 0]
            gx[..., i] = (self.value(x + dx, y) - self.value(x - dx, y)) / (2.0 * hx[..., 0])
            dy = np.zeros_like(y)
            dy[..., i] = hy[..., 0]
            gy[..., i] = (self.value(x, y + dy) - self.value(x, y - dy)) / (2.0 * hy[..., 0])
        return gx, gy


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_violation: float
    witness: object = None

    def __str__(self):
        status = "ok" if self.passed else f"VIOLATED by {self.worst_violation:.3e} at {self.witness}"
        return f"{self.name}: {status}"


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    @property
    def ok(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c.passed]

    def __str__(self):
        return "\n".join(str(c) for c in self.checks)


@dataclass
class LyapunovCertificate:
    """Mode-indexed distance functions with envelopes and rates.

    kind        "common" (one V shared by all modes) or "multiple".
    V           mapping mode -> QuadraticLyapunov | ExprLyapunov.
    alpha_lo    lower class-K envelope (aggregated min over modes).
    alpha_hi    upper class-K envelope (aggregated max).
    gamma       class-K bound on |V(x,y) - V(x,z)| in terms of ||y - z||;
                defaults to alpha_hi, exact for the quadratic form.
    kappa       decay rate along same-mode paired trajectories.
    mu          cross-function link: V_p <= mu * V_q pointwise (1 for common).
    box         compact working box for sampled checks and nu estimation.
    nu          optional pinned cross-mode drift rate.
    mu_bound    optional link constant to use in delay bounds when it differs
                from the sampled-check value.
    """

    kind: str
    V: dict
    alpha_lo: ClassK
    alpha_hi: ClassK
    kappa: float
    box: Box
    gamma: ClassK = None
    mu: float = 1.0
    nu: float = None
    mu_bound: float = None

    def __post_init__(self):
        if self.kind not in ("common", "multiple"):
            raise CertificateError("kind must be 'common' or 'multiple'")
        if self.kappa <= 0:
            raise CertificateError("kappa must be positive")
        if self.kind == "multiple" and self.mu < 1.0:
            raise CertificateError("mu must be at least 1")
        if self.kind == "common":
            self.mu = 1.0
        if self.gamma is None:
            self.gamma = self.alpha_hi

    def value(self, p, x, y):
        return self.V[p].value(x, y)

    def grad(self, p, x, y):
        return self.V[p].grad(x, y)

    @property
    def modes(self):
        return tuple(self.V)

    @property
    def mu_for_bound(self):
        return self.mu if self.mu_bound is None else self.mu_bound

    # -- sampled validation ------------------------------------------------

    def validate(self, sys, grid_per_axis=11, slack=_CHECK_SLACK, seed=0):
        """Sampled check of the envelope, decay, link and gamma inequalities."""
        report = ValidationReport()
        pts = self.box.grid(grid_per_axis)
        n_pts = len(pts)
        X = np.repeat(pts, n_pts, axis=0)
        Y = np.tile(pts, (n_pts, 1))
        r = np.linalg.norm(X - Y, axis=-1)
        off_diag = r >= _DIAG_EXCLUSION

        for p in self.modes:
            v = self.V[p].value(X, Y)
            lo_gap = np.asarray(self.alpha_lo(r)) - v  # should be <= slack
            hi_gap = v - np.asarray(self.alpha_hi(r))
            worst_lo = float(lo_gap.max())
            worst_hi = float(hi_gap.max())
            report.checks.append(
                CheckResult(
                    f"envelope_lower[{p}]",
                    worst_lo <= slack,
                    worst_lo,
                    (tuple(X[lo_gap.argmax()]), tuple(Y[lo_gap.argmax()])),
                )
            )
            report.checks.append(
                CheckResult(
                    f"envelope_upper[{p}]",
                    worst_hi <= slack,
                    worst_hi,
                    (tuple(X[hi_gap.argmax()]), tuple(Y[hi_gap.argmax()])),
                )
            )

            gx, gy = self.V[p].grad(X[off_diag], Y[off_diag])
            f = sys.field(p)
            lie = np.einsum("...i,...i->...", gx, f(X[off_diag])) + np.einsum(
                "...i,...i->...", gy, f(Y[off_diag])
            )
            decay_gap = lie + self.kappa * v[off_diag]
            worst = float(decay_gap.max()) if decay_gap.size else 0.0
            wit = None
            if decay_gap.size:
                j = decay_gap.argmax()
                wit = (tuple(X[off_diag][j]), tuple(Y[off_diag][j]))
            report.checks.append(CheckResult(f"decay[{p}]", worst <= slack, worst, wit))

        if self.kind == "multiple":
            for p in self.modes:
                for q in self.modes:
                    if p == q:
                        continue
                    vp = self.V[p].value(X, Y)
                    vq = self.V[q].value(X, Y)
                    gap = vp - self.mu * vq
                    worst = float(gap.max())
                    j = gap.argmax()
                    report.checks.append(
                        CheckResult(
                            f"link[{p}<=mu*{q}]",
                            worst <= slack,
                            worst,
                            (tuple(X[j]), tuple(Y[j])),
                        )
                    )

        # |V(x,y) - V(x,z)| <= gamma(||y-z||) on random triples
        rng = np.random.default_rng(seed)
        count = 2000
        xs = self.box.sample(rng, count)
        ys = self.box.sample(rng, count)
        zs = self.box.sample(rng, count)
        worst = -math.inf
        wit = None
        for p in self.modes:
            lhs = np.abs(self.V[p].value(xs, ys) - self.V[p].value(xs, zs))
            gap = lhs - np.asarray(self.gamma(np.linalg.norm(ys - zs, axis=-1)))
            j = gap.argmax()
            if gap[j] > worst:
                worst = float(gap[j])
                wit = (tuple(xs[j]), tuple(ys[j]), tuple(zs[j]))
        report.checks.append(CheckResult("gamma_variation", worst <= slack, worst, wit))
        return report


def estimate_nu(sys, cert, box, grid_per_axis, safety_factor=1.0):
    """Grid maximization of the cross-mode drift rate over box x box.

    For each ordered pair of distinct modes (p, q), evaluates
    ``dW/dx . f_p(x) + dW/dy . f_q(y)`` over all grid pairs (x, y), where W
    is the certificate's V (common kind) or V_q (multiple kind). Pairs with
    ||x - y|| below the diagonal exclusion are skipped (W is typically
    nonsmooth there and contributes nothing to the supremum).

    Parameters
    ----------
    grid_per_axis : int
        Number of grid points per axis (>= 2).
    safety_factor : float
        Multiplier applied to the raw maximum; 1.0 keeps the estimate
        directly comparable to published constants.

    Returns
    -------
    float
        max(0, safety_factor * raw maximum); 0 for single-mode systems.
    """
    if grid_per_axis < 2:
        raise ValueError("grid_per_axis must be at least 2")
    if len(sys.modes) < 2:
        return 0.0
    pts = box.grid(grid_per_axis)
    best = -math.inf
    for p in sys.modes:
        fp_all = sys.field(p)(pts)
        for q in sys.modes:
            if p == q:
                continue
            W = cert.V[q] if cert.kind == "multiple" else cert.V[p]
            fq_all = sys.field(q)(pts)
            for j in range(len(pts)):
                x = pts[j]
                r = np.linalg.norm(x - pts, axis=-1)
                mask = r >= _DIAG_EXCLUSION
                if not mask.any():
                    continue
                Y = pts[mask]
                gx, gy = W.grad(np.broadcast_to(x, Y.shape), Y)
                lhs = gx @ fp_all[j] + np.einsum("ij,ij->i", gy, fq_all[mask])
                m = float(lhs.max())
                if m > best:
                    best = m
    return max(0.0, best * safety_factor)
