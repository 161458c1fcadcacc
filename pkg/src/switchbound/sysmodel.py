"""Switched systems, switching signals and piecewise ODE integration.

A switched system is a finite family of vector fields over a shared state
space; which field is active at any moment is dictated by a switching
signal (piecewise constant, right-continuous, finitely many events).
Signals here are nearly periodic: the k-th switching event of a period-tau
signal may lag by at most ``delta0 < tau``.

Integration is fixed-step classical RK4. Event times are known up front,
so segments are split exactly at switching instants and the last partial
step of a segment lands exactly on the requested endpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exprparse import Expression, evaluate

__all__ = [
    "AffineField",
    "ExprField",
    "SwitchedSystem",
    "SwitchingSignal",
    "Trajectory",
    "IntegrationError",
    "SignalError",
    "make_periodic_signal",
    "make_delayed_signal",
    "flow_constant",
    "simulate",
    "write_trajectory_csv",
    "read_trajectory_csv",
]

STATE_LIMIT = 1e12  # any coordinate beyond this aborts integration


class IntegrationError(RuntimeError):
    """State diverged during integration; ``time`` is the blow-up instant."""

    def __init__(self, message, time):
        super().__init__(message)
        self.time = time


class SignalError(ValueError):
    """Invalid switching-signal construction."""


class AffineField:
    """Vector field x -> A x + b. Batch-aware: accepts (n,) or (..., n)."""

    def __init__(self, A, b=None):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if b is None:
            b = np.zeros(A.shape[0])
        b = np.asarray(b, dtype=float)
        if b.shape != (A.shape[0],):
            raise ValueError("b has wrong shape")
        A.setflags(write=False)
        b.setflags(write=False)
        self.A = A
        self.b = b
        self.dim = A.shape[0]

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ self.A.T + self.b


class ExprField:
    """Vector field whose coordinates are parsed expressions in x1..xn."""

    def __init__(self, exprs, dim):
        if len(exprs) != dim:
            raise ValueError(f"need {dim} coordinate expressions, got {len(exprs)}")
        self.exprs = tuple(exprs)
        self.dim = dim
        self._names = tuple(f"x{i + 1}" for i in range(dim))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        env = {name: x[..., i] for i, name in enumerate(self._names)}
        cols = [np.broadcast_to(evaluate(e, env), x[..., 0].shape) for e in self.exprs]
        return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class SwitchedSystem:
    """Finite set of modes, one locally Lipschitz vector field per mode."""

    dim: int
    modes: tuple
    fields: dict

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if not self.modes:
            raise ValueError("at least one mode required")
        if set(self.modes) != set(self.fields):
            raise ValueError("modes and vector fields do not match")
        object.__setattr__(self, "modes", tuple(self.modes))

    def field(self, p):
        return self.fields[p]

    def mode_index(self, p):
        return self.modes.index(p)

    @property
    def is_affine(self):
        return all(isinstance(f, AffineField) for f in self.fields.values())


@dataclass(frozen=True)
class SwitchingSignal:
    """Finite-horizon event list: right-continuous mode schedule.

    ``events[k]`` is (time, mode); event k must lie in [k*tau, k*tau+delta0].
    """

    tau: float
    delta0: float
    events: tuple
    horizon: float

    def __post_init__(self):
        if self.tau <= 0:
            raise SignalError("period must be positive")
        if not 0 <= self.delta0 < self.tau:
            raise SignalError("delay bound must satisfy 0 <= delta0 < tau")
        if not self.events:
            raise SignalError("signal needs at least one event")
        if self.events[0][0] != 0.0:
            raise SignalError("first event must be at t = 0")
        times = [t for t, _ in self.events]
        tol = 1e-9 * self.tau
        for k, t in enumerate(times):
            if k and t <= times[k - 1]:
                raise SignalError("event times must be strictly increasing")
            if not (k * self.tau - tol <= t <= k * self.tau + self.delta0 + tol):
                raise SignalError(
                    f"event {k} at t={t} outside [{k * self.tau}, {k * self.tau + self.delta0}]"
                )
        if self.horizon <= 0:
            raise SignalError("horizon must be positive")
        object.__setattr__(self, "events", tuple((float(t), p) for t, p in self.events))

    def mode_at(self, t):
        """Mode active at time t (right-continuous: new mode at the event)."""
        if t < 0:
            raise ValueError("time must be nonnegative")
        mode = self.events[0][1]
        for et, ep in self.events:
            if et <= t:
                mode = ep
            else:
                break
        return mode

    def switching_times(self):
        return tuple(t for t, _ in self.events[1:])

    @property
    def mode_sequence(self):
        return tuple(p for _, p in self.events)


def make_periodic_signal(tau, mode_seq, horizon):
    """Exactly periodic signal: events at 0, tau, 2*tau, ... up to horizon."""
    if tau <= 0:
        raise SignalError("period must be positive")
    mode_seq = list(mode_seq)
    if not mode_seq:
        raise SignalError("mode sequence must be nonempty")
    if horizon < tau:
        raise SignalError("horizon must cover at least one period")
    needed = int(math.ceil(horizon / tau - 1e-9))
    if len(mode_seq) < needed:
        raise SignalError(
            f"mode sequence of length {len(mode_seq)} too short for "
            f"horizon {horizon} (needs {needed})"
        )
    events = tuple((k * tau, mode_seq[k]) for k in range(needed))
    return SwitchingSignal(tau=tau, delta0=0.0, events=events, horizon=float(horizon))


def make_delayed_signal(base, delta0, delays):
    """Delay the k-th event (k >= 1) of an exactly periodic signal by delays[k-1]."""
    if base.delta0 != 0.0:
        raise SignalError("base signal must be exactly periodic (delta0 = 0)")
    if not 0 <= delta0 < base.tau:
        raise SignalError("delay bound must satisfy 0 <= delta0 < tau")
    delays = list(delays)
    n_delayed = len(base.events) - 1
    if len(delays) < n_delayed:
        raise SignalError(f"need {n_delayed} delays, got {len(delays)}")
    for d in delays[:n_delayed]:
        if not 0 <= d <= delta0:
            raise SignalError(f"delay {d} outside [0, {delta0}]")
    events = [base.events[0]]
    for k in range(1, len(base.events)):
        t, p = base.events[k]
        events.append((t + delays[k - 1], p))
    return SwitchingSignal(tau=base.tau, delta0=float(delta0), events=tuple(events), horizon=base.horizon)


def _rk4_step(f, x, h):
    k1 = f(x)
    k2 = f(x + (h / 2.0) * k1)
    k3 = f(x + (h / 2.0) * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_state(x, t):
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > STATE_LIMIT:
        raise IntegrationError(f"state diverged at t = {t}", t)


def flow_constant(sys, x0, p, duration, dt):
    """Integrate dx/dt = f_p(x) for ``duration`` with fixed-step RK4.

    The final partial step is shortened so the endpoint lands exactly at
    ``duration``.
    """
    if duration < 0:
        raise ValueError("duration must be nonnegative")
    if dt <= 0:
        raise ValueError("dt must be positive")
    f = sys.field(p)
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (sys.dim,):
        raise ValueError(f"state must have shape ({sys.dim},)")
    if duration == 0:
        return x
    n_full = int(math.floor(duration / dt + 1e-9))
    rem = duration - n_full * dt
    if rem < dt * 1e-9:
        rem = 0.0
    for i in range(n_full):
        x = _rk4_step(f, x, dt)
        _check_state(x, (i + 1) * dt)
    if rem > 0.0:
        x = _rk4_step(f, x, rem)
        _check_state(x, duration)
    return x


@dataclass(frozen=True)
class Trajectory:
    """Sampled trajectory: strictly increasing times, one state and mode per sample."""

    times: np.ndarray
    states: np.ndarray
    modes: tuple
    step_size: float

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "states", np.asarray(self.states, dtype=float))
        self.times.setflags(write=False)
        self.states.setflags(write=False)

    def __len__(self):
        return len(self.times)

    @property
    def final_state(self):
        return self.states[-1]

    def state_at(self, t):
        """State at an exact sample time."""
        idx = np.searchsorted(self.times, t)
        if idx >= len(self.times) or self.times[idx] != t:
            raise KeyError(f"no sample at t = {t}")
        return self.states[idx]


def _sample_times(sig, t_end, dt):
    anchors = [0.0]
    for st in sig.switching_times():
        if st <= t_end * (1 + 1e-12):
            anchors.append(min(st, t_end))
    if anchors[-1] != t_end:
        anchors.append(t_end)
    anchors = np.array(sorted(set(anchors)))
    n_grid = int(math.floor(t_end / dt + 1e-9))
    grid = np.arange(n_grid + 1) * dt
    # drop grid points that collide with an anchor (anchors keep exact values)
    pos = np.searchsorted(anchors, grid)
    tol = 1e-9 * dt
    near_right = np.abs(anchors[np.minimum(pos, len(anchors) - 1)] - grid) <= tol
    near_left = np.abs(anchors[np.maximum(pos - 1, 0)] - grid) <= tol
    keep = grid[~(near_right | near_left) & (grid < t_end)]
    times = np.concatenate([anchors, keep])
    times.sort(kind="stable")
    return times


def simulate(sys, sig, x0, t_end, dt=None):
    """Piecewise integration of the switched system under ``sig``.

    Samples fall on the dt-grid plus every switching instant; each switching
    time is hit exactly, and the active mode at a sample is the
    right-continuous value of the signal.
    """
    if dt is None:
        dt = 1e-3 * sig.tau
    if t_end > sig.horizon * (1 + 1e-12):
        raise ValueError("t_end exceeds the signal horizon")
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    times = _sample_times(sig, t_end, dt)
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (sys.dim,):
        raise ValueError(f"state must have shape ({sys.dim},)")
    states = np.empty((len(times), sys.dim))
    states[0] = x
    modes = [sig.mode_at(0.0)]
    for i in range(len(times) - 1):
        t0, t1 = times[i], times[i + 1]
        p = sig.mode_at(t0)
        x = _rk4_step(sys.field(p), x, t1 - t0)
        _check_state(x, t1)
        states[i + 1] = x
        modes.append(sig.mode_at(t1))
    return Trajectory(times=times, states=states, modes=tuple(modes), step_size=dt)


def write_trajectory_csv(traj, path_or_file):
    """CSV export: header t,x1,...,xn,mode; 17 significant digits."""
    n = traj.states.shape[1]
    header = "t," + ",".join(f"x{i + 1}" for i in range(n)) + ",mode"

    def _write(fh):
        fh.write(header + "\n")
        for t, row, m in zip(traj.times, traj.states, traj.modes):
            cols = [f"{t:.17g}"] + [f"{v:.17g}" for v in row] + [str(m)]
            fh.write(",".join(cols) + "\n")

    if hasattr(path_or_file, "write"):
        _write(path_or_file)
    else:
        with open(path_or_file, "w") as fh:
            _write(fh)


def read_trajectory_csv(path_or_file):
    """Reload a trajectory written by :func:`write_trajectory_csv`."""

    def _read(fh):
        header = fh.readline().strip().split(",")
        if header[0] != "t" or header[-1] != "mode":
            raise ValueError("not a trajectory CSV")
        n = len(header) - 2
        times, states, modes = [], [], []
        for line in fh:
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            times.append(float(parts[0]))
            states.append([float(v) for v in parts[1 : 1 + n]])
            modes.append(parts[-1])
        return Trajectory(
            times=np.array(times),
            states=np.array(states),
            modes=tuple(modes),
            step_size=float("nan"),
        )

    if hasattr(path_or_file, "read"):
        return _read(path_or_file)
    with open(path_or_file) as fh:
        return _read(fh)
