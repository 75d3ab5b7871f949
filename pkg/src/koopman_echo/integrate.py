"""Time integration of the Bloch equations for single TLS and whole ensembles.

Two integrators are provided: classical fixed-step RK4 (used for training
data and for surrogate-matched stepping) and an adaptive Dormand-Prince 5(4)
pair with quartic dense output (used for reference solutions).  Both are
vectorized over a batch of independent TLS; in the adaptive solver every
batch member keeps its own step size and error control, so a member's
trajectory does not depend on which other members share its batch.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .physics import (
    DetuningGrid,
    PulseSequence,
    WeightDistribution,
    gaussian_weight,
    obe_rhs,
)

# Ensembles are processed in fixed blocks of detunings.  Partial sums are
# formed per block and reduced in ascending block order, which keeps results
# independent of the number of worker threads.
BLOCK_SIZE = 512

MIN_STEP = 1e-14


class IntegrationError(RuntimeError):
    """Step size underflow or non-finite state in the adaptive solver."""

    def __init__(self, message, time=None, index=None):
        super().__init__(message)
        self.time = time
        self.index = index


@dataclass(frozen=True)
class TimeGrid:
    """Uniform sample times ``t_k = t_start + k * dt``.

    If ``dt`` does not divide the interval, the last sample is ``t_end``
    and the final step is shorter.
    """

    t_start: float
    t_end: float
    dt: float

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ValueError(f"t_end ({self.t_end}) must exceed t_start ({self.t_start})")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def steps(self) -> int:
        return max(1, math.ceil((self.t_end - self.t_start) / self.dt - 1e-9))

    @property
    def samples(self) -> int:
        return self.steps + 1

    @property
    def uniform(self) -> bool:
        return abs(self.t_start + self.steps * self.dt - self.t_end) <= 1e-9 * self.dt

    @property
    def times(self) -> np.ndarray:
        t = self.t_start + self.dt * np.arange(self.samples)
        t[-1] = self.t_end
        return t


@dataclass
class PolarizationTrace:
    """Macroscopic polarization ``P(t_k) = sum_l w_l p_l(t_k)`` on a time grid."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)
    ensemble_count: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.grid.samples,):
            raise ValueError(
                f"trace has {self.values.shape} values, grid has {self.grid.samples} samples"
            )

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def normalized(self) -> np.ndarray:
        return self.values / self.ensemble_count


@dataclass(frozen=True)
class SolverSettings:
    method: str = "rk45"
    rtol: float = 1e-8
    atol: float = 1e-11
    max_step: float | None = None

    def __post_init__(self):
        if self.method not in ("rk45", "rk4"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")


# ---------------------------------------------------------------------------
# RK4

def _rk4_increment(x, o0, o1, o2, dt, delta):
    k1 = obe_rhs(x, o0, delta)
    k2 = obe_rhs(x + 0.5 * dt * k1, o1, delta)
    k3 = obe_rhs(x + 0.5 * dt * k2, o1, delta)
    k4 = obe_rhs(x + dt * k3, o2, delta)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(x, t: float, dt: float, omega_of_t: Callable, delta):
    """One classical RK4 step; the drive is sampled at t, t + dt/2 and t + dt."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return _rk4_increment(
        np.asarray(x, dtype=float),
        omega_of_t(t), omega_of_t(t + 0.5 * dt), omega_of_t(t + dt),
        dt, delta,
    )


def rk4_solve(x0, grid: TimeGrid, omega_of_t: Callable, delta) -> np.ndarray:
    """Fixed-step RK4 on ``grid``; returns states of shape ``(samples,) + x0.shape``."""
    x = np.array(x0, dtype=float)
    t = grid.times
    h = np.diff(t)
    o0 = np.asarray(omega_of_t(t[:-1]), dtype=float)
    o1 = np.asarray(omega_of_t(t[:-1] + 0.5 * h), dtype=float)
    o2 = np.asarray(omega_of_t(t[1:]), dtype=float)
    out = np.empty((grid.samples,) + x.shape)
    out[0] = x
    for k in range(grid.steps):
        x = _rk4_increment(x, o0[k], o1[k], o2[k], h[k], delta)
        out[k + 1] = x
    return out


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# fifth-order minus embedded fourth-order weights, last entry for the FSAL stage
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# quartic continuous extension (Shampine); columns multiply x, x^2, x^3, x^4
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0


def _error_norm(err, y_old, y_new, rtol, atol):
    scale = np.maximum(rtol * np.maximum(np.abs(y_old), np.abs(y_new)), atol)
    return np.max(np.abs(err) / scale, axis=-1)


def _initial_step(f, t0, y0, f0, rtol, atol):
    # Hairer/Wanner starting step heuristic, per batch member
    scale = np.maximum(rtol * np.abs(y0), atol)
    d0 = np.max(np.abs(y0) / scale, axis=-1)
    d1 = np.max(np.abs(f0) / scale, axis=-1)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    y1 = y0 + h0[:, None] * f0
    f1 = f(t0 + h0, y1)
    d2 = np.max(np.abs(f1 - f0) / scale, axis=-1) / h0
    dmax = np.maximum(d1, d2)
    h1 = np.where(
        dmax <= 1e-15,
        np.maximum(1e-6, h0 * 1e-3),
        (0.01 / np.maximum(dmax, 1e-300)) ** (1 / 5),
    )
    return np.minimum(100 * h0, h1)


def dopri5_batch(
    x0,
    grid: TimeGrid,
    omega_of_t: Callable,
    deltas,
    rtol: float = 1e-8,
    atol: float = 1e-11,
    max_step: float | None = None,
) -> np.ndarray:
    """Adaptive Dormand-Prince 5(4) for a batch of independent TLS.

    Parameters
    ----------
    x0 : array_like, shape (B, 4)
        Initial states at ``grid.t_start``.
    grid : TimeGrid
        Output times; states there come from the quartic dense output.
    omega_of_t : callable
        Vectorized Rabi frequency.
    deltas : array_like, shape (B,)
        Detuning of each batch member.
    rtol, atol : float
        Each component's local error is kept below
        ``max(rtol * |x|, atol)``.
    max_step : float, optional
        Upper bound on the step size.  Defaults to a quarter of the shortest
        pulse when ``omega_of_t`` is a ``PulseSequence``.

    Returns
    -------
    ndarray, shape (B, samples, 4)
    """
    if not (rtol > 0 and atol > 0):
        raise ValueError("rtol and atol must be positive")
    y = np.array(x0, dtype=float).reshape(-1, 4)
    delta = np.broadcast_to(np.asarray(deltas, dtype=float), y.shape[:1]).copy()
    nb = y.shape[0]
    if max_step is None:
        max_step = _default_max_step(omega_of_t)
    max_step = np.inf if max_step is None else float(max_step)

    times = grid.times
    t_end = grid.t_end
    n_samples = grid.samples
    out = np.empty((nb, n_samples, 4))
    out[:, 0] = y
    next_k = np.ones(nb, dtype=np.intp)

    def f(t, x):
        return obe_rhs(x, omega_of_t(t), delta)

    t = np.full(nb, grid.t_start)
    f0 = f(t, y)
    h = np.minimum(_initial_step(f, t, y, f0, rtol, atol), max_step)
    h = np.minimum(h, t_end - t)
    done = np.zeros(nb, dtype=bool)
    k = np.empty((7, nb, 4))

    while not done.all():
        active = ~done
        if np.any(h[active] < MIN_STEP):
            i = int(np.flatnonzero(active & (h < MIN_STEP))[0])
            raise IntegrationError(
                f"step size underflow at t = {t[i]:.6g} ps (h = {h[i]:.3g})",
                time=float(t[i]), index=i,
            )
        hb = h[:, None]
        k[0] = f0
        for s in range(1, 6):
            dy = sum(a * k[j] for j, a in enumerate(_A[s]))
            k[s] = f(t + _C[s] * h, y + hb * dy)
        y_new = y + hb * np.tensordot(_B, k[:6], axes=1)
        # snap onto t_end rather than leave a sliver below it
        last = (t_end - t) <= h + 1e-12 * max(1.0, abs(t_end))
        t_new = np.where(last, t_end, t + h)
        k[6] = f(t_new, y_new)
        err = hb * np.tensordot(_E, k, axes=1)
        err_norm = _error_norm(err, y, y_new, rtol, atol)
        if not np.all(np.isfinite(err_norm[active])):
            i = int(np.flatnonzero(active & ~np.isfinite(err_norm))[0])
            raise IntegrationError(
                f"non-finite state at t = {t[i]:.6g} ps", time=float(t[i]), index=i
            )

        accept = active & (err_norm <= 1.0)
        if accept.any():
            _fill_dense(out, next_k, times, accept, t, t_new, h, y, k)
            t = np.where(accept, t_new, t)
            y[accept] = y_new[accept]
            f0[accept] = k[6][accept]
            done = done | (accept & last)

        with np.errstate(divide="ignore"):
            factor = _SAFETY * err_norm ** -0.2
        factor = np.where(err_norm == 0.0, _MAX_FACTOR, factor)
        factor = np.clip(factor, _MIN_FACTOR, np.where(accept, _MAX_FACTOR, 1.0))
        h = np.minimum(np.minimum(h * factor, max_step), t_end - t)
        h = np.where(done, 0.0, h)

    return out


def _fill_dense(out, next_k, times, accept, t, t_new, h, y, k):
    """Write dense-output samples for every grid time in (t, t_new]."""
    last_index = times.size - 1
    pending = accept & (next_k <= last_index)
    pending[pending] = times[next_k[pending]] <= t_new[pending]
    q = None
    while pending.any():
        idx = np.flatnonzero(pending)
        if q is None:
            # (B, 4 components, 4 powers)
            q = np.einsum("sbc,sp->bcp", k, _P)
        kk = next_k[idx]
        x = (times[kk] - t[idx]) / h[idx]
        powers = x[:, None] ** np.arange(1, 5)
        out[idx, kk] = y[idx] + h[idx, None] * np.einsum("bcp,bp->bc", q[idx], powers)
        next_k[idx] += 1
        more = next_k[idx] <= last_index
        pending[idx] = more
        pending[idx[more]] = times[next_k[idx[more]]] <= t_new[idx[more]]


def rk45_solve(
    x0,
    grid: TimeGrid,
    omega_of_t: Callable,
    delta: float,
    rtol: float = 1e-8,
    atol: float = 1e-11,
    max_step: float | None = None,
) -> np.ndarray:
    """Adaptive solution for one TLS sampled on ``grid``; shape ``(samples, 4)``."""
    x0 = np.asarray(x0, dtype=float).reshape(1, 4)
    return dopri5_batch(x0, grid, omega_of_t, [delta], rtol, atol, max_step)[0]


# ---------------------------------------------------------------------------
# ensembles

def _default_max_step(omega_of_t) -> float | None:
    # keeps the adaptive solver from stepping over a pulse while the state
    # sits at a fixed point; a quarter FWHM resolves every envelope
    if not isinstance(omega_of_t, PulseSequence):
        return None
    d = omega_of_t.min_duration
    return None if not np.isfinite(d) else 0.25 * d


def _blocks(n, block_size=BLOCK_SIZE):
    return [(s, min(s + block_size, n)) for s in range(0, n, block_size)]


def map_blocks(func, n, threads=1, block_size=BLOCK_SIZE):
    """Apply ``func(start, stop)`` to fixed index blocks; results in block order."""
    blocks = _blocks(n, block_size)
    if threads is None or threads <= 1 or len(blocks) == 1:
        return [func(*b) for b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda b: func(*b), blocks))


def weighted_coherence_sum(weights, states):
    """``sum_l w_l (Re p_l + i Im p_l)`` over axis 0 of ``states`` (ascending order)."""
    w = np.asarray(weights, dtype=float)
    re = np.zeros(states.shape[1])
    im = np.zeros(states.shape[1])
    for l in range(w.size):
        re += w[l] * states[l, :, 0]
        im += w[l] * states[l, :, 1]
    return re + 1j * im


def solve_states(
    deltas,
    seq: PulseSequence,
    tg: TimeGrid,
    solver: SolverSettings = SolverSettings(),
    x0=None,
) -> np.ndarray:
    """States of independent TLS, all started from ``x0`` (ground state by default).

    Returns an array of shape ``(len(deltas), samples, 4)``.
    """
    deltas = np.atleast_1d(np.asarray(deltas, dtype=float))
    nb = deltas.size
    if x0 is None:
        x0 = np.zeros((nb, 4))
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (nb, 4))
    if solver.method == "rk4":
        return np.moveaxis(rk4_solve(x0, tg, seq, deltas), 0, 1)
    return dopri5_batch(x0, tg, seq, deltas, solver.rtol, solver.atol, solver.max_step)


def simulate_ensemble(
    grid: DetuningGrid,
    w: WeightDistribution,
    seq: PulseSequence,
    tg: TimeGrid,
    solver: SolverSettings = SolverSettings(),
    threads: int = 1,
    constants=None,
) -> PolarizationTrace:
    """Reference macroscopic polarization of a ground-state ensemble.

    Every TLS is integrated independently from the ground state at
    ``tg.t_start``; the weighted coherences are summed in detuning order.
    """
    kw = {} if constants is None else {"c": constants}
    weights = gaussian_weight(grid.values, w, **kw)
    deltas = grid.values

    def block(start, stop):
        try:
            states = solve_states(deltas[start:stop], seq, tg, solver)
        except IntegrationError as exc:
            i = start + (exc.index or 0)
            raise IntegrationError(
                f"detuning #{i} (delta = {deltas[i]:.6g}/ps): {exc}", exc.time, i
            ) from exc
        return weighted_coherence_sum(weights[start:stop], states)

    partial = map_blocks(block, deltas.size, threads)
    total = np.zeros(tg.samples, dtype=complex)
    for p in partial:
        total = total + p
    return PolarizationTrace(tg, total, grid.count)
