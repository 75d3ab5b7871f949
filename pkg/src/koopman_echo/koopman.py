"""Bilinear Koopman surrogates of the driven Bloch equations.

Finite-time Koopman matrices are regressed from snapshot pairs at a few
constant controls ``u = (Omega, delta)`` and combined affinely at prediction
time.  Two model variants are built on top of the same regression:

``BE``
    Operators at the unit controls ``(1, 0)`` and ``(0, 1)``; the operator
    for ``(Omega, delta)`` is ``K0 + Omega * B_omega + delta * B_delta``.
``BERG``
    Same drive term, but the detuning part is interpolated between operators
    trained on a grid of detunings.

The dictionary is the order-1 monomial set ``[1, Re p, Im p, Re n, Im n]``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .integrate import (
    PolarizationTrace,
    TimeGrid,
    _rk4_increment,
    map_blocks,
    weighted_coherence_sum,
)
from .physics import (
    GROUND_STATE,
    DetuningGrid,
    PulseSequence,
    WeightDistribution,
    gaussian_weight,
)

LIFTED_DIM = 5
STATE_DIM = 4
DEFAULT_RCOND = 1e-12


class RankDeficientError(ValueError):
    """Lifted training snapshots do not span the dictionary."""


class DivergenceError(ArithmeticError):
    """Prediction produced a non-finite lifted state."""

    def __init__(self, message, step=None, index=None):
        super().__init__(message)
        self.step = step
        self.index = index


def lift(x) -> np.ndarray:
    """Order-1 monomial dictionary; works on a state or a stack of states."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape[:-1] + (LIFTED_DIM,))
    out[..., 0] = 1.0
    out[..., 1:] = x
    return out


def pseudoinverse(m, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """Moore-Penrose pseudoinverse from the SVD.

    Singular values below ``rcond * s_max`` are treated as zero.
    """
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ValueError("pseudoinverse of a matrix with non-finite entries")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"SVD did not converge: {exc}") from exc
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(m.T.shape)
    keep = s > rcond * s[0]
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T


@dataclass(frozen=True)
class ControlPoint:
    omega: float
    delta: float

    def __post_init__(self):
        if not (np.isfinite(self.omega) and np.isfinite(self.delta)):
            raise ValueError(f"control point must be finite, got {self}")


@dataclass
class TrainingConfig:
    dt: float
    seed: int
    n_samples: int = 100
    sample_box: tuple[float, float] = (-1.0, 1.0)
    control_points: list[ControlPoint] = field(default_factory=list)
    rcond: float = DEFAULT_RCOND

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"training dt must be positive, got {self.dt}")
        if self.n_samples < LIFTED_DIM:
            raise ValueError(
                f"need at least {LIFTED_DIM} training states, got {self.n_samples}"
            )
        lo, hi = self.sample_box
        if not hi > lo:
            raise ValueError(f"empty sample box {self.sample_box}")

    def sample_states(self) -> np.ndarray:
        """Training states, one per row, drawn uniformly from the sample box."""
        rng = np.random.default_rng(self.seed)
        lo, hi = self.sample_box
        return rng.uniform(lo, hi, size=(self.n_samples, STATE_DIM))


def _propagate(x, u: ControlPoint, dt: float) -> np.ndarray:
    # one RK4 step with the drive held at u.omega
    return _rk4_increment(x, u.omega, u.omega, u.omega, dt, u.delta)


class _Snapshots:
    """Lifted training states and their pseudoinverse, shared by all controls."""

    def __init__(self, cfg: TrainingConfig):
        self.dt = cfg.dt
        self.x = cfg.sample_states()
        psi = lift(self.x).T
        s = np.linalg.svd(psi, compute_uv=False)
        rank = int(np.sum(s > cfg.rcond * s[0]))
        if rank < LIFTED_DIM:
            raise RankDeficientError(
                f"lifted training data has rank {rank} < {LIFTED_DIM}; resample"
            )
        self.psi_pinv = pseudoinverse(psi, cfg.rcond)

    def operator(self, u: ControlPoint) -> np.ndarray:
        return lift(_propagate(self.x, u, self.dt)).T @ self.psi_pinv

    def back_projection(self) -> np.ndarray:
        return self.x.T @ self.psi_pinv


def train_operator(u: ControlPoint, cfg: TrainingConfig) -> np.ndarray:
    """Koopman matrix for one RK4 step of length ``cfg.dt`` at constant control ``u``."""
    return _Snapshots(cfg).operator(u)


def gram_operator(u: ControlPoint, cfg: TrainingConfig) -> np.ndarray:
    """Same operator computed as ``(G A_u)^T`` with ``G = (Psi Psi^T)^+``, ``A_u = Psi Psi'^T``."""
    x = cfg.sample_states()
    psi = lift(x).T
    psi_next = lift(_propagate(x, u, cfg.dt)).T
    g = pseudoinverse(psi @ psi.T, cfg.rcond)
    return (g @ (psi @ psi_next.T)).T


@dataclass(frozen=True)
class KoopmanModel:
    """Trained bilinear surrogate.

    ``B_delta`` has one matrix for BE (the unit-detuning difference operator)
    and one per entry of ``berg_detunings`` for BERG.
    """

    variant: str
    dt: float
    K0: np.ndarray = field(repr=False)
    B_omega: np.ndarray = field(repr=False)
    B_delta: np.ndarray = field(repr=False)
    C: np.ndarray = field(repr=False)
    berg_detunings: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    def __post_init__(self):
        if self.variant not in ("BE", "BERG"):
            raise ValueError(f"unknown model variant {self.variant!r}")
        z = self.K0.shape[0]
        if self.K0.shape != (z, z) or self.B_omega.shape != (z, z):
            raise ValueError("operator shapes disagree")
        if self.B_delta.ndim != 3 or self.B_delta.shape[1:] != (z, z):
            raise ValueError("B_delta must have shape (count, z, z)")
        if self.C.shape != (STATE_DIM, z):
            raise ValueError(f"C must have shape ({STATE_DIM}, {z})")
        d = np.asarray(self.berg_detunings, dtype=float)
        if self.variant == "BERG":
            if d.size != self.B_delta.shape[0] or d.size < 1:
                raise ValueError("BERG needs one B_delta per training detuning")
            if np.any(np.diff(d) <= 0):
                raise ValueError("training detunings must be strictly increasing")
        elif self.B_delta.shape[0] != 1 or d.size:
            raise ValueError("BE has exactly one B_delta and no detuning grid")
        for name, arr in (("K0", self.K0), ("B_omega", self.B_omega),
                          ("B_delta", self.B_delta), ("C", self.C), ("berg_detunings", d)):
            arr = np.array(arr, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def z(self) -> int:
        return self.K0.shape[0]

    def detuning_operator(self, delta: float) -> np.ndarray:
        """``K0`` plus the detuning contribution for fixed ``delta``."""
        if self.variant == "BE":
            return self.K0 + delta * self.B_delta[0]
        i, j, a = _bracket(delta, self.berg_detunings)
        return self.K0 + ((1.0 - a) * self.B_delta[i] + a * self.B_delta[j])

    def operator(self, omega: float, delta: float) -> np.ndarray:
        return self.detuning_operator(delta) + omega * self.B_omega


def train_be(cfg: TrainingConfig, omega_unit: float = 1.0) -> KoopmanModel:
    """BE model from the zero control and the unit controls ``(1, 0)``, ``(0, 1)``.

    ``cfg.control_points`` is ignored; the control set is fixed by the model.
    """
    snaps = _Snapshots(cfg)
    k0 = snaps.operator(ControlPoint(0.0, 0.0))
    b_omega = (snaps.operator(ControlPoint(omega_unit, 0.0)) - k0) / omega_unit
    b_delta = snaps.operator(ControlPoint(0.0, 1.0)) - k0
    return KoopmanModel("BE", cfg.dt, k0, b_omega, b_delta[None], snaps.back_projection())


def train_berg(
    cfg: TrainingConfig, detunings: Sequence[float], omega_unit: float = 1.0
) -> KoopmanModel:
    """BERG model with difference operators at each training detuning.

    Parameters
    ----------
    cfg : TrainingConfig
    detunings : sequence of float
        Training detunings in 1/ps, strictly increasing; normally a coarse
        linear grid over the same range as the test ensemble.
    omega_unit : float
        Non-zero Rabi frequency of the drive training point.
    """
    d = np.asarray(detunings, dtype=float)
    if d.size < 2:
        raise ValueError("BERG needs at least two training detunings")
    snaps = _Snapshots(cfg)
    k0 = snaps.operator(ControlPoint(0.0, 0.0))
    b_omega = (snaps.operator(ControlPoint(omega_unit, 0.0)) - k0) / omega_unit
    b_delta = np.stack([snaps.operator(ControlPoint(0.0, float(v))) - k0 for v in d])
    return KoopmanModel("BERG", cfg.dt, k0, b_omega, b_delta, snaps.back_projection(), d)


def _bracket(delta, grid):
    """Indices ``i, j`` and weight ``a`` with ``delta = (1-a) grid[i] + a grid[j]``."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty detuning grid")
    if grid.size == 1:
        return 0, 0, 0.0
    delta = min(max(float(delta), grid[0]), grid[-1])
    i = int(np.searchsorted(grid, delta, side="right")) - 1
    i = min(max(i, 0), grid.size - 2)
    lo, hi = grid[i], grid[i + 1]
    a = 0.0 if delta == lo else (delta - lo) / (hi - lo)
    return i, i + 1, a


def nearest_two_detunings(delta: float, d_train) -> tuple[float, float, float]:
    """Bracketing training detunings ``(d1, d2)`` and interpolation weight ``a``.

    Out-of-range ``delta`` is clamped to the grid ends.

    >>> nearest_two_detunings(0.25, [-1.0, 0.0, 1.0])
    (0.0, 1.0, 0.25)
    """
    grid = np.asarray(d_train, dtype=float)
    i, j, a = _bracket(delta, grid)
    return float(grid[i]), float(grid[j]), float(a)


def _check_grid(model, tg):
    if abs(tg.dt - model.dt) > 1e-12 * model.dt or not tg.uniform:
        raise ValueError(
            f"time grid step {tg.dt} must match the model step {model.dt} and divide the window"
        )


def _iterate(model, deltas, y0, omega, n_steps, rows):
    """Run the bilinear recursion for a batch of detunings.

    Returns the back-projected components ``C[rows] @ psi`` at every step,
    shape ``(B, n_steps + 1, len(rows))``.  Products are spelled out
    elementwise so each batch member's arithmetic is independent of the
    batch size.
    """
    z = model.z
    d = np.stack([model.detuning_operator(v) for v in deltas])  # (B, z, z)
    b = model.B_omega
    c = model.C[rows]
    y = np.array(y0, dtype=float)
    out = np.empty((y.shape[0], n_steps + 1, len(c)))

    def project(k):
        for r in range(len(c)):
            acc = c[r, 0] * y[:, 0]
            for j in range(1, z):
                acc = acc + c[r, j] * y[:, j]
            out[:, k, r] = acc

    project(0)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            nxt = d[:, :, 0] * y[:, 0:1]
            drv = b[:, 0] * y[:, 0:1]
            for j in range(1, z):
                nxt += d[:, :, j] * y[:, j:j + 1]
                drv += b[:, j] * y[:, j:j + 1]
            y = nxt + omega[k] * drv
            project(k + 1)
    return out


def predict_trajectory(
    model: KoopmanModel, x0, delta: float, seq: PulseSequence, tg: TimeGrid
) -> np.ndarray:
    """Iterate the surrogate from ``x0``; returns back-projected states ``(samples, 4)``.

    The drive is sampled at the left end of each step.
    """
    _check_grid(model, tg)
    omega = np.asarray(seq(tg.times[:-1]), dtype=float)
    y0 = lift(np.asarray(x0, dtype=float))[None]
    x = _iterate(model, [delta], y0, omega, tg.steps, slice(None))[0]
    bad = ~np.all(np.isfinite(x), axis=1)
    if bad.any():
        step = int(np.argmax(bad))
        raise DivergenceError(f"prediction diverged at step {step}", step=step)
    return x


def predict_ensemble(
    model: KoopmanModel,
    grid: DetuningGrid,
    w: WeightDistribution,
    seq: PulseSequence,
    tg: TimeGrid,
    threads: int = 1,
    constants=None,
) -> PolarizationTrace:
    """Surrogate polarization of a ground-state ensemble.

    Raises
    ------
    DivergenceError
        If any detuning's prediction becomes non-finite; ``index`` names the
        first such detuning.
    """
    _check_grid(model, tg)
    kw = {} if constants is None else {"c": constants}
    weights = gaussian_weight(grid.values, w, **kw)
    omega = np.asarray(seq(tg.times[:-1]), dtype=float)

    def block(start, stop):
        deltas = grid.values[start:stop]
        y0 = np.broadcast_to(lift(GROUND_STATE), (deltas.size, model.z))
        p = _iterate(model, deltas, y0, omega, tg.steps, slice(0, 2))
        bad = ~np.all(np.isfinite(p), axis=(1, 2))
        if bad.any():
            i = int(np.argmax(bad))
            step = int(np.argmax(~np.all(np.isfinite(p[i]), axis=1)))
            raise DivergenceError(
                f"prediction for detuning #{start + i} diverged at step {step}",
                step=step, index=start + i,
            )
        return weighted_coherence_sum(weights[start:stop], p)

    total = np.zeros(tg.samples, dtype=complex)
    for part in map_blocks(block, grid.count, threads):
        total = total + part
    return PolarizationTrace(tg, total, grid.count)


# ---------------------------------------------------------------------------
# serialization
#
# Little-endian binary layout:
#   magic   8 bytes   b"KOOPBLN\0"
#   version u32       1
#   variant u32       0 = BE, 1 = BERG
#   z       u32       lifted dimension
#   count   u32       number of B_delta matrices
#   dt      f64
#   detunings  count x f64 (BERG) or nothing (BE)
#   K0, B_omega        z*z f64 each, row-major
#   B_delta            count*z*z f64, row-major
#   C                  4*z f64, row-major

MODEL_MAGIC = b"KOOPBLN\x00"
MODEL_VERSION = 1
_HEADER = struct.Struct("<8sIIIId")
_VARIANTS = ("BE", "BERG")


def dump_model(model: KoopmanModel) -> bytes:
    buf = io.BytesIO()
    count = model.B_delta.shape[0]
    buf.write(_HEADER.pack(
        MODEL_MAGIC, MODEL_VERSION, _VARIANTS.index(model.variant), model.z, count, model.dt
    ))
    if model.variant == "BERG":
        buf.write(np.ascontiguousarray(model.berg_detunings, dtype="<f8").tobytes())
    for arr in (model.K0, model.B_omega, model.B_delta, model.C):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def load_model_bytes(data: bytes) -> KoopmanModel:
    if len(data) < _HEADER.size:
        raise ValueError("model file truncated")
    magic, version, variant, z, count, dt = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ValueError("not a Koopman model file (bad magic)")
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model file version {version}")
    if variant >= len(_VARIANTS):
        raise ValueError(f"unknown variant code {variant}")
    variant = _VARIANTS[variant]
    offset = _HEADER.size

    def take(n, shape):
        nonlocal offset
        end = offset + 8 * n
        if end > len(data):
            raise ValueError("model file truncated")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(float)
        offset = end
        return arr.reshape(shape)

    det = take(count, (count,)) if variant == "BERG" else np.empty(0)
    k0 = take(z * z, (z, z))
    b_omega = take(z * z, (z, z))
    b_delta = take(count * z * z, (count, z, z))
    c = take(STATE_DIM * z, (STATE_DIM, z))
    if offset != len(data):
        raise ValueError("trailing bytes in model file")
    return KoopmanModel(variant, dt, k0, b_omega, b_delta, c, det)


def save_model(model: KoopmanModel, path) -> None:
    Path(path).write_bytes(dump_model(model))


def load_model(path) -> KoopmanModel:
    return load_model_bytes(Path(path).read_bytes())
