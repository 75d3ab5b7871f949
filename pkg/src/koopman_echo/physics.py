"""Two-level-system optics: pulses, detuning grids, weights and the Bloch equations.

Units are fixed throughout the package: time in ps, rates in 1/ps and
energies in meV.  Conversions between meV and 1/ps happen only here, via
``PhysConstants.hbar``.

A TLS state is a real array ``[Re p, Im p, Re n, Im n]``; every function
below broadcasts over leading axes so a whole ensemble can be handled as an
``(N, 4)`` array.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LN2 = np.log(2.0)

# integral of a unit-peak Gaussian divided by its FWHM
_GAUSS_AREA_PER_FWHM = np.sqrt(np.pi / (4.0 * LN2))

# beyond this many FWHM from its center a pulse is exactly zero
PULSE_CUTOFF_FWHM = 8.0


@dataclass(frozen=True)
class PhysConstants:
    hbar: float = 0.6582119569  # meV ps

    def __post_init__(self):
        if not self.hbar > 0:
            raise ValueError(f"hbar must be positive, got {self.hbar}")


DEFAULT_CONSTANTS = PhysConstants()


@dataclass(frozen=True)
class Pulse:
    """Gaussian optical pulse.

    Parameters
    ----------
    center : float
        Time of the envelope maximum in ps.
    duration : float
        FWHM of the Rabi-frequency envelope in ps.
    area : float
        Pulse area in radians, i.e. the rotation angle on the Bloch sphere.
        A ``pi/2`` pulse takes the ground state to ``n = 1/2``, a ``pi``
        pulse inverts it.  With the equations of motion used here the Bloch
        vector turns at ``2 * Omega_R``, so ``integral(Omega_R dt) = area / 2``.
    """

    center: float
    duration: float
    area: float

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"pulse duration must be positive, got {self.duration}")
        if not np.isfinite(self.area) or not np.isfinite(self.center):
            raise ValueError("pulse center and area must be finite")

    @property
    def amplitude(self) -> float:
        """Peak Rabi frequency in 1/ps."""
        return 0.5 * self.area / (self.duration * _GAUSS_AREA_PER_FWHM)

    def rabi_frequency(self, t):
        t = np.asarray(t, dtype=float)
        s = (t - self.center) / self.duration
        env = self.amplitude * np.exp(-4.0 * LN2 * s * s)
        return np.where(np.abs(s) <= PULSE_CUTOFF_FWHM, env, 0.0)


@dataclass(frozen=True)
class PulseSequence:
    pulses: tuple[Pulse, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "pulses", tuple(self.pulses))

    def __call__(self, t):
        return rabi_frequency(self, t)

    def __len__(self):
        return len(self.pulses)

    @property
    def min_duration(self) -> float:
        return min((p.duration for p in self.pulses), default=np.inf)


def rabi_frequency(seq: PulseSequence, t):
    """Rabi frequency of ``seq`` at time(s) ``t``, summed over its pulses."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for pulse in seq.pulses:
        out = out + pulse.rabi_frequency(t)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class WeightDistribution:
    fwhm_meV: float

    def __post_init__(self):
        if not self.fwhm_meV > 0:
            raise ValueError(f"FWHM must be positive, got {self.fwhm_meV}")


def gaussian_weight(delta, w: WeightDistribution, c: PhysConstants = DEFAULT_CONSTANTS):
    """Inhomogeneous-broadening weight of detuning(s) ``delta`` (1/ps).

    Normalized to 1 at zero detuning and 1/2 at ``hbar * delta = FWHM / 2``.
    """
    x = 2.0 * np.sqrt(2.0 * LN2) * c.hbar * np.asarray(delta, dtype=float) / w.fwhm_meV
    out = np.exp(-0.5 * x * x)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class DetuningGrid:
    range_meV: float
    count: int
    values: np.ndarray = field(repr=False, compare=False)

    @property
    def spacing(self) -> float:
        return float(self.values[1] - self.values[0])


def _check_grid_args(range_meV, count):
    if int(count) != count or count < 2:
        raise ValueError(f"detuning count must be an integer >= 2, got {count}")
    if not range_meV > 0:
        raise ValueError(f"detuning range must be positive, got {range_meV}")


def build_detuning_grid(
    range_meV: float, count: int, c: PhysConstants = DEFAULT_CONSTANTS
) -> DetuningGrid:
    """``count`` evenly spaced detunings from ``-R/hbar`` to ``+R/hbar`` (1/ps)."""
    _check_grid_args(range_meV, count)
    count = int(count)
    edge = range_meV / c.hbar
    values = np.linspace(-edge, edge, count)
    # linspace only guarantees the left endpoint; make the grid exactly symmetric
    values = 0.5 * (values - values[::-1])
    values.setflags(write=False)
    return DetuningGrid(float(range_meV), count, values)


def revival_time(count: int, range_meV: float, c: PhysConstants = DEFAULT_CONSTANTS) -> float:
    """Time after which a discretized ensemble of ``count`` detunings rephases spuriously."""
    _check_grid_args(range_meV, count)
    return c.hbar * np.pi * (count - 1) / range_meV


def tls_state(p: complex = 0.0, n: complex = 0.0) -> np.ndarray:
    return np.array([np.real(p), np.imag(p), np.real(n), np.imag(n)], dtype=float)


GROUND_STATE = tls_state()
GROUND_STATE.setflags(write=False)


def obe_rhs(x, omega, delta):
    """Lossless optical Bloch equations in the rotating frame.

    Implements ``dp/dt = -i delta p + i Omega (1 - 2n)`` and
    ``dn/dt = 2 Omega Im p`` on the real 4-vector ``x``.  The occupation is
    carried as a complex number, so ``1 - 2n`` contributes a real part to
    ``dp/dt`` when ``Im n != 0``; ``Im n`` itself is constant.
    """
    x = np.asarray(x, dtype=float)
    p_re, p_im, n_re, n_im = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    out = np.empty(np.broadcast_shapes(x.shape, np.shape(omega) + (4,), np.shape(delta) + (4,)))
    out[..., 0] = delta * p_im + 2.0 * omega * n_im
    out[..., 1] = -delta * p_re + omega * (1.0 - 2.0 * n_re)
    out[..., 2] = 2.0 * omega * p_im
    out[..., 3] = 0.0
    return out


def bloch_invariant(x):
    """``4|p|^2 + (1 - 2 Re n)^2``; equals 1 on the Bloch sphere."""
    x = np.asarray(x, dtype=float)
    w = 1.0 - 2.0 * x[..., 2]
    return 4.0 * (x[..., 0] ** 2 + x[..., 1] ** 2) + w * w


def two_pulse_sequence(
    delay: float = 40.0,
    duration: float = 2.5,
    areas: Sequence[float] = (np.pi / 2, np.pi),
) -> PulseSequence:
    """pi/2 pulse at t = 0 followed by a pi pulse at ``delay``; the echo forms at ``2 * delay``."""
    return PulseSequence((Pulse(0.0, duration, areas[0]), Pulse(delay, duration, areas[1])))
