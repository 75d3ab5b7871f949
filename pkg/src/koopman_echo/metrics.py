"""Error measures between a surrogate and a reference polarization trace."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .integrate import PolarizationTrace

DEFAULT_ECHO_WINDOW = (60.0, 100.0)

# normalized peaks below this count as "no signal" (physical echoes are ~1e-2)
ZERO_PEAK_ATOL = 1e-12


@dataclass(frozen=True)
class ErrorReport:
    l2: float
    rel_peak: float
    peak_time_ref: float
    peak_time_model: float
    peak_value_ref: float
    peak_value_model: float

    def as_dict(self) -> dict:
        return asdict(self)


def _check_compatible(ref: PolarizationTrace, model: PolarizationTrace):
    if ref.ensemble_count != model.ensemble_count:
        raise ValueError(
            f"ensemble sizes differ: {ref.ensemble_count} vs {model.ensemble_count}"
        )
    if ref.grid != model.grid:
        raise ValueError(f"time grids differ: {ref.grid} vs {model.grid}")


def l2_error(ref: PolarizationTrace, model: PolarizationTrace) -> float:
    """Trapezoidal integral of ``|P_ref/N - P_model/N|^2`` over the whole grid."""
    _check_compatible(ref, model)
    diff = ref.normalized - model.normalized
    with np.errstate(over="ignore", invalid="ignore"):
        sq = diff.real ** 2 + diff.imag ** 2
        return float(np.trapezoid(sq, ref.times))


def _window_mask(times, window):
    lo, hi = window
    if not hi >= lo:
        raise ValueError(f"invalid echo window {window}")
    # tolerate grid times that miss the bounds by rounding
    eps = 1e-9 * max(1.0, abs(lo), abs(hi))
    mask = (times >= lo - eps) & (times <= hi + eps)
    if not mask.any():
        raise ValueError(f"echo window {window} contains no samples")
    return mask


def find_echo_peak(trace: PolarizationTrace, window=DEFAULT_ECHO_WINDOW) -> tuple[float, float]:
    """Time and value of the maximum of ``|P/N|`` inside ``window``.

    Ties go to the earliest sample.
    """
    times = trace.times
    mask = _window_mask(times, window)
    amp = np.abs(trace.normalized[mask])
    if np.isnan(amp).any():
        i = int(np.flatnonzero(np.isnan(amp))[0])
        return float(times[mask][i]), float("nan")
    i = int(np.argmax(amp))
    return float(times[mask][i]), float(amp[i])


def relative_peak_error(
    ref: PolarizationTrace, model: PolarizationTrace, window=DEFAULT_ECHO_WINDOW
) -> float:
    _check_compatible(ref, model)
    _, s_ref = find_echo_peak(ref, window)
    _, s_model = find_echo_peak(model, window)
    if not s_ref > 0:
        raise ValueError("reference echo peak is zero; relative error undefined")
    return abs(s_ref - s_model) / s_ref


def evaluate(
    ref: PolarizationTrace, model: PolarizationTrace, window=DEFAULT_ECHO_WINDOW
) -> ErrorReport:
    """Both error measures plus the peak locations they were taken from.

    A vanishing reference peak (e.g. no pulses) gives ``rel_peak = 0`` when
    the model peak is below ``ZERO_PEAK_ATOL`` too and ``inf`` otherwise.
    """
    l2 = l2_error(ref, model)
    t_ref, s_ref = find_echo_peak(ref, window)
    t_model, s_model = find_echo_peak(model, window)
    if s_ref > 0:
        rel = abs(s_ref - s_model) / s_ref
    else:
        rel = 0.0 if s_model <= ZERO_PEAK_ATOL else float("inf")
    return ErrorReport(l2, rel, t_ref, t_model, s_ref, s_model)
