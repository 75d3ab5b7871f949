"""Photon-echo experiments: reference runs, surrogate runs, sweeps and CSV export."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .integrate import PolarizationTrace, TimeGrid, simulate_ensemble
from .koopman import (
    DivergenceError,
    KoopmanModel,
    TrainingConfig,
    predict_ensemble,
    train_be,
    train_berg,
)
from .metrics import ErrorReport, evaluate

log = logging.getLogger(__name__)

TRACE_HEADER = ("t", "re_P", "im_P", "abs_P_normalized")


class ExperimentError(RuntimeError):
    """Failure inside one stage of an experiment; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except ExperimentError:
        raise
    except (ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        raise ExperimentError(name, exc) from exc


def _fmt(x) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# traces

def export_trace(trace: PolarizationTrace, path) -> None:
    """Write ``t, re_P, im_P, abs_P_normalized`` rows at full double precision."""
    path = Path(path)
    norm = np.abs(trace.normalized)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for t, v, a in zip(trace.times, trace.values, norm):
                w.writerow((_fmt(t), _fmt(v.real), _fmt(v.imag), _fmt(a)))
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc


def read_trace(path, ensemble_count: int | None = None, grid: TimeGrid | None = None):
    """Parse a file written by :func:`export_trace`.

    Without ``ensemble_count`` the ensemble size is recovered from the ratio
    of the ``re_P``/``im_P`` columns to ``abs_P_normalized`` (1 if the trace
    is identically zero).
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read trace {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != TRACE_HEADER:
        raise ValueError(f"{path}: missing header {','.join(TRACE_HEADER)}")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    t, values, norm = data[:, 0], data[:, 1] + 1j * data[:, 2], data[:, 3]
    if ensemble_count is None:
        nz = norm > 0
        ensemble_count = int(round(np.median(np.abs(values[nz]) / norm[nz]))) if nz.any() else 1
    if grid is None:
        dt = float(f"{(t[-1] - t[0]) / (t.size - 1):.12g}")
        grid = TimeGrid(float(t[0]), float(t[-1]), dt)
    return PolarizationTrace(grid, values, ensemble_count)


# ---------------------------------------------------------------------------
# single experiment

def reference_trace(cfg: ExperimentConfig, threads: int = 1) -> PolarizationTrace:
    with stage("reference"):
        return simulate_ensemble(
            cfg.detuning_grid(), cfg.weights(), cfg.pulse_sequence(), cfg.time_grid(),
            cfg.solver.settings(), threads=threads,
        )


def training_config(cfg: ExperimentConfig) -> TrainingConfig:
    return TrainingConfig(dt=cfg.time.dt, seed=cfg.model.seed, n_samples=cfg.model.n_samples)


def train_model(cfg: ExperimentConfig) -> KoopmanModel:
    with stage("train"):
        tcfg = training_config(cfg)
        if cfg.model.variant == "BE":
            return train_be(tcfg, cfg.model.omega_unit)
        return train_berg(tcfg, cfg.training_detunings(), cfg.model.omega_unit)


def model_trace(cfg: ExperimentConfig, model: KoopmanModel, threads: int = 1):
    with stage("predict"):
        return predict_ensemble(
            model, cfg.detuning_grid(), cfg.weights(), cfg.pulse_sequence(), cfg.time_grid(),
            threads=threads,
        )


@dataclass
class EchoResult:
    reference: PolarizationTrace
    model: PolarizationTrace
    report: ErrorReport


def run_photon_echo(cfg: ExperimentConfig, out_dir=None, threads: int = 1,
                    reference: PolarizationTrace | None = None) -> EchoResult:
    """Reference run, surrogate training and prediction, and error report.

    With ``out_dir`` the two traces and ``report.json`` are written there.
    """
    if reference is None:
        reference = reference_trace(cfg, threads)
    model = train_model(cfg)
    predicted = model_trace(cfg, model, threads)
    with stage("metrics"):
        report = evaluate(reference, predicted, tuple(cfg.metrics.echo_window))
    if out_dir is not None:
        with stage("output"):
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            export_trace(reference, out / "reference.csv")
            export_trace(predicted, out / "prediction.csv")
            (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    return EchoResult(reference, predicted, report)


# ---------------------------------------------------------------------------
# sweeps

RANGE_COLUMNS = ("R", "dt", "l2", "rel_peak")
M_COLUMNS = ("m", "dt", "l2", "rel_peak")
CONVERGENCE_COLUMNS = ("m", "l2", "rel_peak")


def _errors_or_sentinel(cfg, reference, threads):
    """(l2, rel_peak) for ``cfg``; divergence is recorded as ``inf``."""
    try:
        report = run_photon_echo(cfg, threads=threads, reference=reference).report
    except ExperimentError as exc:
        if isinstance(exc.cause, DivergenceError):
            log.info("prediction diverged: %s", exc.cause)
            return math.inf, math.inf
        raise
    l2, rel = report.l2, report.rel_peak
    return (l2 if math.isfinite(l2) else math.inf), (rel if math.isfinite(rel) else math.inf)


def run_range_sweep(cfg: ExperimentConfig, ranges, threads: int = 1) -> list[dict]:
    """BE errors as a function of the detuning range R."""
    rows = []
    for r in ranges:
        row_cfg = cfg.replace(ensemble__range_meV=float(r), model__variant="BE")
        log.info("range sweep: R = %g", r)
        l2, rel = _errors_or_sentinel(row_cfg, None, threads)
        rows.append({"R": float(r), "dt": cfg.time.dt, "l2": l2, "rel_peak": rel})
    return rows


def _berg_rows(cfg, m_values, threads):
    reference = reference_trace(cfg, threads)
    out = []
    for m in m_values:
        m = int(m)
        log.info("BERG with m = %d (%d training detunings)", m, m + 1)
        row_cfg = cfg.replace(model__variant="BERG", model__m=m, model__detuning_count=None)
        out.append((m, *_errors_or_sentinel(row_cfg, reference, threads)))
    return out


def run_m_sweep(cfg: ExperimentConfig, m_values, threads: int = 1) -> list[dict]:
    """BERG errors versus the training grid; ``m`` trains ``m + 1`` detunings."""
    return [
        {"m": m, "dt": cfg.time.dt, "l2": l2, "rel_peak": rel}
        for m, l2, rel in _berg_rows(cfg, m_values, threads)
    ]


def run_convergence_study(cfg: ExperimentConfig, m_values, threads: int = 1) -> list[dict]:
    """BERG trained on ``m + 1`` detunings, evaluated on the full ensemble."""
    return [
        {"m": m, "l2": l2, "rel_peak": rel}
        for m, l2, rel in _berg_rows(cfg, m_values, threads)
    ]


def run_sweep(cfg: ExperimentConfig, threads: int = 1):
    """Dispatch on ``cfg.sweep.kind``; returns ``(columns, rows)``."""
    if cfg.sweep is None:
        raise ValueError("config has no [sweep] section")
    kind, values = cfg.sweep.kind, cfg.sweep.values
    if kind == "range":
        return RANGE_COLUMNS, run_range_sweep(cfg, values, threads)
    if kind == "m":
        return M_COLUMNS, run_m_sweep(cfg, values, threads)
    return CONVERGENCE_COLUMNS, run_convergence_study(cfg, values, threads)


def write_table(rows, columns, path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for row in rows:
                w.writerow([
                    row[c] if isinstance(row[c], int) else _fmt(row[c]) for c in columns
                ])
    except OSError as exc:
        raise OSError(f"cannot write table to {path}: {exc}") from exc


def read_table(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
