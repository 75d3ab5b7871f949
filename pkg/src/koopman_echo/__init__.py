"""Photon echoes of inhomogeneously broadened two-level ensembles and their
bilinear Koopman surrogates."""

from .integrate import (
    IntegrationError,
    PolarizationTrace,
    SolverSettings,
    TimeGrid,
    rk4_solve,
    rk4_step,
    rk45_solve,
    simulate_ensemble,
)
from .koopman import (
    ControlPoint,
    DivergenceError,
    KoopmanModel,
    RankDeficientError,
    TrainingConfig,
    lift,
    load_model,
    nearest_two_detunings,
    predict_ensemble,
    predict_trajectory,
    pseudoinverse,
    save_model,
    train_be,
    train_berg,
    train_operator,
)
from .metrics import ErrorReport, evaluate, find_echo_peak, l2_error, relative_peak_error
from .physics import (
    DEFAULT_CONSTANTS,
    DetuningGrid,
    PhysConstants,
    Pulse,
    PulseSequence,
    WeightDistribution,
    bloch_invariant,
    build_detuning_grid,
    gaussian_weight,
    obe_rhs,
    rabi_frequency,
    revival_time,
    tls_state,
    two_pulse_sequence,
)

__version__ = "0.1.0"
