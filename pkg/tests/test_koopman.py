import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from koopman_echo.integrate import TimeGrid, rk4_step, simulate_ensemble, SolverSettings
from koopman_echo.koopman import (
    LIFTED_DIM,
    MODEL_MAGIC,
    ControlPoint,
    DivergenceError,
    KoopmanModel,
    RankDeficientError,
    TrainingConfig,
    dump_model,
    gram_operator,
    lift,
    load_model,
    load_model_bytes,
    nearest_two_detunings,
    predict_ensemble,
    predict_trajectory,
    pseudoinverse,
    save_model,
    train_be,
    train_berg,
    train_operator,
)
from koopman_echo.physics import (
    GROUND_STATE,
    PulseSequence,
    WeightDistribution,
    build_detuning_grid,
    tls_state,
    two_pulse_sequence,
)

DT = 0.01
CFG = TrainingConfig(dt=DT, seed=0)

vectors = st.lists(st.floats(-3, 3, allow_nan=False), min_size=4, max_size=4).map(np.array)


def one_step(x, omega, delta, dt=DT):
    return rk4_step(x, 0.0, dt, lambda t: omega, delta)


def held_out(n=1000, seed=12345):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, 4))


@pytest.fixture(scope="module")
def berg():
    return train_berg(CFG, np.linspace(-3.0, 3.0, 7))


# --- dictionary and pseudoinverse ----------------------------------------------

def test_lift_examples():
    np.testing.assert_array_equal(lift(GROUND_STATE), [1, 0, 0, 0, 0])
    np.testing.assert_array_equal(lift(tls_state(0.1 + 0.2j, 0.3)), [1, 0.1, 0.2, 0.3, 0])
    assert lift(np.zeros((7, 4))).shape == (7, LIFTED_DIM)


@given(x=vectors, y=vectors, a=st.floats(-2, 2))
def test_lift_is_affine(x, y, a):
    np.testing.assert_allclose(lift(a * x + (1 - a) * y), a * lift(x) + (1 - a) * lift(y),
                               atol=1e-12)


def test_pseudoinverse_examples():
    np.testing.assert_array_equal(pseudoinverse(np.eye(5)), np.eye(5))
    np.testing.assert_allclose(pseudoinverse(np.diag([2.0, 1.0, 0.0])), np.diag([0.5, 1.0, 0.0]))
    assert pseudoinverse(np.zeros((2, 3))).shape == (3, 2)


@pytest.mark.parametrize("seed", range(5))
def test_pseudoinverse_penrose_conditions(seed):
    m = np.random.default_rng(seed).normal(size=(5, 100))
    p = pseudoinverse(m)
    np.testing.assert_allclose(m @ p @ m, m, atol=1e-10)
    np.testing.assert_allclose(p @ m @ p, p, atol=1e-10)
    np.testing.assert_allclose((m @ p).T, m @ p, atol=1e-10)
    np.testing.assert_allclose((p @ m).T, p @ m, atol=1e-10)
    np.testing.assert_allclose(p, np.linalg.pinv(m, rcond=1e-12), atol=1e-12)


def test_pseudoinverse_rejects_nonfinite():
    with pytest.raises(ValueError):
        pseudoinverse(np.array([[1.0, np.nan]]))


# --- training ---------------------------------------------------------------------

def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(dt=DT, seed=0, n_samples=4)
    with pytest.raises(ValueError):
        TrainingConfig(dt=0.0, seed=0)
    with pytest.raises(ValueError):
        ControlPoint(np.inf, 0.0)


def test_rank_deficient_samples_rejected():
    cfg = TrainingConfig(dt=DT, seed=0, sample_box=(0.5, 0.5 + 1e-13))
    with pytest.raises(RankDeficientError):
        train_operator(ControlPoint(0, 0), cfg)


@pytest.mark.parametrize("omega,delta", [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (0.0, -22.8),
                                         (0.37, 5.0), (3.0, 12.0)])
def test_exact_representability(omega, delta):
    k = train_operator(ControlPoint(omega, delta), CFG)
    x = held_out()
    truth = lift(one_step(x, omega, delta))
    pred = lift(x) @ k.T
    rel = np.linalg.norm(pred - truth, axis=1) / np.linalg.norm(truth, axis=1)
    assert rel.max() < 1e-8


def test_zero_control_is_identity():
    np.testing.assert_allclose(train_operator(ControlPoint(0, 0), CFG), np.eye(5), atol=1e-10)


def test_free_evolution_block_is_rotation():
    delta = 3.0
    k = train_operator(ControlPoint(0.0, delta), CFG)
    block = k[1:3, 1:3]
    # det of the RK4 amplification factor is |1 - i h + ... |^2 = 1 - h^6/72 + O(h^8)
    assert np.linalg.det(block) == pytest.approx(1.0, abs=(delta * DT) ** 5)
    angle = np.arctan2(block[1, 0], block[0, 0])
    assert angle == pytest.approx(-delta * DT, abs=(delta * DT) ** 5)


@pytest.mark.parametrize("u", [ControlPoint(0, 0), ControlPoint(1, 0), ControlPoint(0.3, -4.0)])
def test_gram_form_matches(u):
    np.testing.assert_allclose(gram_operator(u, CFG), train_operator(u, CFG), atol=1e-10)


def test_be_model_structure():
    model = train_be(CFG)
    k0 = train_operator(ControlPoint(0, 0), CFG)
    k_om = train_operator(ControlPoint(1, 0), CFG)
    k_de = train_operator(ControlPoint(0, 1), CFG)
    np.testing.assert_array_equal(model.K0, k0)
    np.testing.assert_allclose(model.K0 + model.B_omega, k_om, rtol=0, atol=1e-14)
    np.testing.assert_allclose(model.K0 + model.B_delta[0], k_de, rtol=0, atol=1e-14)
    np.testing.assert_allclose(model.operator(1.0, 0.0), k_om, atol=1e-14)
    assert model.variant == "BE" and model.z == 5


def test_back_projection_identity():
    c = train_be(CFG).C
    x = held_out(200)
    np.testing.assert_allclose(lift(x) @ c.T, x, atol=1e-10)


def test_training_is_seed_deterministic():
    a = dump_model(train_berg(TrainingConfig(dt=DT, seed=7), [-1.0, 0.0, 1.0]))
    b = dump_model(train_berg(TrainingConfig(dt=DT, seed=7), [-1.0, 0.0, 1.0]))
    c = dump_model(train_berg(TrainingConfig(dt=DT, seed=8), [-1.0, 0.0, 1.0]))
    assert a == b
    assert a != c


def test_off_grid_drive_error_is_second_order():
    # K0 + 0.5 B_omega versus the true one-step map at Omega = 0.5
    x = held_out(200)
    errors = []
    for dt in (0.04, 0.02, 0.01):
        cfg = TrainingConfig(dt=dt, seed=0)
        model = train_be(cfg)
        pred = lift(x) @ model.operator(0.5, 0.0).T
        errors.append(np.abs(pred[:, 1:] - one_step(x, 0.5, 0.0, dt)).max())
    slopes = np.diff(np.log(errors)) / np.log(0.5)
    assert slopes.min() >= 1.8, slopes


def test_berg_hits_trained_operators(berg):
    for d in berg.berg_detunings:
        k = train_operator(ControlPoint(0.0, float(d)), CFG)
        np.testing.assert_allclose(berg.detuning_operator(d), k, atol=1e-14)


def test_berg_midpoint_interpolation(berg):
    d1, d2 = berg.berg_detunings[2], berg.berg_detunings[3]
    mid = berg.detuning_operator(0.5 * (d1 + d2)) - berg.K0
    np.testing.assert_allclose(mid, 0.5 * berg.B_delta[2] + 0.5 * berg.B_delta[3], atol=1e-15)


def test_berg_clamps_outside_grid(berg):
    np.testing.assert_array_equal(berg.detuning_operator(100.0), berg.detuning_operator(3.0))
    np.testing.assert_array_equal(berg.detuning_operator(-100.0), berg.detuning_operator(-3.0))


def test_berg_needs_two_detunings():
    with pytest.raises(ValueError):
        train_berg(CFG, [0.0])


def test_model_is_read_only(berg):
    with pytest.raises(ValueError):
        berg.K0[0, 0] = 2.0


def test_model_copies_inputs():
    k = np.eye(5)
    model = KoopmanModel("BE", DT, k, np.zeros((5, 5)), np.zeros((1, 5, 5)), np.zeros((4, 5)))
    k[0, 0] = 3.0
    assert model.K0[0, 0] == 1.0
    assert k.flags.writeable


# --- interpolation weights ------------------------------------------------------------

@pytest.mark.parametrize("delta,expect", [
    (0.25, (0.0, 1.0, 0.25)),
    (0.5, (0.0, 1.0, 0.5)),
    (-1.0, (-1.0, 0.0, 0.0)),
    (1.0, (0.0, 1.0, 1.0)),
    (0.0, (0.0, 1.0, 0.0)),
    (-5.0, (-1.0, 0.0, 0.0)),
    (5.0, (0.0, 1.0, 1.0)),
])
def test_nearest_two_detunings(delta, expect):
    assert nearest_two_detunings(delta, [-1.0, 0.0, 1.0]) == expect


@given(delta=st.floats(-10, 10), n=st.integers(2, 50))
def test_nearest_two_detunings_brackets(delta, n):
    grid = np.linspace(-5, 5, n)
    d1, d2, a = nearest_two_detunings(delta, grid)
    assert 0.0 <= a <= 1.0
    clamped = min(max(delta, -5.0), 5.0)
    assert d1 <= clamped <= d2
    assert (1 - a) * d1 + a * d2 == pytest.approx(clamped, abs=1e-12)
    assert d2 - d1 == pytest.approx(10 / (n - 1))


def test_nearest_two_detunings_rejects_empty():
    with pytest.raises(ValueError):
        nearest_two_detunings(0.0, [])


# --- prediction ----------------------------------------------------------------------

def test_prediction_without_drive_stays_at_ground_state():
    tg = TimeGrid(0.0, 1.0, DT)
    x = predict_trajectory(train_be(CFG), GROUND_STATE, 0.0, PulseSequence(), tg)
    # K0 is the identity up to round-off
    np.testing.assert_allclose(x, 0.0, atol=1e-12)


def test_prediction_free_precession_phase():
    p0, delta = 0.3 + 0.1j, 1.0
    tg = TimeGrid(0.0, 1.0, DT)
    x = predict_trajectory(train_be(CFG), tls_state(p0), delta, PulseSequence(), tg)
    p = x[:, 0] + 1j * x[:, 1]
    phase_err = np.angle(p * np.exp(1j * delta * tg.times) / p0)
    assert np.abs(phase_err).max() < 1e-3
    np.testing.assert_allclose(np.abs(p), abs(p0), rtol=1e-6)


def test_prediction_uses_left_endpoint_drive():
    model = train_be(CFG)
    seq = two_pulse_sequence(delay=1.0, duration=0.3)
    tg = TimeGrid(-0.5, 0.5, DT)
    x = predict_trajectory(model, GROUND_STATE, 0.4, seq, tg)
    y = lift(GROUND_STATE)
    for k, t in enumerate(tg.times[:-1]):
        y = model.operator(seq(t), 0.4) @ y
        np.testing.assert_allclose(x[k + 1], model.C @ y, atol=1e-13)


def test_prediction_grid_must_match_model():
    with pytest.raises(ValueError):
        predict_trajectory(train_be(CFG), GROUND_STATE, 0.0, PulseSequence(), TimeGrid(0, 1, 0.02))


def test_divergence_reported_with_step():
    model = train_be(TrainingConfig(dt=0.5, seed=0))
    with pytest.raises(DivergenceError) as info:
        predict_trajectory(model, tls_state(0.5), 300.0, PulseSequence(), TimeGrid(0, 5000, 0.5))
    assert info.value.step is not None and info.value.step > 0


def test_ensemble_prediction_zero_pulses(berg):
    grid = build_detuning_grid(1.0, 9)
    trace = predict_ensemble(berg, grid, WeightDistribution(1.0), PulseSequence(), TimeGrid(0, 1, DT))
    np.testing.assert_allclose(trace.values, 0.0, atol=1e-12)


def test_ensemble_prediction_is_weighted_sum(berg):
    from koopman_echo.physics import gaussian_weight
    grid = build_detuning_grid(1.0, 9)
    w = WeightDistribution(1.0)
    seq = two_pulse_sequence(delay=2.0)
    tg = TimeGrid(-2.0, 5.0, DT)
    trace = predict_ensemble(berg, grid, w, seq, tg)
    expect = 0
    for d, s in zip(grid.values, gaussian_weight(grid.values, w)):
        x = predict_trajectory(berg, GROUND_STATE, d, seq, tg)
        expect = expect + s * (x[:, 0] + 1j * x[:, 1])
    np.testing.assert_allclose(trace.values, expect, rtol=0, atol=1e-14)


def test_ensemble_prediction_independent_of_threads(berg):
    grid = build_detuning_grid(3.0 * 0.6582119569, 1200)
    w, seq, tg = WeightDistribution(2.0), two_pulse_sequence(delay=2.0), TimeGrid(-2.0, 5.0, DT)
    one = predict_ensemble(berg, grid, w, seq, tg, threads=1)
    four = predict_ensemble(berg, grid, w, seq, tg, threads=4)
    assert np.array_equal(one.values, four.values)


def test_surrogate_tracks_reference_on_small_ensemble():
    grid = build_detuning_grid(1.0, 21)
    w, seq, tg = WeightDistribution(1.0), two_pulse_sequence(delay=5.0), TimeGrid(-5.0, 15.0, DT)
    model = train_berg(CFG, build_detuning_grid(1.0, 21).values)
    ref = simulate_ensemble(grid, w, seq, tg, SolverSettings())
    pred = predict_ensemble(model, grid, w, seq, tg)
    # left-endpoint drive sampling costs a few percent of the signal
    assert np.abs(ref.normalized - pred.normalized).max() < 0.05 * np.abs(ref.normalized).max()


# --- serialization --------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["BE", "BERG"])
def test_model_round_trip(tmp_path, variant, berg):
    model = train_be(CFG) if variant == "BE" else berg
    path = tmp_path / "m.bin"
    save_model(model, path)
    back = load_model(path)
    assert back.variant == model.variant and back.dt == model.dt
    for name in ("K0", "B_omega", "B_delta", "C", "berg_detunings"):
        a, b = getattr(model, name), getattr(back, name)
        assert a.shape == b.shape and a.tobytes() == b.tobytes()
    assert dump_model(back) == path.read_bytes()


def test_model_file_header(berg):
    data = dump_model(berg)
    assert data[:8] == MODEL_MAGIC
    assert int.from_bytes(data[8:12], "little") == 1


@pytest.mark.parametrize("corrupt", [
    lambda d: b"NOTAMODL" + d[8:],
    lambda d: d[:8] + (99).to_bytes(4, "little") + d[12:],
    lambda d: d[:-8],
    lambda d: d + b"\0" * 8,
    lambda d: d[:10],
])
def test_corrupt_model_rejected(berg, corrupt):
    with pytest.raises(ValueError):
        load_model_bytes(corrupt(dump_model(berg)))
