import math

import numpy as np
import pytest

from pgrnn import diffcore as dc
from pgrnn import physics as ph
from pgrnn.hybrid import TrainingTensor
from pgrnn.lakesim import ObservationSet
from pgrnn.seqmodel import LstmParams, head, unroll
from pgrnn.train import (
    Benchmark,
    LossWeights,
    Metrics,
    OptimizerState,
    TrainConfig,
    TrainingError,
    adam_step,
    build_benchmark,
    clip_gradients,
    evaluate,
    evaluate_model,
    evaluate_phy,
    format_report,
    median_by_variant,
    predict,
    total_loss,
    train_model,
    variant_weights,
    window_starts,
)

SMALL = TrainConfig(hidden=4, window=60, epochs=4, batch=4, lr=1e-2)


@pytest.fixture(scope="module")
def bench():
    return build_benchmark(5, train_years=2, test_years=1)


# --- loss ---------------------------------------------------------------------

def rho(y):
    return 1000.0 * (1.0 - (y + 288.9414) * (y - 3.9863) ** 2 / (508929.2 * (y + 68.12963)))


def test_total_loss_two_by_two_hand_case():
    grid = ph.DepthGrid(np.array([0.0, 1.0]), np.array([10.0, 10.0]))  # volumes 5 and 5
    pred = np.array([[10.0, 12.0], [9.0, 8.0]])  # row 0 has warm water under cooler water
    targets = np.array([[11.0, 12.0], [9.0, 7.0]])
    w = np.array([[1.0, 0.0], [0.5, 1.0]])
    drivers = np.zeros((2, ph.N_DRIVERS))  # no wind, no incoming radiation
    lw = LossWeights(sup=1.0, dp=2.0, ec=3.0)

    sup = (1.0 * 1.0 + 0.5 * 0.0 + 1.0 * 1.0) / 2.5
    dens = (max(0.0, rho(10.0) - rho(12.0)) + max(0.0, rho(9.0) - rho(8.0))) / 2
    flux = -0.97 * 5.670e-8 * (10.0 + 273.15) ** 4
    dh = 1000.0 * 4186.0 * 5.0 * ((9.0 + 8.0) - (10.0 + 12.0))
    energy = abs(dh - flux * 10.0 * 86400.0)
    expected = sup + 2.0 * dens + 3.0 * energy
    got = float(total_loss(pred, TrainingTensor(np.zeros((2, 1)), targets, w), drivers, grid, lw))
    assert rho(10.0) > rho(12.0) and rho(9.0) < rho(8.0)
    assert got == pytest.approx(expected, rel=1e-12)


def test_total_loss_reduces_to_weighted_mse():
    rng = np.random.default_rng(0)
    pred, targets = rng.normal(size=(5, 3)) + 10, rng.normal(size=(5, 3)) + 10
    w = rng.random((5, 3))
    tensor = TrainingTensor(np.zeros((5, 2)), targets, w)
    got = float(total_loss(pred, tensor, None, None, LossWeights()))
    assert got == pytest.approx(np.sum(w * (pred - targets) ** 2) / w.sum(), rel=1e-13)


def test_total_loss_zero_weights_rejected():
    tensor = TrainingTensor(np.zeros((2, 1)), np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError, match="weights are zero"):
        total_loss(np.zeros((2, 2)), tensor, None, None, LossWeights())


def test_total_loss_shape_and_grid_checks():
    tensor = TrainingTensor(np.zeros((2, 1)), np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        total_loss(np.zeros((3, 2)), tensor, None, None, LossWeights())
    with pytest.raises(ValueError):
        total_loss(np.zeros((2, 2)), tensor, None, None, LossWeights(dp=1.0))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(dp=-1.0)
    with pytest.raises(ValueError):
        LossWeights(ec=float("nan"))


def test_total_loss_gradient_through_unroll(bench):
    rng = np.random.default_rng(1)
    T = 50
    X = rng.normal(size=(T, 37))
    params = LstmParams.init(37, 5, 26, seed=1)
    targets = bench.truth[:T] + rng.normal(0, 0.5, (T, 26))
    weights = (rng.random((T, 26)) < 0.3).astype(float)
    tensor = TrainingTensor(X, targets, weights)
    heat = ph.heat_content(bench.truth[:T], bench.grid)
    escale = float(np.median(np.abs(np.diff(heat))))
    g = dc.Graph()
    bound = params.bind(g)
    pred = head(unroll(X, bound), bound) * 3.0 + bench.truth[:T]
    loss = total_loss(pred, tensor, bench.drivers.values[:T], bench.grid, LossWeights(dp=1.0, ec=1.0),
                      energy_scale=escale, density_scale=0.02)
    assert dc.grad_check(g, loss) < 1e-5


# --- optimiser ----------------------------------------------------------------

def test_adam_first_step_is_learning_rate():
    for g in (1e-4, 0.3, -250.0):
        params = {"w": np.array([2.0])}
        state = OptimizerState.init(params, lr=0.01)
        new, state = adam_step(params, {"w": np.array([g])}, state)
        assert abs(new["w"][0] - 2.0) == pytest.approx(0.01, rel=1e-3)
        assert state.step == 1


def test_adam_zero_gradient_keeps_parameters():
    params = {"a": np.array([1.5, -2.0]), "b": np.zeros((2, 2))}
    state = OptimizerState.init(params)
    for _ in range(20):
        params2, state = adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state)
        for k in params:
            np.testing.assert_array_equal(params2[k], params[k])


def test_adam_matches_hand_recursion_on_quadratic():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    w, m, v = 1.0, 0.0, 0.0
    oracle = []
    for t in range(1, 11):
        g = 2.0 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        oracle.append(w)
    params = {"w": np.array(1.0)}
    state = OptimizerState.init(params, lr=lr)
    trace = []
    for _ in range(10):
        params, state = adam_step(params, {"w": 2.0 * params["w"]}, state)
        trace.append(float(params["w"]))
    np.testing.assert_allclose(trace, oracle, rtol=1e-14)
    assert all(abs(a) > abs(b) for a, b in zip([1.0] + trace, trace))


def test_adam_rejects_bad_gradients():
    params = {"w": np.ones(2)}
    state = OptimizerState.init(params)
    with pytest.raises(dc.NonFiniteError):
        adam_step(params, {"w": np.array([1.0, np.nan])}, state)
    with pytest.raises(dc.ShapeError):
        adam_step(params, {"w": np.ones(3)}, state)
    with pytest.raises(ValueError):
        adam_step(params, {"v": np.ones(2)}, state)


def test_clip_gradients():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    out = clip_gradients(g, 1.0)
    assert np.hypot(out["a"][0], out["b"][0]) == pytest.approx(1.0)
    assert clip_gradients(g, 10.0) is g
    assert clip_gradients(g, None) is g
    huge = clip_gradients({"a": np.array([1e200, 1e200])}, 1.0)
    np.testing.assert_allclose(huge["a"], [2 ** -0.5, 2 ** -0.5])


# --- windows, variants, split -------------------------------------------------

def test_window_starts_cover_series():
    assert window_starts(100, 200, 100) == [0]
    assert window_starts(500, 200, 100) == [0, 100, 200, 300]
    assert window_starts(550, 200, 100) == [0, 100, 200, 300, 350]


def test_variant_weights():
    cfg = TrainConfig()
    assert variant_weights("PGRNN", cfg) == LossWeights(1.0, cfg.lambda_dp, cfg.lambda_ec, 1.0, cfg.w_phy)
    assert variant_weights("PGRNN0", cfg).dp == 0.0 and variant_weights("PGRNN0", cfg).ec == 0.0
    assert variant_weights("RNN", cfg).w_phy == 0.0
    assert variant_weights("PGRNN", cfg, physics_ok=False).dp == 0.0
    with pytest.raises(ValueError):
        variant_weights("GRU", cfg)


def test_split_is_chronological(bench):
    train_ts = bench.timestamps[: bench.n_train]
    test_ts = bench.timestamps[bench.n_train:]
    assert train_ts.max() < test_ts.min()
    assert np.array_equal(bench.test_obs.mask, bench.obs.mask[bench.n_train:])


def test_benchmark_validation(bench):
    with pytest.raises(ValueError):
        Benchmark(bench.drivers, bench.phy[:-1], bench.obs, bench.n_train)
    with pytest.raises(ValueError):
        Benchmark(bench.drivers, bench.phy, bench.obs, 0)


# --- training -----------------------------------------------------------------

@pytest.mark.parametrize("variant", ["ANN", "RNN", "PGRNN"])
def test_training_loss_decreases(bench, variant):
    result = train_model(variant, bench, SMALL, seed=0)
    losses = [h[1] for h in result.history]
    assert losses[-1] < losses[0]
    assert 0 <= result.best_epoch < SMALL.epochs
    assert result.history[result.best_epoch][2] == min(h[2] for h in result.history)


def test_training_is_deterministic(bench):
    a = train_model("PGRNN", bench, SMALL, seed=3)
    b = train_model("PGRNN", bench, SMALL, seed=3)
    assert a.history == b.history
    for k, v in a.params.weights().items():
        assert v.tobytes() == b.params.weights()[k].tobytes()


def test_training_reports_divergence(bench):
    bad = TrainConfig(hidden=4, window=60, epochs=2, batch=4, lr=1e300)
    with pytest.raises(TrainingError, match="epoch 0 batch"):
        train_model("PGRNN", bench, bad, seed=0)


def test_scalar_benchmark_trains():
    data = build_benchmark(2, train_years=2, test_years=1, scalar=True)
    assert data.n_out == 1 and data.grid is None
    result = train_model("PGRNN", data, SMALL, seed=0)
    pred, metrics = evaluate_model(result, data, SMALL.window)
    assert pred.shape == (len(data.drivers) - data.n_train, 1)
    assert metrics.phy_inconsistency is None and metrics.rmse_overall > 0


def test_predict_covers_every_row(bench):
    result = train_model("RNN", bench, TrainConfig(hidden=3, window=60, epochs=1), seed=0)
    pred = predict(result.params, bench.drivers.values, 60)
    assert pred.shape == bench.phy.shape and np.all(np.isfinite(pred))


# --- evaluation ---------------------------------------------------------------

def test_evaluate_perfect_and_biased(bench):
    truth = bench.truth
    full = ObservationSet.from_dense(truth, bench.obs.mask)
    m = evaluate(truth, full, bench.timestamps)
    assert m.rmse_overall == 0.0 and m.rmse_winter == 0.0 and m.rmse_summer == 0.0
    m = evaluate(truth + 1.0, full, bench.timestamps)
    assert m.rmse_overall == pytest.approx(1.0)
    assert m.rmse_summer == pytest.approx(1.0)


def test_evaluate_phy_matches_two_line_oracle(bench):
    obs = bench.test_obs
    diff = bench.phy[bench.n_train:][obs.mask] - obs.dense()[obs.mask]
    assert evaluate_phy(bench).rmse_overall == pytest.approx(np.sqrt(np.mean(diff ** 2)), rel=1e-12)


def test_empty_season_is_absent():
    ts = np.arange(np.datetime64("2001-04-01"), np.datetime64("2001-06-01")).astype(np.int64)
    obs = ObservationSet.from_dense(np.zeros((ts.size, 2)), np.ones((ts.size, 2), bool))
    m = evaluate(np.ones((ts.size, 2)), obs, ts)
    assert m.rmse_winter is None and m.rmse_summer is None and m.rmse_overall == 1.0


def test_evaluate_errors():
    obs = ObservationSet.from_dense(np.zeros((3, 2)), np.zeros((3, 2), bool))
    with pytest.raises(ValueError):
        evaluate(np.zeros((3, 2)), obs)
    with pytest.raises(ValueError):
        evaluate(np.zeros((4, 2)), obs)


def test_report_format():
    assert format_report("PGRNN", Metrics(1.47912, phy_inconsistency=0.07321)) == "PGRNN 1.4791 0.0732"
    assert format_report("PHY", Metrics(0.5)) == "PHY 0.5000 -"


def test_median_by_variant():
    rows = [{"variant": "A", "x": 1.0}, {"variant": "A", "x": 3.0}, {"variant": "B", "x": None}]
    assert median_by_variant(rows, "x") == {"A": 2.0, "B": None}
