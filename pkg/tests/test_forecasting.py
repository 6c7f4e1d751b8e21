import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bta.errors import ContractError, DatasetError, TrainingError
from bta.forecasting import (Action, Dataset, ForecastModel, Signal, Thresholds, TrainParams, build_dataset,
                             input_gradient, input_gradient_batch, predict, predict_batch, train)
from bta.market import IndexSpec, MarketParams, PricePanel, StockMeta, generate_market

from conftest import random_linear, random_mlp, simple_meta


def _panel(T=60, N=3, seed=0):
    meta = simple_meta(N)
    L = 0.01 * np.eye(N)
    return generate_market(MarketParams(N, T, 0.0, L, seed=seed), meta), meta


def finite_difference(model, x, h=1e-5):
    x = x.ravel()
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (predict_batch(model, x + e)[0] - predict_batch(model, x - e)[0]) / (2 * h)
    return g


# dataset --------------------------------------------------------------------

def test_dataset_minimal_length():
    panel, meta = _panel(T=5)
    ds = build_dataset(panel, IndexSpec.with_base(panel.prices[0], meta), meta, 3)
    assert len(ds) == 1 and ds.X.shape == (1, 9)
    with pytest.raises(DatasetError):
        build_dataset(panel, IndexSpec.with_base(panel.prices[0], meta), meta, 4)


def test_dataset_constant_prices_are_zero():
    meta = simple_meta(2)
    panel = PricePanel(np.full((10, 2), 50.0), ["S0", "S1"])
    ds = build_dataset(panel, IndexSpec.with_base(panel.prices[0], meta), meta, 3)
    assert not ds.X.any() and not ds.y.any()


def test_single_member_label_is_next_return():
    panel, meta = _panel(T=30, N=2)
    spec = IndexSpec(["S1"], 1.0)
    ds = build_dataset(panel, spec, meta, 4)
    rets = panel.log_returns()
    # label at end step t is the return of step t+1, stored at rets[t]
    np.testing.assert_allclose(ds.y, rets[ds.end_steps, 1], rtol=1e-10, atol=1e-13)
    # features cover steps t-W+1..t
    np.testing.assert_array_equal(ds.window(0), rets[0:4])


# prediction -----------------------------------------------------------------

def test_linear_dot_product():
    m = ForecastModel.linear([0.5, -0.3], 0.0)
    assert predict(m, [0.02, 0.01]).y_hat == pytest.approx(0.007, abs=1e-17)


def test_zero_input_odd_mlp_holds():
    rng = np.random.default_rng(0)
    m = ForecastModel.mlp(rng.normal(size=(4, 6)), np.zeros(4), rng.normal(size=4), 0.0, 2, 3)
    sig = predict(m, np.zeros((2, 3)))
    assert sig.y_hat == 0.0 and sig.action is Action.HOLD


def test_threshold_boundaries():
    th = Thresholds(-0.002, 0.002)
    assert th.action(-0.002) is Action.SELL
    assert th.action(0.002) is Action.BUY
    assert th.action(-0.0019999) is Action.HOLD
    with pytest.raises(ValueError):
        Thresholds(0.001, 0.002)


@settings(max_examples=100)
@given(st.floats(-0.1, 0.1))
def test_confidence_proxy(y):
    th = Thresholds(-0.002, 0.002)
    sig = Signal(y, th.action(y), th)
    assert sig.confidence >= 0
    assert (sig.confidence > 0) == (y < th.sell)


def test_shape_mismatch():
    m = ForecastModel.linear(np.ones(6), 0.0, 2, 3)
    with pytest.raises(ContractError):
        predict(m, np.zeros((3, 3)))


def test_param_count_checked():
    with pytest.raises(ContractError):
        ForecastModel("mlp", 2, 3, np.zeros(10), H=2)


# gradients ------------------------------------------------------------------

def test_linear_gradient_is_theta(rng):
    m = random_linear(rng)
    for _ in range(5):
        np.testing.assert_array_equal(input_gradient(m, rng.normal(size=(3, 4))).ravel(), m.theta)


def test_dead_network_has_zero_gradient(rng):
    m = ForecastModel.mlp(np.zeros((5, 12)), rng.normal(size=5), rng.normal(size=5), 0.1, 3, 4)
    assert not input_gradient(m, rng.normal(size=(3, 4))).any()


def test_mlp_gradient_matches_finite_differences(rng):
    worst = 0.0
    for _ in range(100):
        m = random_mlp(rng, W=int(rng.integers(1, 5)), N=int(rng.integers(1, 5)), H=int(rng.integers(1, 9)),
                       scale=0.5)
        x = rng.normal(0, 0.5, (m.W, m.N))
        g = input_gradient(m, x).ravel()
        fd = finite_difference(m, x)
        worst = max(worst, np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12))
    assert worst < 1e-4


def test_batch_gradient_rows(rng):
    m = random_mlp(rng)
    X = rng.normal(size=(7, 12))
    G = input_gradient_batch(m, X)
    for r in range(7):
        np.testing.assert_allclose(G[r], input_gradient(m, X[r]).ravel(), rtol=1e-13, atol=1e-15)


# training -------------------------------------------------------------------

def _linear_rule(rng, n=200, W=2, N=3):
    X = rng.normal(0, 0.01, (n, W * N))
    theta = rng.normal(0, 1, W * N)
    return Dataset(X, X @ theta, np.arange(n), W, N), theta


def test_ridge_recovers_exact_rule(rng):
    ds, theta = _linear_rule(rng)
    m = train("linear", ds, TrainParams(ridge=0.0))
    assert np.max(np.abs(m.theta - theta)) < 1e-8
    assert abs(m.bias) < 1e-10


def test_ridge_small_penalty_recovery(rng):
    ds, theta = _linear_rule(rng)
    m = train("linear", ds, TrainParams(ridge=1e-10))
    assert np.max(np.abs(m.theta - theta)) < 1e-6


def test_ridge_null_solution(rng):
    ds = Dataset(rng.normal(size=(30, 4)), np.zeros(30), np.arange(30), 2, 2)
    m = train("linear", ds, TrainParams(ridge=1e-3))
    assert np.allclose(m.params, 0.0, atol=1e-15)


def test_ridge_singular_without_penalty():
    X = np.ones((10, 2))
    ds = Dataset(X, np.arange(10.0), np.arange(10), 1, 2)
    with pytest.raises(TrainingError, match="ridge"):
        train("linear", ds, TrainParams(ridge=0.0))


def test_ridge_matches_normal_equations(rng):
    # independent oracle: closed-form normal equations with an unpenalised bias
    X = rng.normal(size=(80, 6))
    y = rng.normal(size=80)
    rho = 0.3
    A = np.hstack([X, np.ones((80, 1))])
    P = rho * np.eye(7)
    P[-1, -1] = 0.0
    coef = np.linalg.solve(A.T @ A + P, A.T @ y)
    m = train("linear", Dataset(X, y, np.arange(80), 2, 3), TrainParams(ridge=rho))
    np.testing.assert_allclose(m.params, coef, rtol=1e-10, atol=1e-12)


def test_mlp_training_is_deterministic_and_learns():
    panel, meta = _panel(T=300, N=3, seed=4)
    ds = build_dataset(panel, IndexSpec.with_base(panel.prices[0], meta), meta, 3)
    p = TrainParams(hidden=6, epochs=30, lr=0.01)
    a, b = train("mlp", ds, p, seed=11), train("mlp", ds, p, seed=11)
    np.testing.assert_array_equal(a.params, b.params)
    assert a.train_mse < np.var(ds.y)
    c = train("mlp", ds, p, seed=12)
    assert not np.array_equal(a.params, c.params)


def test_train_errors():
    ds = Dataset(np.zeros((0, 2)), np.zeros(0), np.zeros(0), 1, 2)
    with pytest.raises(TrainingError):
        train("linear", ds)
    with pytest.raises(TrainingError):
        train("lstm", Dataset(np.ones((3, 2)), np.ones(3), np.arange(3), 1, 2))


def test_json_round_trip(tmp_path, rng):
    m = random_mlp(rng)
    m.train_seed, m.train_mse = 9, 0.5
    m.save(tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert set(doc) == {"kind", "W", "N", "H", "params", "train_seed", "train_mse"}
    back = ForecastModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.params, m.params)
    assert (back.kind, back.W, back.N, back.H, back.train_seed) == ("mlp", 3, 4, 6, 9)
