import numpy as np
import pytest

from bta.attacks import AttackSpec, fgsm
from bta.errors import ContractError
from bta.forecasting import Thresholds, TrainParams, predict
from bta.market import IndexSpec, MarketParams, PricePanel, generate_market
from bta.transfer import TransferReport, VictimEnsemble, VictimSpec, evaluate_transfer, train_ensemble

from conftest import random_linear, random_mlp, simple_meta

TH = Thresholds(-0.002, 0.002)


@pytest.fixture(scope="module")
def market():
    meta = simple_meta(3)
    panel = generate_market(MarketParams(3, 200, 0.0, 0.01 * np.eye(3), seed=2), meta)
    return panel, IndexSpec.with_base(panel.prices[0], meta), meta


def test_grid_of_one(market):
    ens = train_ensemble(*market, [VictimSpec("linear", 1, 2)])
    assert len(ens) == 1


def test_seed_changes_mlp(market):
    p = TrainParams(hidden=4, epochs=5)
    ens = train_ensemble(*market, [VictimSpec("mlp", 1, 2, 4, p), VictimSpec("mlp", 2, 2, 4, p)])
    assert not np.array_equal(ens.victims[0].params, ens.victims[1].params)
    assert ens.victims[0].H == 4


def test_linear_victims_ignore_seed():
    meta = simple_meta(2)
    # noise-free data: constant prices
    panel = PricePanel(np.full((20, 2), 10.0), ["S0", "S1"])
    spec = IndexSpec.with_base(panel.prices[0], meta)
    ens = train_ensemble(panel, spec, meta, [VictimSpec("linear", 1, 3), VictimSpec("linear", 99, 3)])
    np.testing.assert_array_equal(ens.victims[0].params, ens.victims[1].params)


def test_empty_grid(market):
    with pytest.raises(ValueError):
        train_ensemble(*market, [])


def _ensemble(models):
    return VictimEnsemble(models, [VictimSpec(m.kind, k, m.W, m.H) for k, m in enumerate(models)])


def test_zero_delta_rates_agree(rng):
    ens = _ensemble([random_linear(rng, 2, 3, scale=0.1) for _ in range(10)])
    x = rng.normal(0, 0.02, (2, 3))
    rep = evaluate_transfer(ens, x, np.zeros((2, 3)), thresholds=TH)
    assert rep.transfer_rate == rep.clean_false_sell_rate


def test_surrogate_clone_always_flips(rng):
    sur = random_mlp(rng, 3, 4)
    x = rng.normal(0, 0.3, (3, 4))
    spec = AttackSpec.full(3, 4, 0.5)
    pert = fgsm(sur, x, spec)
    assert predict(sur, x + pert.delta, TH).action.value == "SELL"
    rep = evaluate_transfer(_ensemble([sur]), x, pert.delta, thresholds=TH)
    assert rep.transfer_rate == 1.0


def test_adding_surrogate_never_lowers_rate(rng):
    for _ in range(20):
        sur = random_linear(rng, 2, 3)
        victims = [random_linear(rng, 2, 3) for _ in range(5)]
        x = rng.normal(0, 0.01, (2, 3))
        pert = fgsm(sur, x, AttackSpec.full(2, 3, 0.5))
        if predict(sur, x + pert.delta, TH).action.value != "SELL":
            continue
        base = evaluate_transfer(_ensemble(victims), x, pert.delta, thresholds=TH).transfer_rate
        more = evaluate_transfer(_ensemble(victims + [sur]), x, pert.delta, thresholds=TH).transfer_rate
        assert more >= base


def test_shorter_victims_use_suffix(rng):
    short = random_linear(rng, 2, 3)
    x = rng.normal(0, 0.01, (4, 3))
    rep = evaluate_transfer(_ensemble([short]), x, thresholds=TH)
    assert rep.rows[0].y_clean == predict(short, x[-2:]).y_hat
    with pytest.raises(ContractError):
        evaluate_transfer(_ensemble([random_linear(rng, 5, 3)]), x, thresholds=TH)


def test_realized_mode(rng):
    m = random_linear(rng, 2, 3)
    x = rng.normal(0, 0.01, (2, 3))
    adv = x - 0.05
    rep = evaluate_transfer(_ensemble([m]), x, adv_window=adv, thresholds=TH)
    assert rep.rows[0].y_adv == predict(m, adv).y_hat


def test_report_arithmetic_and_csv(tmp_path, rng):
    ens = _ensemble([random_linear(rng, 2, 3, scale=0.3) for _ in range(12)])
    x = rng.normal(0, 0.02, (2, 3))
    rep = evaluate_transfer(ens, x, -0.02 * np.ones((2, 3)), thresholds=TH)
    flipped = sum(r.flipped for r in rep.rows)
    assert rep.transfer_rate == flipped / 12
    assert 0 <= rep.clean_false_sell_rate <= 1
    rep.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "victim_id,kind,seed,W,H,y_clean,y_adv,flipped"
    assert TransferReport.rates_from_csv(tmp_path / "t.csv", TH) == (rep.transfer_rate, rep.clean_false_sell_rate)
    again = evaluate_transfer(ens, x, -0.02 * np.ones((2, 3)), thresholds=TH)
    assert again.rows == rep.rows
