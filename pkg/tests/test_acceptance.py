"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

Regression pins were recorded from the bundled demo scenario and are
identical under the numba and pure-numpy backends.
"""

import filecmp
import json
import math

import numpy as np
from hypothesis import HealthCheck, given, settings, strategies as st

from bta.attacks import (AttackSpec, Mode, Perturbation, check_feasible, fgsm, iterative_attack,
                         plan_diachronic, select_sparse_mask, universal_perturbation)
from bta.config import load_config
from bta.defenses import DefenseConfig, adversarial_train, moving_median, smooth_predict
from bta.forecasting import Dataset, TrainParams, input_gradient, predict, predict_batch, train
from bta.market import MarketState, StockMeta, execute_trade, invert_impact
from bta.pipeline import Run, read_json, realization_trials, run_all

from conftest import DEMO, random_linear, random_mlp

# pinned regression values from the demo scenario
PINNED_REALIZED = 100
PINNED_TRANSFER_RATE = 0.75
PINNED_CLEAN_FALSE_SELL_RATE = 0.125
PINNED_PHI_STAR = 0.4
PINNED_NULL_FALSE_POSITIVE_RATE = 0.0


def central_difference(model, x, h=1e-5):
    x = x.ravel()
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (predict_batch(model, x + e)[0] - predict_batch(model, x - e)[0]) / (2 * h)
    return g


def test_gradient_correctness(criterion):
    with criterion(1, "input gradients match finite differences") as c:
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(120):
            m = random_mlp(rng, int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 10)), 0.5)
            x = rng.normal(0, 0.5, (m.W, m.N))
            fd = central_difference(m, x)
            g = input_gradient(m, x).ravel()
            worst = max(worst, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)))
        linear_exact = all(np.array_equal(input_gradient(m, rng.normal(size=(m.W, m.N))).ravel(), m.theta)
                           for m in (random_linear(rng, 3, 4) for _ in range(20)))
        c.detail = f"max rel err {worst:.2e} over 120 MLPs, linear exact={linear_exact}"
        assert worst < 1e-4
        assert linear_exact


def test_fgsm_closed_form(criterion):
    with criterion(2, "FGSM shift on linear models equals -eps * sum|theta| over the mask") as c:
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(100):
            W, N = int(rng.integers(1, 6)), int(rng.integers(1, 8))
            m = random_linear(rng, W, N)
            mask = rng.random((W, N)) < 0.5
            mask[0, 0] = True
            eps = float(rng.uniform(0.001, 0.1))
            p = fgsm(m, rng.normal(0, 0.01, (W, N)), AttackSpec(eps, mask))
            expected = -eps * np.abs(m.theta[mask.ravel()]).sum()
            worst = max(worst, abs((p.y_after - p.y_before) - expected) / abs(expected))
        c.detail = f"max rel err {worst:.2e} over 100 instances"
        assert worst <= 1e-12


FEASIBILITY_CASES = []


@settings(max_examples=200, deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["linear", "mlp"]),
       st.sampled_from(["fgsm", "iterative", "universal", "diachronic"]))
def _feasible_case(seed, kind, method):
    rng = np.random.default_rng(seed)
    W, N = int(rng.integers(1, 6)), int(rng.integers(1, 7))
    m = random_linear(rng, W, N) if kind == "linear" else random_mlp(rng, W, N, scale=2.0)
    k = int(rng.integers(1, N + 1))
    h = int(rng.integers(1, W + 1))
    x = rng.normal(0, 0.5, (W, N))
    manipulable = rng.random(N) < 0.8
    manipulable[rng.integers(N)] = True
    mask = select_sparse_mask(m, x, manipulable, rng.uniform(1, 10, N), k, np.arange(W) >= W - h)
    eps = float(rng.uniform(0.01, 0.5))
    target = float(predict_batch(m, x)[0] - rng.uniform(0, 1))
    spec = AttackSpec(eps, mask, Mode.TARGETED, target, steps=10, step_size=eps / 3, sparsity_k=k)
    if method == "fgsm":
        p = fgsm(m, x, spec)
    elif method == "iterative":
        p = iterative_attack(m, x, spec)
    elif method == "universal":
        p = universal_perturbation(m, rng.normal(0, 0.5, (5, W * N)), spec)
    else:
        plan = plan_diachronic(m, x, spec, h)
        delta = np.zeros((W, N))
        delta[W - h:] = plan.targets
        p = Perturbation(delta, eps, 0.0, plan.y_final)
    check_feasible(p, spec)
    assert np.all(np.abs(p.delta) <= eps)
    assert not np.any((p.delta != 0) & ~mask)
    assert np.count_nonzero(np.abs(p.delta).sum(axis=0)) <= k
    FEASIBILITY_CASES.append(method)


def test_feasibility_invariants(criterion):
    with criterion(3, "every attack respects the eps-box, mask and sparsity bound") as c:
        FEASIBILITY_CASES.clear()
        _feasible_case()
        counts = {m: FEASIBILITY_CASES.count(m) for m in ("fgsm", "iterative", "universal", "diachronic")}
        c.detail = ", ".join(f"{m}={n}" for m, n in counts.items())
        assert all(n > 0 for n in counts.values())


def test_impact_round_trip(criterion):
    with criterion(4, "invert_impact then execute_trade reproduces the move; ledger balances") as c:
        rng = np.random.default_rng(4)
        worst, ledger_ok = 0.0, True
        for _ in range(1000):
            meta = StockMeta("A", 1e9, float(10 ** rng.uniform(3, 8)), float(rng.uniform(0.01, 2.0)),
                             float(rng.uniform(0, 0.01)))
            p = float(10 ** rng.uniform(-1, 4))
            f = float(rng.choice([-1, 1]) * 10 ** rng.uniform(-4, math.log10(0.05)))
            state = MarketState(["A"], [p])
            fill = execute_trade(state, meta, invert_impact(meta, p, f))
            worst = max(worst, abs(fill.frac - f) / abs(f), abs((state.prices[0] - p) / p - f) / abs(f))
            ledger_ok &= state.spend == fill.cost
        c.detail = f"max rel err {worst:.2e} over 1000 cases"
        assert worst <= 1e-12
        assert ledger_ok


def test_realization_under_noise(demo_run, criterion):
    with criterion(5, "bundled 5-stock plan realizes under sigma=0.001 noise") as c:
        info = read_json(demo_run.path("attack.json"))
        outcomes = realization_trials(demo_run, 100, sigma=0.001)
        realized = outcomes.count("REALIZED")
        c.detail = f"{realized}/100 REALIZED, pinned {PINNED_REALIZED} +/- 2, stocks={len(info['selected'])}"
        assert len(info["selected"]) == 5
        assert abs(realized - PINNED_REALIZED) <= 2
        assert realized >= 95


def test_transferability_margin(demo_run, criterion):
    with criterion(6, "surrogate FGSM transfers beyond the clean false-sell rate") as c:
        doc = read_json(demo_run.path("transfer.json"))
        rate, clean = doc["transfer_rate"], doc["clean_false_sell_rate"]
        c.detail = f"transfer={rate}, clean={clean}, victims={doc['n_victims']}"
        assert demo_run.cfg.attack.get("method", "fgsm") == "fgsm"
        assert doc["n_victims"] == 16
        assert rate > clean
        assert (rate, clean) == (PINNED_TRANSFER_RATE, PINNED_CLEAN_FALSE_SELL_RATE)


def test_self_fulfilling_feedback(demo_run, criterion):
    with criterion(7, "a follower fraction meets the drop and drawdown rises with phi") as c:
        lines = demo_run.path("feedback_sweep.csv").read_text().splitlines()
        rows = [dict(zip(lines[0].split(","), r.split(","))) for r in lines[1:]]
        phis = [float(r["phi"]) for r in rows]
        dds = [float(r["drawdown"]) for r in rows]
        drop = float(demo_run.cfg.success["drop_pct"])
        meets = [p for p, d in zip(phis, dds) if d >= drop]
        phi_star = min(meets) if meets else None
        monotone = all(b >= a for a, b in zip(dds, dds[1:]))
        c.detail = f"phi*={phi_star}, drop_pct={drop}, grid={len(phis)} points, monotone={monotone}"
        assert phis == sorted(phis)
        assert phi_star == PINNED_PHI_STAR == read_json(demo_run.path("feedback.json"))["phi_star"]
        assert monotone


def test_defense_tradeoffs(demo_run, criterion, rng):
    with criterion(8, "defense identities hold and detection is regression-pinned") as c:
        X = rng.normal(0, 0.01, (200, 12))
        ds = Dataset(X, X @ rng.normal(size=12) * 0.1, np.arange(200), 3, 4)
        params = TrainParams(hidden=4, epochs=5)
        identical = True
        for kind in ("linear", "mlp"):
            plain = train(kind, ds, params, seed=9)
            for ratio, eps in ((0.0, 0.01), (1.0, 0.0)):
                adv = adversarial_train(kind, ds, DefenseConfig(adv_ratio=ratio, adv_eps=eps), params, seed=9)
                identical &= json.dumps(adv.model.to_json()) == json.dumps(plain.to_json())
        m = random_mlp(rng)
        w = rng.normal(size=(3, 4))
        identity = (np.array_equal(moving_median(w, 1), w)
                    and smooth_predict(m, w, 1)[0].y_hat == predict(m, w).y_hat)
        d = read_json(demo_run.path("defenses.json"))
        c.detail = (f"bit-identical={identical}, m=1 identity={identity}, attack alarms at "
                    f"{d['attack_alarm_steps']}, null FPR={d['false_positive_rate']} over {d['null_steps']} steps")
        assert identical and identity
        assert d["attack_alarm_steps"] and d["attack_alarm_rate"] > 0
        assert d["null_steps"] == 1000
        assert d["false_positive_rate"] == PINNED_NULL_FALSE_POSITIVE_RATE


def test_end_to_end_determinism(demo_run, criterion, tmp_path):
    with criterion(9, "two full demo runs produce byte-identical artifacts") as c:
        second = tmp_path / "again"
        run_all(load_config(DEMO), second)
        files = sorted(p.relative_to(demo_run.root) for p in demo_run.root.rglob("*") if p.is_file())
        files = [f for f in files if f.name != "timings.log"]
        other = sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file() and p.name != "timings.log")
        differing = [str(f) for f in files if not filecmp.cmp(demo_run.root / f, second / f, shallow=False)]
        c.detail = f"{len(files)} artifacts compared, {len(differing)} differ"
        assert files == other
        assert not differing, differing


def exhaustive_k1(model, window, manipulable, costs, eps):
    best, best_val = None, -np.inf
    for i in np.flatnonzero(manipulable):
        mask = np.zeros((model.W, model.N), dtype=bool)
        mask[:, i] = True
        p = fgsm(model, window, AttackSpec(eps, mask))
        val = (p.y_before - p.y_after) / costs[i]
        if val > best_val:
            best, best_val = i, val
    return best


def test_brute_force_oracle(criterion):
    with criterion(10, "greedy k=1 selection equals exhaustive search") as c:
        rng = np.random.default_rng(10)
        hits = 0
        for _ in range(100):
            W, N = int(rng.integers(1, 6)), int(rng.integers(1, 11))
            m = random_linear(rng, W, N)
            manip = rng.random(N) < 0.7
            manip[rng.integers(N)] = True
            costs = rng.uniform(1.0, 100.0, N)
            x = rng.normal(0, 0.01, (W, N))
            chosen = np.flatnonzero(select_sparse_mask(m, x, manip, costs, 1).any(axis=0)).tolist()
            hits += chosen == [exhaustive_k1(m, x, manip, costs, 0.01)]
        c.detail = f"{hits}/100"
        assert hits == 100
