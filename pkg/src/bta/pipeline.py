"""End-to-end stages.  Stages communicate only through files in a run directory."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import agents as ag
from .attacks import AttackSpec, Mode, Perturbation, fgsm, iterative_attack, plan_diachronic, \
    select_sparse_mask, success_fraction, universal_perturbation
from .config import STAGES, ScenarioConfig, dump_yaml
from .defenses import DefenseConfig, adversarial_train, detect_coordination, eps_to_flip, smooth_predict
from .errors import ConfigError, DependencyError, PlanError
from .forecasting import ForecastModel, Thresholds, TrainParams, build_dataset, mse, predict_batch, train
from .market import (IndexSpec, Market, PricePanel, classify_manipulable, generate_market, index_series,
                     move_cost)
from .realization import compile_plan, realize, realize_diachronic
from .transfer import TransferReport, VictimEnsemble, VictimSpec, evaluate_transfer

# artifact -> producing stage
PRODUCER = {
    "panel.csv": "generate", "market.json": "generate",
    "models/surrogate.json": "train", "models/victims.json": "train", "train.csv": "train",
    "attack.json": "attack", "perturbation.json": "attack",
    "market_after.csv": "realize", "market_clean.csv": "realize", "execution.json": "realize",
    "execution.csv": "realize", "volumes.csv": "realize",
    "transfer.csv": "transfer", "transfer.json": "transfer",
    "feedback_sweep.csv": "feedback", "index_path.csv": "feedback", "events.csv": "feedback",
    "feedback.json": "feedback",
    "defenses.csv": "defend",
    "defenses.json": "defend",
    "report.json": "report",
}


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path: Path):
    return json.loads(path.read_text())


def _rows_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x)) if x is not None and x != "" else ""


@dataclass
class Run:
    cfg: ScenarioConfig
    root: Path

    def path(self, name: str) -> Path:
        return self.root / name

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            stage = PRODUCER.get(name, "?")
            raise DependencyError(f"missing {name}; run the '{stage}' stage first", stage)
        return p

    # shared loaders
    def panel(self, name: str = "panel.csv") -> PricePanel:
        return PricePanel.from_csv(self.need(name))

    def index_spec(self) -> IndexSpec:
        d = read_json(self.need("market.json"))["index"]
        return IndexSpec(d["members"], d["divisor"])

    def thresholds(self) -> Thresholds:
        return Thresholds(float(self.cfg.thresholds["sell"]), float(self.cfg.thresholds["buy"]))

    def surrogate(self) -> ForecastModel:
        return ForecastModel.load(self.need("models/surrogate.json"))

    def ensemble(self) -> VictimEnsemble:
        meta = read_json(self.need("models/victims.json"))
        victims, prov = [], []
        for v in meta:
            victims.append(ForecastModel.load(self.need(f"models/{v['file']}")))
            prov.append(VictimSpec(v["kind"], v["seed"], v["W"], v["H"]))
        return VictimEnsemble(victims, prov)


def default_run_dir(cfg: ScenarioConfig, base: Path = Path("runs"), create: bool = False) -> Path:
    """``runs/<config hash>-<UTC timestamp>``; reuses the latest one unless ``create``."""
    prefix = cfg.hash()[:12]
    existing = sorted(base.glob(f"{prefix}-*")) if base.exists() else []
    if existing and not create:
        return existing[-1]
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    return base / f"{prefix}-{stamp}"


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def stage_generate(run: Run) -> dict:
    cfg = run.cfg
    panel = generate_market(cfg.market, cfg.stocks)
    panel.to_csv(run.path("panel.csv"))
    spec = IndexSpec.with_base(cfg.initial_prices, cfg.stocks, cfg.index_members, cfg.index_base)
    write_json(run.path("market.json"), {
        "tickers": panel.tickers, "n_steps": panel.n_steps,
        "index": {"members": spec.members, "divisor": spec.divisor, "base": cfg.index_base},
        "seed": cfg.market.seed,
    })
    return {"files": ["panel.csv", "market.json"]}


def _train_params(d: dict) -> TrainParams:
    try:
        return TrainParams.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "train") from None


def stage_train(run: Run) -> dict:
    cfg = run.cfg
    panel, spec = run.panel(), run.index_spec()
    sur = cfg.surrogate
    ds = build_dataset(panel, spec, cfg.stocks, int(sur["W"]))
    params = _train_params({**sur.get("train", {}), **({"hidden": sur["H"]} if sur.get("H") else {})})
    surrogate = train(sur["kind"], ds, params, seed=cfg.seed_for("train/surrogate"))
    run.path("models").mkdir(exist_ok=True)
    surrogate.save(run.path("models/surrogate.json"))
    rows = [["surrogate", surrogate.kind, surrogate.train_seed, surrogate.W, surrogate.H, _fmt(surrogate.train_mse)]]
    datasets = {}
    index = []
    for k, v in enumerate(cfg.victims):
        W = v["W"]
        if W not in datasets:
            datasets[W] = build_dataset(panel, spec, cfg.stocks, W)
        seed = cfg.seed_for(f"victim/{v['kind']}/{W}/{v['H']}/{v['seed']}")
        p = _train_params({**v["train"], **({"hidden": v["H"]} if v["H"] else {})})
        m = train(v["kind"], datasets[W], p, seed=seed)
        fname = f"victim_{k:02d}.json"
        m.save(run.path(f"models/{fname}"))
        index.append({"file": fname, "kind": m.kind, "seed": seed, "grid_seed": v["seed"], "W": W, "H": m.H})
        rows.append([f"victim_{k:02d}", m.kind, seed, W, m.H, _fmt(m.train_mse)])
    write_json(run.path("models/victims.json"), index)
    _rows_csv(run.path("train.csv"), ["model_id", "kind", "seed", "W", "H", "train_mse"], rows)
    return {"files": ["models/surrogate.json", "models/victims.json", "train.csv"]}


def _attack_spec(cfg: ScenarioConfig, mask: np.ndarray, thresholds: Thresholds) -> AttackSpec:
    a = cfg.attack
    eps = float(a["eps"])
    steps = int(a.get("steps", 1))
    return AttackSpec(eps, mask, Mode(a.get("mode", "targeted")), float(a.get("target", thresholds.sell)),
                      steps=steps, step_size=float(a.get("step_size", eps)), sparsity_k=int(a["sparsity_k"]))


def _craft(surrogate: ForecastModel, history: np.ndarray, assumed: np.ndarray, spec: AttackSpec, h: int,
           method: str) -> Perturbation:
    if method == "iterative":
        return iterative_attack(surrogate, assumed, spec)
    if method == "diachronic":
        plan = plan_diachronic(surrogate, history, spec, h)
        delta = np.zeros_like(assumed)
        delta[len(assumed) - h:] = plan.targets
        return Perturbation(delta, spec.eps, float(predict_batch(surrogate, assumed)[0]), plan.y_final)
    return fgsm(surrogate, assumed, spec)


def stage_attack(run: Run) -> dict:
    cfg = run.cfg
    a = cfg.attack
    panel, spec_idx = run.panel(), run.index_spec()
    surrogate = run.surrogate()
    thresholds = run.thresholds()
    W, N, h = surrogate.W, surrogate.N, int(a["horizon"])
    history = panel.log_returns()[-W:]
    assumed = np.vstack([history[h:], np.zeros((h, N))])
    eps_frac = math.expm1(float(a["eps"]))
    prices = panel.prices[-1]
    manip = classify_manipulable(cfg.stocks, prices, eps_frac, float(a["per_stock_budget"]))
    costs = np.array([move_cost(m, p, eps_frac) for m, p in zip(cfg.stocks, prices)])
    rows = np.arange(W) >= W - h
    # Shrink the mask, weakest stock first, until the compiled plan fits the budget.
    k = int(a["sparsity_k"])
    while True:
        mask = select_sparse_mask(surrogate, assumed, manip, costs, k, rows)
        spec = _attack_spec(cfg, mask, thresholds)
        pert = _craft(surrogate, history, assumed, spec, h, a.get("method", "fgsm"))
        try:
            trade_plan = compile_plan(pert.delta[W - h:], prices, cfg.stocks, float(a["budget"]))
            break
        except PlanError:
            k = len(spec.mask_stocks) - 1
            if k < 1:
                raise
    pert.est_cost = trade_plan.est_cost
    method = a.get("method", "fgsm")

    # static vs universal success over the historical windows, reported side by side
    ds = build_dataset(panel, spec_idx, cfg.stocks, W)
    uspec = spec.with_(mode=Mode.TARGETED, steps=int(a.get("universal_steps", 50)),
                       step_size=float(a.get("universal_step_size", spec.eps / 10)))
    uni = universal_perturbation(surrogate, ds.X, uspec)
    static_rate = success_fraction(surrogate, ds.X, pert.delta, spec.target)

    tickers = panel.tickers
    write_json(run.path("perturbation.json"), pert.to_json(tickers))
    write_json(run.path("attack.json"), {
        "method": method, "t0": panel.t0 + panel.n_steps - 1, "horizon": h, "W": W,
        "eps": spec.eps, "target": spec.target, "sparsity_k": spec.sparsity_k,
        "manipulable": [t for t, m in zip(tickers, manip) if m],
        "move_costs": dict(zip(tickers, costs.tolist())),
        "selected": [tickers[i] for i in spec.mask_stocks],
        "mask_rows": [int(r) for r in np.flatnonzero(rows)],
        "y_before": pert.y_before, "y_after": pert.y_after, "est_cost": trade_plan.est_cost,
        "budget": float(a["budget"]),
        "universal": {"success_rate": uni.success_rate, "delta": uni.to_json(tickers)["delta"],
                      "static_success_rate": static_rate, "n_windows": len(ds)},
    })
    return {"files": ["perturbation.json", "attack.json"]}


def exogenous_noise(cfg: ScenarioConfig, name: str, steps: int, sigma: float | None = None) -> np.ndarray:
    """Seeded exogenous log-returns: iid normal(0, sigma) or, without sigma, the market process."""
    rng = np.random.default_rng(cfg.seed_for(name))
    n = len(cfg.stocks)
    if sigma is not None:
        return rng.normal(0.0, sigma, size=(steps, n))
    return cfg.market.drift + rng.standard_normal((steps, n)) @ cfg.market.cov_factor.T


def stage_realize(run: Run) -> dict:
    cfg = run.cfg
    a = cfg.attack
    info = read_json(run.need("attack.json"))
    panel = run.panel()
    tickers = panel.tickers
    pert = Perturbation.from_json(read_json(run.need("perturbation.json")), tickers)
    W, h = info["W"], info["horizon"]
    sigma = a.get("noise_sigma")
    noise = exogenous_noise(cfg, "realize", h, None if sigma is None else float(sigma))
    market = Market(cfg.stocks, panel)
    tol = float(a.get("tolerance", 1e-4))
    retries = int(a.get("max_retries", 2))
    extra = {}
    if info["method"] == "diachronic":
        mask = np.zeros((W, len(tickers)), dtype=bool)
        mask[np.ix_(info["mask_rows"], [tickers.index(t) for t in info["selected"]])] = True
        spec = _attack_spec(cfg, mask, run.thresholds())
        history = panel.log_returns()[-W:]
        plan, report = realize_diachronic(run.surrogate(), history, spec, h, market, float(a["budget"]),
                                          float(a["per_stock_budget"]), noise, tol, retries)
        extra = {"plan_status": plan.status,
                 "plan_events": [[e.step, e.kind, [tickers[i] for i in e.stocks], e.detail] for e in plan.events]}
    else:
        plan = compile_plan(pert.delta[W - h:], panel.prices[-1], cfg.stocks, float(a["budget"]))
        report = realize(plan, market, noise, tol, retries)
    clean = Market(cfg.stocks, panel)
    for s in range(h):
        clean.advance(noise[s])
    market.panel().to_csv(run.path("market_after.csv"))
    clean.panel().to_csv(run.path("market_clean.csv"))
    write_json(run.path("execution.json"), {**report.to_json(), **extra})
    report.to_csv(run.path("execution.csv"))
    steps, vol = market.net_volumes()
    _rows_csv(run.path("volumes.csv"), ["step", *tickers],
              [[int(s), *(_fmt(v) for v in row)] for s, row in zip(steps, vol)])
    return {"files": ["market_after.csv", "market_clean.csv", "execution.json", "execution.csv", "volumes.csv"],
            "outcome": report.outcome.value}


def realization_trials(run: Run, n_trials: int = 100, sigma: float | None = None) -> list[str]:
    """Replay the persisted static plan under ``n_trials`` seeded noise draws.

    Each trial starts from the generated panel with its own exogenous stream
    (``realize/trial/<k>``) and returns its outcome name.
    """
    cfg = run.cfg
    a = cfg.attack
    info = read_json(run.need("attack.json"))
    panel = run.panel()
    pert = Perturbation.from_json(read_json(run.need("perturbation.json")), panel.tickers)
    W, h = info["W"], info["horizon"]
    if sigma is None and a.get("noise_sigma") is not None:
        sigma = float(a["noise_sigma"])
    plan = compile_plan(pert.delta[W - h:], panel.prices[-1], cfg.stocks, float(a["budget"]))
    outcomes = []
    for k in range(n_trials):
        noise = exogenous_noise(cfg, f"realize/trial/{k}", h, sigma)
        report = realize(plan, Market(cfg.stocks, panel), noise, float(a.get("tolerance", 1e-4)),
                         int(a.get("max_retries", 2)))
        outcomes.append(report.outcome.value)
    return outcomes


def stage_transfer(run: Run) -> dict:
    ens = run.ensemble()
    after, clean = run.panel("market_after.csv"), run.panel("market_clean.csv")
    surrogate = run.surrogate()
    W = max([surrogate.W, *(m.W for m in ens.victims)])
    adv_window = after.log_returns()[-W:]
    clean_window = clean.log_returns()[-W:]
    th = run.thresholds()
    report = evaluate_transfer(ens, clean_window, adv_window=adv_window, thresholds=th)
    report.to_csv(run.path("transfer.csv"))
    sur = evaluate_transfer(VictimEnsemble([surrogate], [VictimSpec(surrogate.kind, surrogate.train_seed,
                                                                    surrogate.W, surrogate.H)]),
                            clean_window, adv_window=adv_window, thresholds=th)
    write_json(run.path("transfer.json"), {
        "mode": "realized", "n_victims": len(ens),
        "transfer_rate": report.transfer_rate, "clean_false_sell_rate": report.clean_false_sell_rate,
        "surrogate": {"y_clean": sur.rows[0].y_clean, "y_adv": sur.rows[0].y_adv, "sell": sur.rows[0].flipped},
    })
    return {"files": ["transfer.csv", "transfer.json"]}


def _population(run: Run, phi: float) -> ag.AgentPopulation:
    a = run.cfg.agents
    th = run.thresholds()
    followers = [ag.Follower(m, float(a["capital"]), float(a["sell_fraction"]), th) for m in run.ensemble().victims]
    return ag.AgentPopulation(followers, phi, bool(a.get("recovery", False)))


def feedback_paths(run: Run, phi: float, noise: np.ndarray, panel_name: str) -> ag.FeedbackResult:
    cfg = run.cfg
    spec = run.index_spec()
    panel = run.panel(panel_name)
    h = read_json(run.need("attack.json"))["horizon"]
    prefix = index_series(panel.prices[-(h + 1):], spec, cfg.stocks)
    res = ag.run_feedback(_population(run, phi), Market(cfg.stocks, panel), spec, int(cfg.agents["horizon"]),
                          noise, prefix=prefix)
    res.index_path = np.concatenate([prefix, res.index_path[1:]])
    res.steps = np.concatenate([np.arange(res.steps[0] - h, res.steps[0]), res.steps])
    return res


def windowed_drawdown(path, horizon_steps: int) -> float:
    return ag.max_drawdown(np.asarray(path)[:horizon_steps + 1])


def stage_feedback(run: Run) -> dict:
    cfg = run.cfg
    a = cfg.agents
    hs = int(cfg.success["horizon_steps"])
    sigma = a.get("noise_sigma")
    noise = exogenous_noise(cfg, "feedback", int(a["horizon"]), None if sigma is None else float(sigma))
    phis = sorted({float(p) for p in a.get("phi_grid", [])} | {float(a["phi"])})
    h = read_json(run.need("attack.json"))["horizon"]
    rows, sweep, next_returns = [], [], []
    chosen = None
    for phi in phis:
        res = feedback_paths(run, phi, noise, "market_after.csv")
        base = feedback_paths(run, phi, noise, "market_clean.csv")
        dd, dd0 = windowed_drawdown(res.index_path, hs), windowed_drawdown(base.index_path, hs)
        # index return on the first step after the attack, when followers first act
        nxt = float(np.log(res.index_path[h + 1] / res.index_path[h]))
        sweep.append((phi, dd))
        next_returns.append(nxt)
        rows.append([_fmt(phi), _fmt(dd), _fmt(dd0), len(res.sell_steps), _fmt(nxt)])
        if phi == float(a["phi"]):
            chosen = res
    _rows_csv(run.path("feedback_sweep.csv"), ["phi", "drawdown", "drawdown_no_attack", "sell_steps", "next_return"],
              rows)
    _rows_csv(run.path("index_path.csv"), ["step", "index_value"],
              [[int(s), _fmt(v)] for s, v in zip(chosen.steps, chosen.index_path)])
    chosen.events_csv(run.path("events.csv"))
    drop = float(cfg.success["drop_pct"])
    reaching = [phi for phi, dd in sweep if dd >= drop]
    dds = [dd for _, dd in sweep]
    # smallest phi from which every larger grid value sees a non-positive next-step return
    fulfilling = None
    for phi, nxt in reversed(list(zip(phis, next_returns))):
        if nxt > 0:
            break
        fulfilling = phi
    write_json(run.path("feedback.json"), {
        "phi": float(a["phi"]), "drawdown": windowed_drawdown(chosen.index_path, hs),
        "phi_star": reaching[0] if reaching else None,
        "monotone": all(x <= y for x, y in zip(dds, dds[1:])), "horizon_steps": hs,
        "phi_self_fulfilling": fulfilling,
    })
    return {"files": ["feedback_sweep.csv", "index_path.csv", "events.csv", "feedback.json"]}


def stage_defend(run: Run) -> dict:
    cfg = run.cfg
    d = cfg.defenses
    dcfg = DefenseConfig(**{k: d[k] for k in ("adv_ratio", "adv_eps", "smooth_width", "detect_z", "detect_count",
                                              "normal_flow") if k in d})
    panel, spec = run.panel(), run.index_spec()
    surrogate = run.surrogate()
    th = run.thresholds()
    kind = d.get("kind", "mlp")
    W = int(d.get("W", surrogate.W))
    ds = build_dataset(panel, spec, cfg.stocks, W)
    params = _train_params({**d.get("train", {}), **({"hidden": d["H"]} if d.get("H") else {})})
    seed = cfg.seed_for("defend/train")
    plain = adversarial_train(kind, ds, DefenseConfig(**{**dcfg.__dict__, "adv_ratio": 0.0}), params, seed)
    robust = adversarial_train(kind, ds, dcfg, params, seed)

    # Paired experiment on windows the plain model does not already flag as SELL.
    plain_y = predict_batch(plain.model, ds.X)
    eligible = np.flatnonzero(plain_y > th.sell)
    rng = np.random.default_rng(cfg.seed_for("defend/windows"))
    n_win = min(int(d.get("n_windows", 50)), eligible.size)
    picks = np.sort(rng.choice(eligible, size=n_win, replace=False))
    eps_max = float(d.get("eps_max", 0.2))
    flip_plain = np.array([eps_to_flip(plain.model, ds.window(i), th.sell, eps_max=eps_max) for i in picks])
    flip_robust = np.array([eps_to_flip(robust.model, ds.window(i), th.sell, eps_max=eps_max) for i in picks])
    harder = float(np.mean(flip_robust > flip_plain)) if n_win else float("nan")

    rows = [
        ["none", "", _fmt(plain.clean_mse), _fmt(plain.adv_mse), _fmt(float(np.median(flip_plain))), "", ""],
        ["adversarial_training", f"ratio={dcfg.adv_ratio};eps={dcfg.adv_eps}", _fmt(robust.clean_mse),
         _fmt(robust.adv_mse), _fmt(float(np.median(flip_robust))), "", ""],
    ]

    m = dcfg.smooth_width
    ds_s = build_dataset(panel, spec, cfg.stocks, surrogate.W)
    sm = np.array([smooth_predict(surrogate, ds_s.window(i), m, th)[0].y_hat for i in range(len(ds_s))])
    smooth_clean = float(np.mean((sm - ds_s.y) ** 2))
    after = run.panel("market_after.csv")
    adv_window = after.log_returns()[-surrogate.W:]
    adv_sig, _ = smooth_predict(surrogate, adv_window, m, th)
    rows.append(["surrogate_plain", "m=1", _fmt(mse(surrogate, ds_s.X, ds_s.y)), "", "", "", ""])
    rows.append(["smoothing", f"m={m};y_adv={adv_sig.y_hat!r};action={adv_sig.action.value}",
                 _fmt(smooth_clean), "", "", "", ""])

    with open(run.need("volumes.csv"), newline="") as fh:
        vrows = list(csv.reader(fh))[1:]
    vol = np.array([[float(x) for x in r[1:]] for r in vrows])
    att = detect_coordination(vol, cfg.stocks, dcfg)
    null_steps = int(d.get("null_steps", 1000))
    sigma = cfg.attack.get("noise_sigma")
    null_noise = exogenous_noise(cfg, "defend/null", null_steps, None if sigma is None else float(sigma))
    null_market = Market(cfg.stocks, panel)
    for r in null_noise:
        null_market.advance(r)
    _, null_vol = null_market.net_volumes()
    null = detect_coordination(null_vol, cfg.stocks, dcfg)
    rows.append(["detection", f"z={dcfg.detect_z};c={dcfg.detect_count};kappa={dcfg.normal_flow}",
                 "", "", "", _fmt(att.alarm_rate), _fmt(null.alarm_rate)])
    _rows_csv(run.path("defenses.csv"),
              ["defense", "param", "clean_mse", "adv_mse", "attack_eps_to_flip", "alarm_rate", "false_positive_rate"],
              rows)
    write_json(run.path("defenses.json"), {
        "windows": picks.tolist(), "eps_to_flip_plain": flip_plain.tolist(),
        "eps_to_flip_robust": flip_robust.tolist(), "robust_harder_rate": harder,
        "attack_alarm_steps": att.steps[att.alarms].tolist(), "attack_flagged": [f for f in att.flagged if f],
        "null_alarm_count": null.alarm_count, "null_steps": null_steps,
        "false_positive_rate": null.alarm_rate, "attack_alarm_rate": att.alarm_rate,
    })
    return {"files": ["defenses.csv", "defenses.json"]}


def evaluate_success(run: Run) -> dict:
    """Table-style success flags, recomputed from the persisted CSVs."""
    cfg = run.cfg
    rate, clean_rate = TransferReport.rates_from_csv(run.need("transfer.csv"), run.thresholds())
    with open(run.need("index_path.csv"), newline="") as fh:
        path = [float(r["index_value"]) for r in csv.DictReader(fh)]
    hs = int(cfg.success["horizon_steps"])
    dd = windowed_drawdown(path, hs)
    frac, drop = float(cfg.success["transfer_fraction"]), float(cfg.success["drop_pct"])
    return {
        "success_I": {"transfer_rate": rate, "clean_false_sell_rate": clean_rate, "threshold": frac,
                      "pass": rate >= frac},
        "success_II": {"drawdown": dd, "drop_pct": drop, "horizon_steps": hs, "pass": dd >= drop},
    }


def stage_report(run: Run) -> dict:
    flags = evaluate_success(run)
    stages = {}
    for name, stage in PRODUCER.items():
        if stage != "report" and run.path(name).exists():
            stages.setdefault(stage, []).append(name)
    summary = {
        "config_hash": run.cfg.hash(), "seed": run.cfg.seed, "stages": stages, **flags,
        "execution": {k: v for k, v in read_json(run.need("execution.json")).items() if k != "fills"},
        "attack": {k: v for k, v in read_json(run.need("attack.json")).items() if k not in ("universal",)},
        "universal": {k: v for k, v in read_json(run.path("attack.json"))["universal"].items() if k != "delta"},
        "feedback": read_json(run.need("feedback.json")),
    }
    write_json(run.path("report.json"), summary)
    return {"files": ["report.json"]}


STAGE_FUNCS: dict[str, Callable[[Run], dict]] = {
    "generate": stage_generate, "train": stage_train, "attack": stage_attack, "realize": stage_realize,
    "transfer": stage_transfer, "feedback": stage_feedback, "defend": stage_defend, "report": stage_report,
}


def run_stage(cfg: ScenarioConfig, root: Path, stage: str) -> dict:
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    root.mkdir(parents=True, exist_ok=True)
    cfg_copy = root / "config.yaml"
    if not cfg_copy.exists():
        cfg_copy.write_text(dump_yaml(cfg.raw))
    run = Run(cfg, root)
    t = time.perf_counter()
    out = STAGE_FUNCS[stage](run)
    elapsed = time.perf_counter() - t
    with open(root / "timings.log", "a") as fh:
        fh.write(f"{stage}\t{elapsed:.6f}\n")
    return {"stage": stage, "seconds": elapsed, **out}


def run_all(cfg: ScenarioConfig, root: Path) -> list[dict]:
    return [run_stage(cfg, root, s) for s in STAGES]


def read_timings(root: Path) -> dict:
    log = root / "timings.log"
    out = {}
    if log.exists():
        for line in log.read_text().splitlines():
            stage, secs = line.split("\t")
            out[stage] = float(secs)
    return out
