"""Scenario configuration: YAML schema, validation and seed derivation.

Every random stream in a run is seeded with ``sub_seed(master, name)``: the
first eight bytes (big-endian) of ``sha256(f"{master}/{salt}/{name}")``, where
``salt`` is ``derivation.salt`` (empty unless the scenario was rescaled).
"""

from __future__ import annotations

import copy
import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .errors import ConfigError
from .market import MarketParams, StockMeta

SCHEMA_VERSION = 1
STAGES = ("generate", "train", "attack", "realize", "transfer", "feedback", "defend", "report")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1.0e6`` (no exponent sign) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def read_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def sub_seed(master: int, name: str, salt: str = "") -> int:
    digest = hashlib.sha256(f"{master}/{salt}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _get(d: dict, key: str, path: str, default: Any = ..., kind=None):
    if key not in d:
        if default is ...:
            raise ConfigError("missing required key", f"{path}.{key}".lstrip("."))
        return default
    val = d[key]
    if kind is not None and val is not None:
        try:
            val = kind(val)
        except (TypeError, ValueError):
            raise ConfigError(f"expected {kind.__name__}, got {val!r}", f"{path}.{key}".lstrip(".")) from None
    return val


def _section(d: dict, key: str, required: bool = True) -> dict:
    sec = d.get(key)
    if sec is None:
        if required:
            raise ConfigError("missing required section", key)
        return {}
    if not isinstance(sec, dict):
        raise ConfigError("expected a mapping", key)
    return sec


@dataclass
class ScenarioConfig:
    """Validated view over the raw YAML mapping (kept in ``raw``)."""

    raw: dict
    seed: int
    salt: str
    stocks: list[StockMeta]
    initial_prices: np.ndarray
    market: MarketParams
    index_members: list[str]
    index_base: float
    thresholds: dict
    surrogate: dict
    victims: list[dict]
    attack: dict
    agents: dict
    defenses: dict
    success: dict
    source: Path | None = field(default=None, compare=False)

    def seed_for(self, name: str) -> int:
        return sub_seed(self.seed, name, self.salt)

    @property
    def tickers(self) -> list[str]:
        return [m.ticker for m in self.stocks]

    def hash(self) -> str:
        return hashlib.sha256(dump_yaml(self.raw).encode()).hexdigest()


def dump_yaml(raw: dict) -> str:
    return yaml.safe_dump(raw, sort_keys=True, default_flow_style=None)


def load_config(path: str | Path, seed: int | None = None) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = read_yaml(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if seed is not None:
        raw = copy.deepcopy(raw)
        raw["seed"] = int(seed)
    cfg = parse_config(raw)
    cfg.source = path
    return cfg


def _cov_factor(msec: dict, n: int) -> np.ndarray:
    if "cov_factor" in msec:
        L = np.asarray(msec["cov_factor"], dtype=float)
        if L.shape != (n, n):
            raise ConfigError(f"must be {n}x{n}", "market.cov_factor")
        return L
    vols = np.broadcast_to(np.asarray(_get(msec, "vol", "market"), dtype=float), (n,))
    rho = _get(msec, "correlation", "market", 0.0, float)
    if not -1.0 / max(n - 1, 1) < rho < 1.0 and n > 1:
        raise ConfigError("correlation must keep the matrix positive definite", "market.correlation")
    corr = np.full((n, n), rho)
    np.fill_diagonal(corr, 1.0)
    cov = corr * np.outer(vols, vols)
    if np.all(vols > 0):
        return np.linalg.cholesky(cov)
    return np.diag(vols)


def parse_config(raw: dict) -> ScenarioConfig:
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})", "schema_version")
    seed = _get(raw, "seed", "", kind=int)
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
    salt = str(_section(raw, "derivation", required=False).get("salt", ""))

    stock_list = raw.get("stocks")
    if not isinstance(stock_list, list) or not stock_list:
        raise ConfigError("expected a non-empty list", "stocks")
    stocks, prices = [], []
    for k, s in enumerate(stock_list):
        path = f"stocks[{k}]"
        try:
            stocks.append(StockMeta(str(_get(s, "ticker", path)), _get(s, "shares_outstanding", path, kind=float),
                                    _get(s, "adv", path, kind=float), _get(s, "lambda_impact", path, kind=float),
                                    _get(s, "half_spread", path, 0.0, float)))
        except ConfigError as exc:
            raise ConfigError(str(exc), path) if exc.key_path is None else exc
        prices.append(_get(s, "initial_price", path, 100.0, float))
    tickers = [m.ticker for m in stocks]
    if len(set(tickers)) != len(tickers):
        raise ConfigError("tickers must be unique", "stocks")

    msec = _section(raw, "market")
    n = len(stocks)
    drift = np.broadcast_to(np.asarray(_get(msec, "drift", "market", 0.0), dtype=float), (n,))
    market = MarketParams(n, _get(msec, "n_steps", "market", kind=int), drift, _cov_factor(msec, n),
                          sub_seed(seed, "generate", salt), np.array(prices))

    isec = _section(raw, "index", required=False)
    members = list(isec.get("members") or tickers)
    unknown = [t for t in members if t not in tickers]
    if unknown:
        raise ConfigError(f"unknown tickers {unknown}", "index.members")

    thresholds = _section(raw, "thresholds")
    if not _get(thresholds, "sell", "thresholds", kind=float) < 0 < _get(thresholds, "buy", "thresholds", kind=float):
        raise ConfigError("need sell < 0 < buy", "thresholds")

    surrogate = _section(raw, "surrogate")
    for key in ("kind", "W"):
        _get(surrogate, key, "surrogate")
    victims_raw = raw.get("victims")
    if not isinstance(victims_raw, list) or not victims_raw:
        raise ConfigError("expected a non-empty list", "victims")
    victims = []
    for k, v in enumerate(victims_raw):
        path = f"victims[{k}]"
        seeds = v.get("seeds", [v.get("seed")])
        for s in seeds:
            if s is None:
                raise ConfigError("need seed or seeds", path)
            victims.append({"kind": _get(v, "kind", path), "W": _get(v, "W", path, kind=int),
                            "H": _get(v, "H", path, 0, int), "seed": int(s), "train": dict(v.get("train", {}))})
    for v in [surrogate, *victims]:
        if v["kind"] not in ("linear", "mlp"):
            raise ConfigError(f"unknown model kind {v['kind']!r}", "victims/surrogate.kind")

    attack = _section(raw, "attack")
    for key, kind in (("eps", float), ("horizon", int), ("sparsity_k", int), ("budget", float),
                      ("per_stock_budget", float)):
        attack[key] = _get(attack, key, "attack", kind=kind)
    if attack["horizon"] > surrogate["W"]:
        raise ConfigError("horizon must not exceed the surrogate window", "attack.horizon")
    if not 1 <= attack["sparsity_k"] <= n:
        raise ConfigError(f"must lie in [1, {n}]", "attack.sparsity_k")
    if attack.get("method", "fgsm") not in ("fgsm", "iterative", "diachronic"):
        raise ConfigError("must be fgsm, iterative or diachronic", "attack.method")

    agents = _section(raw, "agents")
    for key, kind in (("capital", float), ("sell_fraction", float), ("phi", float), ("horizon", int)):
        agents[key] = _get(agents, key, "agents", kind=kind)
    if not 0 <= agents["phi"] <= 1:
        raise ConfigError("must lie in [0, 1]", "agents.phi")
    defenses = _section(raw, "defenses", required=False)
    success = _section(raw, "success")
    for key in ("transfer_fraction", "drop_pct", "horizon_steps"):
        _get(success, key, "success")

    return ScenarioConfig(raw, seed, salt, stocks, np.array(prices), market, members,
                          float(isec.get("base", 1000.0)), thresholds, surrogate, victims, attack, agents,
                          defenses, success)


def scale_scenario(cfg: ScenarioConfig, factor: float) -> ScenarioConfig:
    """Shrink the market to ``ceil(factor * N)`` stocks, dropping the smallest caps first.

    The attack budget scales with ``factor``, ``sparsity_k`` is clipped to
    the new N and seeds are re-derived by recording the factor as the salt.
    """
    if not 0 < factor <= 1:
        raise ConfigError("scale factor must lie in (0, 1]")
    raw = copy.deepcopy(cfg.raw)
    n = len(cfg.stocks)
    keep_n = math.ceil(factor * n - 1e-12)
    if keep_n < 1:
        raise ConfigError("scaled market would have no stocks")
    caps = np.array([m.shares_outstanding for m in cfg.stocks]) * cfg.initial_prices
    order = sorted(range(n), key=lambda i: (-caps[i], i))
    keep = sorted(order[:keep_n])
    raw["stocks"] = [raw["stocks"][i] for i in keep]
    if "cov_factor" in raw["market"]:
        L = np.asarray(raw["market"]["cov_factor"], dtype=float)
        cov = (L @ L.T)[np.ix_(keep, keep)]
        try:
            raw["market"]["cov_factor"] = np.linalg.cholesky(cov).tolist()
        except np.linalg.LinAlgError:
            raw["market"]["cov_factor"] = L[np.ix_(keep, keep)].tolist()
    for key in ("vol", "drift"):
        val = raw["market"].get(key)
        if isinstance(val, list):
            raw["market"][key] = [val[i] for i in keep]
    kept = {cfg.stocks[i].ticker for i in keep}
    if raw.get("index", {}).get("members"):
        raw["index"]["members"] = [t for t in raw["index"]["members"] if t in kept]
        if not raw["index"]["members"]:
            raise ConfigError("scaled index would have no members", "index.members")
    raw["attack"]["budget"] = float(raw["attack"]["budget"]) * factor
    raw["attack"]["sparsity_k"] = min(int(raw["attack"]["sparsity_k"]), keep_n)
    raw["derivation"] = {"salt": f"scale={factor!r}", "scaled_from": cfg.hash()[:12]}
    return parse_config(raw)
