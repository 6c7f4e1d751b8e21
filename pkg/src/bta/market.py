"""Synthetic correlated market, cap-weighted index and linear-impact execution."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InfeasibleTarget, MarketGenerationError, TradeRejected

DEFAULT_MOVE_CAP = 0.05


@dataclass(frozen=True)
class StockMeta:
    ticker: str
    shares_outstanding: float
    adv: float
    lambda_impact: float
    half_spread: float = 0.0

    def __post_init__(self):
        if not self.ticker:
            raise ConfigError("ticker must be non-empty")
        if not self.shares_outstanding > 0:
            raise ConfigError(f"{self.ticker}: shares_outstanding must be > 0")
        if not self.adv > 0:
            raise ConfigError(f"{self.ticker}: adv must be > 0")
        if not self.lambda_impact > 0:
            raise ConfigError(f"{self.ticker}: lambda_impact must be > 0")
        if not 0 <= self.half_spread < 0.05:
            raise ConfigError(f"{self.ticker}: half_spread must lie in [0, 0.05)")


@dataclass
class MarketParams:
    n_stocks: int
    n_steps: int
    drift: np.ndarray
    cov_factor: np.ndarray
    seed: int
    initial_prices: np.ndarray | None = None

    def __post_init__(self):
        self.drift = np.broadcast_to(np.asarray(self.drift, dtype=float), (self.n_stocks,)).copy()
        self.cov_factor = np.atleast_2d(np.asarray(self.cov_factor, dtype=float))
        if self.initial_prices is None:
            self.initial_prices = np.full(self.n_stocks, 100.0)
        else:
            self.initial_prices = np.broadcast_to(
                np.asarray(self.initial_prices, dtype=float), (self.n_stocks,)
            ).copy()
        self.validate()

    def validate(self) -> None:
        n = self.n_stocks
        if n < 1 or self.n_steps < 1:
            raise ConfigError("n_stocks and n_steps must be >= 1")
        if not np.all(np.isfinite(self.drift)):
            raise ConfigError("drift must be finite")
        L = self.cov_factor
        if L.shape != (n, n):
            raise ConfigError(f"cov_factor must be {n}x{n}, got {L.shape}")
        if np.any(np.triu(L, 1) != 0):
            raise ConfigError("cov_factor must be lower-triangular")
        # zero diagonal entries are allowed so degenerate (e.g. perfectly
        # correlated or zero-volatility) markets can be expressed
        if np.any(np.diag(L) < 0) or not np.all(np.isfinite(L)):
            raise ConfigError("cov_factor diagonal must be non-negative and finite")
        if not np.all(self.initial_prices > 0):
            raise ConfigError("initial prices must be positive")


@dataclass
class PricePanel:
    prices: np.ndarray
    tickers: list[str]
    t0: int = 0

    def __post_init__(self):
        self.prices = np.atleast_2d(np.asarray(self.prices, dtype=float))
        self.tickers = list(self.tickers)
        if self.prices.shape[1] != len(self.tickers):
            raise ConfigError("price matrix width does not match ticker count")
        if len(set(self.tickers)) != len(self.tickers):
            raise ConfigError("tickers must be unique")
        if not np.all(self.prices > 0):
            raise ConfigError("all prices must be positive")

    @property
    def n_steps(self) -> int:
        return self.prices.shape[0]

    @property
    def n_stocks(self) -> int:
        return self.prices.shape[1]

    def log_returns(self) -> np.ndarray:
        """Row ``s-1`` holds log(p_s / p_{s-1}); shape (T-1, N)."""
        return np.diff(np.log(self.prices), axis=0)

    def column(self, ticker: str) -> int:
        try:
            return self.tickers.index(ticker)
        except ValueError:
            raise ConfigError(f"unknown ticker {ticker!r}") from None

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", *self.tickers])
            for r, row in enumerate(self.prices):
                w.writerow([self.t0 + r, *(f"{p:.10g}" for p in row)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "PricePanel":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[0] != "step":
            raise ConfigError(f"{path}: first column must be 'step'")
        steps = [int(r[0]) for r in body]
        prices = np.array([[float(v) for v in r[1:]] for r in body])
        return cls(prices, header[1:], t0=steps[0] if steps else 0)


def generate_market(params: MarketParams, meta: Sequence[StockMeta]) -> PricePanel:
    """Simulate a correlated geometric random walk.

    ``log p[t+1] = log p[t] + drift + L @ z`` with ``z`` standard normal drawn
    from ``numpy.random.default_rng(seed)``; row 0 holds the initial prices
    exactly and later rows are ``p0 * exp(cumulative log-return)``.
    """
    if len(meta) != params.n_stocks:
        raise ConfigError(f"expected {params.n_stocks} StockMeta entries, got {len(meta)}")
    rng = np.random.default_rng(params.seed)
    T, N = params.n_steps, params.n_stocks
    z = rng.standard_normal((T - 1, N))
    with np.errstate(over="ignore", invalid="ignore"):
        steps = params.drift + z @ params.cov_factor.T
        cum = np.vstack([np.zeros(N), np.cumsum(steps, axis=0)])
        prices = params.initial_prices * np.exp(cum)
    bad = ~np.all(np.isfinite(prices) & (prices > 0), axis=1)
    if bad.any():
        raise MarketGenerationError(
            f"non-finite price at step {int(np.argmax(bad))}; drift or volatility too extreme"
        )
    return PricePanel(prices, [m.ticker for m in meta])


# --------------------------------------------------------------------------
# Index
# --------------------------------------------------------------------------


@dataclass
class IndexSpec:
    members: list[str]
    divisor: float

    def __post_init__(self):
        if not self.members:
            raise ConfigError("index must have at least one member")
        if not self.divisor > 0:
            raise ConfigError("index divisor must be positive")

    @classmethod
    def with_base(cls, prices: np.ndarray, meta: Sequence[StockMeta], members: Sequence[str] | None = None,
                  base: float = 1000.0) -> "IndexSpec":
        """Choose the divisor so the index equals ``base`` at the given price vector."""
        members = list(members) if members is not None else [m.ticker for m in meta]
        weights = _share_weights(meta, members)
        return cls(members, float(weights @ np.asarray(prices, dtype=float)) / base)


def _share_weights(meta: Sequence[StockMeta], members: Sequence[str]) -> np.ndarray:
    tickers = [m.ticker for m in meta]
    unknown = [t for t in members if t not in tickers]
    if unknown:
        raise ConfigError(f"index members not in market: {unknown}")
    member_set = set(members)
    return np.array([m.shares_outstanding if m.ticker in member_set else 0.0 for m in meta])


def index_series(prices: np.ndarray, spec: IndexSpec, meta: Sequence[StockMeta]) -> np.ndarray:
    """Index level for every row of a price matrix (columns ordered like ``meta``)."""
    return np.asarray(prices, dtype=float) @ _share_weights(meta, spec.members) / spec.divisor


def index_value(panel: PricePanel, spec: IndexSpec, meta: Sequence[StockMeta], t: int) -> float:
    if not 0 <= t - panel.t0 < panel.n_steps:
        raise ConfigError(f"step {t} outside panel")
    if [m.ticker for m in meta] != panel.tickers:
        raise ConfigError("meta order must match panel tickers")
    return float(index_series(panel.prices[t - panel.t0], spec, meta))


# --------------------------------------------------------------------------
# Impact and execution
# --------------------------------------------------------------------------


@dataclass
class MarketState:
    tickers: list[str]
    prices: np.ndarray
    spend: float = 0.0
    step: int = 0

    def __post_init__(self):
        self.prices = np.array(self.prices, dtype=float)
        if not np.all(self.prices > 0):
            raise ConfigError("market prices must be positive")


@dataclass(frozen=True)
class Fill:
    ticker: str
    shares: float
    price_before: float
    dp: float
    cost: float

    @property
    def frac(self) -> float:
        return self.dp / self.price_before


def price_impact(meta: StockMeta, p: float, q: float) -> float:
    return p * meta.lambda_impact * (q / meta.adv)


def trade_cost(meta: StockMeta, p: float, q: float) -> float:
    """Half-spread plus half the permanent impact, in currency."""
    dp = price_impact(meta, p, q)
    return abs(q) * p * meta.half_spread + abs(q) * abs(dp) / 2


def execute_trade(state: MarketState, meta: StockMeta, q: float, attacker: bool = True) -> Fill:
    """Apply ``q`` signed shares to the stock and return the fill.

    Only attacker trades accrue to ``state.spend``.
    """
    if not math.isfinite(q):
        raise TradeRejected(f"{meta.ticker}: non-finite quantity {q}")
    try:
        i = state.tickers.index(meta.ticker)
    except ValueError:
        raise ConfigError(f"unknown ticker {meta.ticker!r}") from None
    p = float(state.prices[i])
    dp = price_impact(meta, p, q)
    if p + dp <= 0:
        raise TradeRejected(f"{meta.ticker}: trade of {q:g} shares would drive price to {p + dp:g}")
    cost = trade_cost(meta, p, q)
    state.prices[i] = p + dp
    if attacker:
        state.spend += cost
    return Fill(meta.ticker, float(q), p, dp, cost)


def invert_impact(meta: StockMeta, p: float, f: float, cap: float = DEFAULT_MOVE_CAP) -> float:
    """Signed shares that move the price by exactly ``f * p``."""
    if abs(f) > cap:
        raise InfeasibleTarget(f"{meta.ticker}: requested move {f:.4g} exceeds cap {cap:g}")
    return f * meta.adv / meta.lambda_impact


def move_cost(meta: StockMeta, p: float, f: float) -> float:
    """Cost of moving the price by fraction ``f`` (no cap applied)."""
    return trade_cost(meta, p, f * meta.adv / meta.lambda_impact)


def classify_manipulable(meta: Sequence[StockMeta], prices, eps_max: float,
                         per_stock_budget: float) -> np.ndarray:
    """Boolean mask of stocks whose ``eps_max`` move costs no more than the budget."""
    if not eps_max > 0 or per_stock_budget < 0:
        raise ConfigError("eps_max must be > 0 and budget >= 0")
    prices = np.asarray(prices, dtype=float)
    return np.array([move_cost(m, float(p), eps_max) <= per_stock_budget for m, p in zip(meta, prices)],
                    dtype=bool)


# --------------------------------------------------------------------------
# Live market
# --------------------------------------------------------------------------


@dataclass
class TradeRecord:
    step: int
    ticker: str
    shares: float
    source: str  # "attacker", "agent" or "background"


@dataclass
class Market:
    """A mutable market continuing from a price history.

    Exogenous returns are applied with :meth:`advance`; each one is also
    booked as background net order flow of ``(e^r - 1) * ADV / lambda`` shares,
    the volume that would have produced it under the same impact model.
    """

    meta: list[StockMeta]
    history: PricePanel
    move_cap: float = DEFAULT_MOVE_CAP
    state: MarketState = field(init=False)
    rows: list[np.ndarray] = field(init=False)
    trades: list[TradeRecord] = field(init=False, default_factory=list)

    def __post_init__(self):
        self.meta = list(self.meta)
        if [m.ticker for m in self.meta] != self.history.tickers:
            raise ConfigError("meta order must match panel tickers")
        self.rows = [r.copy() for r in self.history.prices]
        self.state = MarketState(list(self.history.tickers), self.rows[-1].copy(),
                                 step=self.history.t0 + len(self.rows) - 1)
        self._by_ticker = {m.ticker: m for m in self.meta}

    @property
    def step(self) -> int:
        return self.state.step

    @property
    def prices(self) -> np.ndarray:
        return self.state.prices

    @property
    def spend(self) -> float:
        return self.state.spend

    def meta_for(self, ticker: str) -> StockMeta:
        try:
            return self._by_ticker[ticker]
        except KeyError:
            raise ConfigError(f"unknown ticker {ticker!r}") from None

    def replace_meta(self, ticker: str, **changes) -> StockMeta:
        """Swap in new parameters for one stock, e.g. a liquidity shock on ``adv``."""
        old = self.meta_for(ticker)
        new = replace(old, **changes)
        self.meta[self.meta.index(old)] = new
        self._by_ticker[ticker] = new
        return new

    def advance(self, returns=None) -> None:
        """Open a new step, applying exogenous log-returns (zeros if omitted)."""
        n = len(self.meta)
        r = np.zeros(n) if returns is None else np.asarray(returns, dtype=float)
        self.state.step += 1
        self.state.prices = self.state.prices * np.exp(r)
        for m, ri in zip(self.meta, r):
            if ri != 0.0:
                self.trades.append(TradeRecord(self.state.step, m.ticker,
                                               math.expm1(ri) * m.adv / m.lambda_impact, "background"))
        self.rows.append(self.state.prices.copy())

    def execute(self, ticker: str, q: float, source: str = "attacker") -> Fill:
        fill = execute_trade(self.state, self.meta_for(ticker), q, attacker=(source == "attacker"))
        if q != 0.0:
            self.trades.append(TradeRecord(self.state.step, ticker, float(q), source))
        self.rows[-1] = self.state.prices.copy()
        return fill

    def panel(self) -> PricePanel:
        return PricePanel(np.array(self.rows), self.history.tickers, self.history.t0)

    def window(self, W: int) -> np.ndarray:
        """Last ``W`` rows of log-returns ending at the current step."""
        if len(self.rows) < W + 1:
            raise ConfigError(f"need {W + 1} price rows for a window of {W}")
        return np.diff(np.log(np.array(self.rows[-(W + 1):])), axis=0)

    def net_volumes(self, sources: Sequence[str] | None = None, start: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Per-step net signed volume per stock as ``(steps, volumes)``."""
        first = self.history.t0 + self.history.n_steps if start is None else start
        steps = np.arange(first, self.state.step + 1)
        vol = np.zeros((steps.size, len(self.meta)))
        col = {t: i for i, t in enumerate(self.history.tickers)}
        for tr in self.trades:
            if (sources is None or tr.source in sources) and tr.step >= first:
                vol[tr.step - first, col[tr.ticker]] += tr.shares
        return steps, vol
