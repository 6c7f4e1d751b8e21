"""Model-following traders whose selling feeds back into prices."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .forecasting import Action, ForecastModel, Thresholds, predict
from .market import IndexSpec, Market, index_series


@dataclass
class Follower:
    model: ForecastModel
    capital: float
    sell_fraction: float = 0.5
    thresholds: Thresholds = Thresholds()

    def __post_init__(self):
        if self.capital < 0:
            raise ValueError("capital must be non-negative")
        if not 0 <= self.sell_fraction <= 1:
            raise ValueError("sell_fraction must lie in [0, 1]")


@dataclass
class AgentPopulation:
    """Followers plus ``phi``, the model-following share of participation.

    A follower's position is worth ``phi * capital`` at initialisation, so
    ``phi = 0`` removes all feedback and capital scales volume linearly.
    """

    followers: list[Follower]
    phi: float = 1.0
    recovery: bool = False

    def __post_init__(self):
        if not 0 <= self.phi <= 1:
            raise ValueError("phi must lie in [0, 1]")


@dataclass
class Holdings:
    shares: np.ndarray  # followers x N
    initial: np.ndarray

    @classmethod
    def index_proportional(cls, population: AgentPopulation, market: Market, spec: IndexSpec) -> "Holdings":
        """Cap-weighted positions in the index members at current prices."""
        members = set(spec.members)
        caps = np.array([m.shares_outstanding * p if m.ticker in members else 0.0
                         for m, p in zip(market.meta, market.prices)])
        weights = caps / caps.sum()
        value = np.array([[population.phi * f.capital] for f in population.followers]).reshape(-1, 1)
        shares = value * weights / market.prices
        return cls(shares, shares.copy())


@dataclass
class AgentStep:
    signals: list[Action]
    volumes: np.ndarray  # net shares traded per stock (negative = sold)
    dp: np.ndarray
    follower_volumes: np.ndarray  # shares per follower (signed, summed over stocks)


def step_agents(population: AgentPopulation, holdings: Holdings, market: Market,
                windows: Sequence[np.ndarray] | None = None) -> AgentStep:
    """Trade on the followers' signals within the market's current step.

    Every SELL follower liquidates ``sell_fraction`` of each position.  The
    aggregate per stock passes through the impact model once; if it would
    exceed the market's single-trade cap it is scaled down and every seller
    keeps the unsold remainder.  With ``recovery`` enabled, BUY followers buy
    back the same fraction of what they have sold so far.
    """
    if windows is None:
        windows = [market.window(f.model.W) for f in population.followers]
    n_f, N = holdings.shares.shape
    orders = np.zeros((n_f, N))
    signals = []
    for j, (f, w) in enumerate(zip(population.followers, windows)):
        sig = predict(f.model, w[-f.model.W:], f.thresholds)
        signals.append(sig.action)
        if sig.action is Action.SELL:
            orders[j] = -f.sell_fraction * holdings.shares[j]
        elif sig.action is Action.BUY and population.recovery:
            orders[j] = f.sell_fraction * (holdings.initial[j] - holdings.shares[j])
    agg = orders.sum(axis=0)
    dp = np.zeros(N)
    executed = np.zeros(N)
    for i, m in enumerate(market.meta):
        q = agg[i]
        if q == 0.0:
            continue
        limit = market.move_cap * m.adv / m.lambda_impact
        scale = 1.0 if abs(q) <= limit else limit / abs(q)
        fill = market.execute(m.ticker, q * scale, source="agent")
        dp[i] = fill.dp
        executed[i] = fill.shares
        orders[:, i] *= scale
    holdings.shares += orders
    # tiny negative residue from rounding must not read as a short position
    np.maximum(holdings.shares, 0.0, out=holdings.shares)
    return AgentStep(signals, executed, dp, orders.sum(axis=1))


@dataclass
class FeedbackResult:
    index_path: np.ndarray  # index at the starting step followed by one value per step
    steps: np.ndarray
    events: list[tuple[int, int, str, float, float]] = field(default_factory=list)
    drawdown: float = 0.0
    sell_steps: list[int] = field(default_factory=list)

    def events_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "agent_id", "signal", "volume", "index_value"])
            for row in self.events:
                w.writerow([row[0], row[1], row[2], repr(row[3]), repr(row[4])])


def run_feedback(population: AgentPopulation, market: Market, spec: IndexSpec, horizon: int,
                 noise=None, holdings: Holdings | None = None, prefix=None) -> FeedbackResult:
    """Simulate ``horizon`` steps of exogenous moves followed by agent reactions.

    Followers decide on the window of completed returns, the market then opens
    the next step with its exogenous returns and the followers' orders execute
    in it.  ``prefix`` optionally prepends earlier index values (for example
    the attack phase) so the drawdown covers them as well.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    N = len(market.meta)
    noise = np.zeros((horizon, N)) if noise is None else np.asarray(noise, dtype=float)
    if holdings is None:
        holdings = Holdings.index_proportional(population, market, spec)
    path = [float(index_series(market.prices, spec, market.meta))]
    steps = [market.step]
    events = []
    sell_steps = []
    for k in range(horizon):
        windows = [market.window(f.model.W) for f in population.followers]
        market.advance(noise[k])
        res = step_agents(population, holdings, market, windows)
        level = float(index_series(market.prices, spec, market.meta))
        path.append(level)
        steps.append(market.step)
        if any(a is Action.SELL for a in res.signals):
            sell_steps.append(market.step)
        for j, a in enumerate(res.signals):
            events.append((market.step, j, a.value, float(res.follower_volumes[j]), level))
    full = np.array(path) if prefix is None else np.concatenate([np.asarray(prefix, dtype=float), path[1:]])
    return FeedbackResult(np.array(path), np.array(steps), events, max_drawdown(full), sell_steps)


def max_drawdown(path) -> float:
    """Largest peak-to-trough fractional decline along ``path``."""
    path = np.ascontiguousarray(path, dtype=float)
    if path.size == 0:
        return 0.0
    return float(_kernels.max_drawdown(path))
