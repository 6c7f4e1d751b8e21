"""Turn planned log-return perturbations into trades and execute them."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attacks import AttackSpec, DiachronicPlan, plan_diachronic
from .errors import InfeasibleTarget, PlanError, TradeRejected
from .forecasting import ForecastModel
from .market import (DEFAULT_MOVE_CAP, Market, StockMeta, classify_manipulable, invert_impact,
                     price_impact, trade_cost)


class Outcome(str, enum.Enum):
    REALIZED = "REALIZED"
    PARTIAL = "PARTIAL"
    ABORTED = "ABORTED"


@dataclass(frozen=True)
class Order:
    step: int
    ticker: str
    shares: float
    target_frac: float
    est_cost: float


@dataclass
class TradePlan:
    orders: list[Order]
    total_budget: float
    n_steps: int
    est_cost: float = 0.0

    def __post_init__(self):
        steps = [o.step for o in self.orders]
        if steps != sorted(steps):
            raise PlanError("orders must be sorted by step")
        if any(not 0 <= s < self.n_steps for s in steps):
            raise PlanError("order step outside the plan horizon")

    @property
    def tickers(self) -> list[str]:
        return sorted({o.ticker for o in self.orders})


def compile_plan(targets, prices, meta: Sequence[StockMeta], budget: float,
                 cap: float = DEFAULT_MOVE_CAP) -> TradePlan:
    """Orders realizing ``targets`` (``steps x N`` log-returns), priced from ``prices``.

    Prices are rolled forward assuming no exogenous moves, so the cost
    estimate is exactly what :func:`realize` spends on a quiet market.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if targets.shape[1] != len(meta):
        raise PlanError(f"targets have {targets.shape[1]} columns for {len(meta)} stocks")
    p = np.array(prices, dtype=float)
    orders, est = [], 0.0
    for s, row in enumerate(targets):
        for i, d in enumerate(row):
            if d == 0:
                continue
            m = meta[i]
            f = math.expm1(d)
            try:
                q = invert_impact(m, p[i], f, cap)
            except InfeasibleTarget as exc:
                raise PlanError(str(exc)) from None
            cost = trade_cost(m, p[i], q)
            orders.append(Order(s, m.ticker, q, f, cost))
            est += cost
            p[i] = p[i] + price_impact(m, p[i], q)
    if est > budget:
        raise PlanError(f"estimated cost {est:.2f} exceeds budget {budget:.2f} by {est - budget:.2f}",
                        shortfall=est - budget)
    return TradePlan(orders, budget, targets.shape[0], est)


@dataclass(frozen=True)
class FillRow:
    step: int
    ticker: str
    attempt: int
    shares: float
    target_frac: float
    achieved_frac: float
    cost: float


@dataclass
class ExecutionReport:
    rows: list[FillRow]
    residual_max: float
    total_spend: float
    outcome: Outcome
    tolerance: float
    budget: float
    start_step: int
    order_residuals: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"outcome": self.outcome.value, "residual_max": self.residual_max,
                "total_spend": self.total_spend, "tolerance": self.tolerance, "budget": self.budget,
                "start_step": self.start_step, "n_fills": len(self.rows),
                "fills": [r.__dict__ for r in self.rows]}

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "ticker", "target_frac", "achieved_frac", "cost"])
            for r in self.rows:
                w.writerow([r.step, r.ticker, repr(r.target_frac), repr(r.achieved_frac), repr(r.cost)])


class _Executor:
    """Executes orders against a live market and books fills."""

    def __init__(self, market: Market, budget: float, tolerance: float, retries: int, cap: float):
        self.market = market
        self.budget = budget
        self.tolerance = tolerance
        self.retries = retries
        self.cap = cap
        self.rows: list[FillRow] = []
        self.costs: list[float] = []
        self.residuals: list[float] = []
        self.spend = 0.0
        self.aborted = False
        self.partial = False

    def _trade(self, step: int, meta: StockMeta, q: float, attempt: int, p_ref: float, f: float) -> bool:
        i = self.market.state.tickers.index(meta.ticker)
        cost = trade_cost(meta, float(self.market.prices[i]), q)
        if self.spend + cost > self.budget:
            self.aborted = True
            return False
        try:
            fill = self.market.execute(meta.ticker, q, source="attacker")
        except TradeRejected:
            self.partial = True
            return False
        self.spend += fill.cost
        self.costs.append(fill.cost)
        achieved = (float(self.market.prices[i]) - p_ref) / p_ref
        self.rows.append(FillRow(step, meta.ticker, attempt, q, f, achieved, fill.cost))
        return True

    def order(self, step: int, meta: StockMeta, q: float, f: float, p_ref: float) -> None:
        """First the precompiled trade, then up to ``retries`` corrections."""
        if self.aborted:
            return
        i = self.market.state.tickers.index(meta.ticker)
        if not self._trade(step, meta, q, 0, p_ref, f):
            return
        target_price = p_ref * (1.0 + f)
        for attempt in range(1, self.retries + 1):
            p = float(self.market.prices[i])
            if abs((p - p_ref) / p_ref - f) <= self.tolerance:
                break
            try:
                q_fix = invert_impact(meta, p, target_price / p - 1.0, self.cap)
            except InfeasibleTarget:
                break
            if not self._trade(step, meta, q_fix, attempt, p_ref, f):
                return
        self.residuals.append(abs((float(self.market.prices[i]) - p_ref) / p_ref - f))

    def report(self, start_step: int) -> ExecutionReport:
        residual = max(self.residuals, default=0.0)
        if self.aborted:
            outcome = Outcome.ABORTED
        elif self.partial or residual > self.tolerance or self.spend > self.budget:
            outcome = Outcome.PARTIAL
        else:
            outcome = Outcome.REALIZED
        return ExecutionReport(self.rows, residual, self.spend, outcome, self.tolerance, self.budget,
                               start_step, list(self.residuals))


def realize(plan: TradePlan, market: Market, noise=None, tolerance: float = 1e-4,
            max_retries: int = 2, cap: float = DEFAULT_MOVE_CAP) -> ExecutionReport:
    """Execute ``plan`` over ``plan.n_steps`` new market steps.

    Each step first applies the exogenous returns in ``noise`` (``steps x N``),
    then the step's orders.  An order targets the price ``p_ref * (1 + f)``
    where ``p_ref`` is the stock's price at the end of the previous step; if
    exogenous moves leave it off target by more than ``tolerance``, up to
    ``max_retries`` corrective trades follow.  A trade that would overrun the
    budget is not applied and the run is ABORTED; the market still advances
    through the remaining steps without attacker trades.
    """
    N = len(market.meta)
    noise = np.zeros((plan.n_steps, N)) if noise is None else np.asarray(noise, dtype=float)
    ex = _Executor(market, plan.total_budget, tolerance, max_retries, cap)
    start = market.step + 1
    k = 0
    for s in range(plan.n_steps):
        p_ref = market.prices.copy()
        market.advance(noise[s])
        while k < len(plan.orders) and plan.orders[k].step == s:
            o = plan.orders[k]
            i = market.state.tickers.index(o.ticker)
            ex.order(start + s, market.meta[i], o.shares, o.target_frac, float(p_ref[i]))
            k += 1
    return ex.report(start)


def realize_diachronic(model: ForecastModel, history, spec: AttackSpec, horizon: int, market: Market,
                       budget: float, per_stock_budget: float, noise=None, tolerance: float = 1e-4,
                       max_retries: int = 2, cap: float = DEFAULT_MOVE_CAP,
                       on_step: Callable[[int, Market], None] | None = None
                       ) -> tuple[DiachronicPlan, ExecutionReport]:
    """Receding-horizon attack executed step by step against ``market``.

    Before each step the masked stocks are re-checked for manipulability at
    the current prices and liquidity; ``on_step(s, market)`` runs first and
    may script exogenous changes (for instance a liquidity shock).
    """
    N = len(market.meta)
    noise = np.zeros((horizon, N)) if noise is None else np.asarray(noise, dtype=float)
    ex = _Executor(market, budget, tolerance, max_retries, cap)
    start = market.step + 1
    eps_frac = math.expm1(spec.eps)

    def still_manipulable(s):
        if on_step is not None:
            on_step(s, market)
        return classify_manipulable(market.meta, market.prices, eps_frac, per_stock_budget)

    def observe(s, row):
        p_ref = market.prices.copy()
        market.advance(noise[s])
        for i in np.flatnonzero(row):
            m = market.meta[i]
            f = math.expm1(row[i])
            try:
                # sized as if the market had not moved; corrections absorb the rest
                q = invert_impact(m, float(p_ref[i]), f, cap)
            except InfeasibleTarget:
                ex.partial = True
                continue
            ex.order(start + s, m, q, f, float(p_ref[i]))
        return market.window(1)[0]

    plan = plan_diachronic(model, history, spec, horizon, observe=observe, still_manipulable=still_manipulable)
    for s in range(market.step - start + 1, horizon):
        market.advance(noise[s])
    report = ex.report(start)
    if plan.status == "FAILED" and report.outcome is Outcome.REALIZED:
        report.outcome = Outcome.PARTIAL
    return plan, report
