"""Gradient-sign attacks on forecasting models.

All attacks push the prediction in ``spec.direction`` (``-1``: downward, the
sell-off goal) and only ever touch coordinates allowed by ``spec.mask``.
``sign(0) = 0`` throughout, so coordinates with zero gradient stay untouched.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import AttackError, ContractError
from .forecasting import ForecastModel, input_gradient, input_gradient_batch, predict_batch


class Mode(str, enum.Enum):
    UNTARGETED = "untargeted"
    TARGETED = "targeted"


@dataclass
class AttackSpec:
    eps: float
    mask: np.ndarray
    mode: Mode = Mode.UNTARGETED
    target: float | None = None
    steps: int = 1
    step_size: float | None = None
    sparsity_k: int | None = None
    direction: int = -1

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise AttackError("mask must be a W x N boolean matrix")
        self.mode = Mode(self.mode)
        if self.step_size is None:
            self.step_size = self.eps
        if self.sparsity_k is None:
            self.sparsity_k = self.mask.shape[1]
        if not self.eps > 0:
            raise AttackError("eps must be > 0")
        if not self.step_size > 0:
            raise AttackError("step_size must be > 0")
        if self.steps < 1:
            raise AttackError("steps must be >= 1")
        if self.direction not in (-1, 1):
            raise AttackError("direction must be -1 or +1")
        if self.mode is Mode.TARGETED and (self.target is None or not math.isfinite(self.target)):
            raise AttackError("targeted attacks need a finite target")
        if not 1 <= self.sparsity_k <= self.mask.shape[1]:
            raise AttackError(f"sparsity_k must lie in [1, {self.mask.shape[1]}]")
        if len(self.mask_stocks) > self.sparsity_k:
            raise AttackError(f"mask touches {len(self.mask_stocks)} stocks, more than sparsity_k={self.sparsity_k}")

    @classmethod
    def full(cls, W: int, N: int, eps: float, **kw) -> "AttackSpec":
        return cls(eps, np.ones((W, N), dtype=bool), **kw)

    @property
    def mask_stocks(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.mask.any(axis=0))]

    def reached(self, y: float) -> bool:
        """Whether ``y`` is at or beyond the target in the attack direction."""
        return self.target is not None and self.direction * (y - self.target) >= 0

    def with_(self, **kw) -> "AttackSpec":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return AttackSpec(**d)


@dataclass
class Perturbation:
    delta: np.ndarray
    eps: float
    y_before: float
    y_after: float
    est_cost: float | None = None
    success_rate: float | None = None

    @property
    def support(self) -> list[tuple[int, int]]:
        return [(int(t), int(i)) for t, i in zip(*np.nonzero(self.delta))]

    @property
    def stocks(self) -> list[int]:
        return [int(i) for i in np.flatnonzero((self.delta != 0).any(axis=0))]

    def to_json(self, tickers: Sequence[str] | None = None) -> dict:
        name = (lambda i: tickers[i]) if tickers is not None else (lambda i: i)
        d = {"eps": self.eps,
             "mask_stocks": [name(i) for i in self.stocks],
             "delta": [[t, name(i), float(self.delta[t, i])] for t, i in self.support],
             "y_before": self.y_before, "y_after": self.y_after,
             "shape": list(self.delta.shape)}
        if self.est_cost is not None:
            d["est_cost"] = self.est_cost
        if self.success_rate is not None:
            d["success_rate"] = self.success_rate
        return d

    @classmethod
    def from_json(cls, d: dict, tickers: Sequence[str] | None = None) -> "Perturbation":
        delta = np.zeros(d["shape"])
        for t, i, val in d["delta"]:
            j = tickers.index(i) if tickers is not None and isinstance(i, str) else int(i)
            delta[int(t), j] = val
        return cls(delta, d["eps"], d["y_before"], d["y_after"], d.get("est_cost"), d.get("success_rate"))


def check_feasible(pert: Perturbation, spec: AttackSpec, atol: float = 0.0) -> None:
    """Raise :class:`AttackError` unless ``pert`` respects the box, mask and sparsity."""
    d = pert.delta
    if d.shape != spec.mask.shape:
        raise AttackError(f"delta shape {d.shape} does not match mask {spec.mask.shape}")
    if np.any(np.abs(d) > spec.eps + atol):
        raise AttackError("perturbation leaves the eps box")
    if np.any((d != 0) & ~spec.mask):
        raise AttackError("perturbation touches coordinates outside the mask")
    if len(pert.stocks) > spec.sparsity_k:
        raise AttackError("perturbation touches more stocks than sparsity_k")


def _check_shapes(model: ForecastModel, window: np.ndarray, spec: AttackSpec) -> np.ndarray:
    window = np.asarray(window, dtype=float).reshape(-1)
    if window.size != model.n_features or spec.mask.shape != (model.W, model.N):
        raise ContractError(f"window/mask do not match model (W={model.W}, N={model.N})")
    if not spec.mask.any():
        raise AttackError("no attackable coordinates")
    return window.reshape(model.W, model.N)


def _y(model: ForecastModel, x: np.ndarray) -> float:
    return float(predict_batch(model, x.reshape(1, -1))[0])


def fgsm(model: ForecastModel, window, spec: AttackSpec) -> Perturbation:
    """Single signed-gradient step of size eps on the masked coordinates."""
    x = _check_shapes(model, window, spec)
    g = input_gradient(model, x)
    delta = np.where(spec.mask, spec.direction * spec.eps * np.sign(g), 0.0)
    return Perturbation(delta, spec.eps, _y(model, x), _y(model, x + delta))


def iterative_attack(model: ForecastModel, window, spec: AttackSpec) -> Perturbation:
    """Projected signed-gradient iterations that never move the prediction backwards.

    A step is accepted only if it does not worsen the prediction; the loop
    stops at the first rejected step (the next gradient would be identical)
    or, for targeted attacks, as soon as the target is reached.
    """
    x = _check_shapes(model, window, spec)
    delta = np.zeros_like(x)
    y0 = y_cur = _y(model, x)
    for _ in range(spec.steps):
        g = input_gradient(model, x + delta)
        cand = np.clip(delta + spec.direction * spec.step_size * np.sign(g), -spec.eps, spec.eps)
        cand = np.where(spec.mask, cand, 0.0)
        y_c = _y(model, x + cand)
        if spec.direction * (y_c - y_cur) < 0:
            break
        delta, y_cur = cand, y_c
        if spec.mode is Mode.TARGETED and spec.reached(y_cur):
            break
    return Perturbation(delta, spec.eps, y0, y_cur)


def select_sparse_mask(model: ForecastModel, window, manipulable, costs, k: int,
                       rows=None) -> np.ndarray:
    """Greedy cost-normalised choice of at most ``k`` stocks.

    Each manipulable stock is scored by the summed absolute input gradient
    over the attackable ``rows`` divided by its cost; the ``k`` best are kept,
    ties going to the earlier column.  Returns a ``W x N`` mask.
    """
    if k < 1:
        raise AttackError("k must be >= 1")
    manipulable = np.asarray(manipulable, dtype=bool)
    costs = np.asarray(costs, dtype=float)
    candidates = np.flatnonzero(manipulable)
    if candidates.size == 0:
        raise AttackError("no manipulable stocks")
    rows = np.ones(model.W, dtype=bool) if rows is None else np.asarray(rows, dtype=bool)
    g = np.abs(input_gradient(model, window))[rows].sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(costs > 0, g / costs, np.inf)
    order = sorted(candidates, key=lambda i: (-score[i], i))
    chosen = order[:k]
    mask = np.zeros((model.W, model.N), dtype=bool)
    mask[np.ix_(np.flatnonzero(rows), chosen)] = True
    return mask


def universal_perturbation(model: ForecastModel, windows, spec: AttackSpec) -> Perturbation:
    """One perturbation meant to push every window past the target.

    Each iteration averages the per-window signed-gradient steps of the windows
    not yet past the target and applies the mean step, subject to the same
    non-worsening rule (on the mean prediction) as :func:`iterative_attack`.
    The returned perturbation is the iterate with the highest success
    fraction (latest wins ties), which is reported as ``success_rate``.
    """
    if spec.target is None:
        raise AttackError("universal perturbation needs a target")
    X = np.asarray(windows, dtype=float).reshape(-1, model.n_features)
    if X.shape[0] == 0:
        raise AttackError("need at least one window")
    _check_shapes(model, X[0], spec)
    mask = spec.mask.ravel()
    dirn = spec.direction

    def success(y):
        return dirn * (y - spec.target) >= 0

    delta = np.zeros(model.n_features)
    y = predict_batch(model, X)
    y_before = float(y.mean())
    best_rate, best_delta, best_y = float(success(y).mean()), delta, y
    for _ in range(spec.steps):
        active = ~success(y)
        if not active.any():
            break
        g = input_gradient_batch(model, X[active] + delta)
        step = (dirn * spec.step_size * np.sign(g)).mean(axis=0)
        cand = np.where(mask, np.clip(delta + step, -spec.eps, spec.eps), 0.0)
        y_c = predict_batch(model, X + cand)
        if dirn * (y_c.mean() - y.mean()) < 0:
            break
        delta, y = cand, y_c
        rate = float(success(y).mean())
        if rate >= best_rate:
            best_rate, best_delta, best_y = rate, delta, y
    pert = Perturbation(best_delta.reshape(model.W, model.N), spec.eps, y_before, float(best_y.mean()))
    pert.success_rate = best_rate
    return pert


def success_fraction(model: ForecastModel, windows, delta, target: float, direction: int = -1) -> float:
    X = np.asarray(windows, dtype=float).reshape(-1, model.n_features)
    y = predict_batch(model, X + np.ravel(delta))
    return float((direction * (y - target) >= 0).mean())


# --------------------------------------------------------------------------
# Receding-horizon (diachronic) planning
# --------------------------------------------------------------------------


@dataclass
class PlanEvent:
    step: int
    kind: str  # "PLAN", "REPLAN" or "FAILED"
    stocks: list[int]
    detail: str = ""


@dataclass
class DiachronicPlan:
    targets: np.ndarray
    realized: np.ndarray
    events: list[PlanEvent] = field(default_factory=list)
    status: str = "COMPLETE"
    y_final: float = float("nan")
    active: list[int] = field(default_factory=list)

    @property
    def support_stocks(self) -> list[int]:
        return [int(i) for i in np.flatnonzero((self.targets != 0).any(axis=0))]


def plan_diachronic(model: ForecastModel, history, spec: AttackSpec, horizon: int, *,
                    baseline=None,
                    observe: Callable[[int, np.ndarray], np.ndarray] | None = None,
                    still_manipulable: Callable[[int], np.ndarray] | None = None) -> DiachronicPlan:
    """Plan the last ``horizon`` rows of the decision window one step at a time.

    ``history`` is the ``W x N`` return window ending now; the window the
    model will see after ``horizon`` steps keeps its last ``W - horizon``
    rows and appends the future ones.  At every step the gradient is taken at
    the current belief about that window (realized rows so far, ``baseline``
    for the rest, zeros by default) and signed-gradient targets of size eps
    are emitted for the next row, masked stocks only.

    ``observe(s, targets)`` returns the realized return row of step ``s``
    (default: targets where non-zero, baseline elsewhere).
    ``still_manipulable(s)`` returns the per-stock cost re-check; masked
    stocks failing it are dropped with a REPLAN event, and a FAILED event
    ends the plan once none remain.
    """
    W, N = model.W, model.N
    history = np.asarray(history, dtype=float).reshape(W, N)
    if not 1 <= horizon <= W:
        raise AttackError(f"horizon must lie in [1, W={W}]")
    baseline = np.zeros((horizon, N)) if baseline is None else np.asarray(baseline, dtype=float).reshape(horizon, N)
    future_mask = spec.mask[W - horizon:]
    active = [i for i in spec.mask_stocks if future_mask[:, i].any()]
    if not active:
        raise AttackError("no attackable coordinates in the planning horizon")

    targets = np.zeros((horizon, N))
    realized = baseline.copy()
    plan = DiachronicPlan(targets, realized, [PlanEvent(0, "PLAN", list(active))])
    for s in range(horizon):
        if still_manipulable is not None:
            ok = np.asarray(still_manipulable(s), dtype=bool)
            dropped = [i for i in active if not ok[i]]
            if dropped:
                active = [i for i in active if ok[i]]
                plan.events.append(PlanEvent(s, "REPLAN", dropped, "no longer manipulable"))
            if not active:
                plan.events.append(PlanEvent(s, "FAILED", [], "no manipulable stocks remain"))
                plan.status = "FAILED"
                break
        belief = np.vstack([history[horizon:], realized])
        g = input_gradient(model, belief)[W - horizon + s]
        row = np.zeros(N)
        cols = [i for i in active if future_mask[s, i]]
        row[cols] = spec.direction * spec.eps * np.sign(g[cols])
        targets[s] = row
        if observe is None:
            realized[s] = np.where(row != 0, row, baseline[s])
        else:
            realized[s] = np.asarray(observe(s, row), dtype=float)
    plan.active = active
    plan.y_final = _y(model, np.vstack([history[horizon:], realized]))
    return plan
