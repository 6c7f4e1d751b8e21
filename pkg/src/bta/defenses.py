"""Adversarial training, median smoothing and coordinated-trading detection."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import _kernels
from .attacks import AttackSpec, Mode, iterative_attack
from .forecasting import (Dataset, ForecastModel, Signal, Thresholds, TrainParams, input_gradient_batch,
                          mse, predict, train)
from .market import StockMeta


@dataclass(frozen=True)
class DefenseConfig:
    adv_ratio: float = 0.5
    adv_eps: float = 0.01
    smooth_width: int = 3
    detect_z: float = 3.0
    detect_count: int = 3
    normal_flow: float = 0.01  # kappa: typical net flow as a fraction of ADV

    def __post_init__(self):
        if not 0 <= self.adv_ratio <= 1:
            raise ValueError("adv_ratio must lie in [0, 1]")
        if self.adv_eps < 0:
            raise ValueError("adv_eps must be non-negative")
        if self.smooth_width < 1 or self.smooth_width % 2 == 0:
            raise ValueError("smooth_width must be odd and >= 1")
        if not self.detect_z > 0 or self.detect_count < 1 or not self.normal_flow > 0:
            raise ValueError("detect_z and normal_flow must be > 0, detect_count >= 1")


@dataclass
class AdvTrainResult:
    model: ForecastModel
    clean_mse: float
    adv_mse: float
    replaced: np.ndarray


def fgsm_batch(model: ForecastModel, X: np.ndarray, eps: float, direction: int = -1) -> np.ndarray:
    """Full-mask FGSM perturbations for every row of ``X``."""
    return direction * eps * np.sign(input_gradient_batch(model, X))


def adversarial_train(kind: str, dataset: Dataset, config: DefenseConfig, params: TrainParams | None = None,
                      seed: int = 0) -> AdvTrainResult:
    """Retrain after swapping a seeded share of inputs for their FGSM copies.

    The perturbations are crafted against the plainly trained model; labels
    are kept.  ``adv_mse`` is measured on FGSM inputs crafted against the
    returned model.
    """
    base = train(kind, dataset, params, seed=seed)
    n = len(dataset)
    n_adv = int(round(config.adv_ratio * n))
    rng = np.random.default_rng(seed)
    replaced = np.sort(rng.choice(n, size=n_adv, replace=False)) if n_adv else np.array([], dtype=int)
    if n_adv == 0 or config.adv_eps == 0:
        model = base
    else:
        X = dataset.X.copy()
        X[replaced] = X[replaced] + fgsm_batch(base, X[replaced], config.adv_eps)
        model = train(kind, replace(dataset, X=X), params, seed=seed)
    X_adv = dataset.X + fgsm_batch(model, dataset.X, config.adv_eps)
    return AdvTrainResult(model, mse(model, dataset.X, dataset.y), mse(model, X_adv, dataset.y), replaced)


def moving_median(window, m: int) -> np.ndarray:
    """Centered moving median of width ``m`` along time, truncated at the edges."""
    window = np.ascontiguousarray(window, dtype=float)
    if m == 1:
        return window.copy()
    return _kernels.moving_median(window, m)


def smooth_predict(model: ForecastModel, window, m: int,
                   thresholds: Thresholds = Thresholds()) -> tuple[Signal, np.ndarray]:
    window = np.asarray(window, dtype=float).reshape(model.W, model.N)
    if m < 1 or m % 2 == 0 or m > model.W:
        raise ValueError(f"smoothing width must be odd and in [1, {model.W}]")
    smoothed = moving_median(window, m)
    return predict(model, smoothed, thresholds), smoothed


def eps_to_flip(model: ForecastModel, window, target: float, mask=None, steps: int = 20,
                eps_max: float = 0.2, iters: int = 30, scan: int = 16) -> float:
    """Smallest eps at which the iterative attack reaches ``target``.

    Success is not monotone in eps for saturating models (large steps land on
    flat regions and get rejected), so a geometric scan upward from
    ``eps_max / 2**scan`` finds the first success, then bisection refines it
    against the last failing value.  The step size is ``eps / 10``.  Returns
    ``inf`` if no scanned eps works and ``0`` if the clean prediction is
    already at the target.
    """
    window = np.asarray(window, dtype=float).reshape(model.W, model.N)
    mask = np.ones((model.W, model.N), dtype=bool) if mask is None else mask

    def reaches(eps):
        spec = AttackSpec(eps, mask, Mode.TARGETED, target, steps=steps, step_size=eps / 10)
        return iterative_attack(model, window, spec).y_after <= target

    if predict(model, window).y_hat <= target:
        return 0.0
    lo = 0.0
    for j in range(scan, -1, -1):
        hi = eps_max / 2 ** j
        if reaches(hi):
            break
        lo = hi
    else:
        return float("inf")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if reaches(mid):
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class DetectionResult:
    steps: np.ndarray
    alarms: np.ndarray
    flagged: list[list[str]]
    z: np.ndarray

    @property
    def alarm_count(self) -> int:
        return int(self.alarms.sum())

    @property
    def alarm_rate(self) -> float:
        return float(self.alarms.mean()) if self.alarms.size else 0.0


def detect_coordination(volumes, meta: Sequence[StockMeta], config: DefenseConfig, steps=None) -> DetectionResult:
    """Alarm on steps where at least ``detect_count`` stocks show abnormal net flow.

    ``volumes`` is ``steps x N`` net signed shares; a stock is abnormal when
    ``|volume / (normal_flow * ADV)|`` exceeds ``detect_z``.
    """
    vol = np.atleast_2d(np.asarray(volumes, dtype=float))
    adv = np.array([m.adv for m in meta])
    z = vol / (config.normal_flow * adv)
    hot = np.abs(z) > config.detect_z
    alarms = hot.sum(axis=1) >= config.detect_count
    tickers = [m.ticker for m in meta]
    flagged = [[tickers[i] for i in np.flatnonzero(h)] if a else [] for h, a in zip(hot, alarms)]
    steps = np.arange(vol.shape[0]) if steps is None else np.asarray(steps)
    return DetectionResult(steps, alarms, flagged, z)
