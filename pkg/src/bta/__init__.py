"""Desk-scale laboratory for realized adversarial attacks on market forecasters."""

from ._kernels import backend
from .attacks import AttackSpec, Mode, Perturbation, fgsm, iterative_attack, plan_diachronic, \
    select_sparse_mask, universal_perturbation
from .forecasting import ForecastModel, Thresholds, TrainParams, build_dataset, input_gradient, predict, train
from .market import IndexSpec, Market, MarketParams, PricePanel, StockMeta, generate_market, index_value

__version__ = "0.1.0"
