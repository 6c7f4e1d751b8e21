"""Index-return forecasters: closed-form ridge and a one-hidden-layer tanh MLP.

Both predict the next-step index log-return from a ``W x N`` window of
per-stock log-returns, flattened row-major, and expose exact input gradients.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, DatasetError, TrainingError
from .market import IndexSpec, PricePanel, StockMeta, index_series


class Action(str, enum.Enum):
    SELL = "SELL"
    HOLD = "HOLD"
    BUY = "BUY"


@dataclass(frozen=True)
class Thresholds:
    sell: float = -0.001
    buy: float = 0.001

    def __post_init__(self):
        if not self.sell < 0 < self.buy:
            raise ValueError("thresholds must satisfy sell < 0 < buy")

    def action(self, y_hat: float) -> Action:
        if y_hat <= self.sell:
            return Action.SELL
        if y_hat >= self.buy:
            return Action.BUY
        return Action.HOLD


@dataclass(frozen=True)
class Signal:
    y_hat: float
    action: Action
    thresholds: Thresholds = Thresholds()

    @property
    def confidence(self) -> float:
        """How far the prediction sits below the sell threshold (0 if not SELL)."""
        return max(0.0, self.thresholds.sell - self.y_hat)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    end_steps: np.ndarray
    W: int
    N: int

    def __len__(self) -> int:
        return self.y.shape[0]

    def window(self, i: int) -> np.ndarray:
        return self.X[i].reshape(self.W, self.N)


def build_dataset(panel: PricePanel, spec: IndexSpec, meta: Sequence[StockMeta], W: int) -> Dataset:
    """One sample per end step ``t`` in ``[W, T-2]``.

    Features are the log-returns of steps ``t-W+1 .. t``; the label is the
    index log-return from ``t`` to ``t+1``.
    """
    T, N = panel.prices.shape
    if W < 1:
        raise DatasetError("window length must be >= 1")
    if T <= W + 1:
        raise DatasetError(f"need more than {W + 1} steps for W={W}, panel has {T}")
    rets = panel.log_returns()  # rets[s-1] = return at step s
    index_log = np.log(index_series(panel.prices, spec, meta))
    ends = np.arange(W, T - 1)
    X = np.stack([rets[t - W:t].ravel() for t in ends])
    y = index_log[ends + 1] - index_log[ends]
    return Dataset(X, y, ends + panel.t0, W, N)


# --------------------------------------------------------------------------
# Models
# --------------------------------------------------------------------------


@dataclass
class TrainParams:
    ridge: float = 1e-4
    hidden: int = 8
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    init_scale: float = 1.0
    l2: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainParams":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class ForecastModel:
    kind: str  # "linear" or "mlp"
    W: int
    N: int
    params: np.ndarray
    H: int = 0
    train_seed: int = 0
    train_mse: float = float("nan")

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.kind not in ("linear", "mlp"):
            raise ContractError(f"unknown model kind {self.kind!r}")
        D = self.W * self.N
        expected = D + 1 if self.kind == "linear" else self.H * D + 2 * self.H + 1
        if self.params.shape != (expected,):
            raise ContractError(f"{self.kind} model with W={self.W}, N={self.N}, H={self.H} "
                                f"needs {expected} params, got {self.params.shape}")
        if not np.all(np.isfinite(self.params)):
            raise ContractError("model parameters must be finite")

    @property
    def n_features(self) -> int:
        return self.W * self.N

    # parameter views
    @property
    def theta(self) -> np.ndarray:
        return self.params[:-1]

    @property
    def bias(self) -> float:
        return float(self.params[-1])

    def mlp_parts(self):
        """``(U, c, v, b)`` views for an MLP."""
        D, H = self.n_features, self.H
        U = self.params[:H * D].reshape(H, D)
        c = self.params[H * D:H * D + H]
        v = self.params[H * D + H:H * D + 2 * H]
        return U, c, v, float(self.params[-1])

    @classmethod
    def linear(cls, theta, bias: float = 0.0, W: int | None = None, N: int | None = None, **kw) -> "ForecastModel":
        theta = np.asarray(theta, dtype=float).ravel()
        if W is None and N is None:
            W, N = 1, theta.size
        elif W is None:
            W = theta.size // N
        elif N is None:
            N = theta.size // W
        return cls("linear", W, N, np.append(theta, bias), **kw)

    @classmethod
    def mlp(cls, U, c, v, b: float, W: int, N: int, **kw) -> "ForecastModel":
        U = np.asarray(U, dtype=float)
        params = np.concatenate([U.ravel(), np.ravel(c), np.ravel(v), [b]])
        return cls("mlp", W, N, params, H=U.shape[0], **kw)

    def to_json(self) -> dict:
        return {"kind": self.kind, "W": self.W, "N": self.N, "H": self.H,
                "params": [float(p) for p in self.params],
                "train_seed": self.train_seed, "train_mse": float(self.train_mse)}

    @classmethod
    def from_json(cls, d: dict) -> "ForecastModel":
        return cls(d["kind"], int(d["W"]), int(d["N"]), np.array(d["params"], dtype=float), H=int(d["H"]),
                   train_seed=int(d["train_seed"]), train_mse=float(d["train_mse"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ForecastModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _as_matrix(model: ForecastModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    D = model.n_features
    if X.ndim == 2 and X.shape == (model.W, model.N):
        return X.reshape(1, D)
    if X.ndim == 1 and X.size == D:
        return X.reshape(1, D)
    if X.ndim == 2 and X.shape[1] == D:
        return X
    if X.ndim == 3 and X.shape[1:] == (model.W, model.N):
        return X.reshape(X.shape[0], D)
    raise ContractError(f"input of shape {X.shape} does not match model (W={model.W}, N={model.N})")


def predict_batch(model: ForecastModel, X) -> np.ndarray:
    """Predicted index log-returns for a batch of flattened windows."""
    X = _as_matrix(model, X)
    if model.kind == "linear":
        return X @ model.theta + model.bias
    U, c, v, b = model.mlp_parts()
    return _kernels.mlp_forward(np.ascontiguousarray(X), np.ascontiguousarray(U), c.copy(), v.copy(), b)


def input_gradient_batch(model: ForecastModel, X) -> np.ndarray:
    X = _as_matrix(model, X)
    if model.kind == "linear":
        return np.broadcast_to(model.theta, X.shape).copy()
    U, c, v, _ = model.mlp_parts()
    return _kernels.mlp_input_grad(np.ascontiguousarray(X), np.ascontiguousarray(U), c.copy(), v.copy())


def predict(model: ForecastModel, window, thresholds: Thresholds = Thresholds()) -> Signal:
    y_hat = float(predict_batch(model, window)[0])
    return Signal(y_hat, thresholds.action(y_hat), thresholds)


def input_gradient(model: ForecastModel, window) -> np.ndarray:
    """``d y_hat / d x`` shaped like the model's ``(W, N)`` window."""
    return input_gradient_batch(model, window)[0].reshape(model.W, model.N)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def train(kind: str, dataset: Dataset, params: TrainParams | None = None, seed: int = 0) -> ForecastModel:
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    params = params or TrainParams()
    if kind == "linear":
        return _train_ridge(dataset, params.ridge, seed)
    if kind == "mlp":
        return _train_mlp(dataset, params, seed)
    raise TrainingError(f"unknown model kind {kind!r}")


def _train_ridge(ds: Dataset, rho: float, seed: int) -> ForecastModel:
    """Ridge regression with an unpenalised bias, solved as an augmented least-squares problem."""
    if rho < 0:
        raise TrainingError("ridge penalty must be non-negative")
    n, D = ds.X.shape
    A = np.hstack([ds.X, np.ones((n, 1))])
    rhs = ds.y
    if rho > 0:
        A = np.vstack([A, np.hstack([np.sqrt(rho) * np.eye(D), np.zeros((D, 1))])])
        rhs = np.concatenate([rhs, np.zeros(D)])
    coef, _, rank, _ = np.linalg.lstsq(A, rhs, rcond=None)
    if rank < D + 1:
        raise TrainingError(f"normal equations are singular (rank {rank} < {D + 1}); use a ridge penalty > 0")
    model = ForecastModel("linear", ds.W, ds.N, coef, train_seed=seed)
    model.train_mse = float(np.mean((predict_batch(model, ds.X) - ds.y) ** 2))
    return model


def _train_mlp(ds: Dataset, p: TrainParams, seed: int) -> ForecastModel:
    if p.hidden < 1 or p.epochs < 0 or p.batch_size < 1:
        raise TrainingError("hidden, epochs and batch_size must be positive")
    rng = np.random.default_rng(seed)
    n, D = ds.X.shape
    H = p.hidden
    # train in standardized coordinates, fold the affine maps back afterwards
    mu_x = ds.X.mean(axis=0)
    sd_x = ds.X.std(axis=0)
    sd_x[sd_x == 0] = 1.0
    mu_y = float(ds.y.mean())
    sd_y = float(ds.y.std()) or 1.0
    Xs = np.ascontiguousarray((ds.X - mu_x) / sd_x)
    ys = (ds.y - mu_y) / sd_y

    U = rng.normal(0.0, p.init_scale / np.sqrt(D), size=(H, D))
    c = np.zeros(H)
    v = rng.normal(0.0, 1.0 / np.sqrt(H), size=H)
    b = np.zeros(1)
    mU, mc, mv, mb = np.zeros_like(U), np.zeros(H), np.zeros(H), np.zeros(1)
    for _ in range(p.epochs):
        perm = rng.permutation(n)
        _kernels.mlp_sgd_epoch(Xs, ys, perm, U, c, v, b, mU, mc, mv, mb,
                               p.lr, p.momentum, p.batch_size, p.l2)
    if not (np.all(np.isfinite(U)) and np.all(np.isfinite(v)) and np.isfinite(b[0])):
        raise TrainingError("MLP training diverged; lower the learning rate")

    U_raw = U / sd_x
    c_raw = c - U_raw @ mu_x
    model = ForecastModel.mlp(U_raw, c_raw, v * sd_y, float(b[0]) * sd_y + mu_y, ds.W, ds.N, train_seed=seed)
    model.train_mse = float(np.mean((predict_batch(model, ds.X) - ds.y) ** 2))
    return model


def mse(model: ForecastModel, X, y) -> float:
    return float(np.mean((predict_batch(model, X) - np.asarray(y)) ** 2))
