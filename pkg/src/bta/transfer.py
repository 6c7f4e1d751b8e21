"""Black-box victim ensembles and transfer measurement."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError
from .forecasting import Action, ForecastModel, Thresholds, TrainParams, build_dataset, predict, train
from .market import IndexSpec, PricePanel, StockMeta


@dataclass(frozen=True)
class VictimSpec:
    kind: str
    seed: int
    W: int
    H: int = 0
    params: TrainParams = field(default_factory=TrainParams)

    def train_params(self) -> TrainParams:
        p = self.params
        if self.kind == "mlp" and self.H:
            p = TrainParams(**{**p.__dict__, "hidden": self.H})
        return p


@dataclass
class VictimEnsemble:
    victims: list[ForecastModel]
    provenance: list[VictimSpec]

    def __len__(self) -> int:
        return len(self.victims)


def train_ensemble(panel: PricePanel, spec: IndexSpec, meta: Sequence[StockMeta],
                   grid: Sequence[VictimSpec]) -> VictimEnsemble:
    """Train one victim per grid entry, in grid order."""
    if not grid:
        raise ValueError("victim grid is empty")
    datasets = {}
    victims = []
    for vs in grid:
        if vs.W not in datasets:
            datasets[vs.W] = build_dataset(panel, spec, meta, vs.W)
        victims.append(train(vs.kind, datasets[vs.W], vs.train_params(), seed=vs.seed))
    return VictimEnsemble(victims, list(grid))


@dataclass(frozen=True)
class TransferRow:
    victim_id: int
    kind: str
    seed: int
    W: int
    H: int
    y_clean: float
    y_adv: float
    clean_sell: bool
    flipped: bool


@dataclass
class TransferReport:
    rows: list[TransferRow]

    @property
    def transfer_rate(self) -> float:
        """Fraction of victims signalling SELL on the adversarial input."""
        return sum(r.flipped for r in self.rows) / len(self.rows)

    @property
    def clean_false_sell_rate(self) -> float:
        return sum(r.clean_sell for r in self.rows) / len(self.rows)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["victim_id", "kind", "seed", "W", "H", "y_clean", "y_adv", "flipped"])
            for r in self.rows:
                w.writerow([r.victim_id, r.kind, r.seed, r.W, r.H, repr(r.y_clean), repr(r.y_adv), int(r.flipped)])

    @staticmethod
    def rates_from_csv(path: str | Path, thresholds: Thresholds) -> tuple[float, float]:
        """``(transfer_rate, clean_false_sell_rate)`` recomputed from a written report."""
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        n = len(rows)
        flipped = sum(int(r["flipped"]) for r in rows)
        clean = sum(thresholds.action(float(r["y_clean"])) is Action.SELL for r in rows)
        return flipped / n, clean / n


def evaluate_transfer(ensemble: VictimEnsemble, window, delta=None, adv_window=None,
                      thresholds: Thresholds = Thresholds()) -> TransferReport:
    """Score every victim on the clean and adversarial windows.

    Pass ``delta`` for synthetic mode (adversarial input ``window + delta``)
    or ``adv_window`` for realized mode.  Victims with a shorter look-back use
    the trailing rows.  A victim counts as flipped when it signals SELL on the
    adversarial input.
    """
    window = np.asarray(window, dtype=float)
    if adv_window is None:
        adv_window = window if delta is None else window + np.asarray(delta, dtype=float)
    adv_window = np.asarray(adv_window, dtype=float)
    if adv_window.shape != window.shape:
        raise ContractError("clean and adversarial windows differ in shape")
    rows = []
    for vid, (m, vs) in enumerate(zip(ensemble.victims, ensemble.provenance)):
        if m.W > window.shape[0] or m.N != window.shape[1]:
            raise ContractError(f"victim {vid} needs a {m.W}x{m.N} window, got {window.shape}")
        clean = predict(m, window[-m.W:], thresholds)
        adv = predict(m, adv_window[-m.W:], thresholds)
        rows.append(TransferRow(vid, m.kind, vs.seed, m.W, m.H, clean.y_hat, adv.y_hat,
                                clean.action is Action.SELL, adv.action is Action.SELL))
    return TransferReport(rows)
