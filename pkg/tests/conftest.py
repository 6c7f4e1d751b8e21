from pathlib import Path

import numpy as np
import pytest

from bta.config import load_config
from bta.forecasting import ForecastModel
from bta.market import StockMeta
from bta.pipeline import Run, run_all

DEMO = Path(__file__).resolve().parents[1] / "src" / "bta" / "scenarios" / "demo.yaml"


def random_linear(rng, W=3, N=4, scale=1.0) -> ForecastModel:
    return ForecastModel.linear(rng.normal(0, scale, W * N), float(rng.normal(0, 0.01)), W, N)


def random_mlp(rng, W=3, N=4, H=6, scale=1.0) -> ForecastModel:
    D = W * N
    return ForecastModel.mlp(rng.normal(0, scale, (H, D)), rng.normal(0, 0.5, H), rng.normal(0, 1, H),
                             float(rng.normal(0, 0.1)), W, N)


def simple_meta(n=3, adv=1e6, lam=0.1, spread=0.001) -> list[StockMeta]:
    return [StockMeta(f"S{i}", 1e8 * (i + 1), adv, lam, spread) for i in range(n)]


@pytest.fixture(scope="session")
def demo_path() -> Path:
    return DEMO


@pytest.fixture(scope="session")
def demo_run(tmp_path_factory) -> Run:
    """The bundled demo scenario, run once end to end."""
    cfg = load_config(DEMO)
    root = tmp_path_factory.mktemp("demo") / "run"
    run_all(cfg, root)
    return Run(cfg, root)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        verdict = "PASS" if exc_type is None else "FAIL"
        line = f"{verdict} criterion {self.number:>2}: {self.title}"
        if self.detail:
            line += f" [{self.detail}]"
        if exc_type is AssertionError and str(exc):
            line += f" ({str(exc).splitlines()[0]})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line per acceptance criterion."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
