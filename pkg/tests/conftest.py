"""Shared fixtures: a session cache of full training runs and the acceptance scoreboard."""
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hood.data import generate_synthetic  # noqa: E402
from hood.ova import ova_score  # noqa: E402
from hood.tasks import BUILDERS, build_pools, config_for, cross_prediction, RUNNERS  # noqa: E402
from hood.trainer import TrainConfig, train_hood  # noqa: E402

SESSION_START = time.time()
SEEDS = (0, 1, 2, 3, 4)


@dataclass
class RunSummary:
    """What the acceptance checks need from one training run; parameters are dropped to save memory."""

    report: object
    benign_score: float
    malign_score: float


class RunCache:
    def __init__(self):
        self._runs = {}

    def get(self, kind: str, seed: int, factors=None, **overrides) -> RunSummary:
        factors = dict(factors or {})
        key = (kind, seed, tuple(sorted(factors.items())), tuple(sorted(overrides.items())))
        if key not in self._runs:
            task = BUILDERS[kind](**factors)
            ds = generate_synthetic(task.factors, seed)
            cfg = config_for(task, TrainConfig(seed=seed, **overrides))
            res = train_hood(cfg, build_pools(task, ds, cfg))
            rep = RUNNERS[kind](res.params, ds)
            rep.cross_prediction = cross_prediction(res.params, ds, cfg.num_augmentations, seed)
            ben = float(ova_score(res.pools.benign.x_aug, res.params).mean()) if len(res.pools.benign) else np.nan
            mal = float(ova_score(res.pools.malign.x_aug, res.params).mean()) if len(res.pools.malign) else np.nan
            self._runs[key] = RunSummary(rep, ben, mal)
        return self._runs[key]


_CACHE = RunCache()
SCOREBOARD: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def runs() -> RunCache:
    return _CACHE


@pytest.fixture
def record():
    """``record(n, ok, detail)`` files one acceptance line; the test still asserts on its own."""
    def _record(n: int, ok: bool, detail: str):
        SCOREBOARD[n] = (bool(ok), detail)
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
    return _record


def pytest_collection_modifyitems(items):
    # acceptance criteria last so criterion 11 can time the rest of the suite
    items.sort(key=lambda it: "test_acceptance" in it.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not SCOREBOARD:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(SCOREBOARD):
        ok, detail = SCOREBOARD[n]
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
    tr.write_line(f"suite wall time: {time.time() - SESSION_START:.0f} s")
