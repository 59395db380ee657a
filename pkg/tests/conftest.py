import sys
import time
from pathlib import Path

import pytest
from hypothesis import settings

from snnbayes.config import load_config
from snnbayes.train import train_run

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

TRAIN_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def trained_runs(tmp_path_factory):
    """Default synthetic task, both trainers, three seeds.

    Returns ``{(trainer, seed): run dir}``; the total training time in seconds
    is stored under the key ``"seconds"``.
    """
    root = tmp_path_factory.mktemp("trained")
    runs = {}
    start = time.perf_counter()
    for seed in TRAIN_SEEDS:
        for trainer in ("adam", "ivon"):
            out = root / f"{trainer}_{seed}"
            cfg = load_config(None, [f"optim.trainer={trainer}", f"train.seed={seed}", f"data.seed={seed}",
                                     f"train.out_dir={out}"])
            train_run(cfg, log=lambda msg: None)
            runs[trainer, seed] = out
    runs["seconds"] = time.perf_counter() - start
    return runs


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
