import numpy as np
import pytest

from fm_difficulty.dataset import Dataset, InteractionRecord
from fm_difficulty.synth import SynthConfig, generate


def make_dataset(n_players: int, n_levels: int, seed: int = 0, prefix: str = "p") -> Dataset:
    rng = np.random.default_rng(seed)
    att = rng.integers(1, 8, size=(n_players, n_levels))
    return Dataset.from_records(
        InteractionRecord(f"{prefix}{i:03d}", lv + 1, int(att[i, lv]))
        for i in range(n_players) for lv in range(n_levels))


@pytest.fixture
def small_dataset():
    return make_dataset(120, 210)


@pytest.fixture(scope="session")
def small_synth():
    # 200 players x 210 levels: enough for a split with complete histories to level 200
    return generate(SynthConfig(n_players=200, n_levels=210, seed=3))


@pytest.fixture
def write_csv(tmp_path):
    def _write(name: str, text: str):
        path = tmp_path / name
        path.write_text(text)
        return path
    return _write


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the terminal summary lists them all."""
    def _record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        request.config.stash[ACCEPTANCE_KEY].append(line)
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
