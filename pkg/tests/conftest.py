import functools

import numpy as np
import pytest

from m3bind.config import RunConfig
from m3bind.pipeline import Phase0Cache, make_dataset, run_experiment, variant

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


class Runs:
    """Lazily trained experiments shared by every test in the session.

    Phase-0 encoders are cached per (seed, modality), so variants of one seed
    only pay for their own binding phase.
    """

    def __init__(self):
        self.cache = Phase0Cache()

    @functools.cache
    def data(self, seed: int = 0):
        return make_dataset(RunConfig(master_seed=seed))

    def config(self, seed: int = 0, **bind_changes) -> RunConfig:
        return variant(RunConfig(master_seed=seed), **bind_changes)

    @functools.cache
    def _run(self, seed: int, distill: bool, changes: tuple):
        cfg = self.config(seed, **dict(changes))
        return run_experiment(cfg, self.data(seed), self.cache, distill=distill)

    def run(self, seed: int = 0, distill: bool = False, **bind_changes):
        changes = tuple(sorted((k, tuple(v) if isinstance(v, list) else v)
                               for k, v in bind_changes.items()))
        return self._run(seed, distill, changes)

    def default(self, seed: int = 0):
        # the distilled run doubles as the plain default run for this seed
        return self.run(seed, distill=(seed == 0))

    def phase0(self, seed: int = 0):
        cfg = RunConfig(master_seed=seed)
        return self.cache.get(self.data(seed), cfg, cfg.modalities())


@pytest.fixture(scope="session")
def runs():
    return Runs()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
