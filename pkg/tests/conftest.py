import pickle
import time

import pytest

from smap.adapter import AdapterConfig, train_adapter
from smap.config import CorpusConfig
from smap.synth import generate_corpus

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])


@pytest.fixture
def criterion(request):
    """record(n, passed, detail) stores one summary line per acceptance criterion."""
    lines = request.config.stash[_CRITERIA]

    def record(n, passed, detail):
        lines[n] = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(lines[n])
        return passed

    return record


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(CorpusConfig().spec())


@pytest.fixture(scope="session")
def heldout():
    return generate_corpus(CorpusConfig().heldout_spec())


@pytest.fixture(scope="session")
def trained_adapter_timed(corpus):
    """The default seeded adapter run (3000 steps) and its wall time in seconds."""
    human, robot = corpus
    start = time.perf_counter()
    model, history = train_adapter(human, robot, AdapterConfig(seed=0))
    return model, history, time.perf_counter() - start


@pytest.fixture(scope="session")
def trained_adapter(trained_adapter_timed):
    model, history, _ = trained_adapter_timed
    return model, history


@pytest.fixture(scope="session")
def pools(trained_adapter, corpus):
    """(adapted, retargeted) robot reference pools built from the default human corpus."""
    from smap.cli import reference_pools

    model, _ = trained_adapter
    return reference_pools(model, corpus[0])


@pytest.fixture(scope="session")
def teacher_on(pools):
    """Default curriculum teacher (200 episodes, seed 0) and its training curve."""
    from smap import control as C
    from smap.config import RunConfig
    from smap.motion import ROBOT19

    cfg = RunConfig()
    return C.train_teacher(ROBOT19, *pools, cfg.curriculum, cfg.teacher_config(), cfg.env_config())


@pytest.fixture
def clone():
    def _clone(obj):
        return pickle.loads(pickle.dumps(obj))
    return _clone
