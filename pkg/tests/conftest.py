import numpy as np
import pytest

from vlmq.calib import generate_batch
from vlmq.model import ModelSpec, generate_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_spec():
    return ModelSpec(num_layers=2, d_model=16, num_heads=2, d_ff=32, seed=0)


@pytest.fixture(scope="session")
def toy_layers(toy_spec):
    return generate_model(toy_spec)


@pytest.fixture(scope="session")
def toy_batch(toy_spec):
    return generate_batch(toy_spec, num_samples=8, n_text=8, n_vision=40, redundancy=0.9, seed=7)


def random_spd(rng, n, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.geomspace(1.0, cond, n)) @ q.T


ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 10


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def record_criterion(request):
    """Register one acceptance line; printed in the terminal summary."""
    results = request.config.stash[ACCEPTANCE]

    def record(number, title, ok, detail="", extra=()):
        results[number] = (title, bool(ok), detail, list(extra))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n not in results:
            terminalreporter.write_line(f"[{n:2d}] NOT RUN")
            continue
        title, ok, detail, extra = results[n]
        terminalreporter.write_line(f"[{n:2d}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        for line in extra:
            terminalreporter.write_line(f"       {line}")
