import time

import pytest

from xae.data import SynthConfig, synth_generate
from xae.estimator import AddresseeEstimator
from xae.training import RunConfig


@pytest.fixture(scope="session")
def synth_train():
    return synth_generate(SynthConfig(sequences_per_class=100, seed=0))


@pytest.fixture(scope="session")
def synth_heldout():
    return synth_generate(SynthConfig(sequences_per_class=30, seed=99))


@pytest.fixture(scope="session")
def small_synth():
    return synth_generate(SynthConfig(sequences_per_class=4, n_interactions=3, seed=3))


@pytest.fixture(scope="session")
def tiny_model(synth_train):
    """Tiny XAE fitted once on 300 balanced synthetic sequences; shared across modules."""
    t0 = time.perf_counter()
    est = AddresseeEstimator(RunConfig.tiny_xae(), random_state=0).fit(synth_train.sequences)
    est.fit_seconds_ = time.perf_counter() - t0
    return est


@pytest.fixture(scope="session")
def quick_model(small_synth):
    """One-epoch tiny XAE for plumbing tests that do not care about accuracy."""
    cfg = RunConfig.tiny_xae()
    cfg.num_epochs = 1
    cfg.batch_size = 4
    return AddresseeEstimator(cfg, random_state=0).fit(small_synth.sequences)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
