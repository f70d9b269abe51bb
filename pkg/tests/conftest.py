import numpy as np
import pytest
from hypothesis import settings

from powertrace.bundle import ModelBundle
from powertrace.classifier import ClassifierModel
from powertrace.states import StateCatalog
from powertrace.types import ServingConfig
from powertrace.workload import LatencySurrogate

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")


def small_catalog(phis=(0.0, 0.0, 0.0, 0.0)) -> StateCatalog:
    return StateCatalog(
        weights=np.array([0.4, 0.3, 0.2, 0.1]),
        means=np.array([150.0, 300.0, 450.0, 600.0]),
        stds=np.array([15.0, 15.0, 15.0, 15.0]),
        phis=np.asarray(phis, dtype=float),
        y_min=100.0,
        y_max=650.0,
    )


def small_bundle(is_moe=False, hidden=8, seed=0) -> ModelBundle:
    """A complete but untrained bundle: fast to build, deterministic, shape-correct."""
    return ModelBundle(
        config=ServingConfig("H100", "Test-Model", 2, is_moe),
        catalog=small_catalog((0.5, 0.5, 0.5, 0.5) if is_moe else (0.0, 0.0, 0.0, 0.0)),
        classifier=ClassifierModel.initialize(4, hidden, seed, np.array([5.0, 0.0]), np.array([3.0, 1.0])),
        surrogate=LatencySurrogate(-3.0, 0.5, 0.1, -3.5, 0.1),
    )


@pytest.fixture
def bundle():
    return small_bundle()


@pytest.fixture
def moe_bundle():
    return small_bundle(is_moe=True)


@pytest.fixture(scope="session")
def trained_system():
    """Catalog, surrogate and classifier fitted on the known ground-truth server."""
    import synthetic_system as S
    from powertrace.classifier import TrainingConfig, train_classifier
    from powertrace.states import assign_states, build_catalog
    from powertrace.workload import fit_latency_surrogate

    runs = S.training_runs()
    catalog = build_catalog([r.trace for r in runs], (2, 8), seed=0)
    surrogate = fit_latency_surrogate([rec for r in runs for rec in r.records])
    data = [(f, assign_states(tr, catalog)) for f, tr in S.dataset(runs)]
    model, report = train_classifier(
        data, catalog.K, TrainingConfig(epochs=40, lr=1e-2, chunk_len=256, hidden_size=32, patience=15, seed=0))
    bundle = ModelBundle(ServingConfig("h100", "synthetic-dense"), catalog, model, surrogate, S.DT, S.BATCH)
    return {"bundle": bundle, "report": report, "runs": runs}


ACCEPTANCE_LINES = []


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
