import numpy as np
import pytest

from sourcetrace.data import SyntheticSpec, generate_synthetic
from sourcetrace.endmodel import TrainConfig, train_end_model
from sourcetrace.labelmodel import fit_majority_vote

ACCEPTANCE_ACCURACIES = [0.95] * 5 + [0.7] * 2 + [0.34]
NEWTON = TrainConfig(solver="newton", tol=1e-10)


@pytest.fixture(scope="session")
def small_bundle():
    """N=100 train, d=3, C=2, M=4 synthetic corpus."""
    spec = SyntheticSpec(n_train=100, n_valid=50, n_test=50, n_features=3, n_classes=2, n_lfs=4,
                         lf_accuracy=[0.9, 0.8, 0.7, 0.4], lf_coverage=0.8, seed=3)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def three_class_bundle():
    return generate_synthetic(SyntheticSpec(n_train=120, n_valid=60, n_test=60, n_lfs=5, seed=11))


@pytest.fixture(scope="session")
def mv_setup(small_bundle):
    """Converged end model on majority-vote labels of the small corpus."""
    L = small_bundle.train.L
    w = fit_majority_vote(L)
    Y = w.label_weights(L)
    model = train_end_model(small_bundle.train.X, Y, TrainConfig(l2=1e-3, solver="newton", tol=1e-12))
    return small_bundle, w, Y, model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


def record_criterion(number, ok, detail):
    _CRITERIA[number] = (ok, detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
