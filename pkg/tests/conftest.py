import numpy as np
import pytest

from htecrt.data import Dataset, ModelSpec, build_design, get_family
from htecrt.simulation import builtin_scenario, generate_dataset

_CRITERIA = []


def record_criterion(label: str, passed: bool, detail: str = "") -> None:
    _CRITERIA.append((label, passed, detail))


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in sorted(_CRITERIA):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {label}: {detail}")


def small_trial(family="gaussian", n_clusters=12, size=30, seed=0, sigma=None, beta=(0.2, 0.3, 0.2, 0.0)):
    """A small two-arm trial with subgroup-specific cluster effects."""
    rng = np.random.default_rng(seed)
    fam = get_family(family)
    sigma = np.array([[0.3, 0.1], [0.1, 0.2]]) if sigma is None else np.asarray(sigma)
    arm = rng.permutation(np.repeat([0, 1], n_clusters // 2))
    cl = np.repeat(np.arange(n_clusters), size)
    g = rng.binomial(1, 0.5, cl.size)
    U = rng.multivariate_normal([0, 0], sigma, n_clusters)
    eta = beta[0] + beta[1] * arm[cl] + beta[2] * g + beta[3] * arm[cl] * g
    eta = eta + np.where(g == 1, U[cl, 0], U[cl, 1])
    if fam.kind == "gaussian":
        y = eta + rng.normal(0, 0.8, cl.size)
    elif fam.kind == "poisson":
        y = rng.poisson(np.exp(eta))
    else:
        y = rng.binomial(1, 1 / (1 + np.exp(-eta)))
    return Dataset(cl, y, arm[cl], g)


@pytest.fixture
def trial():
    return small_trial


@pytest.fixture(scope="session")
def gaussian_trial():
    data = small_trial("gaussian", 12, 40, seed=5)
    return data, build_design(data, ModelSpec("gaussian", "subgroup_within_cluster"))


@pytest.fixture(scope="session")
def poisson_trial():
    data = generate_dataset(builtin_scenario(3, "poisson", 12), 7)
    return data, build_design(data, ModelSpec("poisson", "subgroup_within_cluster"))
