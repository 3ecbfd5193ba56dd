import numpy as np
import pytest

from distqn.cluster import partition_data
from distqn.models import DataShard, ModelKind, gen_example1
from distqn.quasinewton import newton_solve


def random_shard(kind, n=20, p=3, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p)) * scale
    theta = rng.standard_normal(p) * 0.3
    z = X @ theta
    if kind == "logistic":
        Y = (rng.random(n) < 1 / (1 + np.exp(-z))).astype(float)
    elif kind == "poisson":
        Y = rng.poisson(np.exp(z)).astype(float)
    else:
        Y = z + rng.standard_normal(n)
    return DataShard(0, X, Y, ModelKind(kind))


@pytest.fixture(scope="session")
def ex1_shards():
    """Example-1 data, N=10^4, p=10, split over M=10 workers."""
    ds = gen_example1(10_000, 10, seed=3)
    return partition_data(ds, 10, seed=3)


@pytest.fixture(scope="session")
def ex1_mle(ex1_shards):
    return newton_solve(ex1_shards, delta=1e-12).theta_hat


@pytest.fixture(scope="session")
def desk_report():
    """Example 1 at N=10^5, p=100, M=50, R=20, K=4 (shared by trend and acceptance checks)."""
    import time

    from distqn.bench import ExperimentSpec, run_replications

    t0 = time.perf_counter()
    report = run_replications(ExperimentSpec(example=1, N=10**5, p=100, M=50, K=4, R=20, base_seed=0))
    report.elapsed = time.perf_counter() - t0
    return report


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
