import pytest

from costroute.pool import default_pool, load_pool, partition_groups
from costroute.sim import SimDecompositionGenerator, sim_components


def pool_doc(n_local=4, n_cloud=5, step="0.01"):
    """Pool document with free local models and linearly rising cloud prices."""
    models = [{"name": f"local-{i}", "deployment": "local"} for i in range(n_local)]
    for j in range(n_cloud):
        price = f"{(j + 1) * float(step):.3f}"
        models.append({
            "name": f"cloud-{j}",
            "deployment": "cloud",
            "price_in_cents_per_1k": price,
            "price_out_cents_per_1k": f"{4 * (j + 1) * float(step):.3f}",
        })
    return {"models": models}


@pytest.fixture(scope="session")
def pool9():
    return default_pool()


@pytest.fixture(scope="session")
def grouped9(pool9):
    return partition_groups(pool9)


@pytest.fixture
def sim9(pool9):
    """(executor, checker, prob_source) for the deterministic simulator."""
    return sim_components(pool9)


@pytest.fixture
def generator():
    return SimDecompositionGenerator()


@pytest.fixture
def make_pool():
    def make(n_local=4, n_cloud=5, **kw):
        return load_pool(pool_doc(n_local, n_cloud, **kw))

    return make


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one pass/fail line per acceptance criterion for the run summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
