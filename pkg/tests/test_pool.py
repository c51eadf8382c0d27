from decimal import Decimal

import pytest
from hypothesis import given
from hypothesis import strategies as st

from costroute.errors import (
    DuplicateName,
    EmptyGroup,
    LocalWithNonzeroPrice,
    NegativePrice,
    PoolConfigError,
    PoolTooSmall,
)
from costroute.pool import (
    Deployment,
    ModelSpec,
    Usage,
    load_pool,
    medium_model,
    microcents_to_cents,
    partition_groups,
    usage_cost,
    usage_cost_microcents,
)

from conftest import pool_doc


def cloud(price_in, price_out):
    return ModelSpec(0, "c", 0, Deployment.CLOUD, Decimal(price_in), Decimal(price_out))


def test_bundled_pool_has_four_free_local_models(pool9):
    assert [m.id for m in pool9] == list(range(9))
    assert [m.id for m in pool9.local] == [0, 1, 2, 3]
    assert [m.id for m in pool9.cloud] == [4, 5, 6, 7, 8]
    assert all(m.price_in == 0 and m.price_out == 0 for m in pool9.local)
    assert pool9.eval_model_id == 3


def test_cloud_prices_rise_with_capability(pool9):
    prices = [(m.price_in, m.price_out) for m in pool9.cloud]
    assert prices == sorted(prices)


def test_single_local_model_pool():
    pool = load_pool({"models": [{"name": "tiny", "deployment": "local"}]})
    assert len(pool) == 1
    assert pool.cloud == []


def test_local_model_with_price_rejected():
    doc = {"models": [{"name": "m", "deployment": "local", "price_in_cents_per_1k": 1}]}
    with pytest.raises(LocalWithNonzeroPrice):
        load_pool(doc)


def test_duplicate_and_negative_rejected():
    with pytest.raises(DuplicateName):
        load_pool({"models": [{"name": "a", "deployment": "local"}] * 2})
    with pytest.raises(NegativePrice):
        load_pool({"models": [{"name": "a", "deployment": "cloud", "price_in_cents_per_1k": -1}]})


def test_too_fine_price_rejected():
    with pytest.raises(PoolConfigError):
        load_pool({"models": [{"name": "a", "deployment": "cloud", "price_in_cents_per_1k": "0.0001"}]})


def test_load_from_toml_text_and_json(tmp_path):
    toml = 'eval_model = "b"\n[[models]]\nname = "a"\ndeployment = "local"\n' \
           '[[models]]\nname = "b"\ndeployment = "cloud"\nprice_in_cents_per_1k = 0.5\n'
    pool = load_pool(toml)
    assert pool.eval_model_id == 1 and pool[1].price_in == Decimal("0.5")
    path = tmp_path / "pool.json"
    path.write_text('{"models": [{"name": "a", "deployment": "local"}], "eval_model_id": 0}')
    assert load_pool(path)[0].name == "a"


def test_unknown_eval_model_rejected():
    with pytest.raises(PoolConfigError):
        load_pool({"models": [{"name": "a", "deployment": "local"}], "eval_model": "zzz"})


@pytest.mark.parametrize("n, expected", [
    (9, [[0, 1, 2], [3, 4, 5], [6, 7, 8]]),
    (3, [[0], [1], [2]]),
    (7, [[0, 1, 2], [3, 4], [5, 6]]),
    (8, [[0, 1, 2], [3, 4, 5], [6, 7]]),
])
def test_partition_groups(make_pool, n, expected):
    grouped = partition_groups(make_pool(n_local=1, n_cloud=n - 1))
    assert [[m.id for m in g] for g in grouped.groups] == expected


def test_partition_needs_three(make_pool):
    with pytest.raises(PoolTooSmall):
        partition_groups(make_pool(n_local=1, n_cloud=1))


@given(st.integers(3, 40))
def test_partition_is_contiguous_and_balanced(n):
    pool = load_pool(pool_doc(1, n - 1))
    grouped = partition_groups(pool)
    sizes = [len(g) for g in grouped.groups]
    assert [m.id for m in grouped.flatten()] == list(range(n))
    assert max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)


def test_medium_model(pool9):
    grouped = partition_groups(pool9)
    assert medium_model(grouped.slm_group).id == 1
    assert medium_model(pool9.models[3:5]).id == 3
    assert medium_model(pool9.models[5:6]).id == 5
    with pytest.raises(EmptyGroup):
        medium_model(())


def test_usage_cost_examples(pool9):
    assert usage_cost(Usage(10_000, 5_000), pool9[0]) == 0
    assert usage_cost(Usage(500, 250), cloud("2", "6")) == Decimal("2.5")
    assert usage_cost(Usage(0, 0), cloud("2", "6")) == 0


def test_usage_cost_rejects_negative_counts():
    with pytest.raises(ValueError):
        usage_cost_microcents(Usage(-1, 0), cloud("1", "1"))


prices = st.decimals(min_value=0, max_value=50, places=3, allow_nan=False, allow_infinity=False)
counts = st.integers(0, 200_000)


@given(prices, prices, counts, counts, counts, counts)
def test_cost_is_linear_and_exact(pi, po, a_in, a_out, b_in, b_out):
    m = cloud(pi, po)
    a, b = Usage(a_in, a_out), Usage(b_in, b_out)
    assert usage_cost_microcents(a + b, m) == usage_cost_microcents(a, m) + usage_cost_microcents(b, m)
    assert usage_cost(a, m) == (pi * a_in + po * a_out) / 1000


@given(prices, prices, st.decimals(0, 5, places=3), counts, counts)
def test_cost_monotone_in_price(pi, po, bump, t_in, t_out):
    u = Usage(t_in, t_out)
    assert usage_cost(u, cloud(pi + bump, po)) >= usage_cost(u, cloud(pi, po))
    assert usage_cost(u, cloud(pi, po + bump)) >= usage_cost(u, cloud(pi, po))


@given(st.lists(st.tuples(counts, counts), max_size=30))
def test_ledger_sum_has_no_drift(calls):
    m = cloud("0.123", "0.987")
    total = sum(usage_cost_microcents(Usage(*c), m) for c in calls)
    assert microcents_to_cents(total) == sum((usage_cost(Usage(*c), m) for c in calls), Decimal(0))
