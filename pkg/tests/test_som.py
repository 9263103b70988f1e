import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsmdesign import DesignSpec, RngStream, SpecError
from fsmdesign.som import (
    SelectionOrderMatrix,
    StratifiedMethod,
    chunk_orders,
    control_deviation,
    generate_equal_product_som,
    generate_nested_som,
    generate_randomized_chunk_som,
    generate_scomars_som,
    generate_som,
    generate_som_for_sizes,
    generate_stratified_som,
    generate_two_size_som,
    is_exact_configuration,
    scomars_conditional,
    scomars_indicators,
)
from oracles import scomars_path_probability


def test_conditional_hand_values():
    assert scomars_conditional(0.5, 0.5, 1) == 0
    assert scomars_conditional(0.5, 0.5, 0) == 1
    assert scomars_conditional(1 / 3, 1 / 3, 0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        scomars_conditional(0.0, 0.5, 1)


def test_scomars_rejects_empty_group():
    with pytest.raises(SpecError):
        generate_scomars_som(2, 0, RngStream(0))


def test_scomars_one_one_is_fair():
    W = scomars_indicators(1, 1, RngStream(1), size=20000)
    first = W[:, 0].mean()
    assert abs(first - 0.5) < 3 * np.sqrt(0.25 / 20000)
    assert np.all(W.sum(axis=1) == 1)


def test_scomars_equal_sizes_are_stacked_permutations():
    for m in range(50):
        labels = generate_scomars_som(6, 6, RngStream(2).fork(m)).group_at_stage
        for block in labels.reshape(6, 2):
            assert sorted(block) == [1, 2]


def test_scomars_path_frequencies_match_exact_chain():
    n1, n2, draws = 2, 3, 40000
    W = scomars_indicators(n1, n2, RngStream(3), size=draws)
    seen = Counter(tuple(int(v) for v in row) for row in W)
    paths = [p for p in itertools.product([0, 1], repeat=5) if sum(p) == n1]
    exact = {p: float(scomars_path_probability(n1, n2, p)) for p in paths}
    assert sum(exact.values()) == pytest.approx(1.0)
    for p, prob in exact.items():
        sd = np.sqrt(prob * (1 - prob) / draws)
        assert abs(seen.get(p, 0) / draws - prob) <= 4 * sd + 1e-12
    assert set(seen) <= {p for p, q in exact.items() if q > 0}


@pytest.mark.parametrize("n1,n2", [(2, 3), (1, 4), (3, 4)])
def test_scomars_exact_chain_marginals(n1, n2):
    N = n1 + n2
    paths = list(itertools.product([0, 1], repeat=N))
    probs = {p: scomars_path_probability(n1, n2, p) for p in paths}
    assert sum(probs.values()) == 1
    assert all(v == 0 for p, v in probs.items() if sum(p) != n1)
    for r in range(N):
        assert sum(v for p, v in probs.items() if p[r]) * N == n1


def test_scomars_marginals_constant():
    W = scomars_indicators(7, 13, RngStream(4), size=20000)
    assert np.all(np.abs(W.mean(axis=0) - 0.35) < 4 * np.sqrt(0.35 * 0.65 / 20000))


@pytest.mark.parametrize("n1,n2", [(1, 9), (7, 13), (50, 50), (3, 6)])
def test_scomars_control(n1, n2):
    W = scomars_indicators(n1, n2, RngStream(5), size=2000)
    labels = np.where(W, 1, 2)
    assert control_deviation(labels, (n1, n2)) < 1
    assert np.all(W.sum(axis=1) == n1)


def test_chunk_examples_and_bound():
    som = generate_randomized_chunk_som(3, 2, RngStream(0))
    for block in som.group_at_stage.reshape(2, 3):
        assert sorted(block) == [1, 2, 3]
    assert sorted(generate_randomized_chunk_som(2, 1, RngStream(1)).group_at_stage) == [1, 2]
    orders = chunk_orders(range(1, 5), 5, RngStream(2), size=10000)
    assert control_deviation(orders, (5,) * 4) <= 3 / 4 + 1e-12


def test_chunk_first_stage_symmetry():
    orders = chunk_orders(range(1, 4), 2, RngStream(6), size=100000)
    freq = np.bincount(orders[:, 0], minlength=4)[1:] / 100000
    assert np.all(np.abs(freq - 1 / 3) < 3 * np.sqrt(2 / 9 / 100000))


def test_two_size_structure():
    som = generate_two_size_som((10, 20, 20), RngStream(7))
    assert som.counts(3).tolist() == [10, 20, 20]
    sub = som.group_at_stage[som.group_at_stage != 1]
    for block in sub.reshape(20, 2):
        assert sorted(block) == [2, 3]
    deviations = [generate_two_size_som((10, 20, 20), RngStream(8).fork(m)).max_control_deviation((10, 20, 20))
                  for m in range(500)]
    assert max(deviations) < 1


def test_two_size_with_two_groups_is_scomars():
    a = generate_two_size_som((3, 6), RngStream(9)).group_at_stage
    b = generate_scomars_som(3, 6, RngStream(9)).group_at_stage
    assert np.array_equal(a, b)


def test_equal_product_counts_and_control():
    som = generate_equal_product_som([(2, 6), (3, 4)], RngStream(10))
    assert som.counts(5).tolist() == [6, 6, 4, 4, 4]
    worst = max(generate_equal_product_som([(2, 6), (3, 4)], RngStream(11).fork(m))
                .max_control_deviation((6, 6, 4, 4, 4)) for m in range(500))
    assert worst < 1
    with pytest.raises(SpecError):
        generate_equal_product_som([(2, 6), (3, 5)], RngStream(0))


def test_equal_product_single_groups_is_chunk():
    som = generate_equal_product_som([(1, 4), (1, 4)], RngStream(12))
    for block in som.group_at_stage.reshape(4, 2):
        assert sorted(block) == [1, 2]


@pytest.mark.parametrize("sizes", [(5, 5, 5), (564, 456, 372, 495), (10, 20, 30), (1, 2, 3, 4, 5)])
def test_dispatcher_counts_exact(sizes):
    som = generate_som(DesignSpec(sizes), RngStream(13))
    assert som.counts(len(sizes)).tolist() == list(sizes)


def test_dispatcher_equal_sizes_route_to_chunk():
    som = generate_som(DesignSpec((5, 5, 5)), RngStream(14))
    for block in som.group_at_stage.reshape(5, 3):
        assert sorted(block) == [1, 2, 3]
    assert is_exact_configuration((5, 5, 5))
    assert not is_exact_configuration((10, 20, 30))


def _block_deviation(g, block, total, N):
    S = np.cumsum(np.isin(g, block))
    F = np.arange(1, len(g) + 1) * total / N
    return np.max(np.abs(S - F))


def test_heuristic_uses_closest_two_way_split():
    # {1,3} vs {2,4} (936 vs 951) is the most even split of these sizes
    g = generate_som_for_sizes((564, 456, 372, 495), RngStream(15)).group_at_stage
    assert _block_deviation(g, [1, 3], 936, 1887) < 1


def test_nested_som_follows_given_blocks():
    sizes = (564, 456, 372, 495)
    som = generate_nested_som(sizes, ((1, 2), (3, 4)), RngStream(16))
    g = som.group_at_stage
    assert som.counts(4).tolist() == list(sizes)
    assert _block_deviation(g, [1, 2], 1020, 1887) < 1
    inner = g[np.isin(g, [1, 2])]
    assert _block_deviation(inner, [1], 564, 1020) < 1
    with pytest.raises(SpecError):
        generate_nested_som(sizes, ((1, 2), (3,)), RngStream(0))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=1, max_size=6), st.integers(0, 2**32))
def test_any_sizes_counts_exact(sizes, seed):
    som = generate_som_for_sizes(sizes, RngStream(seed))
    assert som.counts(len(sizes)).tolist() == sizes


def test_marginal_probs_for_two_groups():
    som = generate_som_for_sizes((3, 6), RngStream(0))
    assert np.allclose(som.marginal_probs, 1 / 3)


def _strat_spec(rows, G=2):
    strata = [s for s, row in rows.items() for _ in range(sum(row))]
    sizes = tuple(sum(row[g] for row in rows.values()) for g in range(G))
    return DesignSpec(sizes, strata=tuple(strata), stratum_sizes=rows)


def test_stratified_minimal():
    spec = _strat_spec({"a": (1, 1), "b": (1, 1)})
    for method in StratifiedMethod:
        som = generate_stratified_som(spec, method, RngStream(16))
        assert len(som) == 4
        assert Counter(zip(som.stratum_at_stage, som.group_at_stage)) == {
            ("a", 1): 1, ("a", 2): 1, ("b", 1): 1, ("b", 2): 1}


def test_per_stratum_blocks():
    spec = _strat_spec({"a": (3, 3), "b": (3, 3)})
    som = generate_stratified_som(spec, "per_stratum", RngStream(17))
    assert som.stratum_at_stage[:6] == ("a",) * 6


def test_interleaved_each_group_controlled():
    spec = _strat_spec({"a": (3, 3), "b": (3, 3)})
    for m in range(300):
        som = generate_stratified_som(spec, "interleaved", RngStream(18).fork(m))
        for g in (1, 2):
            seq = [1 if s == "a" else 2 for s, gg in zip(som.stratum_at_stage, som.group_at_stage) if gg == g]
            assert control_deviation(np.array(seq), (3, 3)) < 1


def test_som_rows_and_csv(tmp_path):
    som = SelectionOrderMatrix([2, 1], stratum_at_stage=("x", "y"), marginal_probs=np.array([0.5, 0.5]))
    som.write_csv(tmp_path / "som.csv")
    text = (tmp_path / "som.csv").read_text().splitlines()
    assert text[0].split(",")[:3] == ["stage", "group", "stratum"]
    assert som.running_counts(2).tolist() == [[0, 1], [1, 1]]
