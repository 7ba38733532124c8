import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phylo.errors import EstimatorError
from phylo.estimators import (
    DistanceTable,
    KnownDistances,
    OracleDistances,
    SignatureDistances,
    aggregate_deep,
    correlation_matrix,
    deep_distance,
    diameter_test,
    distance_matrix_from_correlations,
    pair_estimate,
    radius_threshold,
    reconstruct_signature,
    shallow_correlation,
    shallow_distance,
)
from phylo.indel_sim import Bitstring, RngStream, mutate_edge
from phylo.signatures import BlockScheme, SignatureVector, signature_vector
from phylo.tree_model import EdgeParams, balanced, path_distance


def vec(node, values, mode="true-block"):
    return SignatureVector(node, np.array(values, dtype=float), 4, mode)


def test_shallow_correlation_uses_odd_blocks():
    sa = vec(0, [1.0, 0.0, -1.0, 2.0])
    sb = vec(1, [0.5, 3.0, 1.0, 7.0])
    c = shallow_correlation(sa, sb)
    assert c.value == pytest.approx(-0.25)
    assert c.source == "true-sig"
    assert shallow_correlation(sb, sa).value == c.value
    assert shallow_correlation(vec(0, [1, 0], "pseudo-block"), vec(1, [1, 0], "pseudo-block")).source == "leaf-pseudo-sig"


def test_shallow_correlation_mismatch():
    with pytest.raises(EstimatorError):
        shallow_correlation(vec(0, [1.0, 0.0]), vec(1, [1.0, 0.0, 1.0, 0.0]))
    with pytest.raises(EstimatorError):
        shallow_correlation(vec(0, [1.0, 0.0, 1.0]), vec(1, [1.0, 0.0, 1.0]))


def test_shallow_distance():
    assert shallow_distance(shallow_correlation(vec(0, [0.5, 0.0]), vec(1, [0.5, 0.0]))) == pytest.approx(0.0)
    c = shallow_correlation(vec(0, [0.5, 0.0]), vec(1, [0.5 / math.e, 0.0]))
    assert shallow_distance(c) == pytest.approx(1.0)
    assert shallow_distance(shallow_correlation(vec(0, [0.5, 0]), vec(1, [-0.5, 0]))) == math.inf
    assert shallow_distance(shallow_correlation(vec(0, [0.0, 1.0]), vec(1, [0.0, 1.0]))) == math.inf


def test_correlation_matrix_matches_pairs():
    vectors = [vec(0, [1.0, 0.2, 0.5, 0.1]), vec(1, [0.3, 0.0, -0.4, 0.9]), vec(2, [0.7, 0.7, 0.7, 0.7])]
    corr = correlation_matrix(vectors)
    for i in range(3):
        for j in range(3):
            assert corr[i, j] == pytest.approx(shallow_correlation(vectors[i], vectors[j]).value)
    assert np.array_equal(corr, corr.T)
    dist = distance_matrix_from_correlations(np.array([[0.25, -0.1], [-0.1, 0.25]]))
    assert dist[0, 0] == pytest.approx(0.0)
    assert dist[0, 1] == math.inf


def test_self_correlation_is_a_quarter():
    l, L = 64, 2000
    bits = Bitstring.from_array(RngStream(17).generator().integers(0, 2, size=l * L, dtype=np.uint8))
    s = signature_vector(bits, BlockScheme(k=l * L, zeta=0.25, l=l, L=L))
    assert shallow_correlation(s, s).value == pytest.approx(0.25, abs=5 * math.sqrt(0.125 / (L // 2)))


def test_parent_child_correlation():
    l, L = 64, 2000
    parent = Bitstring.from_array(RngStream(18).generator().integers(0, 2, size=l * L, dtype=np.uint8))
    child = mutate_edge(parent, EdgeParams(p_sub=0.1), RngStream(18, 1))
    scheme = BlockScheme(k=l * L, zeta=0.25, l=l, L=L)
    c = shallow_correlation(signature_vector(parent, scheme), signature_vector(child, scheme))
    assert c.value == pytest.approx(0.25 * 0.8, abs=0.05)


def test_known_distances():
    known = KnownDistances()
    known.set(1, 3, 0.2)
    assert known.get(1, 3) == 0.2
    assert known.get(4, 4) == 0.0
    assert (1, 3) in known and (2, 2) in known and (1, 4) not in known
    with pytest.raises(EstimatorError):
        known.get(1, 4)
    with pytest.raises(EstimatorError):
        known.set(1, 4, -0.1)


def test_reconstruct_signature():
    known = KnownDistances()
    known.set(1, 3, 0.0)
    leaf_sigs = {3: vec(3, [0.5, 0.1]), 4: vec(4, [0.3, -0.1])}
    copy = reconstruct_signature(leaf_sigs, [3], known, 1)
    assert copy.values.tolist() == [0.5, 0.1]
    assert copy.mode == "reconstructed"

    known.set(1, 3, math.log(2.0))
    known.set(1, 4, math.log(2.0))
    both = reconstruct_signature(leaf_sigs, [3, 4], known, 1)
    assert both.values.tolist() == pytest.approx([0.8, 0.0])
    with pytest.raises(EstimatorError):
        reconstruct_signature(leaf_sigs, [], known, 1)


def test_pair_estimate():
    assert pair_estimate(0.15, 0.1, 0.2) == pytest.approx(-0.3 - math.log(0.6))
    assert pair_estimate(0.0, 0.1, 0.2) == math.inf
    assert pair_estimate(-0.01, 0.0, 0.0) == math.inf


@pytest.mark.parametrize("m, expected", [(1, 0), (2, 1), (3, 2), (4, 3), (6, 4), (7, 5), (8, 6), (16, 11)])
def test_radius_threshold(m, expected):
    assert radius_threshold(m) == expected


def test_aggregate_deep_examples():
    agg = aggregate_deep([9.0, 1.0, 0.75, 1.25, 0.5, 1.5, 0.875])
    assert agg.winner == 1
    assert agg.value == 1.0
    assert agg.radii[1] == 0.5

    flat = aggregate_deep([2.0, 2.0, 2.0])
    assert (flat.winner, flat.value) == (0, 2.0)
    assert flat.radii == (0.0, 0.0, 0.0)

    outlier = aggregate_deep([0.0, 0.0, 0.0, 9.0])
    assert (outlier.winner, outlier.value) == (0, 0.0)

    single = aggregate_deep([0.3])
    assert (single.winner, single.value, single.radii) == (0, 0.3, (0.0,))


def test_aggregate_deep_errors():
    with pytest.raises(EstimatorError):
        aggregate_deep([])
    with pytest.raises(EstimatorError):
        aggregate_deep([math.inf, math.inf])


@given(
    st.lists(st.integers(min_value=-50, max_value=50), min_size=1, max_size=9),
    st.integers(min_value=-20, max_value=20),
)
@settings(deadline=None)
def test_aggregate_deep_shift_invariant(entries, shift):
    base = aggregate_deep([float(e) for e in entries])
    moved = aggregate_deep([float(e + shift) for e in entries])
    assert moved.winner == base.winner
    assert moved.value == base.value + shift


def test_diameter_test():
    assert diameter_test([0.1, -0.2, 0.5, 3.0], 0.3) == 1
    assert diameter_test([0.1, 0.5, 3.0], 0.3) == 0
    assert diameter_test([math.inf, 0.0], 0.1) == 1
    with pytest.raises(EstimatorError):
        diameter_test([], 1.0)


def test_deep_distance_noiseless(depth3_tree, sub_params):
    tree = depth3_tree
    known = KnownDistances()
    for a in (1, 2):
        for x in tree.descendants_at(a, 1):
            known.set(a, x, path_distance(tree, a, x))

    def correlate(x, y):
        return 0.25 * math.exp(-path_distance(tree, x, y))

    result = deep_distance((1, 2), 1, {}, known, tree, correlate=correlate)
    assert len(result.entries) == 2
    assert result.value == pytest.approx(path_distance(tree, 1, 2))
    assert all(e == pytest.approx(2 * sub_params.length) for e in result.entries)
    assert result.passes(1.0)

    shallow = deep_distance((1, 2), 0, {}, known, tree, correlate=correlate)
    assert shallow.entries == pytest.approx((path_distance(tree, 1, 2),))
    assert shallow.winner == 0


def test_deep_distance_from_leaf_signatures(sub_params):
    tree = balanced(2, sub_params)
    known = KnownDistances()
    for a, leaves in ((1, (3, 4)), (2, (5, 6))):
        for x in leaves:
            known.set(a, x, 0.0)
    leaf_sigs = {x: vec(x, [0.5, 0.0, 0.5, 0.0]) for x in (3, 4, 5, 6)}
    cache = {}
    result = deep_distance((1, 2), 0, leaf_sigs, known, tree, cache=cache)
    assert result.value == pytest.approx(0.0)
    assert sorted(cache) == [1, 2]


def test_deep_distance_needs_depth(sub_params):
    tree = balanced(2, sub_params)
    with pytest.raises(EstimatorError):
        deep_distance((3, 4), 1, {}, KnownDistances(), tree, correlate=lambda x, y: 0.25)


def test_distance_table():
    table = DistanceTable()
    table.set("t2", "t1", 0.5, "shallow")
    table.set("t1", "t3", math.inf, "deep")
    assert table.get("t1", "t2") == 0.5
    assert table.get("t3", "t3") == 0.0
    assert table.source("t3", "t1") == "deep"
    assert len(table) == 2
    assert table.to_tsv() == "t1\tt2\t0.5\tshallow\nt1\tt3\tinf\tdeep\n"


def test_distance_sources():
    vectors = {0: vec(0, [0.5, 0.0]), 1: vec(1, [0.5, 0.0]), 2: vec(2, [-0.5, 0.0])}
    source = SignatureDistances(vectors)
    matrix = source.leaf_matrix()
    assert source.n_leaves == 3
    assert np.all(np.diag(matrix) == 0.0)
    assert matrix[0, 1] == pytest.approx(0.0)
    assert matrix[0, 2] == math.inf
    assert source.supports_deep

    oracle = OracleDistances([[0.0, 1.0], [1.0, 0.0]])
    assert oracle.n_leaves == 2 and not oracle.supports_deep
    with pytest.raises(EstimatorError):
        OracleDistances([[0.0, 1.0], [2.0, 0.0]])
    with pytest.raises(NotImplementedError):
        oracle.deep_estimate((0, 1), 1, KnownDistances(), balanced(1, EdgeParams(p_sub=0.05)))
