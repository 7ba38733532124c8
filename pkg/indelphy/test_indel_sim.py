from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phylo.errors import LineageMissingError
from phylo.indel_sim import (
    Bitstring,
    RngStream,
    evolve_tree,
    mutate_edge,
    normalized_shift_max,
    raw_shift_max,
    root_descended_in_order,
    shared_bits,
)
from phylo.tree_model import EdgeParams, balanced


@given(st.lists(st.integers(min_value=0, max_value=1), max_size=200))
@settings(deadline=None)
def test_bitstring_packing(bits):
    packed = Bitstring.from_array(bits)
    assert packed.length == len(bits)
    assert packed.bits.tolist() == bits
    assert Bitstring.from_string(packed.to_string()) == packed


def test_bitstring_rejects_other_symbols():
    with pytest.raises(ValueError):
        Bitstring.from_string("0120")
    with pytest.raises(ValueError):
        Bitstring.from_array([0, 2])


def test_bitstring_count_zeros():
    bits = Bitstring.from_string("00101100")
    assert bits.count_zeros(0, 8) == 5
    assert bits.count_zeros(2, 6) == 1


def test_rng_stream_reproducible():
    a = RngStream(42, 7).generator().integers(0, 1 << 30, size=5)
    b = RngStream(42, 7).generator().integers(0, 1 << 30, size=5)
    c = RngStream(42, 8).generator().integers(0, 1 << 30, size=5)
    assert a.tolist() == b.tolist()
    assert a.tolist() != c.tolist()
    with pytest.raises(ValueError):
        RngStream(-1)


def test_mutate_edge_identity():
    parent = Bitstring.from_string("0110100111")
    assert mutate_edge(parent, EdgeParams(), RngStream(1)) == parent


def test_mutate_edge_total_deletion():
    parent = Bitstring.from_array(np.ones(500, dtype=np.uint8))
    everything_deleted = SimpleNamespace(p_sub=0.0, p_del=1.0, p_ins=0.0)
    assert mutate_edge(parent, everything_deleted, RngStream(1)).length == 0


def test_mutate_edge_expected_length():
    parent = Bitstring.zeros(1000)
    params = EdgeParams(p_sub=0.0, p_del=0.05, p_ins=0.10)
    trials = 10_000
    lengths = np.array([mutate_edge(parent, params, RngStream(9, t)).length for t in range(trials)])
    variance = 1000 * (0.10 * 0.90 + 0.05 * 0.95)
    assert abs(lengths.mean() - 1050) <= 4 * np.sqrt(variance) / np.sqrt(trials)


def test_mutate_edge_match_rate():
    gen = RngStream(5, 1).generator()
    parent = Bitstring.from_array(gen.integers(0, 2, size=400_000, dtype=np.uint8))
    child = mutate_edge(parent, EdgeParams(p_sub=0.49), RngStream(5, 2))
    assert child.length == parent.length
    match = float(np.mean(child.bits == parent.bits))
    assert abs(match - 0.51) < 0.005


def test_evolve_tree_is_deterministic():
    params = EdgeParams(0.05, 0.02, 0.02)
    tree = balanced(3, params)
    first = evolve_tree(tree, 512, RngStream(11, 3))
    again = evolve_tree(tree, 512, RngStream(11, 3))
    other = evolve_tree(tree, 512, RngStream(11, 4))
    assert first.sequences == again.sequences
    assert first.sequences != other.sequences
    assert first.root_length == 512
    assert first.length(0) == 512


def test_evolve_tree_pinned_root(depth3_tree):
    root = Bitstring.from_string("01" * 32)
    assign = evolve_tree(depth3_tree, 1, RngStream(0), root=root)
    assert assign.bits(0) == root
    assert assign.root_length == 64


def test_lineage_without_indels(depth3_tree):
    assign = evolve_tree(depth3_tree, 256, RngStream(2), track_lineage=True)
    expected = np.arange(1, 257)
    for v in range(depth3_tree.n_nodes):
        assert assign.lineage_of(v).tolist() == expected.tolist()
    a, b = depth3_tree.leaves[0], depth3_tree.leaves[-1]
    assert shared_bits(assign, a, b) == [(j, j) for j in range(256)]
    assert normalized_shift_max(assign, a, b) == 0.0


def test_lineage_with_indels():
    tree = balanced(3, EdgeParams(0.05, 0.05, 0.05))
    assign = evolve_tree(tree, 400, RngStream(8), track_lineage=True)
    ids = {v: set(assign.lineage_of(v).tolist()) for v in range(tree.n_nodes)}
    inserted_anywhere = 0
    for v in range(tree.n_nodes):
        lineage = assign.lineage_of(v)
        assert lineage.size == assign.length(v)
        assert len(ids[v]) == lineage.size
        assert root_descended_in_order(assign, v)
        if v == 0:
            continue
        created = ids[v] - ids[tree.parents[v]]
        assert all(i > 400 for i in created)
        inserted_anywhere += len(created)
        # ids created on this edge never show up outside the subtree below it
        for u in range(tree.n_nodes):
            if v not in tree.ancestors(u):
                assert not created & ids[u]
    assert inserted_anywhere > 0


def test_shared_bits_self_pairs():
    tree = balanced(2, EdgeParams(0.05, 0.05, 0.05))
    assign = evolve_tree(tree, 300, RngStream(4), track_lineage=True)
    leaf = tree.leaves[0]
    pairs = shared_bits(assign, leaf, leaf)
    assert sorted(pairs) == [(j, j) for j in range(assign.length(leaf))]


def test_shift_symmetric_case_is_raw_shift():
    tree = balanced(3, EdgeParams(0.05, 0.05, 0.05))
    assign = evolve_tree(tree, 500, RngStream(6), track_lineage=True)
    a, b = tree.leaves[0], tree.leaves[-1]
    assert normalized_shift_max(assign, a, b) == pytest.approx(raw_shift_max(assign, a, b))


def test_lineage_missing():
    tree = balanced(2, EdgeParams(p_sub=0.05))
    assign = evolve_tree(tree, 64, RngStream(1))
    with pytest.raises(LineageMissingError):
        shared_bits(assign, 3, 4)
    with pytest.raises(LineageMissingError):
        assign.leaf_lineage()


def test_leaf_sequences_keyed_by_label(depth3_tree):
    assign = evolve_tree(depth3_tree, 32, RngStream(3))
    leaves = assign.leaf_sequences()
    assert sorted(leaves) == [f"t{i}" for i in range(1, 9)]
    assert leaves["t1"] == assign.bits(7)
