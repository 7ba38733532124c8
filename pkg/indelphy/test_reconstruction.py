import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phylo.errors import (
    DegenerateSequencesError,
    EstimatorError,
    InsufficientLeavesError,
    LeafSetMismatchError,
    ReconstructionStall,
)
from phylo.estimators import DeepEstimateSet, OracleDistances
from phylo.indel_sim import Bitstring, RngStream, evolve_tree
from phylo.reconstruction import (
    LevelDistances,
    QuartetSplit,
    QuartetTally,
    ReconstructedTree,
    ReconstructionSettings,
    four_point_method,
    grid_steps,
    is_short_quartet,
    oracle_source,
    pick_cherries,
    rf_distance,
    round_to_grid,
    sequences_source,
    three_point,
    tree_reconstruct,
)
from phylo.tree_model import EdgeParams, balanced, balanced_jitter


def quartet_matrix(e1, e2, e3, e4, e5):
    """Additive distances of the quartet ab|cd with pendant edges e1..e4 and middle edge e5."""
    pendant = [e1, e2, e3, e4]
    D = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            if i != j:
                cross = (i < 2) != (j < 2)
                D[i, j] = pendant[i] + pendant[j] + (e5 if cross else 0.0)
    return D


def test_four_point_examples():
    D = quartet_matrix(0.1, 0.2, 0.3, 0.4, 0.5)
    q = four_point_method(D, taxa=(7, 8, 9, 10))
    assert q.split == "ab|cd"
    assert q.margin == pytest.approx(1.0)
    assert q.sides() == ((7, 8), (9, 10))
    assert q.joins(8, 7) and q.separates(7, 9) and not q.separates(9, 10)

    swapped = D[np.ix_([0, 2, 1, 3], [0, 2, 1, 3])]
    assert four_point_method(swapped).split == "ac|bd"
    assert four_point_method(np.ones((4, 4))).split == "ab|cd"


def test_four_point_rejects_bad_input():
    D = quartet_matrix(0.1, 0.1, 0.1, 0.1, 0.1)
    D[0, 3] = D[3, 0] = math.inf
    with pytest.raises(EstimatorError):
        four_point_method(D)
    with pytest.raises(EstimatorError):
        four_point_method(np.zeros((3, 3)))


edge = st.floats(min_value=0.01, max_value=2.0)


@given(edge, edge, edge, edge, st.floats(min_value=0.05, max_value=2.0))
@settings(deadline=None)
def test_four_point_additive_quartet(e1, e2, e3, e4, e5):
    q = four_point_method(quartet_matrix(e1, e2, e3, e4, e5))
    assert q.split == "ab|cd"
    assert q.margin == pytest.approx(2 * e5)


@given(
    edge, edge, edge, edge,
    st.floats(min_value=0.05, max_value=2.0),
    st.lists(st.floats(min_value=-0.49, max_value=0.49), min_size=6, max_size=6),
)
@settings(deadline=None)
def test_four_point_tolerates_small_noise(e1, e2, e3, e4, e5, noise):
    D = quartet_matrix(e1, e2, e3, e4, e5)
    for (i, j), eps in zip([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], noise):
        D[i, j] += eps * e5
        D[j, i] = D[i, j]
    assert four_point_method(D).split == "ab|cd"


def test_three_point():
    assert three_point(5.0, 6.0, 3.0) == 4.0


@pytest.mark.parametrize("x, steps", [(0.26, 3), (0.25, 3), (0.149, 1), (0.01, 1), (0.0, 1), (1.0, 10)])
def test_grid_rounding(x, steps):
    assert grid_steps(x, 0.1) == steps
    assert round_to_grid(x, 0.1) == pytest.approx(steps * 0.1)


def test_grid_rounding_errors():
    with pytest.raises(ValueError):
        grid_steps(math.inf, 0.1)
    with pytest.raises(ValueError):
        grid_steps(0.3, 0.0)


def test_is_short_quartet():
    D = np.full((4, 4), 0.5)
    np.fill_diagonal(D, 0.0)
    level = LevelDistances([10, 11, 12, 13], D)
    assert is_short_quartet((10, 11, 12, 13), 0, 1.0, level)
    D[1, 3] = D[3, 1] = 1.5
    assert not is_short_quartet((10, 11, 12, 13), 0, 1.0, level)


def test_is_short_quartet_deep_uses_diameter_test():
    D = np.full((4, 4), 0.5)
    np.fill_diagonal(D, 0.0)
    deep = {}
    for i in range(4):
        for j in range(i + 1, 4):
            deep[(i, j)] = DeepEstimateSet((i, j), 1, (0.5, 3.0), (2.5, 2.5), 0, 0.5)
    level = LevelDistances([0, 1, 2, 3], D, deep)
    assert is_short_quartet((0, 1, 2, 3), 1, 1.0, level)
    deep[(0, 2)] = DeepEstimateSet((0, 2), 1, (2.0, 3.0), (1.0, 1.0), 0, 2.0)
    assert not is_short_quartet((0, 1, 2, 3), 1, 1.0, level)
    # level 0 falls back to the matrix
    assert is_short_quartet((0, 1, 2, 3), 0, 1.0, level)


def test_pick_cherries():
    first = QuartetSplit((0, 1, 2, 3), "ab|cd", 1.0)
    assert pick_cherries([0, 1, 2, 3], [first]) == [(0, 1), (2, 3)]

    second = QuartetSplit((0, 1, 2, 4), "ac|bd", 1.0)
    assert pick_cherries([0, 1, 2, 3, 4], [first, second]) == [(1, 4), (2, 3)]

    D = np.array([
        [0.0, 0.1, 0.9, 0.9],
        [0.1, 0.0, 0.9, 0.2],
        [0.9, 0.9, 0.0, 0.9],
        [0.9, 0.2, 0.9, 0.0],
    ])
    conflict = [QuartetSplit((0, 1, 2, 3), "ab|cd", 0.1), QuartetSplit((0, 1, 2, 3), "ad|bc", 0.1)]
    # each joined pair is separated by the other split
    with pytest.raises(ReconstructionStall):
        pick_cherries([0, 1, 2, 3], conflict, LevelDistances([0, 1, 2, 3], D), level=2)


def test_pick_cherries_greedy_by_distance():
    D = np.array([
        [0.0, 0.3, 0.9, 0.9],
        [0.3, 0.0, 0.9, 0.9],
        [0.9, 0.9, 0.0, 0.1],
        [0.9, 0.9, 0.1, 0.0],
    ])
    q = QuartetSplit((0, 1, 2, 3), "ab|cd", 1.0)
    assert pick_cherries([0, 1, 2, 3], [q], LevelDistances([0, 1, 2, 3], D)) == [(2, 3), (0, 1)]


def test_pick_cherries_stall():
    with pytest.raises(ReconstructionStall) as info:
        pick_cherries([0, 1, 2, 3, 4], [], level=3)
    assert info.value.level == 3
    assert info.value.remaining == 5
    assert pick_cherries([0, 1], []) == []


def test_pick_cherries_ignores_thin_margins():
    strong = QuartetSplit((0, 1, 2, 3), "ab|cd", 0.4)
    # joins 0,2 and 1,4; separates 0 from 1
    thin = QuartetSplit((0, 2, 1, 4), "ab|cd", 0.05)
    nodes = [0, 1, 2, 3, 4]
    assert pick_cherries(nodes, [strong, thin]) == [(1, 4), (2, 3)]
    assert pick_cherries(nodes, [strong, thin], min_margin=0.1) == [(0, 1), (2, 3)]
    with pytest.raises(ReconstructionStall):
        pick_cherries(nodes, [strong, thin], min_margin=1.0)


def test_quartet_tally():
    tally = QuartetTally.from_splits([3, 5, 8, 9], [QuartetSplit((3, 5, 8, 9), "ac|bd", 1.0)])
    assert tally.candidate_pairs() == [(0, 2), (1, 3)]
    assert tally.together[0, 2] == 1 and tally.separated[0, 1] == 1
    assert pick_cherries([3, 5, 8, 9], tally) == [(3, 8), (5, 9)]
    assert QuartetTally.empty([1, 2]).candidate_pairs() == []


def oracle_reconstruct(tree):
    source, labels = oracle_source(tree)
    return tree_reconstruct(source, ReconstructionSettings(lambda_min=tree.lambda_min), labels)


@pytest.mark.parametrize("depth", [2, 3, 4, 5])
def test_oracle_reconstruction_is_exact(depth, sub_params):
    tree = balanced(depth, sub_params)
    rebuilt = oracle_reconstruct(tree)
    truth = ReconstructedTree.from_model_tree(tree)
    assert rf_distance(rebuilt, truth) == 0
    assert rebuilt.split_taus() == truth.split_taus()


@pytest.mark.parametrize("depth, seed", [(3, 1), (4, 2), (4, 3)])
def test_oracle_reconstruction_jitter(depth, seed, sub_params):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    tree = balanced_jitter(depth, sub_params, tau_max=3, rng=rng)
    rebuilt = oracle_reconstruct(tree)
    truth = ReconstructedTree.from_model_tree(tree)
    assert rf_distance(rebuilt, truth) == 0
    assert rebuilt.split_taus() == truth.split_taus()


@pytest.mark.parametrize("margin", [0.0, 1.0, 1.9])
def test_oracle_exact_for_any_margin_below_two(margin, sub_params):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(9)))
    tree = balanced_jitter(4, sub_params, tau_max=3, rng=rng)
    source, labels = oracle_source(tree)
    settings = ReconstructionSettings(lambda_min=tree.lambda_min, resolve_margin=margin)
    rebuilt = tree_reconstruct(source, settings, labels)
    truth = ReconstructedTree.from_model_tree(tree)
    assert rf_distance(rebuilt, truth) == 0
    assert rebuilt.split_taus() == truth.split_taus()
    assert rebuilt.stats["resolved_quartets"] <= rebuilt.stats["short_quartets"]


def test_oracle_first_level_cherries(depth3_tree):
    rebuilt = oracle_reconstruct(depth3_tree)
    cherries = set()
    for line in rebuilt.decision_log:
        if line.startswith("h=0 cherry="):
            a, b = line.split()[1][len("cherry="):].split(",")
            cherries.add((int(a), int(b)))
    assert cherries == {(0, 1), (2, 3), (4, 5), (6, 7)}
    assert rebuilt.stats["cherries"] == 6


def test_rf_distance_examples():
    balanced6 = ReconstructedTree.from_newick("((t1,t2),(t3,t4),(t5,t6));")
    caterpillar = ReconstructedTree.from_newick("(t1,(t2,(t3,(t4,(t5,t6)))));")
    assert rf_distance(balanced6, balanced6) == 0
    assert rf_distance(balanced6, caterpillar) == 2

    a = ReconstructedTree.from_newick("((t1,t2),(t3,t4));")
    b = ReconstructedTree.from_newick("((t1,t3),(t2,t4));")
    assert rf_distance(a, b) == 2
    assert a.splits() == {frozenset({"t3", "t4"})}


def test_rf_distance_ignores_rooting_and_lengths():
    unrooted = ReconstructedTree.from_newick("((t1:0.1,t2:0.2):0.3,(t3:0.1,t4:0.1):0.2,(t5:0.4,t6:0.1):0.1);")
    rooted = ReconstructedTree.from_newick("(((t5,t6),(t3,t4)),(t2,t1));")
    assert rf_distance(unrooted, rooted) == 0
    shuffled = ReconstructedTree.from_newick("((t1,t3),(t2,t4),(t5,t6));")
    assert rf_distance(unrooted, shuffled) == len(unrooted.splits() ^ shuffled.splits()) == 4


def test_rf_distance_leaf_mismatch():
    a = ReconstructedTree.from_newick("((t1,t2),(t3,t4));")
    b = ReconstructedTree.from_newick("((t1,t2),(t3,t5));")
    with pytest.raises(LeafSetMismatchError):
        rf_distance(a, b)


def test_newick_round_trip(sub_params):
    tree = balanced(3, sub_params)
    rebuilt = oracle_reconstruct(tree)
    text = rebuilt.to_newick()
    again = ReconstructedTree.from_newick(text, lambda_min=tree.lambda_min)
    assert rf_distance(rebuilt, again) == 0
    assert again.split_taus() == rebuilt.split_taus()
    assert again.to_newick() == text


def simulated_leaves(tree, k_root, seed):
    return evolve_tree(tree, k_root, RngStream(seed)).leaf_sequences()


def reconstruct_or_stall(leaves, settings):
    try:
        return tree_reconstruct(leaves, settings).to_newick()
    except ReconstructionStall as stall:
        return ("stall", stall.level, stall.remaining)


@pytest.mark.parametrize("mode, params, k_root", [
    ("sym", EdgeParams(p_sub=0.05), 2048),
    ("sym", EdgeParams(0.05, 0.01, 0.01), 2048),
    ("asym", EdgeParams(0.05, 0.01, 0.02), 1024),
])
def test_simulated_reconstruction_is_deterministic(mode, params, k_root):
    tree = balanced(3, params)
    settings = ReconstructionSettings(lambda_min=tree.lambda_min, k=1024, mode=mode)
    leaves = simulated_leaves(tree, k_root, 5)
    first = reconstruct_or_stall(leaves, settings)
    assert first == reconstruct_or_stall(leaves, settings)
    if isinstance(first, str):
        rebuilt = ReconstructedTree.from_newick(first)
        assert rebuilt.leaf_set() == frozenset(leaves)
        rebuilt.validate()


def level_zero_cherries(decision_log):
    pairs = []
    for line in decision_log:
        if line.startswith("h=0 cherry="):
            a, b = line.split()[1][len("cherry="):].split(",")
            pairs.append((int(a), int(b)))
    return pairs


def test_level_cherries_follow_pick_cherries(sub_params):
    tree = balanced(3, sub_params)
    settings = ReconstructionSettings(lambda_min=tree.lambda_min, k=4096)
    leaves = simulated_leaves(tree, 8192, 11)
    source, _ = sequences_source(leaves, settings)
    D = source.leaf_matrix()
    level = LevelDistances(range(8), D)
    r = settings.radius(8)
    splits = [
        four_point_method(D[np.ix_(q, q)], q)
        for q in itertools.combinations(range(8), 4)
        if is_short_quartet(q, 0, r, level)
    ]
    try:
        expected = pick_cherries(list(range(8)), splits, level, min_margin=settings.min_margin)
    except ReconstructionStall:
        expected = []
    try:
        log = tree_reconstruct(leaves, settings).decision_log
    except ReconstructionStall as stall:
        log = stall.decision_log
    assert level_zero_cherries(log) == expected


def test_signature_source_reuse_matches_fresh_source(sub_params):
    tree = balanced(3, sub_params)
    leaves = simulated_leaves(tree, 200_000, 4)
    coarse = ReconstructionSettings(lambda_min=tree.lambda_min, k=100_000)
    fine = ReconstructionSettings(lambda_min=0.7 * tree.lambda_min, k=100_000)
    shared, labels = sequences_source(leaves, coarse)
    fresh, _ = sequences_source(leaves, fine)

    def outcome(source, settings):
        try:
            rebuilt = tree_reconstruct(source, settings, labels)
        except ReconstructionStall as stall:
            return stall.decision_log
        return rebuilt.to_newick(), rebuilt.distance_table.to_tsv()

    outcome(shared, coarse)
    assert outcome(shared, fine) == outcome(fresh, fine)


def test_reconstruction_input_errors():
    settings = ReconstructionSettings(lambda_min=0.1, k=1024)
    long_bits = Bitstring.zeros(2048)
    with pytest.raises(InsufficientLeavesError):
        tree_reconstruct({"a": long_bits, "b": long_bits, "c": long_bits}, settings)
    leaves = {"a": long_bits, "b": long_bits, "c": long_bits, "d": Bitstring.zeros(100)}
    with pytest.raises(DegenerateSequencesError) as info:
        tree_reconstruct(leaves, settings)
    assert info.value.labels == ["d"]
    with pytest.raises(ValueError):
        tree_reconstruct(OracleDistances(np.zeros((4, 4))), settings, labels=["a", "b"])


def test_reconstruction_settings():
    settings = ReconstructionSettings(lambda_min=0.1)
    assert settings.radius(16) == pytest.approx(4.0)
    assert settings.cutoff_height(16) == 2
    assert settings.cutoff_height(8) == 2
    assert ReconstructionSettings(lambda_min=0.1, r=0.7).radius(16) == 0.7
    assert settings.zeta == 0.01
    assert settings.min_margin == pytest.approx(0.1)
    assert ReconstructionSettings(lambda_min=0.2, resolve_margin=0.5).min_margin == pytest.approx(0.1)
    assert ReconstructionSettings(lambda_min=0.2, resolve_margin=0.0).min_margin == 0.0
