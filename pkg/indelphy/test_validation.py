import json
import math

import numpy as np
import pytest

from conftest import slow
from config_loader import ExperimentConfig
from phylo.errors import EstimatorError, LineageMissingError
from phylo.tree_model import EdgeParams, balanced, indel_length
from validation import (
    BITSHIFTS,
    BLOCK_BALANCE,
    DEEP_DISTANCE,
    LEMMAS,
    LENGTHS,
    LemmaReport,
    TrialBatch,
    _window_stat,
    bounds_sweep,
    check_bitshifts,
    check_block_balance,
    check_deep_distance,
    check_lengths,
    check_pseudo_block_gap,
    check_signature_variance,
    check_unbiasedness,
    default_deep_pairs,
    default_unbias_pairs,
    default_gap_sweep,
    exact_known_distances,
    reports_to_json,
    run_checks,
    self_test,
    worker_count,
)


def test_self_test_flags_every_checker():
    results = self_test(ExperimentConfig(seed=4))
    assert sorted(results) == sorted(LEMMAS)
    assert not any(results.values())


@pytest.mark.parametrize("mode", ["sym", "asym"])
def test_lengths_without_indels(mode, sub_params):
    config = ExperimentConfig(k=256, trials=4, seed=1, mode=mode)
    report = check_lengths(TrialBatch(config, balanced(3, sub_params)))
    assert report.passed
    assert report.pass_rate == 1.0
    assert report.quantiles["max"] == 0.0


def test_bitshifts_without_indels(depth3_tree):
    config = ExperimentConfig(k=256, trials=3, seed=2, track_lineage=True)
    report = check_bitshifts(TrialBatch(config, depth3_tree))
    assert report.passed
    assert report.statistic == 0.0


def test_bitshifts_need_lineage(depth3_tree):
    batch = TrialBatch(ExperimentConfig(k=256, trials=2), depth3_tree)
    with pytest.raises(LineageMissingError):
        check_bitshifts(batch)


def test_block_balance_random_sequences(sub_params):
    config = ExperimentConfig(k=1024, trials=4, seed=5)
    report = check_block_balance(TrialBatch(config, balanced(4, sub_params)))
    assert report.bound == pytest.approx(4.0)
    assert report.passed


def test_unbiasedness_symmetric():
    tree = balanced(2, EdgeParams(p_sub=0.05))
    config = ExperimentConfig(k=4096, trials=400, seed=8)
    report = check_unbiasedness(TrialBatch(config, tree))
    assert report.passed
    assert len(report.details["pairs"]) == 6
    assert report.sample_size == 400


def test_pseudo_block_gap_without_indels(depth3_tree):
    config = ExperimentConfig(k=1024, trials=3, seed=6)
    report = check_pseudo_block_gap(TrialBatch(config, depth3_tree))
    assert report.passed
    assert report.details["k"] == [256, 1024]
    assert report.details["median_gap"] == [0.0, 0.0]


def test_signature_variance_needs_two_heights(sub_params):
    batch = TrialBatch(ExperimentConfig(k=64, trials=2), balanced(1, sub_params))
    with pytest.raises(EstimatorError):
        check_signature_variance(batch)


def test_deep_distance_report(depth3_tree):
    batch = TrialBatch(ExperimentConfig(k=256, trials=2, seed=3), depth3_tree)
    report = check_deep_distance(batch)
    assert report.lemma == DEEP_DISTANCE
    assert report.sample_size == 2
    assert [p["pair"] for p in report.details["pairs"]] == [[1, 2]]
    assert 0.0 <= report.statistic <= 1.0
    assert report.passed == (report.statistic >= 0.9)
    with pytest.raises(EstimatorError):
        check_deep_distance(TrialBatch(ExperimentConfig(k=256, trials=1, deep_h=3), depth3_tree))


def test_default_deep_pairs(depth3_tree):
    assert set(default_deep_pairs(depth3_tree, 1, 2)) == {(3, 4), (5, 6)}
    with pytest.raises(EstimatorError):
        default_deep_pairs(balanced(2, EdgeParams(p_sub=0.05)), 2, 4)


def test_exact_known_distances(sub_params):
    tree = balanced(2, sub_params)
    known = exact_known_distances(tree)
    assert known.get(0, 3) == pytest.approx(2 * sub_params.length)
    assert known.get(1, 4) == pytest.approx(sub_params.length)
    with pytest.raises(EstimatorError):
        known.get(1, 5)


def test_report_serialisation():
    report = LemmaReport(lemma=LENGTHS, statistic=math.inf, bound=1.0, passed=False, sample_size=3)
    row = report.to_dict()
    assert row["pass"] is False
    assert row["statistic"] is None
    payload = json.loads(reports_to_json([report], "abc", {"lengths": False, "bitshifts": False}))
    assert payload["config_hash"] == "abc"
    assert payload["reports"][0]["lemma"] == LENGTHS
    assert list(payload["self_test"]) == ["bitshifts", "lengths"]
    assert "FAIL" in report.summary()


def test_run_checks(depth3_tree):
    batch = TrialBatch(ExperimentConfig(k=256, trials=2, seed=3), depth3_tree)
    reports = run_checks(batch, [LENGTHS, BLOCK_BALANCE])
    assert [r.lemma for r in reports] == [LENGTHS, BLOCK_BALANCE]
    with pytest.raises(ValueError):
        run_checks(batch, ["no_such_check"])


def test_checks_are_deterministic():
    config = ExperimentConfig(k=256, trials=6, seed=11, p_del=0.02, p_ins=0.02)
    tree = balanced(3, config.edge_params())
    first = check_unbiasedness(TrialBatch(config, tree)).to_dict()
    again = check_unbiasedness(TrialBatch(config, tree)).to_dict()
    assert first == again


def test_default_gap_sweep():
    assert default_gap_sweep(ExperimentConfig(k=1024)) == [256, 1024]
    assert default_gap_sweep(ExperimentConfig(k=32)) == [16, 32]
    assert default_gap_sweep(ExperimentConfig(k=64, k_sweep="64,16,64")) == [16, 64]


def test_bounds_sweep(sub_params):
    rows = bounds_sweep(ExperimentConfig(trials=2, seed=1), [64, 128], balanced(2, sub_params))
    assert [(lemma, k) for lemma, _, k, _, _ in rows] == [
        (LENGTHS, 64), (BITSHIFTS, 64), (BLOCK_BALANCE, 64),
        (LENGTHS, 128), (BITSHIFTS, 128), (BLOCK_BALANCE, 128),
    ]
    assert all(n == 4 for _, n, _, _, _ in rows)
    assert rows[1][3] == 0.0


def test_window_stat():
    assert _window_stat(np.array([0, 0, 0, 0], dtype=np.uint8)) == pytest.approx(1.0)
    assert _window_stat(np.array([0, 1], dtype=np.uint8)) == pytest.approx(0.5)
    assert _window_stat(np.array([], dtype=np.uint8)) == 0.0


def test_worker_count(monkeypatch):
    monkeypatch.setenv("INDELPHY_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("INDELPHY_THREADS", "0")
    assert worker_count() == 1
    monkeypatch.setenv("INDELPHY_THREADS", "many")
    assert worker_count() >= 1


def test_batch_needs_a_tree():
    with pytest.raises(ValueError):
        TrialBatch(ExperimentConfig())


@slow
def test_regularity_at_scale():
    config = ExperimentConfig(k=10_000, trials=100, seed=2024, p_del=0.02, p_ins=0.02, track_lineage=True)
    batch = TrialBatch(config, balanced(6, config.edge_params()))
    for report in run_checks(batch, [LENGTHS, BITSHIFTS, BLOCK_BALANCE]):
        assert report.pass_rate >= 0.99, report.summary()


@slow
def test_unbiasedness_with_symmetric_indels():
    params = EdgeParams(p_sub=EdgeParams.substitution_only(0.1 - indel_length(0.02, 0.02)).p_sub, p_del=0.02, p_ins=0.02)
    tree = balanced(4, params)
    config = ExperimentConfig(k=100_000, zeta=0.25, trials=10_000, seed=31, p_del=0.02, p_ins=0.02)
    pairs = default_unbias_pairs(tree, limit=len(tree.leaves) ** 2, max_distance=0.8 + 1e-9)
    report = check_unbiasedness(TrialBatch(config, tree), pairs)
    assert len(pairs) == 120
    for row in report.details["pairs"]:
        assert row["d"] <= 0.8 + 1e-9
        assert 0.9 <= row["mean"] <= 1.1, row


@slow
def test_signature_variance_at_scale():
    tree = balanced(6, EdgeParams.substitution_only(0.3))
    config = ExperimentConfig(k=100_000, zeta=0.25, trials=2000, seed=32, heights="1,2,3,4,5,6", control_lambda=0.45)
    report = check_signature_variance(TrialBatch(config, tree, track_lineage=False))
    assert report.statistic <= 4.0
    assert report.details["control_growth"] >= 1.2
