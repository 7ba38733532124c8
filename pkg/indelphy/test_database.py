import sqlite3

import pytest

from db.database import ResultDB, ResultRecord
from phylo.errors import ConfigHashMismatch, ResultStoreError


@pytest.fixture
def db(tmp_path):
    return ResultDB(str(tmp_path / "nested" / "results.db"))


def test_register_run(db):
    db.register_run("aaaa", "k=64\n")
    db.register_run("aaaa", "k=64\n")
    with pytest.raises(ConfigHashMismatch):
        db.register_run("bbbb", "k=128\n")


def test_append_is_idempotent(db):
    db.register_run("aaaa", "")
    first = ResultRecord(trial_id=0, rf=0, success=True, wall_time=0.5, stats={"levels": 3})
    assert db.append("aaaa", first) is True
    clash = ResultRecord(trial_id=0, rf=4, success=False)
    assert db.append("aaaa", clash) is False
    stored = db.results("aaaa")
    assert len(stored) == 1
    assert stored[0].rf == 0 and stored[0].success
    assert stored[0].stats == {"levels": 3}


def test_completed_trials_by_sweep_key(db):
    db.register_run("aaaa", "")
    for trial in (2, 0):
        db.append("aaaa", ResultRecord(trial_id=trial, rf=None, success=False, sweep_key="k64"))
    db.append("aaaa", ResultRecord(trial_id=1, rf=2, success=False, sweep_key="k128"))
    assert db.completed_trials("aaaa", "k64") == {0, 2}
    assert db.completed_trials("aaaa", "k128") == {1}
    assert db.completed_trials("aaaa") == set()
    assert db.completed_trials("other", "k64") == set()


def test_results_order(db):
    db.register_run("aaaa", "")
    for key, trial in [("k64", 1), ("k128", 0), ("k64", 0)]:
        db.append("aaaa", ResultRecord(trial_id=trial, rf=None, success=False, sweep_key=key))
    assert [(r.sweep_key, r.trial_id) for r in db.results("aaaa")] == [("k128", 0), ("k64", 0), ("k64", 1)]
    assert [r.trial_id for r in db.results("aaaa", "k64")] == [0, 1]
    assert db.results("aaaa", "k64")[0].rf is None


def test_reopen_keeps_records(tmp_path):
    path = str(tmp_path / "results.db")
    ResultDB(path).append("aaaa", ResultRecord(trial_id=5, rf=0, success=True))
    assert ResultDB(path).completed_trials("aaaa") == {5}


def test_store_errors_are_raised(db):
    db.register_run("aaaa", "")
    conn = sqlite3.connect(db.db_path)
    conn.execute("DROP TABLE results")
    conn.commit()
    conn.close()
    with pytest.raises(ResultStoreError, match="cannot store trial 3"):
        db.append("aaaa", ResultRecord(trial_id=3, rf=0, success=True))
    with pytest.raises(ResultStoreError, match="cannot read completed trials"):
        db.completed_trials("aaaa")
