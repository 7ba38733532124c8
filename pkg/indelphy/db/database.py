import json
import os
import sqlite3
import threading
from dataclasses import dataclass, field
from datetime import datetime
from typing import List, Optional, Set

from phylo.errors import ConfigHashMismatch, ResultStoreError


@dataclass
class ResultRecord:
    trial_id: int
    rf: Optional[int]
    success: bool
    wall_time: float = 0.0
    stats: dict = field(default_factory=dict)
    sweep_key: str = ""


class ResultDB:
    """Append-only store of per-trial results, keyed by config hash."""

    def __init__(self, db_path="results.db"):
        self.db_path = db_path
        self._lock = threading.Lock()
        parent = os.path.dirname(os.path.abspath(db_path))
        os.makedirs(parent, exist_ok=True)
        self._init_db()

    def _connect(self):
        return sqlite3.connect(self.db_path)

    def _init_db(self):
        with self._lock:
            conn = self._connect()
            try:
                cursor = conn.cursor()
                try:
                    cursor.execute('PRAGMA journal_mode=WAL')
                except sqlite3.OperationalError:
                    pass
                cursor.execute('''
                    CREATE TABLE IF NOT EXISTS runs (
                        config_hash TEXT PRIMARY KEY,
                        config_text TEXT,
                        created TEXT
                    )
                ''')
                cursor.execute('''
                    CREATE TABLE IF NOT EXISTS results (
                        config_hash TEXT,
                        sweep_key TEXT,
                        trial_id INTEGER,
                        rf INTEGER,
                        success INTEGER,
                        wall_time REAL,
                        stats_json TEXT,
                        PRIMARY KEY (config_hash, sweep_key, trial_id)
                    )
                ''')
                conn.commit()
            finally:
                conn.close()

    def register_run(self, config_hash: str, config_text: str):
        """Claim the store for one configuration; a different hash is rejected."""
        with self._lock:
            conn = self._connect()
            try:
                cursor = conn.cursor()
                cursor.execute('SELECT config_hash FROM runs')
                existing = [row[0] for row in cursor.fetchall()]
                if existing and config_hash not in existing:
                    raise ConfigHashMismatch(
                        f"{self.db_path} belongs to config {existing[0]}, refusing to mix in {config_hash}"
                    )
                if not existing:
                    cursor.execute(
                        'INSERT INTO runs (config_hash, config_text, created) VALUES (?, ?, ?)',
                        (config_hash, config_text, datetime.now().isoformat()),
                    )
                    conn.commit()
                    print(f"[ResultDB] Registered run {config_hash}")
                else:
                    print(f"[ResultDB] Resuming run {config_hash}")
            finally:
                conn.close()

    def completed_trials(self, config_hash: str, sweep_key: str = "") -> Set[int]:
        with self._lock:
            conn = self._connect()
            try:
                cursor = conn.cursor()
                cursor.execute(
                    'SELECT trial_id FROM results WHERE config_hash = ? AND sweep_key = ?',
                    (config_hash, sweep_key),
                )
                return {int(row[0]) for row in cursor.fetchall()}
            except sqlite3.Error as e:
                print(f"[ResultDB] Error reading completed trials: {e}")
                raise ResultStoreError(f"{self.db_path}: cannot read completed trials: {e}") from e
            finally:
                conn.close()

    def append(self, config_hash: str, record: ResultRecord) -> bool:
        """Insert one record; False when (sweep_key, trial_id) is already stored, ResultStoreError on failure."""
        with self._lock:
            conn = self._connect()
            try:
                cursor = conn.cursor()
                cursor.execute('''
                    INSERT OR IGNORE INTO results
                        (config_hash, sweep_key, trial_id, rf, success, wall_time, stats_json)
                    VALUES (?, ?, ?, ?, ?, ?, ?)
                ''', (
                    config_hash,
                    record.sweep_key,
                    record.trial_id,
                    record.rf,
                    1 if record.success else 0,
                    record.wall_time,
                    json.dumps(record.stats, sort_keys=True),
                ))
                conn.commit()
                return cursor.rowcount == 1
            except sqlite3.Error as e:
                print(f"[ResultDB] Error appending trial {record.trial_id}: {e}")
                raise ResultStoreError(f"{self.db_path}: cannot store trial {record.trial_id}: {e}") from e
            finally:
                conn.close()

    def results(self, config_hash: str, sweep_key: Optional[str] = None) -> List[ResultRecord]:
        """Stored records ordered by (sweep_key, trial_id)."""
        with self._lock:
            conn = self._connect()
            try:
                cursor = conn.cursor()
                if sweep_key is None:
                    cursor.execute(
                        'SELECT sweep_key, trial_id, rf, success, wall_time, stats_json FROM results '
                        'WHERE config_hash = ? ORDER BY sweep_key, trial_id',
                        (config_hash,),
                    )
                else:
                    cursor.execute(
                        'SELECT sweep_key, trial_id, rf, success, wall_time, stats_json FROM results '
                        'WHERE config_hash = ? AND sweep_key = ? ORDER BY trial_id',
                        (config_hash, sweep_key),
                    )
                return [
                    ResultRecord(
                        trial_id=int(trial_id),
                        rf=None if rf is None else int(rf),
                        success=bool(success),
                        wall_time=float(wall_time or 0.0),
                        stats=json.loads(stats_json or "{}"),
                        sweep_key=key,
                    )
                    for key, trial_id, rf, success, wall_time, stats_json in cursor.fetchall()
                ]
            finally:
                conn.close()
