"""
Run Logger for Experiments
Structured JSONL event log shared by simulate / reconstruct / validate / experiment runs.
"""

import json
import os
import uuid
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from threading import Lock
from typing import Dict, Optional, Tuple


_EVENT_NAMESPACE = uuid.UUID("6f1c2a8e-4a53-4d7e-9a10-3e5b1f0c7d21")


@dataclass
class TrialInfo:
    """Which trial (and sweep point) an event belongs to"""
    trial_id: int = -1
    seed: int = 0
    sweep_key: str = ""
    mode: str = "sym"


@dataclass
class TimingInfo:
    """Wall-clock cost of the step"""
    phase: str = ""
    wall_time_s: float = 0.0


@dataclass
class OutcomeInfo:
    """Result of the step"""
    success: bool = True
    rf: Optional[int] = None
    error: str = ""
    stalled_level: Optional[int] = None


@dataclass
class RunEvent:
    """
    One entry of events.jsonl.
    kind is one of: run_start, simulate, reconstruct, validate, trial, run_end.
    """
    kind: str = ""
    timestamp: str = ""
    event_id: str = ""
    config_hash: str = ""

    trial: TrialInfo = field(default_factory=TrialInfo)
    timing: TimingInfo = field(default_factory=TimingInfo)
    outcome: OutcomeInfo = field(default_factory=OutcomeInfo)

    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.timestamp:
            self.timestamp = datetime.now(timezone.utc).isoformat()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "timestamp": self.timestamp,
            "event_id": self.event_id,
            "config_hash": self.config_hash,
            "trial": asdict(self.trial),
            "timing": asdict(self.timing),
            "outcome": asdict(self.outcome),
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunEvent":
        return cls(
            kind=data.get("kind", ""),
            timestamp=data.get("timestamp", ""),
            event_id=data.get("event_id", ""),
            config_hash=data.get("config_hash", ""),
            trial=TrialInfo(**data.get("trial", {})),
            timing=TimingInfo(**data.get("timing", {})),
            outcome=OutcomeInfo(**data.get("outcome", {})),
            metadata=data.get("metadata", {}),
        )


def event_id_for(config_hash: str, kind: str, trial_id: int, sequence: int) -> str:
    return str(uuid.uuid5(_EVENT_NAMESPACE, f"{config_hash}:{kind}:{trial_id}:{sequence}"))


class RunLogger:
    """
    Thread-safe JSONL writer with size-based rotation.
    Event ids are derived from (config_hash, kind, trial, per-kind sequence number).
    """

    def __init__(
        self,
        log_dir: str,
        config_hash: str = "",
        filename: str = "events.jsonl",
        max_file_size_mb: int = 50,
        backup_count: int = 3,
    ):
        self.log_dir = log_dir
        self.config_hash = config_hash
        self.filename = filename
        self.max_file_size_bytes = max_file_size_mb * 1024 * 1024
        self.backup_count = backup_count

        self._lock = Lock()
        self._sequence: Dict[Tuple[str, int], int] = {}

        os.makedirs(log_dir, exist_ok=True)

    @property
    def log_path(self) -> str:
        return os.path.join(self.log_dir, self.filename)

    def _rotate_if_needed(self):
        if not os.path.exists(self.log_path):
            return
        if os.path.getsize(self.log_path) < self.max_file_size_bytes:
            return

        for i in range(self.backup_count - 1, 0, -1):
            old_path = f"{self.log_path}.{i}"
            new_path = f"{self.log_path}.{i + 1}"
            if os.path.exists(old_path):
                os.replace(old_path, new_path)
        os.replace(self.log_path, f"{self.log_path}.1")

    def log(self, entry: RunEvent) -> str:
        """Write one event; returns its event_id."""
        with self._lock:
            if not entry.config_hash:
                entry.config_hash = self.config_hash
            if not entry.event_id:
                key = (entry.kind, entry.trial.trial_id)
                seq = self._sequence.get(key, 0)
                self._sequence[key] = seq + 1
                entry.event_id = event_id_for(entry.config_hash, entry.kind, entry.trial.trial_id, seq)

            self._rotate_if_needed()
            with open(self.log_path, "a", encoding="utf-8") as f:
                f.write(entry.to_json() + "\n")

        return entry.event_id

    def log_trial(
        self,
        kind: str,
        trial_id: int,
        seed: int,
        success: bool,
        wall_time_s: float = 0.0,
        rf: Optional[int] = None,
        error: str = "",
        stalled_level: Optional[int] = None,
        sweep_key: str = "",
        mode: str = "sym",
        metadata: dict = None,
    ) -> str:
        """Convenience wrapper for per-trial events."""
        entry = RunEvent(
            kind=kind,
            trial=TrialInfo(trial_id=trial_id, seed=seed, sweep_key=sweep_key, mode=mode),
            timing=TimingInfo(phase=kind, wall_time_s=round(wall_time_s, 6)),
            outcome=OutcomeInfo(success=success, rf=rf, error=error, stalled_level=stalled_level),
            metadata=metadata or {},
        )
        return self.log(entry)

    def read_events(self) -> list:
        """Events of the current (unrotated) file, oldest first."""
        if not os.path.exists(self.log_path):
            return []
        with open(self.log_path, "r", encoding="utf-8") as f:
            return [RunEvent.from_dict(json.loads(line)) for line in f if line.strip()]
