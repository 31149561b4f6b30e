"""
Experiment records for training runs.

Every run directory gets two files:

- events.jsonl: append-only log of phase events (start, completion, failure,
  evaluation), one JSON object per line, written as they happen so that a
  crashed run still leaves a trace.
- record.json: the experiment record (config hash, seed, per-phase metrics,
  checkpoint paths, F1 evolution), rewritten atomically after every phase
  and finalized with a status of "completed" or "failed".
"""

import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
from uuid import uuid4

logger = logging.getLogger(__name__)

EVENTS_FILE = "events.jsonl"
RECORD_FILE = "record.json"


def _utcnow() -> str:
    return datetime.now(timezone.utc).replace(tzinfo=None).isoformat() + "Z"


def _jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "item") and callable(value.item):
        try:
            return value.item()
        except (ValueError, RuntimeError):
            pass
    return value


class ExperimentRecorder:
    """Log and persist the history of one training run."""

    def __init__(
        self,
        run_dir: Union[str, Path],
        run_id: Optional[str] = None,
        metadata: Optional[Dict[str, Any]] = None,
    ):
        """
        Args:
            run_dir: Directory of the run (created if missing)
            run_id: Identifier stored in every event (auto-generated if None)
            metadata: Initial record fields (recipe name, seed, config hash, ...)
        """
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id or str(uuid4())
        self.events_path = self.run_dir / EVENTS_FILE
        self.record_path = self.run_dir / RECORD_FILE
        self.record: Dict[str, Any] = {
            "run_id": self.run_id,
            "status": "running",
            "started_at": _utcnow(),
            "finished_at": None,
            "phases": [],
            "f1_evolution": [],
            **_jsonable(metadata or {}),
        }
        logger.debug(f"ExperimentRecorder initialized at {self.run_dir}")

    @classmethod
    def resume(
        cls, run_dir: Union[str, Path], metadata: Optional[Dict[str, Any]] = None
    ) -> "ExperimentRecorder":
        """
        Continue the record of an earlier process in the same run directory.

        Phases and F1 points already recorded are kept; the status goes back
        to "running". Without a readable record.json this is a fresh recorder.
        """
        path = Path(run_dir) / RECORD_FILE
        try:
            previous = load_record(path)
        except (OSError, json.JSONDecodeError):
            return cls(run_dir, metadata=metadata)
        recorder = cls(run_dir, run_id=previous.get("run_id"), metadata=metadata)
        for key, value in previous.items():
            if key in ("phases", "f1_evolution", "started_at") or key not in recorder.record:
                recorder.record[key] = value
        recorder.record.pop("error", None)
        recorder.record["status"] = "running"
        recorder.record["finished_at"] = None
        return recorder

    # ============ EVENTS ============

    def log_event(
        self,
        event: str,
        status: str = "success",
        duration_seconds: Optional[float] = None,
        error_message: Optional[str] = None,
        **fields: Any,
    ) -> Dict[str, Any]:
        """
        Append one event to events.jsonl.

        Returns:
            The event as written
        """
        entry = {
            "timestamp": _utcnow(),
            "run_id": self.run_id,
            "event": event,
            "status": status,
            "duration_seconds": duration_seconds,
            "error_message": error_message,
            **_jsonable(fields),
        }
        try:
            with open(self.events_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry) + "\n")
        except OSError as e:
            logger.error(f"Failed to log event '{event}': {e}")
        return entry

    def read_events(self) -> List[Dict[str, Any]]:
        """All events of this run in chronological order."""
        if not self.events_path.exists():
            return []
        with open(self.events_path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    # ============ RECORD ============

    def record_phase(
        self,
        phase: str,
        domain: int,
        step: int,
        metrics: Optional[Dict[str, Any]] = None,
        checkpoints: Optional[Dict[str, Any]] = None,
        duration_seconds: Optional[float] = None,
    ) -> Dict[str, Any]:
        """Add a completed phase to the record and persist it."""
        entry = {
            "phase": phase,
            "domain": domain,
            "step": step,
            "metrics": _jsonable(metrics or {}),
            "checkpoints": _jsonable(checkpoints or {}),
            "duration_seconds": duration_seconds,
        }
        self.record["phases"].append(entry)
        self.log_event(phase, duration_seconds=duration_seconds, domain=domain, step=step)
        self.write()
        return entry

    def record_evaluation(self, after_phase: str, domain: int, report: Dict[str, Any]) -> None:
        """Store the per-domain F1 measured after a phase (the F1 evolution curve)."""
        self.record["f1_evolution"].append(
            {
                "after_phase": after_phase,
                "domain_trained": domain,
                "per_domain_f1": _jsonable(report.get("per_domain_f1", {})),
                "overall_f1": report.get("overall_f1"),
            }
        )
        self.log_event("evaluate", after_phase=after_phase, domain=domain, overall_f1=report.get("overall_f1"))
        self.write()

    def set(self, key: str, value: Any) -> None:
        self.record[key] = _jsonable(value)

    def write(self) -> Path:
        """Atomically rewrite record.json."""
        tmp = self.record_path.with_name(self.record_path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(self.record, f, indent=2)
        os.replace(tmp, self.record_path)
        return self.record_path

    def finish(self, status: str = "completed", error: Optional[BaseException] = None) -> Path:
        """Finalize the record; failed runs keep everything recorded so far."""
        self.record["status"] = status
        self.record["finished_at"] = _utcnow()
        if error is not None:
            self.record["error"] = {"type": type(error).__name__, "message": str(error)}
            self.log_event("run", status="error", error_message=str(error))
        else:
            self.log_event("run", status=status)
        return self.write()

    def summary(self) -> Dict[str, Any]:
        """Event counts and total phase time of the run."""
        events = self.read_events()
        return {
            "run_id": self.run_id,
            "status": self.record["status"],
            "event_count": len(events),
            "phases_completed": [p["phase"] for p in self.record["phases"]],
            "error_count": sum(1 for e in events if e.get("status") == "error"),
            "total_phase_seconds": sum(p.get("duration_seconds") or 0.0 for p in self.record["phases"]),
        }


def load_record(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a record.json (or the record inside a run directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / RECORD_FILE
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
