"""
Per-run metrics log (metrics.jsonl).

Purpose:
- One JSON record per epoch (stage, epoch, loss, masked fraction, confidence,
  optional metrics), appended as training progresses. A rerun stage
  replaces its own records instead of appending duplicates.
- Tolerant reader so a partially written last line never breaks a report.

Records carry no wall-clock fields; two runs with the same config and seed
write identical logs.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any
import json
import logging
import math

logger = logging.getLogger(__name__)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if hasattr(value, "item"):
        return _jsonable(value.item())
    return value


def write_jsonl(path: str | Path, payload: dict[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(json.dumps(_jsonable(payload), sort_keys=True) + "\n")


def read_run_log(path: str | Path, limit: int | None = None) -> list[dict[str, Any]]:
    """
    Read records back, skipping blank or malformed lines.
    """

    path = Path(path)
    if not path.exists():
        return []
    records: list[dict[str, Any]] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                logger.debug("Skipping malformed line in %s", path)
                continue
    return records if limit is None else records[-limit:]


class RunLog:
    """
    Epoch log bound to one file.

    start() drops the records a fresh (or resumed) stage is about to write
    again, so rerunning a stage never duplicates its epochs.
    """

    def __init__(self, path: str | Path | None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[dict[str, Any]] = []

    def start(self, stage: int, after_epoch: int = 0) -> None:
        """
        Keep earlier stages and this stage's epochs <= after_epoch; later
        stages are stale once this one reruns.
        """

        if self.path is None or not self.path.exists():
            return
        existing = read_run_log(self.path)
        kept = [
            record
            for record in existing
            if int(record.get("stage", 0)) < stage
            or (int(record.get("stage", 0)) == stage and int(record.get("epoch", 0)) <= after_epoch)
        ]
        if len(kept) == len(existing):
            return
        tmp = self.path.with_suffix(".jsonl.tmp")
        with open(tmp, "w", encoding="utf-8") as handle:
            for record in kept:
                handle.write(json.dumps(record, sort_keys=True) + "\n")
        tmp.replace(self.path)
        logger.info("Dropped %d stale records from %s", len(existing) - len(kept), self.path)

    def append(self, **record: Any) -> dict[str, Any]:
        self.records.append(record)
        if self.path is not None:
            write_jsonl(self.path, record)
        logger.info("epoch record", extra={key: _jsonable(val) for key, val in record.items() if key != "metrics"})
        return record
