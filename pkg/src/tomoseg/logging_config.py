"""
Structured logging for training runs.

Purpose:
- One format for CLI commands and the stage loops, plain or JSONL.
- Every record carries the run_id so logs from several runs can be merged.
- Optionally mirror the stream into run_dir/run.log next to metrics.jsonl.

Tracing notes:
- The stage loops log per-epoch fields with `extra=` (stage, epoch, loss,
  masked_fraction); JsonFormatter copies them into the JSON object.
"""

from __future__ import annotations

from pathlib import Path
import json
import logging
import time

# Attributes every LogRecord carries; anything else came in through `extra=`.
_RESERVED = set(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {"message", "asctime"}

PLAIN_FORMAT = "%(levelname)s %(name)s [%(run_id)s]: %(message)s"
NOISY_LOGGERS = ("PIL", "matplotlib", "tifffile")


class RunContextFilter(logging.Filter):
    """
    Stamp run_id on records that do not already carry one.
    """

    def __init__(self, run_id: str = "-") -> None:
        super().__init__()
        self.run_id = run_id

    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, "run_id"):
            record.run_id = self.run_id
        return True


class JsonFormatter(logging.Formatter):
    """
    One JSON object per line: ts, level, name, message and any extra fields.
    """

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(record.created)),
            "level": record.levelname,
            "name": record.name,
            "message": record.getMessage(),
        }
        payload.update(
            (key, value)
            for key, value in vars(record).items()
            if key not in _RESERVED and not key.startswith("_")
        )
        if record.exc_info:
            payload["exc_info"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def setup_logging(
    level: str = "INFO",
    *,
    json_output: bool = False,
    run_id: str = "-",
    log_file: str | Path | None = None,
) -> None:
    """
    Configure root logging for one process.

    log_file adds a second handler with the same format; its directory must
    exist.
    """

    formatter: logging.Formatter = JsonFormatter() if json_output else logging.Formatter(PLAIN_FORMAT)
    context = RunContextFilter(run_id)
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(formatter)
        handler.addFilter(context)
    logging.basicConfig(level=level.upper(), handlers=handlers, force=True)
    for name in NOISY_LOGGERS:
        logging.getLogger(name).setLevel(max(logging.WARNING, logging.getLogger().level))
