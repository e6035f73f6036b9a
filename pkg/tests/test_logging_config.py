from __future__ import annotations

import json
import logging
from pathlib import Path

from tomoseg.logging_config import JsonFormatter, RunContextFilter, setup_logging


def test_json_formatter_copies_extra_fields() -> None:
    record = logging.LogRecord("tomoseg.selftrain", logging.INFO, __file__, 1, "epoch record", None, None)
    record.stage = 3
    record.masked_fraction = 0.25
    payload = json.loads(JsonFormatter().format(record))
    assert payload["message"] == "epoch record"
    assert payload["level"] == "INFO"
    assert payload["stage"] == 3
    assert payload["masked_fraction"] == 0.25
    assert "args" not in payload


def test_run_filter_keeps_explicit_run_id() -> None:
    stamp = RunContextFilter("run_a")
    plain = logging.LogRecord("x", logging.INFO, __file__, 1, "m", None, None)
    tagged = logging.LogRecord("x", logging.INFO, __file__, 1, "m", None, None)
    tagged.run_id = "run_b"
    assert stamp.filter(plain) and stamp.filter(tagged)
    assert plain.run_id == "run_a"
    assert tagged.run_id == "run_b"


def test_setup_logging_writes_run_log(tmp_path: Path) -> None:
    log_file = tmp_path / "run.log"
    setup_logging("warning", json_output=True, run_id="demo", log_file=log_file)
    root = logging.getLogger()
    assert root.level == logging.WARNING
    assert any(isinstance(h.formatter, JsonFormatter) for h in root.handlers)

    logging.getLogger("tomoseg.test").warning("stage done", extra={"stage": 2})
    for handler in root.handlers:
        handler.flush()
    line = json.loads(log_file.read_text(encoding="utf-8").splitlines()[-1])
    assert line["run_id"] == "demo"
    assert line["stage"] == 2
    setup_logging("INFO")
