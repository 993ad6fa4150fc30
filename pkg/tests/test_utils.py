import logging

import pandas as pd
import pytest

from utils import (
    METRIC_COLUMNS,
    ConfigError,
    DataError,
    EmptyMaskError,
    NumericalError,
    child_seed,
    export_metrics_csv,
    read_jsonl,
    setup_logging,
    write_jsonl,
)


def test_exit_codes():
    assert ConfigError.exit_code == 1
    assert DataError.exit_code == 2
    assert EmptyMaskError.exit_code == 2
    assert NumericalError.exit_code == 3


def test_child_seed_is_stable_and_keyed():
    assert child_seed(5, 1, 2) == child_seed(5, 1, 2)
    assert child_seed(5, 1, 2) != child_seed(5, 2, 1)
    assert child_seed(5) != child_seed(6)
    assert 0 <= child_seed(0, 3) < 2**32


def test_metrics_csv_is_byte_stable(tmp_path):
    row = {"fold": 1, "accuracy": 0.123456789, "recall": 0.5, "precision": 0.25, "f1": 1 / 3, "extra": 9}
    a = export_metrics_csv([row], tmp_path / "a" / "metrics.csv")
    b = export_metrics_csv(pd.DataFrame([row]), tmp_path / "b" / "metrics.csv")
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines() == [",".join(METRIC_COLUMNS), "1,0.123457,0.500000,0.250000,0.333333"]
    with pytest.raises(DataError):
        export_metrics_csv([{"fold": 0}], tmp_path / "c.csv")


def test_jsonl_round_trip(tmp_path):
    records = [{"crop_id": "a", "flags": ["x"]}, {"crop_id": "b", "flags": []}]
    path = write_jsonl(records, tmp_path / "sub" / "r.jsonl")
    assert read_jsonl(path) == records
    (tmp_path / "empty.jsonl").write_text("")
    assert read_jsonl(tmp_path / "empty.jsonl") == []
    with pytest.raises(DataError):
        read_jsonl(tmp_path / "missing.jsonl")


def test_setup_logging_writes_stage_file(tmp_path):
    log_file = tmp_path / "stage" / "run.log"
    setup_logging("INFO", log_file=log_file)
    setup_logging("INFO", log_file=log_file)
    logging.getLogger("spermaid.test").info("hej")
    ours = [h for h in logging.getLogger().handlers if getattr(h, "_spermaid", False)]
    assert len(ours) == 2
    for handler in ours:
        handler.flush()
    assert log_file.read_text(encoding="utf-8").count("hej") == 1
    setup_logging("WARNING")
