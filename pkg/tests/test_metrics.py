"""Tests for the JSON-lines metric log."""

import json

from w2vj.core.finetune import FinetuneMetrics
from w2vj.utils.metrics import (
    MetricLog,
    encode_record,
    finite_or_none,
    strip_wall_clock,
)


class TestMetricLog:
    def test_nan_loss_is_written_as_null(self, tmp_path):
        log = MetricLog(tmp_path / "train.jsonl")
        log.append(FinetuneMetrics(1, float("nan"), 1e-3, 0, 4, 0.0).to_record())
        text = log.path.read_text(encoding="utf-8")
        assert "null" in text
        assert "NaN" not in text
        assert json.loads(text)["loss"] is None
        assert log.read()[0]["skipped"] == 4

    def test_infinities_are_nulled_inside_containers(self):
        inf = float("inf")
        record = {"step": 2, "losses": [1.0, inf], "nested": {"x": -inf}}
        expected = {"step": 2, "losses": [1.0, None], "nested": {"x": None}}
        assert finite_or_none(record) == expected
        assert "Infinity" not in encode_record(record)

    def test_truncate_keeps_lines_strict(self, tmp_path):
        log = MetricLog(tmp_path / "metrics.jsonl")
        for step, loss in ((1, 2.0), (2, float("nan")), (3, 1.0)):
            log.append({"step": step, "loss": loss})
        log.truncate_after(2)
        assert [r["loss"] for r in log.read()] == [2.0, None]
        assert "NaN" not in log.path.read_text(encoding="utf-8")

    def test_wall_clock_is_stripped(self):
        records = [{"step": 1, "loss": 0.5, "wall_ms": 12.0}]
        assert strip_wall_clock(records) == [{"step": 1, "loss": 0.5}]
