"""
Append-only JSON-lines metric logs.

Lines are strict JSON: non-finite floats (a step whose batch was entirely
skipped reports a NaN loss) are written as ``null``.
"""

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Union

WALL_CLOCK_KEYS = ("wall_ms",)


def finite_or_none(value: Any) -> Any:
    """``value`` with non-finite floats replaced by None, recursing into containers."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Mapping):
        return {key: finite_or_none(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [finite_or_none(item) for item in value]
    return value


def encode_record(record: Mapping[str, Any]) -> str:
    """One record as a strict JSON line (no ``NaN``/``Infinity`` tokens)."""
    return json.dumps(finite_or_none(record), allow_nan=False)


class MetricLog:
    """One JSON object per line, ordered by ``step``."""

    def __init__(self, path: Union[str, Path]) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: Mapping[str, Any]) -> None:
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(encode_record(record) + "\n")

    def read(self) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        lines = self.path.read_text(encoding="utf-8").splitlines()
        return [json.loads(line) for line in lines if line.strip()]

    def truncate_after(self, step: int) -> None:
        """Drop records past ``step`` (used when resuming)."""
        kept = [r for r in self.read() if int(r["step"]) <= step]
        text = "".join(encode_record(r) + "\n" for r in kept)
        self.path.write_text(text, encoding="utf-8")

    def reset(self) -> None:
        self.path.write_text("", encoding="utf-8")


def strip_wall_clock(records: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Records without timing fields, for determinism comparisons."""
    return [{k: v for k, v in r.items() if k not in WALL_CLOCK_KEYS} for r in records]
