from __future__ import annotations
import csv
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

FINETUNE_FIELDS = ("step", "phase", "lr", "loss", "dev_accuracy")
MLM_FIELDS = ("step", "phase", "lr", "loss", "perplexity")


class MetricsLog:
    """Rows kept in memory and mirrored to a CSV file when a path is given."""

    def __init__(self, fields: Sequence[str], path: Optional[Union[str, Path]] = None):
        self.fields = tuple(fields)
        self.rows: List[Dict[str, object]] = []
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", encoding="utf-8", newline="") as f:
                csv.writer(f).writerow(self.fields)

    def append(self, **row) -> None:
        unknown = set(row) - set(self.fields)
        if unknown:
            raise KeyError(f"unknown metric columns: {sorted(unknown)}")
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8", newline="") as f:
                csv.writer(f).writerow([_fmt(row.get(k)) for k in self.fields])

    def column(self, name: str) -> List[object]:
        return [r[name] for r in self.rows if r.get(name) is not None]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)
