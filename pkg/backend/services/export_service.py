"""
Export service
Per-iteration metrics CSV and JSON run summaries
"""

import json
import math
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd

METRICS_COLUMNS = ["iteration", "mse", "ssim_comp", "gathered", "seconds"]


@dataclass
class MetricsRow:
    """
    One row per iteration.

    mse / ssim_comp are NaN (written as empty cells) when no reference image is given.
    """

    iteration: int
    mse: float
    ssim_comp: float
    gathered: int
    seconds: float


def metrics_frame(rows: List[MetricsRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in rows], columns=METRICS_COLUMNS)


def export_to_csv(rows: List[MetricsRow], path: Optional[Union[str, Path]] = None) -> str:
    """
    Exports metrics rows as RFC-4180 CSV (CRLF line endings, header row).

    Args:
        rows: metrics rows in iteration order
        path: optional file to write

    Returns:
        str: the CSV text
    """
    text = metrics_frame(rows).to_csv(index=False, lineterminator="\r\n", na_rep="", float_format="%.10g")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="")
    return text


def read_metrics_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path)


def export_to_json(summary: Dict, path: Optional[Union[str, Path]] = None) -> str:
    """Run summary as JSON with an export timestamp; NaN values become null"""

    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v

    payload = {"exported_at": datetime.now().isoformat(), **clean(summary)}
    text = json.dumps(payload, indent=2, ensure_ascii=False, default=str)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
