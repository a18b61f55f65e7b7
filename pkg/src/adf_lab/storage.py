"""Storage of experiment data: trace CSVs, run records and sample ingestion."""

import json
import logging
import math
from collections.abc import Iterable
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd

from adf_lab.adf import Sample

logger = logging.getLogger(__name__)


class IngestError(ValueError):
    """Raised when a sample CSV cannot be turned into a valid stream."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


def write_trace(frame: pd.DataFrame, path: Path) -> Path:
    """
    Write a trace as UTF-8 CSV with a header row.

    Missing values (no derivative yet, no window) become empty fields.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep="", encoding="utf-8", lineterminator="\n")
    return path


def record_path(trace_path: Path) -> Path:
    """Location of the JSON run record that accompanies a trace."""
    return Path(trace_path).with_suffix(".json")


def write_run_record(trace_path: Path, config: dict[str, Any], metrics: Optional[dict[str, Any]]) -> Path:
    """Write the resolved configuration and metrics beside a trace."""
    path = record_path(trace_path)
    payload = {"config": config, "metrics": metrics}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def samples_to_frame(samples: Iterable[Sample]) -> pd.DataFrame:
    """Two-column (t, x) frame, the format ingest_csv reads back."""
    samples = list(samples)
    return pd.DataFrame({"t": [s.t for s in samples], "x": [s.x for s in samples]})


def _to_float(value: Any) -> float:
    if not isinstance(value, str):
        return math.nan
    try:
        return float(value)
    except ValueError:
        return math.nan


def ingest_csv(path: Path) -> list[Sample]:
    """
    Read an externally recorded stream from a CSV with columns t, x.

    Returns:
        The samples in file order.

    Raises:
        IngestError: For a missing file, missing columns, an empty file,
            unparsable rows (reported with their line number) or times that
            do not strictly increase.
    """
    path = Path(path).expanduser()
    if not path.is_file():
        raise IngestError(f"{path}: file not found")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise IngestError("no samples")
    except pd.errors.ParserError as e:
        raise IngestError(f"malformed CSV: {e}")

    frame.columns = [str(c).strip() for c in frame.columns]
    missing = {"t", "x"} - set(frame.columns)
    if missing:
        raise IngestError(f"missing column(s): {', '.join(sorted(missing))}", line=1)
    if frame.empty:
        raise IngestError("no samples")

    t = frame["t"].map(_to_float).to_numpy(dtype=float)
    x = frame["x"].map(_to_float).to_numpy(dtype=float)
    # Header is line 1, so row i sits on line i + 2.
    bad = ~(np.isfinite(t) & np.isfinite(x))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise IngestError(f"cannot parse t/x {frame['t'].iloc[row]!r}, {frame['x'].iloc[row]!r}", line=row + 2)
    steps = np.flatnonzero(np.diff(t) <= 0)
    if steps.size:
        row = int(steps[0]) + 1
        raise IngestError(f"time {t[row]!r} does not increase past {t[row - 1]!r}", line=row + 2)

    logger.info("ingested %d samples from %s", len(t), path)
    return [Sample(float(ti), float(xi)) for ti, xi in zip(t, x)]
