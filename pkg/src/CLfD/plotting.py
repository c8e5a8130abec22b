"""Plot-ready (x, y) series from metrics and episode logs."""
import logging
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from CLfD.exceptions import ConfigError, DatasetError

logger = logging.getLogger(__name__)

X_COLUMNS = ("epoch", "episode")


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean: the value at index i averages the last min(window, i + 1) points."""
    if window < 1:
        raise ConfigError(f"smoothing window must be >= 1, got {window}")
    values = np.asarray(values, dtype=np.float64)
    cumulative = np.concatenate([[0.0], np.cumsum(values)])
    index = np.arange(1, len(values) + 1)
    start = np.maximum(0, index - window)
    return (cumulative[index] - cumulative[start]) / (index - start)


def read_log(path: Path) -> pd.DataFrame:
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise DatasetError(f"metrics file {path} does not exist") from None
    except pd.errors.EmptyDataError:
        raise DatasetError(f"metrics file {path} is empty") from None
    if frame.empty:
        raise DatasetError(f"metrics file {path} has no rows")
    return frame


def export_series(frame: pd.DataFrame, window: int = 1) -> Dict[str, pd.DataFrame]:
    """One (x, y) frame per numeric column; rows with missing y are dropped before smoothing."""
    x_column = next((c for c in X_COLUMNS if c in frame.columns), None)
    if x_column is None:
        raise DatasetError(f"log has none of the x columns {X_COLUMNS}: {list(frame.columns)}")
    series: Dict[str, pd.DataFrame] = {}
    for column in frame.columns:
        if column == x_column or not pd.api.types.is_numeric_dtype(frame[column]):
            continue
        valid = frame[[x_column, column]].dropna()
        if valid.empty:
            continue
        series[column] = pd.DataFrame(
            {"x": valid[x_column].to_numpy(), "y": moving_average(valid[column].to_numpy(), window)}
        )
    if not series:
        raise DatasetError("log has no numeric series to export")
    return series


def plot_export(metrics: Path, out_dir: Path, window: int = 1) -> List[Path]:
    series = export_series(read_log(metrics), window)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, data in series.items():
        path = out_dir / f"{name}.csv"
        data.to_csv(path, index=False)
        written.append(path)
    logger.info(f"Exported {len(written)} series from {metrics} to {out_dir}")
    return written
