import os
from typing import Iterable, Optional

import pandas as pd
from pandas import DataFrame

from dualsearch.dataclasses.search_result import HistoryRecord
from dualsearch.errors import ArtifactError, MissingFile

HISTORY_COLUMNS = ["step", "epoch", "L_train", "L_val", "Gamma_H"]


def history_frame(records: Iterable[HistoryRecord]) -> DataFrame:
    rows = [
        {"step": r.step, "epoch": r.epoch, "L_train": r.l_train, "L_val": r.l_val, "Gamma_H": r.gamma_h}
        for r in records
    ]
    return pd.DataFrame(rows, columns=HISTORY_COLUMNS)


def write_history(records: Iterable[HistoryRecord], path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    history_frame(records).to_csv(tmp_path, index=False, lineterminator="\n")
    os.replace(tmp_path, path)


def truncate_frames(df: DataFrame) -> DataFrame:
    """Keep only the rows after the last point where the step counter went backwards (a restarted run)."""
    df = df.reset_index(drop=True)
    reset_points = df[df["step"].diff() < 0].index.tolist()
    if reset_points:
        df = df.loc[reset_points[-1]:].reset_index(drop=True)
    return df


def read_history(path: str) -> DataFrame:
    if not os.path.exists(path):
        raise MissingFile(f"History file not found: {path}")
    df = pd.read_csv(path)
    missing = [column for column in HISTORY_COLUMNS if column not in df.columns]
    if missing:
        raise ArtifactError(f"History file {path} lacks column(s): {', '.join(missing)}")
    return truncate_frames(df)


def epoch_summary(df: DataFrame, smoothing_window: Optional[int] = None) -> DataFrame:
    """Per-epoch means of the logged losses, optionally smoothed with a rolling mean."""
    summary = df.groupby("epoch")[["L_train", "L_val", "Gamma_H"]].mean()
    if smoothing_window and smoothing_window > 1:
        summary = summary.rolling(smoothing_window, min_periods=1).mean()
    return summary
