"""Append-only metrics CSV, one row per finished (or failed) run."""

import logging
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import pandas as pd

from .formats import atomic_write_bytes

logger = logging.getLogger(__name__)

# column order is part of the file format; never reorder within a format version
CSV_COLUMNS = (
    "run_id",
    "mode",
    "seed",
    "bits_w",
    "bits_a",
    "top1",
    "recon",
    "sharpness",
    "rho",
    "wall_s",
)
FAILED_PREFIX = "failed:"
NA_REP = "nan"


@dataclass
class MetricsRow:
    run_id: str
    mode: str
    seed: int
    bits_w: str
    bits_a: str
    top1: float
    recon: float
    sharpness: float
    rho: float
    wall_s: float

    @classmethod
    def failure(
        cls, run_id: str, mode: str, stage: str, seed: int, bits_w: str, bits_a: str, wall_s: float
    ) -> "MetricsRow":
        """Row for a run that stopped in ``stage``; the metrics are NaN."""
        nan = float("nan")
        tag = f"{FAILED_PREFIX}{mode}:{stage}"
        return cls(run_id, tag, seed, bits_w, bits_a, nan, nan, nan, nan, wall_s)

    @property
    def failed(self) -> bool:
        return self.mode.startswith(FAILED_PREFIX)

    def to_csv(self) -> str:
        return _to_csv(rows_frame([self]), header=False).rstrip("\n")


def rows_frame(rows: Iterable[MetricsRow]) -> pd.DataFrame:
    return pd.DataFrame([astuple(row) for row in rows], columns=list(CSV_COLUMNS))


def _to_csv(frame: pd.DataFrame, header: bool) -> str:
    # floats are written with repr, which reads back bit-for-bit
    return frame.to_csv(index=False, header=header, na_rep=NA_REP, lineterminator="\n")


def format_bits(spec: Union[int, Mapping[str, int]]) -> str:
    """Nominal width as-is; per-layer maps as ``name=bits`` pairs joined by ``;``."""
    if isinstance(spec, Mapping):
        return ";".join(f"{name}={bits}" for name, bits in sorted(spec.items()))
    return str(spec)


def append_rows(path: Union[str, Path], rows: Iterable[MetricsRow]) -> Path:
    """Append rows, writing the header first when the file is new."""
    path = Path(path)
    existing = ""
    if path.exists():
        existing = path.read_text(encoding="utf-8")
        header = ",".join(CSV_COLUMNS)
        first = existing.split("\n", 1)[0]
        if first != header:
            raise ValueError(f"{path} has header {first!r}, expected {header!r}")
    frame = rows_frame(rows)
    body = _to_csv(frame, header=not existing)
    atomic_write_bytes(path, (existing + body).encode("utf-8"))
    logger.debug(f"Appended {len(frame)} rows to {path}")
    return path


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(
        path,
        dtype={"run_id": str, "mode": str, "bits_w": str, "bits_a": str},
        float_precision="round_trip",
    )
    if tuple(frame.columns) != CSV_COLUMNS:
        raise ValueError(f"{path} columns {list(frame.columns)} differ from {list(CSV_COLUMNS)}")
    return frame


def summarize(
    frame: pd.DataFrame, by: Sequence[str] = ("mode", "bits_w", "bits_a")
) -> pd.DataFrame:
    """Mean and standard deviation of top-1 and sharpness per group, failures excluded."""
    ok = frame[~frame["mode"].str.startswith(FAILED_PREFIX)]
    grouped = ok.groupby(list(by), sort=True)[["top1", "recon", "sharpness"]]
    summary = grouped.agg(["mean", "std", "count"])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    return summary.reset_index()
