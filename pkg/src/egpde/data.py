"""Dataset ingestion, normalisation, half-rate resampling, windowing and splits.

Every :class:`RawSeries` carries ``index``: the row numbers of its rows in
the series it was originally loaded as.  Resampling and splitting keep that
bookkeeping, so a forecast at a fractional step can be scored against the
matching row of the original, full-rate series.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    names: List[str]
    values: np.ndarray
    target_column: int
    sample_interval: str = ""
    timestamps: Optional[List[str]] = None
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise DataError(f"values of shape {self.values.shape} do not match {len(self.names)} column names")
        if not 0 <= self.target_column < len(self.names):
            raise DataError(f"target column index {self.target_column} out of range")
        if self.index is None:
            self.index = np.arange(len(self.values))

    def __len__(self) -> int:
        return len(self.values)

    @property
    def n_exog(self) -> int:
        return len(self.names) - 1

    @property
    def target_name(self) -> str:
        return self.names[self.target_column]

    @property
    def exog_names(self) -> List[str]:
        return [n for i, n in enumerate(self.names) if i != self.target_column]

    @property
    def target(self) -> np.ndarray:
        return self.values[:, self.target_column]

    @property
    def exog(self) -> np.ndarray:
        return np.delete(self.values, self.target_column, axis=1)

    def rows(self, start: int, stop: int) -> "RawSeries":
        ts = self.timestamps[start:stop] if self.timestamps is not None else None
        return replace(self, values=self.values[start:stop], timestamps=ts, index=self.index[start:stop])

    @property
    def stride(self) -> int:
        """Spacing of this series' rows in original-row units."""
        return int(self.index[1] - self.index[0]) if len(self.index) > 1 else 1


def load_csv(path: Union[str, Path], target_column: Union[str, int], sample_interval: str = "") -> RawSeries:
    """Parse a header-row, comma-delimited numeric CSV.

    A first column named ``timestamp`` is kept as labels and excluded from
    the features.  Rows are reported 1-based over data rows (the header is
    not counted) together with the file line number.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        has_ts = bool(header) and header[0].lower() == "timestamp"
        names = header[1:] if has_ts else header
        if not names:
            raise DataError(f"{path}: no feature columns")
        if isinstance(target_column, int):
            if not 0 <= target_column < len(names):
                raise DataError(f"{path}: target column index {target_column} out of range")
            target_idx = target_column
        elif target_column in names:
            target_idx = names.index(target_column)
        else:
            raise DataError(f"{path}: target column {target_column!r} not in header {names}")

        rows, stamps = [], []
        for row_no, row in enumerate(reader, start=1):
            line = row_no + 1
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {row_no} (line {line}) has {len(row)} columns, expected {len(header)}")
            cells = row[1:] if has_ts else row
            parsed = []
            for name, cell in zip(names, cells):
                text = cell.strip()
                if not text:
                    raise DataError(f"{path}: row {row_no} (line {line}), column {name!r}: missing value")
                try:
                    v = float(text)
                except ValueError:
                    raise DataError(f"{path}: row {row_no} (line {line}), column {name!r}: "
                                    f"cannot parse {text!r} as a number") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {row_no} (line {line}), column {name!r}: non-finite value")
                parsed.append(v)
            rows.append(parsed)
            if has_ts:
                stamps.append(row[0])
    if not rows:
        raise DataError(f"{path}: no data rows")
    return RawSeries(names=names, values=np.array(rows), target_column=target_idx,
                     sample_interval=sample_interval, timestamps=stamps if has_ts else None)


def write_csv(series: RawSeries, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        ts = series.timestamps
        w.writerow((["timestamp"] if ts is not None else []) + list(series.names))
        for i, row in enumerate(series.values):
            w.writerow(([ts[i]] if ts is not None else []) + [repr(float(v)) for v in row])


def resample_half(r: RawSeries) -> RawSeries:
    """Keep rows 0, 2, 4, ... (twice the sampling gap)."""
    if len(r) < 2:
        raise DataError("resample_half needs at least two rows")
    ts = r.timestamps[::2] if r.timestamps is not None else None
    interval = f"2x{r.sample_interval}" if r.sample_interval else ""
    return replace(r, values=r.values[::2], timestamps=ts, index=r.index[::2], sample_interval=interval)


def split_chronological(r: RawSeries, ratios: Sequence[int] = (8, 1, 1)) -> Tuple[RawSeries, RawSeries, RawSeries]:
    """Contiguous train/valid/test; boundaries floored, remainder goes to test."""
    if len(r) < 10:
        raise DataError(f"series of length {len(r)} is too short to split (need >= 10)")
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ValueError("ratios must be three positive numbers")
    total = sum(ratios)
    n = len(r)
    n_train = n * ratios[0] // total
    n_valid = n * ratios[1] // total
    return r.rows(0, n_train), r.rows(n_train, n_train + n_valid), r.rows(n_train + n_valid, n)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    names: List[str] = field(default_factory=list)
    target_column: int = 0

    @property
    def target_mean(self) -> float:
        return float(self.mean[self.target_column])

    @property
    def target_std(self) -> float:
        return float(self.std[self.target_column])

    def denormalize_target(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) * self.target_std + self.target_mean

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std],
                "names": list(self.names), "target_column": self.target_column}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(mean=np.array(d["mean"], dtype=np.float64), std=np.array(d["std"], dtype=np.float64),
                   names=list(d.get("names", [])), target_column=int(d.get("target_column", 0)))


def fit_normalizer(train: RawSeries) -> NormStats:
    """Per-column mean and population std; std below 1e-8 is replaced by 1."""
    if len(train) == 0:
        raise DataError("cannot fit normalisation on an empty segment")
    mean = train.values.mean(axis=0)
    std = train.values.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return NormStats(mean=mean, std=std, names=list(train.names), target_column=train.target_column)


def apply_normalizer(stats: NormStats, segment: RawSeries) -> RawSeries:
    return replace(segment, values=(segment.values - stats.mean) / stats.std)


@dataclass
class WindowSample:
    x: np.ndarray          # (T, N) exogenous history
    y: np.ndarray          # (T,) target history
    targets: np.ndarray    # (K,) future target values
    offsets: np.ndarray    # (K,) forecast offsets
    end_index: int         # original-row number of the last history row
    stride: int = 1        # original rows per step of this grid


def make_windows(segment: RawSeries, window: int, offsets: Sequence[int]) -> List[WindowSample]:
    """Stride-1 sliding windows with targets at integer offsets past the window."""
    offs = [int(m) for m in offsets]
    if window < 1 or not offs:
        raise DataError("window and offsets must be non-empty")
    if any(m != o for m, o in zip(offs, offsets)) or offs[0] < 1 or any(b <= a for a, b in zip(offs, offs[1:])):
        raise DataError(f"training offsets must be increasing positive integers, got {list(offsets)}")
    horizon = offs[-1]
    n = len(segment) - window - horizon + 1
    if n < 1:
        raise DataError(f"segment of length {len(segment)} is shorter than window {window} + horizon {horizon}")
    exog, target, stride = segment.exog, segment.target, segment.stride
    pos = np.array(offs) - 1
    out = []
    for s in range(n):
        last = s + window - 1
        out.append(WindowSample(
            x=exog[s:s + window].copy(),
            y=target[s:s + window].copy(),
            targets=target[last + 1 + pos].copy(),
            offsets=np.array(offs, dtype=np.float64),
            end_index=int(segment.index[last]),
            stride=stride,
        ))
    return out


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


def stack_windows(samples: Sequence[WindowSample]) -> Batch:
    return Batch(x=np.stack([s.x for s in samples]), y=np.stack([s.y for s in samples]),
                 targets=np.stack([s.targets for s in samples]))


@dataclass
class PreparedData:
    original: RawSeries
    stats: NormStats
    train: List[WindowSample]
    valid: List[WindowSample]
    test: List[WindowSample]


def prepare(raw: RawSeries, window: int, offsets: Sequence[int], half_rate: bool = True,
            stats: Optional[NormStats] = None) -> PreparedData:
    """Resample (optionally), split 8:1:1, normalise with train stats, window each split.

    Pass ``stats`` to reuse statistics stored with a trained model.
    """
    grid = resample_half(raw) if half_rate else raw
    train, valid, test = split_chronological(grid)
    if stats is None:
        stats = fit_normalizer(train)
    return PreparedData(
        original=raw,
        stats=stats,
        train=make_windows(apply_normalizer(stats, train), window, offsets),
        valid=make_windows(apply_normalizer(stats, valid), window, offsets),
        test=make_windows(apply_normalizer(stats, test), window, offsets),
    )


def synthetic_series(n_rows: int = 2000, seed: int = 0, noise: float = 0.05,
                     periods: Sequence[float] = (24.0, 36.0, 60.0),
                     lags: Sequence[int] = (6, 8, 10),
                     weights: Sequence[float] = (1.0, 0.7, 0.5)) -> RawSeries:
    """Target = weighted sum of lagged exogenous sinusoids + Gaussian noise."""
    rng = np.random.default_rng(seed)
    pad = max(lags)
    t = np.arange(n_rows + pad, dtype=np.float64)
    phases = rng.uniform(0, 2 * np.pi, size=len(periods))
    exog = np.stack([np.sin(2 * np.pi * t / p + ph) for p, ph in zip(periods, phases)], axis=1)
    y = sum(w * exog[pad - lag:pad - lag + n_rows, i] for i, (w, lag) in enumerate(zip(weights, lags)))
    y = y + noise * rng.standard_normal(n_rows)
    values = np.column_stack([exog[pad:], y])
    names = [f"x{i + 1}" for i in range(len(periods))] + ["target"]
    return RawSeries(names=names, values=values, target_column=len(periods), sample_interval="1 step")
