"""Forecast scoring, cross-seed aggregation and variable-contribution export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
from xml.sax.saxutils import escape

import numpy as np

from .data import NormStats, RawSeries, WindowSample, stack_windows
from .model import EgPDENet, variable_weights
from .ode import SolverConfig, check_checkpoints
from .autodiff import Tensor


def _pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"prediction and truth lengths differ: {p.size} vs {t.size}")
    if p.size == 0:
        raise ValueError("cannot score an empty set of predictions")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def step_label(step: float) -> str:
    return f"Step{step:g}"


@dataclass
class StepReport:
    step: float
    rmse: float
    mae: float
    n: int
    skipped: int = 0

    @property
    def label(self) -> str:
        return step_label(self.step)


def _raw_offset(step: float, stride: int) -> int:
    raw = step * stride
    r = round(raw)
    if r < 1 or abs(raw - r) > 1e-9:
        raise ValueError(f"{step_label(step)} does not land on a row of the original series "
                         f"(grid stride {stride} rows); it cannot be scored")
    return int(r)


def score_predictions(pred: np.ndarray, windows: Sequence[WindowSample], original: RawSeries,
                      steps: Sequence[float]) -> List[StepReport]:
    """Score de-normalised predictions (windows x steps) against original-series rows.

    Windows whose truth rows run past the end of ``original`` are dropped for
    every step and counted in ``skipped``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != (len(windows), len(steps)):
        raise ValueError(f"predictions of shape {pred.shape} for {len(windows)} windows x {len(steps)} steps")
    target = original.target
    rows = np.empty(pred.shape, dtype=np.int64)
    for i, w in enumerate(windows):
        for j, s in enumerate(steps):
            rows[i, j] = w.end_index + _raw_offset(s, w.stride)
    keep = (rows < len(target)).all(axis=1)
    skipped = int((~keep).sum())
    if not keep.any():
        raise ValueError("no window has ground truth for every requested step")
    truth = target[rows[keep]]
    kept = pred[keep]
    return [StepReport(step=float(s), rmse=rmse(kept[:, j], truth[:, j]), mae=mae(kept[:, j], truth[:, j]),
                       n=int(keep.sum()), skipped=skipped) for j, s in enumerate(steps)]


def forecast_windows(model: EgPDENet, windows: Sequence[WindowSample], steps: Sequence[float],
                     solver: SolverConfig = SolverConfig(), chunk: int = 512) -> np.ndarray:
    """Normalised-unit forecasts, shape (windows, steps), for sorted steps."""
    out = []
    for i in range(0, len(windows), chunk):
        b = stack_windows(windows[i:i + chunk])
        out.append(model.predict(b.x, b.y, steps, solver).reshape(len(b), len(steps)))
    return np.concatenate(out, axis=0)


def evaluate_arbitrary(model: EgPDENet, windows: Sequence[WindowSample], original: RawSeries,
                       stats: NormStats, steps: Sequence[float] = (1.0, 1.5, 2.0, 2.5, 3.0),
                       solver: SolverConfig = SolverConfig()) -> List[StepReport]:
    """Per-step RMSE/MAE in original units; reports come back sorted by step."""
    if not windows:
        raise ValueError("no test windows to evaluate")
    ordered = sorted(set(float(s) for s in steps))
    if len(ordered) != len(steps):
        raise ValueError("duplicate steps requested")
    check_checkpoints(ordered)
    pred = stats.denormalize_target(forecast_windows(model, windows, ordered, solver))
    return score_predictions(pred, windows, original, ordered)


def persistence_reports(windows: Sequence[WindowSample], original: RawSeries, stats: NormStats,
                        steps: Sequence[float]) -> List[StepReport]:
    """Last observed target value repeated for every step."""
    ordered = sorted(float(s) for s in steps)
    last = stats.denormalize_target(np.array([w.y[-1] for w in windows]))
    pred = np.repeat(last[:, None], len(ordered), axis=1)
    return score_predictions(pred, windows, original, ordered)


def average_rmse(reports: Sequence[StepReport], steps: Optional[Sequence[float]] = None) -> float:
    chosen = [r for r in reports if steps is None or any(abs(r.step - s) < 1e-12 for s in steps)]
    return float(np.mean([r.rmse for r in chosen]))


@dataclass
class RunAggregate:
    steps: List[float]
    rmse_mean: List[float]
    rmse_std: List[float]
    mae_mean: List[float]
    mae_std: List[float]
    n: List[int]
    seeds: int
    _per_seed: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def average_rmse(self) -> float:
        return float(np.mean(self.rmse_mean))

    @property
    def average_mae(self) -> float:
        return float(np.mean(self.mae_mean))

    def rows(self) -> List[dict]:
        """Long-format rows: one per (step incl. Average, metric)."""
        out = []
        for i, s in enumerate(self.steps):
            out.append(dict(step=step_label(s), metric="rmse", mean=self.rmse_mean[i], std=self.rmse_std[i], n=self.n[i]))
            out.append(dict(step=step_label(s), metric="mae", mean=self.mae_mean[i], std=self.mae_std[i], n=self.n[i]))
        out.append(dict(step="Average", metric="rmse", mean=self.average_rmse,
                        std=_sample_std(self._per_seed_avg("rmse")), n=self.n[0]))
        out.append(dict(step="Average", metric="mae", mean=self.average_mae,
                        std=_sample_std(self._per_seed_avg("mae")), n=self.n[0]))
        return out

    def _per_seed_avg(self, metric: str) -> np.ndarray:
        return self._per_seed[metric].mean(axis=1)

    def write_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "metric", "mean", "std", "n"])
            w.writeheader()
            for row in self.rows():
                w.writerow({**row, "mean": repr(row["mean"]), "std": repr(row["std"])})

    def to_json(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        return {"seeds": self.seeds,
                "rows": [{k: clean(v) for k, v in row.items()} for row in self.rows()]}

    def write_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    def table(self) -> str:
        lines = [f"{'step':<10}{'rmse':>22}{'mae':>22}{'n':>8}"]
        rows = self.rows()
        for r_rmse, r_mae in zip(rows[::2], rows[1::2]):
            lines.append(f"{r_rmse['step']:<10}{_pm(r_rmse):>22}{_pm(r_mae):>22}{r_rmse['n']:>8}")
        return "\n".join(lines)


def _pm(row: dict) -> str:
    std = row["std"]
    return f"{row['mean']:.4f}" if math.isnan(std) else f"{row['mean']:.4f}±{std:.4f}"


def _sample_std(values: np.ndarray) -> float:
    if len(values) < 2:
        return float("nan")
    # identical values give exactly zero rather than mean-roundoff noise
    return 0.0 if np.ptp(values) == 0 else float(np.std(values, ddof=1))


def aggregate_runs(per_seed: Sequence[Sequence[StepReport]]) -> RunAggregate:
    """Per-step mean and sample std across seeds; std is NaN for a single seed."""
    if not per_seed:
        raise ValueError("no runs to aggregate")
    steps = [r.step for r in per_seed[0]]
    for reports in per_seed[1:]:
        if [r.step for r in reports] != steps:
            raise ValueError("runs report different step sets; cannot aggregate")
    rm = np.array([[r.rmse for r in reports] for reports in per_seed])
    ma = np.array([[r.mae for r in reports] for reports in per_seed])

    def std(a):
        return [_sample_std(a[:, j]) for j in range(a.shape[1])]

    return RunAggregate(steps=steps, rmse_mean=[float(v) for v in rm.mean(axis=0)], rmse_std=std(rm),
                        mae_mean=[float(v) for v in ma.mean(axis=0)], mae_std=std(ma),
                        n=[r.n for r in per_seed[0]], seeds=len(per_seed),
                        _per_seed={"rmse": rm, "mae": ma})


def variable_contribution(model: EgPDENet, windows: Sequence[WindowSample],
                          names: Optional[Sequence[str]] = None, chunk: int = 512) -> List[Tuple[str, float]]:
    """Mean attention mass per exogenous variable over the given windows."""
    if not windows:
        raise ValueError("no windows to attribute")
    total = None
    for i in range(0, len(windows), chunk):
        b = stack_windows(windows[i:i + chunk])
        w = variable_weights(model, Tensor(b.x), Tensor(b.y)).reshape(len(b), -1).sum(axis=0)
        total = w if total is None else total + w
    weights = total / len(windows)
    names = list(names) if names is not None else [f"x{i + 1}" for i in range(len(weights))]
    if len(names) != len(weights):
        raise ValueError(f"{len(names)} names for {len(weights)} variables")
    return list(zip(names, (float(v) for v in weights)))


def write_contribution_csv(contrib: Sequence[Tuple[str, float]], path: Union[str, Path]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "weight"])
        for name, weight in contrib:
            w.writerow([name, repr(weight)])


def contribution_svg(contrib: Sequence[Tuple[str, float]], width: int = 480, bar_height: int = 22) -> str:
    """Horizontal bar chart of variable contributions as a standalone SVG document."""
    label_w, pad = 140, 10
    height = pad * 2 + bar_height * len(contrib)
    top = max((w for _, w in contrib), default=1.0) or 1.0
    span = width - label_w - 2 * pad - 50
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">']
    for i, (name, weight) in enumerate(contrib):
        y = pad + i * bar_height
        bar = max(0.0, weight / top * span)
        parts.append(f'<text x="{label_w - 4}" y="{y + bar_height * 0.7:.1f}" text-anchor="end">{escape(str(name))}</text>')
        parts.append(f'<rect x="{label_w}" y="{y + 3}" width="{bar:.2f}" height="{bar_height - 6}" fill="#4a7ab5"/>')
        parts.append(f'<text x="{label_w + bar + 4:.2f}" y="{y + bar_height * 0.7:.1f}">{weight:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
