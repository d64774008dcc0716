"""Mini-batch Adam training with early stopping, and checkpoint files."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, NonFiniteError, ShapeError, Tensor
from .data import Batch, NormStats, WindowSample, stack_windows
from .model import EgPDENet, ModelConfig, forecast
from .ode import IntegrationError, SolverConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "egpde-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def mse_loss(pred: Tensor, truth: Tensor) -> Tensor:
    """(1/B) sum_i (1/K) sum_t (pred - truth)^2."""
    if pred.shape != truth.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs truth {truth.shape}")
    diff = pred - truth
    return ad.mean(diff * diff)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor], lr: float,
              grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """Bias-corrected Adam update, in place, in the mapping's name order."""
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    offsets: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class History:
    epochs: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    valid_loss: List[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def write_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "valid_loss"])
            for row in zip(self.epochs, self.train_loss, self.valid_loss):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def batch_loss(model: EgPDENet, batch: Batch, offsets: Sequence[float], solver: SolverConfig) -> Tensor:
    pred = forecast(model, Tensor(batch.x), Tensor(batch.y), offsets, solver)
    return mse_loss(pred, Tensor(batch.targets))


def evaluate_loss(model: EgPDENet, samples: Sequence[WindowSample], offsets: Sequence[float],
                  solver: SolverConfig, chunk: int = 512) -> float:
    """Mean squared error over all samples, reduced in sample order."""
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(samples), chunk):
            b = stack_windows(samples[i:i + chunk])
            pred = forecast(model, Tensor(b.x), Tensor(b.y), offsets, solver).data
            total += float(((pred - b.targets) ** 2).mean(axis=1).sum())
    return total / len(samples)


def fit(model: EgPDENet, train: Sequence[WindowSample], valid: Sequence[WindowSample],
        cfg: TrainConfig) -> Tuple[EgPDENet, History]:
    """Train until validation MSE stops improving; leaves the best parameters in ``model``."""
    if not train or not valid:
        raise ValueError("training and validation windows must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    offsets = cfg.offsets or model.cfg.offsets
    params = model.state_dict()
    adam = AdamState()
    history = History()
    best = math.inf
    best_params = {k: p.data.copy() for k, p in params.items()}
    stale = 0
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b_idx, start in enumerate(range(0, n, cfg.batch_size)):
            batch = stack_windows([train[i] for i in order[start:start + cfg.batch_size]])
            for p in params.values():
                p.zero_grad()
            try:
                loss = batch_loss(model, batch, offsets, cfg.solver)
                ad.backward(loss)
                adam_step(adam, params, cfg.learning_rate)
            except (NonFiniteError, DomainError, IntegrationError) as exc:
                raise TrainingDiverged(f"training diverged at epoch {epoch}, batch {b_idx}: {exc}") from exc
            total += loss.item() * len(batch)
        try:
            valid_loss = evaluate_loss(model, valid, offsets, cfg.solver)
        except (NonFiniteError, DomainError, IntegrationError) as exc:
            raise TrainingDiverged(f"validation diverged at epoch {epoch}: {exc}") from exc
        history.epochs.append(epoch)
        history.train_loss.append(total / n)
        history.valid_loss.append(valid_loss)
        logger.debug("epoch %d train %.6f valid %.6f", epoch, total / n, valid_loss)
        if valid_loss < best:
            best, stale = valid_loss, 0
            history.best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in params.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                history.stopped_early = True
                break
    for k, p in params.items():
        p.data[...] = best_params[k]
        p.zero_grad()
    return model, history


def save_checkpoint(model: EgPDENet, stats: Optional[NormStats], path: Union[str, Path],
                    extra: Optional[dict] = None) -> None:
    """Write a self-describing JSON checkpoint (atomic replace)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "norm_stats": stats.to_dict() if stats is not None else None,
        "extra": extra or {},
        "params": {name: {"shape": list(p.shape), "data": [float(v) for v in p.data.reshape(-1)]}
                   for name, p in model.named_parameters()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    model: EgPDENet
    stats: Optional[NormStats]
    extra: dict


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an EgPDE-Net checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}")
    try:
        model = EgPDENet(ModelConfig(**payload["config"]))
        stored = payload["params"]
        params = model.state_dict()
        unknown = sorted(set(stored) - set(params))
        if unknown:
            raise CheckpointError(f"{path}: unknown parameter name(s) {unknown}")
        missing = sorted(set(params) - set(stored))
        if missing:
            raise CheckpointError(f"{path}: missing parameter(s) {missing}")
        for name, p in params.items():
            arr = np.array(stored[name]["data"], dtype=np.float64).reshape(stored[name]["shape"])
            if arr.shape != p.shape:
                raise CheckpointError(f"{path}: parameter {name} has shape {arr.shape}, model expects {p.shape}")
            p.data[...] = arr
        stats = NormStats.from_dict(payload["norm_stats"]) if payload.get("norm_stats") else None
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    return Checkpoint(model=model, stats=stats, extra=payload.get("extra", {}))


TINY_CONFIG = ModelConfig(window=5, n_exog=3, latent_dim=4, rnn_dim=8, d_model=4, num_heads=2,
                          offsets=(1.0, 2.0), seed=0)


def tiny_gradcheck(seed: int = 0, mode: str = "full", batch: int = 4, eps: float = 1e-5,
                   solver: SolverConfig = SolverConfig(step=0.1)) -> float:
    """Max relative error of the full training loss gradient on a tiny model."""
    from dataclasses import replace

    model = EgPDENet(replace(TINY_CONFIG, seed=seed, mode=mode))
    rng = np.random.default_rng(seed + 1)
    cfg = model.cfg
    x = Tensor(rng.normal(size=(batch, cfg.window, cfg.n_exog)))
    y = Tensor(rng.normal(size=(batch, cfg.window)))
    truth = Tensor(rng.normal(size=(batch, cfg.horizon)))

    def loss():
        return mse_loss(forecast(model, x, y, cfg.offsets, solver), truth)

    return ad.grad_check(loss, model.state_dict(), eps=eps)
