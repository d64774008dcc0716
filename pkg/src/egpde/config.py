"""Run configuration files (JSON) for the command-line tool.

Recognised keys, all optional except ``dataset`` and ``target_column``::

    dataset         path to the canonical CSV (relative to the config file)
    target_column   column name (or 0-based index among feature columns)
    window          history length T                        [20]
    offsets         integer training offsets                [1, 2, 3]
    half_rate       resample to every second row            [true]
    learning_rate   Adam step size                          [0.001]
    batch_size                                              [128]
    max_epochs                                              [200]
    patience        early-stopping patience                 [10]
    seeds           one training run per seed               [0, 1, 2, 3, 4]
    ablation        full | no_self_att | no_zx_ode          [full]
    solver          {method, step, rtol, atol, max_steps}   [rk4, 0.1]
    model           {latent_dim, rnn_dim, d_model, num_heads}
    eval_steps      forecast steps scored by `eval`         [1, 1.5, 2, 2.5, 3]
    output_dir      where checkpoints and reports go        [runs]

The environment variable ``EGPDE_OUTPUT_DIR`` overrides ``output_dir``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple, Union

from .model import AblationMode, ModelConfig
from .ode import SolverConfig
from .training import TrainConfig

OUTPUT_DIR_ENV = "EGPDE_OUTPUT_DIR"

_TOP_KEYS = {"dataset", "target_column", "window", "offsets", "half_rate", "learning_rate", "batch_size",
             "max_epochs", "patience", "seeds", "ablation", "solver", "model", "eval_steps", "output_dir"}
_SOLVER_KEYS = {"method", "step", "rtol", "atol", "max_steps"}
_MODEL_KEYS = {"latent_dim", "rnn_dim", "d_model", "num_heads"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: Path
    target_column: Union[str, int]
    window: int = 20
    offsets: Tuple[int, ...] = (1, 2, 3)
    half_rate: bool = True
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    ablation: AblationMode = AblationMode.FULL
    solver: SolverConfig = field(default_factory=SolverConfig)
    model: dict = field(default_factory=dict)
    eval_steps: Tuple[float, ...] = (1.0, 1.5, 2.0, 2.5, 3.0)
    output_dir: Path = Path("runs")

    def model_config(self, n_exog: int, seed: int) -> ModelConfig:
        return ModelConfig(window=self.window, n_exog=n_exog, offsets=tuple(float(m) for m in self.offsets),
                           mode=self.ablation, seed=seed, **self.model)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           max_epochs=self.max_epochs, patience=self.patience, seed=seed, solver=self.solver)


def _reject_unknown(section: str, given: dict, allowed: set) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown {section} key(s): {', '.join(unknown)}")


def load_run_config(path: Union[str, Path], check_dataset: bool = True) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _reject_unknown("config", raw, _TOP_KEYS)
    for key in ("dataset", "target_column"):
        if key not in raw:
            raise ConfigError(f"{path}: missing required key {key!r}")
    solver_raw = raw.pop("solver", {}) or {}
    model_raw = raw.pop("model", {}) or {}
    _reject_unknown("solver", solver_raw, _SOLVER_KEYS)
    _reject_unknown("model", model_raw, _MODEL_KEYS)

    dataset = Path(raw.pop("dataset"))
    if not dataset.is_absolute():
        dataset = (path.parent / dataset).resolve()
    out = Path(raw.pop("output_dir", "runs"))
    if not out.is_absolute():
        out = (path.parent / out).resolve()
    try:
        cfg = RunConfig(
            dataset=dataset,
            output_dir=out,
            solver=SolverConfig(**solver_raw),
            model=dict(model_raw),
            ablation=AblationMode(raw.pop("ablation", "full")),
            offsets=tuple(int(m) for m in raw.pop("offsets", (1, 2, 3))),
            eval_steps=tuple(float(s) for s in raw.pop("eval_steps", (1.0, 1.5, 2.0, 2.5, 3.0))),
            seeds=[int(s) for s in raw.pop("seeds", [0, 1, 2, 3, 4])],
            **raw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    env_out = os.environ.get(OUTPUT_DIR_ENV)
    if env_out:
        cfg.output_dir = Path(env_out)
    if check_dataset and not cfg.dataset.is_file():
        raise ConfigError(f"dataset not found: {cfg.dataset}")
    return cfg


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    kept = {k: v for k, v in overrides.items() if v is not None}
    if "ablation" in kept:
        kept["ablation"] = AblationMode(kept["ablation"])
    return replace(cfg, **kept)
