"""EgPDE-Net: exogenous-guided continuous-time forecaster.

Two latent trajectories are integrated together as one state [z_x ; z]:

    dz_x/dt = g(z_x)
    dz/dt   = ln(pos(z_x) * pos(f(z)))

where pos(v) = softplus(v) + eps keeps both factors strictly positive.
z_x starts from a self-attention summary of the exogenous window, z from a
GRU summary of the target history, and a linear decoder reads forecasts off
z at any requested time.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import MLP, AttentionBlock, GRUCell, Layer, LinearLayer, LSTMCell, att_block, gru_encode
from .ode import IntegrationError, SolverConfig, ode_solve

POS_EPS = 1e-6


class AblationMode(str, enum.Enum):
    FULL = "full"
    NO_SELF_ATT = "no_self_att"
    NO_ZX_ODE = "no_zx_ode"


class UnsupportedFeatureError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    window: int = 20
    n_exog: int = 13
    latent_dim: int = 16
    rnn_dim: int = 32
    d_model: int = 16
    num_heads: int = 4
    offsets: Tuple[float, ...] = (1.0, 2.0, 3.0)
    mode: AblationMode = AblationMode.FULL
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", AblationMode(self.mode))
        object.__setattr__(self, "offsets", tuple(float(m) for m in self.offsets))
        for name in ("window", "n_exog", "latent_dim", "rnn_dim", "d_model", "num_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if not self.offsets or any(b <= a for a, b in zip(self.offsets, self.offsets[1:])) or self.offsets[0] <= 0:
            raise ValueError("offsets must be positive and strictly increasing")

    @property
    def horizon(self) -> int:
        return len(self.offsets)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["offsets"] = list(self.offsets)
        return d


def pos(v: Tensor) -> Tensor:
    return ad.softplus(v) + POS_EPS


class EgPDENet(Layer):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.latent_dim
        if cfg.mode is AblationMode.NO_SELF_ATT:
            self.exog_gru = GRUCell(cfg.n_exog, d, rng)
        else:
            self.attention = AttentionBlock(cfg.window, cfg.d_model, cfg.num_heads, d, rng)
        self.gru = GRUCell(1, cfg.rnn_dim, rng)
        self.bridge = LinearLayer(cfg.rnn_dim, d, rng)
        if cfg.mode is AblationMode.NO_ZX_ODE:
            self.guide_lstm = LSTMCell(d, d, rng)
        else:
            self.g_net = MLP(d, rng)
        self.f_net = MLP(d, rng)
        self.decoder = LinearLayer(d, 1, rng)

    @property
    def mode(self) -> AblationMode:
        return self.cfg.mode

    def state_dict(self) -> dict:
        return dict(self.named_parameters())

    def forecast(self, x: Tensor, y: Tensor, times: Sequence[float],
                 solver: SolverConfig = SolverConfig()) -> Tensor:
        return forecast(self, x, y, times, solver)

    def predict(self, x: np.ndarray, y: np.ndarray, times: Sequence[float],
                solver: SolverConfig = SolverConfig()) -> np.ndarray:
        with ad.no_grad():
            return forecast(self, Tensor(x), Tensor(y), times, solver).data.copy()


@dataclass
class Encoded:
    """Initial solver state plus side products of the encoders."""

    state: Tensor
    variable_weights: Optional[np.ndarray]
    guide: Optional[List[Tensor]] = field(default=None)


def _check_window(model: EgPDENet, x: Tensor, y: Tensor) -> None:
    cfg = model.cfg
    if x.ndim not in (2, 3) or x.shape[-2:] != (cfg.window, cfg.n_exog):
        raise ShapeError(f"exogenous window must be (..., {cfg.window}, {cfg.n_exog}), got {x.shape}")
    if y.shape != x.shape[:-1]:
        raise ShapeError(f"target window must be {x.shape[:-1]}, got {y.shape}")


def encode(model: EgPDENet, x: Tensor, y: Tensor) -> Encoded:
    """Initial latent state from an exogenous window (..., T, N) and target history (..., T)."""
    _check_window(model, x, y)
    z0 = model.bridge(gru_encode(model.gru, y))
    if model.mode is AblationMode.NO_SELF_ATT:
        zx0, weights = gru_encode(model.exog_gru, x), None
    else:
        zx0, weights = att_block(model.attention, x)
    if model.mode is AblationMode.NO_ZX_ODE:
        return Encoded(state=z0, variable_weights=weights, guide=_lstm_guide(model, zx0))
    return Encoded(state=ad.concat([zx0, z0], axis=-1), variable_weights=weights)


def _lstm_guide(model: EgPDENet, zx0: Tensor) -> List[Tensor]:
    """One guidance vector per training forecast step, unrolled from the exogenous summary."""
    cell = model.guide_lstm
    h = c = Tensor(np.zeros(zx0.shape))
    out = []
    for _ in model.cfg.offsets:
        h, c = cell.step(zx0, h, c)
        out.append(h)
    return out


def joint_dynamics(model: EgPDENet, t: float, s: Tensor) -> Tensor:
    """Time derivative of the joint state [z_x ; z]."""
    d = model.cfg.latent_dim
    zx = ad.slice_last(s, 0, d)
    z = ad.slice_last(s, d, 2 * d)
    dzx = model.g_net(zx)
    dz = ad.ln(pos(zx) * pos(model.f_net(z)))
    return ad.concat([dzx, dz], axis=-1)


def guided_dynamics(model: EgPDENet, guide: Sequence[Tensor], t: float, z: Tensor) -> Tensor:
    """Target-latent derivative with piecewise-constant guidance (no_zx_ode variant).

    Segment k covers (m_{k-1}, m_k] of the training offsets; times past the
    last offset reuse the final vector.
    """
    k = min(bisect.bisect_left(model.cfg.offsets, t - 1e-9), len(guide) - 1)
    return ad.ln(pos(guide[k]) * pos(model.f_net(z)))


def target_half(model: EgPDENet, state: Tensor) -> Tensor:
    if model.mode is AblationMode.NO_ZX_ODE:
        return state
    d = model.cfg.latent_dim
    return ad.slice_last(state, d, 2 * d)


def solve_latents(model: EgPDENet, enc: Encoded, times: Sequence[float],
                  solver: SolverConfig = SolverConfig()) -> List[Tensor]:
    if model.mode is AblationMode.NO_ZX_ODE:
        def field(t, z):
            return guided_dynamics(model, enc.guide, t, z)
    else:
        def field(t, s):
            return joint_dynamics(model, t, s)
    return ode_solve(field, enc.state, times, solver)


def forecast(model: EgPDENet, x: Tensor, y: Tensor, times: Sequence[float],
             solver: SolverConfig = SolverConfig()) -> Tensor:
    """Predictions at each requested time, shape (..., len(times))."""
    times = [float(t) for t in times]
    if not times:
        raise ValueError("at least one forecast time is required")
    enc = encode(model, x, y)
    try:
        states = solve_latents(model, enc, times, solver)
    except IntegrationError as exc:
        raise IntegrationError(f"forecast to t={times[-1]:.6g} failed: {exc}") from exc
    preds = [model.decoder(target_half(model, s)) for s in states]
    return preds[0] if len(preds) == 1 else ad.concat(preds, axis=-1)


def apply_ablation(model_or_cfg, mode) -> EgPDENet:
    """A fresh model with the same configuration but a different ablation mode."""
    cfg = model_or_cfg.cfg if isinstance(model_or_cfg, EgPDENet) else model_or_cfg
    return EgPDENet(replace(cfg, mode=AblationMode(mode)))


def param_count(model: Layer) -> int:
    return sum(p.size for _, p in model.named_parameters())


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a configuration."""
    d = cfg.latent_dim
    mlp = 2 * (d * d + d)
    total = GRUCell.count(1, cfg.rnn_dim) + (cfg.rnn_dim * d + d) + mlp + (d + 1)
    if cfg.mode is AblationMode.NO_SELF_ATT:
        total += GRUCell.count(cfg.n_exog, d)
    else:
        total += AttentionBlock.count(cfg.window, cfg.d_model, d)
    if cfg.mode is AblationMode.NO_ZX_ODE:
        total += LSTMCell.count(d, d)
    else:
        total += mlp
    return total


def variable_weights(model: EgPDENet, x: Tensor, y: Tensor) -> np.ndarray:
    if model.mode is AblationMode.NO_SELF_ATT:
        raise UnsupportedFeatureError("variable weights need the self-attention block, "
                                      "which the no_self_att variant replaces with a GRU")
    with ad.no_grad():
        return encode(model, x, y).variable_weights
