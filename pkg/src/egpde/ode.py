"""Fixed-step and adaptive ODE integration over autodiff tensors.

Fixed-step solves (euler, rk4) run on the gradient tape, so gradients are
exact for the discretised trajectory.  The base grid is ``{k*h}``; a
checkpoint that falls between grid points is reached by a shortened side
step from the preceding grid point, so adding or removing checkpoints never
moves the main trajectory.

``dopri5_solve`` is forward-only and works on raw arrays under ``no_grad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, NonFiniteError, Tensor

VectorField = Callable[[float, Tensor], Tensor]

METHODS = ("euler", "rk4", "dopri5")


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    step: float = 0.1
    rtol: float = 1e-3
    atol: float = 1e-6
    max_steps: int = 100_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown solver method {self.method!r}; choose from {METHODS}")
        if not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


def _stage(f: VectorField, t: float, z: Tensor, index: int) -> Tensor:
    try:
        k = f(t, z)
    except (NonFiniteError, DomainError) as exc:
        raise IntegrationError(f"non-finite vector field at t={t:.6g}, stage {index}: {exc}") from exc
    if k.shape != z.shape:
        raise IntegrationError(f"vector field returned shape {k.shape} for state {z.shape}")
    return k


def euler_step(f: VectorField, z: Tensor, t: float, h: float) -> Tensor:
    return z + _stage(f, t, z, 1) * h


def rk4_step(f: VectorField, z: Tensor, t: float, h: float) -> Tensor:
    """Classical four-stage Runge-Kutta step from t to t + h."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    half = 0.5 * h
    k1 = _stage(f, t, z, 1)
    k2 = _stage(f, t + half, z + k1 * half, 2)
    k3 = _stage(f, t + half, z + k2 * half, 3)
    k4 = _stage(f, t + h, z + k3 * h, 4)
    try:
        return z + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
    except NonFiniteError as exc:
        raise IntegrationError(f"non-finite state after step at t={t:.6g}: {exc}") from exc


_STEPPERS = {"euler": euler_step, "rk4": rk4_step}


def check_checkpoints(checkpoints: Sequence[float]) -> List[float]:
    times = [float(c) for c in checkpoints]
    if not times:
        raise ValueError("at least one checkpoint is required")
    if not all(math.isfinite(c) for c in times):
        raise ValueError("checkpoints must be finite")
    if times[0] <= 0:
        raise ValueError(f"checkpoints must be positive, got {times[0]}")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("checkpoints must be strictly increasing")
    return times


def ode_solve(f: VectorField, z0: Tensor, checkpoints: Sequence[float],
              cfg: SolverConfig = SolverConfig()) -> List[Tensor]:
    """States at each checkpoint, integrating from t=0."""
    times = check_checkpoints(checkpoints)
    if cfg.method == "dopri5":
        return dopri5_solve(f, z0, times, cfg)
    stepper = _STEPPERS[cfg.method]
    h = cfg.step
    z, k, used = z0, 0, 0
    out: List[Tensor] = []
    for c in times:
        tol = 1e-9 * max(1.0, abs(c))
        while (k + 1) * h <= c + tol:
            if used >= cfg.max_steps:
                raise IntegrationError(f"max_steps={cfg.max_steps} exceeded before t={c:.6g}")
            z = stepper(f, z, k * h, h)
            k += 1
            used += 1
        gap = c - k * h
        if gap <= tol:
            out.append(z)
            continue
        if used >= cfg.max_steps:
            raise IntegrationError(f"max_steps={cfg.max_steps} exceeded before t={c:.6g}")
        out.append(stepper(f, z, k * h, gap))
        used += 1
    return out


# Dormand-Prince 5(4) tableau, error weights and dense-output polynomial.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

H_MIN = 1e-10
_SAFETY, _MIN_FACTOR, _MAX_FACTOR = 0.9, 0.2, 10.0
_BETA = 0.04
_ALPHA = 0.2 - 0.75 * _BETA


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def dopri5_solve(f: VectorField, z0: Tensor, checkpoints: Sequence[float],
                 cfg: SolverConfig = SolverConfig(method="dopri5")) -> List[Tensor]:
    """Adaptive Dormand-Prince 5(4) with PI step control and dense output.

    Forward-only: results carry no gradient history.
    """
    times = check_checkpoints(checkpoints)
    rtol, atol = cfg.rtol, cfg.atol
    shape = z0.shape

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        try:
            out = f(t, Tensor._wrap(y.reshape(shape))).data
        except (NonFiniteError, DomainError) as exc:
            raise IntegrationError(f"non-finite vector field at t={t:.6g}: {exc}") from exc
        return out.reshape(-1)

    with ad.no_grad():
        y = z0.data.reshape(-1).copy()
        t, t_end = 0.0, times[-1]
        fy = rhs(t, y)

        scale = atol + rtol * np.abs(y)
        d0, d1 = _rms(y / scale), _rms(fy / scale)
        h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        h = min(h, t_end)
        y1 = y + h * fy
        d2 = _rms((rhs(t + h, y1) - fy) / scale) / h
        h1 = 1e-3 * max(h * 1e-3, 1e-6) if max(d1, d2) <= 1e-15 else (0.01 / max(d1, d2)) ** 0.2
        h = min(100 * h, h1, t_end)

        out: List[Tensor] = []
        nxt = 0
        err_prev = 1e-4
        steps = 0
        while nxt < len(times):
            if steps >= cfg.max_steps:
                raise IntegrationError(f"max_steps={cfg.max_steps} exceeded at t={t:.6g}")
            h = min(h, t_end - t) if t_end - t > 0 else h
            if h < H_MIN:
                raise IntegrationError(f"step size underflow (h={h:.3g}) at t={t:.6g}")
            K = np.empty((7, y.size))
            K[0] = fy
            for i in range(1, 6):
                K[i] = rhs(t + _C[i] * h, y + h * (_A[i] @ K[:i]))
            y_new = y + h * (_B @ K[:6])
            K[6] = rhs(t + h, y_new)
            steps += 1
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = _rms(h * (_E @ K) / scale)
            if err <= 1.0:
                t_new = t + h
                Q = K.T @ _P
                while nxt < len(times) and times[nxt] <= t_new + 1e-12 * max(1.0, abs(t_new)):
                    x = (times[nxt] - t) / h
                    y_c = y_new if times[nxt] >= t_new else y + h * (Q @ (x ** np.arange(1, 5)))
                    out.append(Tensor._wrap(y_c.reshape(shape).copy()))
                    nxt += 1
                err = max(err, 1e-10)
                factor = _SAFETY * err ** -_ALPHA * err_prev ** _BETA
                factor = min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
                err_prev = err
                t, y, fy = t_new, y_new, K[6]
                h *= factor
            else:
                h *= max(_MIN_FACTOR, _SAFETY * err ** -_ALPHA)
    return out
