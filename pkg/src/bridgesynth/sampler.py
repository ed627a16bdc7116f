"""
Volume synthesis with inter-slice trajectory alignment.

Each reverse step predicts noise for every (2N+1)-slice window, averages the
overlapping predictions per slice, takes a posterior step over a strided
timestep sequence and then applies a score-based correction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from bridgesynth.schedule import ScheduleTable, ddim_timesteps, posterior_step
from bridgesynth.stylekey import StyleKey
from bridgesynth.volume import Volume, stack_windows

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


class SamplingError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    M: int = 1
    lam: float = 0.1
    d: Optional[float] = None  # None -> voxels per slice
    eta: float = 0.0
    seed: int = 0
    aggregate: bool = True  # False: each slice keeps only its own window's centre prediction
    correction_delta: str = "strided"  # "strided": delta_{t|t_prev}; "consecutive": delta_{t|t-1}

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.M < 0:
            raise ValueError("M must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.d is not None and self.d <= 0:
            raise ValueError("d must be positive")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.correction_delta not in ("strided", "consecutive"):
            raise ValueError(f"unknown correction_delta {self.correction_delta!r}")


def _as_array(v) -> np.ndarray:
    return (v.data if isinstance(v, Volume) else np.asarray(v)).astype(np.float64)


def aggregate_slices(d: Callable, X_t, Y, key: StyleKey, t: int, N: int = 1, aggregate: bool = True) -> np.ndarray:
    """
    Per-slice mean of all window predictions that cover the slice.

    Window i spans nominal slices i-N..i+N; channels whose nominal slice lies
    outside the volume are edge-replicated inputs and contribute nothing.
    """
    x, y = _as_array(X_t), _as_array(Y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: X_t {x.shape} vs Y {y.shape}")
    Z = x.shape[0]
    centers = np.arange(Z)
    pred = np.asarray(d(stack_windows(x, N), stack_windows(y, N), key, t, centers=centers), dtype=np.float64)
    if pred.shape != (Z, 2 * N + 1) + x.shape[1:]:
        raise ValueError(f"denoiser returned shape {pred.shape}, expected {(Z, 2 * N + 1) + x.shape[1:]}")
    if not aggregate:
        return pred[:, N].copy()
    total = np.zeros_like(x)
    count = np.zeros(Z)
    for k in range(2 * N + 1):
        target = centers - N + k
        ok = (target >= 0) & (target < Z)
        np.add.at(total, target[ok], pred[ok, k])
        np.add.at(count, target[ok], 1.0)
    return total / count[:, None, None]


def correction_step(X, epsilon_bar, t: int, sched: ScheduleTable, cfg: SamplerConfig,
                    t_prev: int | None = None, score_t: int | None = None) -> np.ndarray:
    """
    X + lam * delta_{t|t_prev} * (sqrt(d) / ||S||)^2 * S with S = -epsilon_bar / sqrt(delta_s).

    ``s`` is ``score_t`` (the step at which epsilon_bar was predicted), default ``t``.
    Skipped when lam = 0 or ||S|| < 1e-12.
    """
    x = _as_array(X)
    eps_bar = _as_array(epsilon_bar)
    t_prev = t - 1 if t_prev is None else t_prev
    if cfg.lam == 0:
        return x
    score = -eps_bar / np.sqrt(sched.delta[t if score_t is None else score_t])
    norm_sq = float(np.sum(score * score))
    if np.sqrt(norm_sq) < NORM_EPS:
        return x
    d = float(np.prod(x.shape[1:])) if cfg.d is None else float(cfg.d)
    if cfg.correction_delta == "consecutive":
        delta_cond = float(sched.delta_cond[t])
    else:
        _, _, _, _, delta_cond = sched.pair(t, t_prev)
    return x + cfg.lam * delta_cond * (d / norm_sq) * score


def sample_volume(d: Callable, Y: Volume, key: StyleKey, sched: ScheduleTable, cfg: SamplerConfig = SamplerConfig(),
                  N: int | None = None, progress: Callable[[int, int], None] | None = None) -> Volume:
    """Translate a preprocessed native volume into a synthetic arterial volume."""
    cfg.validate()
    if cfg.steps > sched.T:
        raise ValueError(f"steps ({cfg.steps}) exceeds T ({sched.T})")
    N = getattr(d, "N", 1) if N is None else N
    y = _as_array(Y)
    x = y.copy()  # X_T = Y
    rng = np.random.default_rng(cfg.seed)
    ts = ddim_timesteps(sched.T, cfg.steps)
    for k, t in enumerate(ts):
        t = int(t)
        t_prev = int(ts[k + 1]) if k + 1 < len(ts) else 0
        eps_bar = aggregate_slices(d, x, y, key, t, N, cfg.aggregate)
        x0_hat = x - eps_bar
        if t_prev == 0:
            x = x0_hat
        else:
            z = rng.standard_normal(x.shape) if cfg.eta > 0 else None
            x = posterior_step(x, y, x0_hat, t, sched, cfg.eta, z, t_prev=t_prev)
            for m in range(cfg.M):
                if m == 0:
                    x = correction_step(x, eps_bar, t, sched, cfg, t_prev=t_prev)
                else:
                    eps_m = aggregate_slices(d, x, y, key, t_prev, N, cfg.aggregate)
                    x = correction_step(x, eps_m, t, sched, cfg, t_prev=t_prev, score_t=t_prev)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite sampler state at step {k} (t={t})", step=k)
        if progress is not None:
            progress(k, len(ts))
    out = np.clip(x, 0.0, 1.0)
    return Y.with_data(out) if isinstance(Y, Volume) else Volume(out)
