"""
Brownian bridge schedule.

The forward marginal is

    x_t ~ N((1 - m_t) x_0 + m_t y, delta_t I),   delta_t = 2 s (m_t - m_t^2)

with m_t linear from 0.001 (t=1) to 0.999 (t=T). The one-step transition
and the reverse posterior q(x_s | x_t, x_0, y) for s < t follow by Gaussian
conjugacy. Arrays in :class:`ScheduleTable` are indexed directly by t and
carry a padded entry at t=0 with m_0 = 0, delta_0 = 0, so that a reverse
step to t=0 returns the x_0 estimate unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Tuple

import numpy as np

M_FIRST = 0.001
M_LAST = 0.999
VAR_EPS = 1e-12


@dataclass(frozen=True)
class ScheduleTable:
    T: int
    s: float
    m: np.ndarray  # (T+1,)
    delta: np.ndarray  # (T+1,)
    delta_cond: np.ndarray  # (T+1,), delta_{t|t-1}; 0 at t <= 1
    delta_rev: np.ndarray  # (T+1,), posterior variance of x_{t-1}
    coef_xt: np.ndarray  # a_t
    coef_y: np.ndarray  # b_t
    coef_x0: np.ndarray  # c_t
    variance_mode: str = "posterior"

    def pair(self, t: int, s: int) -> Tuple[float, float, float, float, float]:
        """Reverse coefficients (a, b, c, var, delta_cond) for the jump t -> s, 0 <= s < t."""
        return pair_coefficients(self.m, self.delta, t, s, self.variance_mode)

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "s": self.s,
            "variance_mode": self.variance_mode,
            "m": self.m.tolist(),
            "delta": self.delta.tolist(),
            "delta_cond": self.delta_cond.tolist(),
            "delta_rev": self.delta_rev.tolist(),
            "coef_xt": self.coef_xt.tolist(),
            "coef_y": self.coef_y.tolist(),
            "coef_x0": self.coef_x0.tolist(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "ScheduleTable":
        d = json.loads(text)
        arrays = {k: np.asarray(d[k], dtype=np.float64) for k in
                  ("m", "delta", "delta_cond", "delta_rev", "coef_xt", "coef_y", "coef_x0")}
        return cls(T=int(d["T"]), s=float(d["s"]), variance_mode=d.get("variance_mode", "posterior"), **arrays)

    def table(self) -> str:
        lines = [f"{'t':>6} {'m_t':>10} {'delta_t':>12} {'delta_t|t-1':>12} {'delta_rev':>12}"]
        for t in range(1, self.T + 1):
            lines.append(f"{t:>6d} {self.m[t]:>10.6f} {self.delta[t]:>12.6e} "
                         f"{self.delta_cond[t]:>12.6e} {self.delta_rev[t]:>12.6e}")
        return "\n".join(lines)


def _clamp(v: float) -> float:
    if v < 0 and v > -VAR_EPS:
        return 0.0
    return v


def pair_coefficients(m, delta, t: int, s: int, variance_mode: str = "posterior"):
    if not 0 <= s < t:
        raise ValueError(f"reverse jump requires 0 <= s < t, got t={t}, s={s}")
    m_t, m_s = float(m[t]), float(m[s])
    d_t, d_s = float(delta[t]), float(delta[s])
    alpha = (1.0 - m_t) / (1.0 - m_s)
    beta = m_t - m_s * alpha
    d_cond = _clamp(d_t - alpha * alpha * d_s)
    if d_t <= 0.0:
        raise ValueError(f"delta_t vanishes at t={t}; posterior undefined")
    a = alpha * d_s / d_t
    b = (d_cond / d_t) * m_s - alpha * beta * d_s / d_t
    c = (d_cond / d_t) * (1.0 - m_s)
    if variance_mode == "posterior":
        var = _clamp(d_cond * d_s / d_t)
    elif variance_mode == "marginal":
        var = d_s
    else:
        raise ValueError(f"unknown variance mode {variance_mode!r}")
    return a, b, c, var, d_cond


def linear_m(T: int) -> np.ndarray:
    return np.concatenate([[0.0], np.linspace(M_FIRST, M_LAST, T)])


def build_schedule(T: int = 1000, s: float = 1.0, variance_mode: str = "posterior") -> ScheduleTable:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if s <= 0:
        raise ValueError(f"variance scale s must be positive, got {s}")
    m = linear_m(T)
    delta = 2.0 * s * (m - m ** 2)
    delta_cond = np.zeros(T + 1)
    delta_rev = np.zeros(T + 1)
    a = np.zeros(T + 1)
    b = np.zeros(T + 1)
    c = np.zeros(T + 1)
    for t in range(1, T + 1):
        a[t], b[t], c[t], delta_rev[t], dc = pair_coefficients(m, delta, t, t - 1, variance_mode)
        if t >= 2:
            delta_cond[t] = dc
    return ScheduleTable(T=T, s=float(s), m=m, delta=delta, delta_cond=delta_cond, delta_rev=delta_rev,
                         coef_xt=a, coef_y=b, coef_x0=c, variance_mode=variance_mode)


def _check_t(t: int, sched: ScheduleTable, lo: int = 1):
    if not lo <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [{lo}, {sched.T}]")


def forward_sample(x0, y, t: int, eps, sched: ScheduleTable):
    """Draw x_t from the bridge marginal given explicit noise ``eps``."""
    x0, y, eps = np.asarray(x0), np.asarray(y), np.asarray(eps)
    if not (x0.shape == y.shape == eps.shape):
        raise ValueError(f"shape mismatch: x0 {x0.shape}, y {y.shape}, eps {eps.shape}")
    _check_t(t, sched)
    m_t = sched.m[t]
    return (1.0 - m_t) * x0 + m_t * y + np.sqrt(sched.delta[t]) * eps


def transition_params(t: int, sched: ScheduleTable) -> Tuple[float, float, float]:
    """(coefficient on x_{t-1}, coefficient on y, variance) of q(x_t | x_{t-1}, y)."""
    _check_t(t, sched, lo=2)
    m_t, m_p = sched.m[t], sched.m[t - 1]
    alpha = (1.0 - m_t) / (1.0 - m_p)
    return alpha, m_t - m_p * alpha, float(sched.delta_cond[t])


def posterior_step(x_t, y, x0_hat, t: int, sched: ScheduleTable, eta: float = 0.0, z=None,
                   t_prev: int | None = None):
    """
    One reverse step t -> t_prev (default t-1): a*x_t + b*y + c*x0_hat + eta*sqrt(var)*z.

    With eta = 0 the step is deterministic and ``z`` is ignored.
    """
    x_t, y, x0_hat = np.asarray(x_t), np.asarray(y), np.asarray(x0_hat)
    if not (x_t.shape == y.shape == x0_hat.shape):
        raise ValueError(f"shape mismatch: x_t {x_t.shape}, y {y.shape}, x0_hat {x0_hat.shape}")
    if t_prev is None:
        _check_t(t, sched, lo=2)
        t_prev = t - 1
    else:
        _check_t(t, sched)
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    a, b, c, var, _ = sched.pair(t, t_prev)
    out = a * x_t + b * y + c * x0_hat
    if eta > 0.0 and var > 0.0:
        if z is None:
            raise ValueError("noise z required when eta > 0")
        z = np.asarray(z)
        if z.shape != x_t.shape:
            raise ValueError(f"shape mismatch: z {z.shape} vs x_t {x_t.shape}")
        out = out + eta * np.sqrt(var) * z
    return out


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending uniform integer subsequence of [1, T] with ``steps`` entries, always starting at T."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    if steps == 1:
        return np.array([T])
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return ts[::-1].copy()
