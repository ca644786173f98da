"""
Square-cosine noise schedule and the forward/reverse diffusion updates.

    f(k)      = cos^2(((k/K + s) / (1 + s)) * pi/2)
    abar_k    = f(k) / f(0)                      (abar_0 = 1)
    beta_k    = min(1 - abar_k / abar_{k-1}, 0.999)
    alpha_k   = 1 - beta_k

Reverse update, noise added outside the 1/sqrt(alpha) scale:

    a^{k-1} = (a^k - gamma_k * eps_hat) / sqrt(alpha_k) + sigma_k * z,   z = 0 at k = 1
    gamma_k = beta_k / sqrt(1 - abar_k)
    sigma_k = sqrt(beta_k * (1 - abar_{k-1}) / (1 - abar_k))

Tables are computed once in float64 numpy and indexed 0..K.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch
from torch import Tensor


MAX_BETA = 0.999


class ScheduleError(Exception):
    """Raised for an invalid schedule definition or a step index out of range."""
    pass


def _squared_cosine(k: np.ndarray, K: int, s: float) -> np.ndarray:
    return np.cos(((k / K + s) / (1 + s)) * math.pi / 2) ** 2


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    K: int
    s: float
    alpha_bar: np.ndarray    # (K+1,), alpha_bar[0] = 1
    alpha: np.ndarray        # (K+1,), index 0 unused (1.0)
    beta: np.ndarray         # (K+1,), index 0 unused (0.0)
    scale: np.ndarray        # 1 / sqrt(alpha_k)
    gamma: np.ndarray        # beta_k / sqrt(1 - alpha_bar_k)
    sigma: np.ndarray        # posterior standard deviation

    def check_step(self, k: int) -> int:
        k = int(k)
        if not 1 <= k <= self.K:
            raise ScheduleError(f"diffusion step {k} outside 1..{self.K}")
        return k

    def to_dict(self) -> Dict:
        return {"K": self.K, "s": self.s, "alpha_bar": [float(v) for v in self.alpha_bar]}


def cosine_schedule(K: int = 10, s: float = 0.008) -> NoiseSchedule:
    """Build the square-cosine schedule for K steps with offset s."""
    if K < 1:
        raise ScheduleError(f"K must be at least 1, got {K}")
    if s <= 0:
        raise ScheduleError(f"offset s must be positive, got {s}")
    steps = np.arange(K + 1, dtype=np.float64)
    f = _squared_cosine(steps, K, s)
    alpha_bar = f / f[0]
    alpha_bar[0] = 1.0

    beta = np.zeros(K + 1)
    beta[1:] = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], MAX_BETA)
    alpha = 1.0 - beta
    alpha[0] = 1.0

    scale = np.ones(K + 1)
    gamma = np.zeros(K + 1)
    sigma = np.zeros(K + 1)
    scale[1:] = 1.0 / np.sqrt(alpha[1:])
    gamma[1:] = beta[1:] / np.sqrt(1.0 - alpha_bar[1:])
    sigma[1:] = np.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    return NoiseSchedule(K, s, alpha_bar, alpha, beta, scale, gamma, sigma)


def _per_sample(values: np.ndarray, k, like: Tensor) -> Tensor:
    """Gather schedule values for scalar or per-sample k, shaped to broadcast against `like`."""
    if isinstance(k, Tensor):
        out = torch.as_tensor(values, dtype=like.dtype, device=like.device)[k.long()]
        return out.reshape(-1, *([1] * (like.dim() - 1)))
    return torch.tensor(float(values[int(k)]), dtype=like.dtype, device=like.device)


def _check_steps(schedule: NoiseSchedule, k) -> None:
    if isinstance(k, Tensor):
        if k.numel() and (int(k.min()) < 1 or int(k.max()) > schedule.K):
            raise ScheduleError(f"diffusion steps must lie in 1..{schedule.K}")
    else:
        schedule.check_step(k)


def add_noise(schedule: NoiseSchedule, a0: Tensor, noise: Tensor, k) -> Tensor:
    """Forward process: sqrt(abar_k) * a0 + sqrt(1 - abar_k) * noise. `k` may be an int or a (B,) tensor."""
    _check_steps(schedule, k)
    if a0.shape != noise.shape:
        raise ScheduleError(f"noise shape {tuple(noise.shape)} does not match actions {tuple(a0.shape)}")
    signal = _per_sample(np.sqrt(schedule.alpha_bar), k, a0)
    spread = _per_sample(np.sqrt(1.0 - schedule.alpha_bar), k, a0)
    return signal * a0 + spread * noise


def denoise_step(schedule: NoiseSchedule, ak: Tensor, eps_hat: Tensor, k: int,
                 generator: Optional[torch.Generator] = None) -> Tensor:
    """One reverse update from step k to k-1."""
    k = schedule.check_step(k)
    mean = (ak - float(schedule.gamma[k]) * eps_hat) * float(schedule.scale[k])
    if k == 1:
        return mean
    z = torch.randn(ak.shape, generator=generator, dtype=ak.dtype, device=ak.device)
    return mean + float(schedule.sigma[k]) * z
