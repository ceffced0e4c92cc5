"""Noise schedule, forward noising and x0-parameterized samplers over 2-D accelerations.

Step indices run 1..K; ``alpha_bar(0) = 1`` by convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .config import DenoiserConfig
from .nn import Affine, Module, timestep_embedding


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # (K,), betas[k-1] is beta_k

    @property
    def K(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, k) -> np.ndarray:
        """Cumulative product for step(s) ``k`` in 0..K."""
        k = np.asarray(k)
        ab = np.concatenate([[1.0], self.alpha_bars])
        return ab[k]

    def beta(self, k) -> np.ndarray:
        return self.betas[np.asarray(k) - 1]


def make_schedule(K: int, beta_start: float = 1e-4, beta_end: float = 0.05, shape: str = "linear") -> NoiseSchedule:
    if K < 1:
        raise ValueError(f"need at least one diffusion step, got K={K}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if shape == "linear":
        betas = np.linspace(beta_start, beta_end, K)
    elif shape == "cosine":
        s = 0.008
        t = np.arange(K + 1) / K
        f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], beta_start, beta_end)
    else:
        raise ValueError(f"unknown schedule shape {shape!r}")
    return NoiseSchedule(np.asarray(betas, dtype=np.float64))


def forward_sample(y0: np.ndarray, k, schedule: NoiseSchedule, rng: np.random.Generator):
    """Closed-form ``q(y_k | y_0)``; returns ``(y_k, eps)``.

    ``k`` is a step in 1..K, or an array of steps matching ``y0``'s leading axis.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > schedule.K):
        raise ValueError(f"diffusion step out of range 1..{schedule.K}: {k}")
    ab = schedule.alpha_bar(k)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (y0.ndim - ab.ndim))
    eps = rng.standard_normal(y0.shape)
    return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps, eps


def posterior(schedule: NoiseSchedule, k: int, y_k: np.ndarray, y0_hat: np.ndarray):
    """Mean and variance of ``q(y_{k-1} | y_k, y_0 = y0_hat)``."""
    ab_k = schedule.alpha_bar(k)
    ab_prev = schedule.alpha_bar(k - 1)
    beta_k = schedule.beta(k)
    alpha_k = 1.0 - beta_k
    c0 = math.sqrt(ab_prev) * beta_k / (1.0 - ab_k)
    ck = math.sqrt(alpha_k) * (1.0 - ab_prev) / (1.0 - ab_k)
    var = beta_k * (1.0 - ab_prev) / (1.0 - ab_k)
    return c0 * y0_hat + ck * y_k, var


DenoiseFn = Callable[[np.ndarray, int], np.ndarray]


def sample_ddpm(denoise: DenoiseFn, n: int, schedule: NoiseSchedule, rng) -> np.ndarray:
    """Ancestral sampling; ``denoise(y_k, k)`` returns the clean estimate for (n, 2) inputs."""
    y = rng.standard_normal((n, 2))
    for k in range(schedule.K, 0, -1):
        y0_hat = denoise(y, k)
        mean, var = posterior(schedule, k, y, y0_hat)
        if k > 1:
            y = mean + math.sqrt(var) * rng.standard_normal((n, 2))
        else:
            y = mean
    return y


def ddim_timesteps(K: int, n_steps: int) -> np.ndarray:
    """Evenly spaced sub-schedule of ``n_steps`` distinct indices in 1..K, descending, starting at K."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if n_steps > K:
        raise ValueError(f"n_steps={n_steps} exceeds the schedule length K={K}")
    # spacing (K - 1) / (n_steps - 1) >= 1 keeps the rounded indices distinct
    return np.round(np.linspace(K, 1, n_steps)).astype(int)


def sample_ddim(denoise: DenoiseFn, n: int, schedule: NoiseSchedule, n_steps: int, rng) -> np.ndarray:
    """Deterministic (eta = 0) DDIM over an evenly spaced sub-schedule."""
    steps = ddim_timesteps(schedule.K, n_steps)
    y = rng.standard_normal((n, 2))
    for idx, k in enumerate(steps):
        prev = int(steps[idx + 1]) if idx + 1 < len(steps) else 0
        y0_hat = denoise(y, int(k))
        ab = float(schedule.alpha_bar(k))
        ab_prev = float(schedule.alpha_bar(prev))
        eps = (y - math.sqrt(ab) * y0_hat) / math.sqrt(1.0 - ab)
        y = math.sqrt(ab_prev) * y0_hat + math.sqrt(1.0 - ab_prev) * eps
    return y


class Denoiser(Module):
    """x0-predicting residual MLP: ``head(blocks(in(embed(k) (+) proj(c) (+) y_k))))``."""

    def __init__(self, cfg: DenoiserConfig, cond_dim: int, rng: np.random.Generator):
        self.cfg = cfg
        self.cond_proj = Affine(cond_dim, cfg.cond_dim, rng)
        self.inp = Affine(cfg.time_dim + cfg.cond_dim + 2, cfg.width, rng)
        self.blocks = [(Affine(cfg.width, cfg.width, rng), Affine(cfg.width, cfg.width, rng)) for _ in range(cfg.depth)]
        self.head = Affine(cfg.width, 2, rng)
        self.block_layers = [layer for pair in self.blocks for layer in pair]

    def named_parameters(self, prefix: str = ""):
        yield from self.cond_proj.named_parameters(prefix + "cond_proj.")
        yield from self.inp.named_parameters(prefix + "inp.")
        for i, (a, b) in enumerate(self.blocks):
            yield from a.named_parameters(f"{prefix}blocks.{i}.0.")
            yield from b.named_parameters(f"{prefix}blocks.{i}.1.")
        yield from self.head.named_parameters(prefix + "head.")

    def __call__(self, y_k, k, c) -> Value:
        y_k, c = ad.constant(y_k), ad.constant(c)
        if not (np.all(np.isfinite(y_k.data)) and np.all(np.isfinite(c.data))):
            raise FloatingPointError("denoiser received non-finite inputs")
        N = y_k.shape[0]
        k = np.broadcast_to(np.asarray(k), (N,))
        temb = timestep_embedding(k, self.cfg.time_dim)
        h = self.inp(ad.concat([temb, self.cond_proj(c), y_k], axis=-1))
        for first, second in self.blocks:
            h = h + second(ad.tanh(first(ad.layer_norm(h))))
        return self.head(ad.tanh(h))


def denoise(y_k, k, c, params: Denoiser) -> Value:
    return params(y_k, k, c)
