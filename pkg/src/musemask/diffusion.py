"""DDPM training math and deterministic DDIM sampling with classifier-free guidance.

Timesteps are 1-based: ``t`` runs from 1 to ``T`` and ``alpha_bar(0) == 1``.
Model callables have the signature ``model_fn(z_t, t, cond) -> eps`` where
``t`` is a LongTensor of shape (B,) and ``cond`` is whatever the model wants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError, TrainingError


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray  # index t-1 holds beta_t
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t):
        """alpha_bar for 0 <= t <= T as float64 (scalar or array)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep outside [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def alpha_bar_tensor(self, t: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.alpha_bar_at(t.cpu().numpy()), dtype=dtype)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError("T must be at least 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


@dataclass(frozen=True)
class SamplerSpec:
    steps: int = 50
    guidance_scale: float = 3.0
    eta: float = 0.0
    seed: int = 0
    kind: str = "ddim"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampler needs at least one step")
        if self.guidance_scale < 0:
            raise ConfigError("guidance scale must be non-negative")
        if self.eta != 0.0 or self.kind != "ddim":
            raise ConfigError("only deterministic DDIM (eta=0) is supported")


def _expand(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(like.dtype)
    if coef.dim() == 0:
        return coef
    return coef.reshape(-1, *([1] * (like.dim() - 1)))


def _check_t(t, schedule: NoiseSchedule, low: int = 1):
    arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if np.any(arr < low) or np.any(arr > schedule.T):
        raise ValueError(f"timestep {arr} outside [{low}, {schedule.T}]")
    return arr


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
    if eps.shape != z0.shape:
        raise ValueError("eps must match z0 in shape")
    ab = torch.as_tensor(schedule.alpha_bar_at(_check_t(t, schedule)), dtype=torch.float64)
    return _expand(ab.sqrt(), z0) * z0 + _expand((1.0 - ab).sqrt(), z0) * eps


def eps_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    return torch.mean((eps_true - eps_pred) ** 2)


def cfg_combine(eps_uncond, eps_cond, scale: float):
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_step(z_t: torch.Tensor, eps: torch.Tensor, t, t_prev, schedule: NoiseSchedule,
              clip: float | None = None) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev`` (0 allowed).

    With ``clip`` the z0 estimate is clamped to [-clip, clip] and eps is
    re-derived from it, as is usual for pixel-space data of known range.
    """
    t_arr, p_arr = _check_t(t, schedule), _check_t(t_prev, schedule, low=0)
    if np.any(p_arr >= t_arr):
        raise ValueError(f"t_prev {p_arr} must be below t {t_arr}")
    ab_t = torch.as_tensor(schedule.alpha_bar_at(t_arr), dtype=torch.float64)
    ab_p = torch.as_tensor(schedule.alpha_bar_at(p_arr), dtype=torch.float64)
    z0_hat = (z_t - _expand((1 - ab_t).sqrt(), z_t) * eps) / _expand(ab_t.sqrt(), z_t)
    if clip is not None:
        z0_hat = z0_hat.clamp(-clip, clip)
        eps = (z_t - _expand(ab_t.sqrt(), z_t) * z0_hat) / _expand((1 - ab_t).sqrt(), z_t)
    return _expand(ab_p.sqrt(), z_t) * z0_hat + _expand((1 - ab_p).sqrt(), z_t) * eps


def timestep_sequence(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timesteps starting at T; ``steps == T`` gives T..1."""
    if not 1 <= steps <= T:
        raise ConfigError(f"steps must lie in [1, {T}]")
    return [int(round(T - i * T / steps)) for i in range(steps)]


def initial_noise(shape, seeds) -> torch.Tensor:
    """Per-sample seeded Gaussian so a sample does not depend on its batch mates."""
    if isinstance(seeds, int):
        return torch.randn(shape, generator=torch.Generator().manual_seed(seeds))
    return torch.stack([torch.randn(shape[1:], generator=torch.Generator().manual_seed(int(s))) for s in seeds])


@torch.no_grad()
def sample_loop(
    model_fn: Callable,
    cond,
    spec: SamplerSpec,
    schedule: NoiseSchedule,
    shape,
    uncond=None,
    seeds=None,
    z_init: torch.Tensor | None = None,
    clip: float | None = None,
) -> torch.Tensor:
    """Run DDIM from pure noise down to t = 0.

    With ``guidance_scale > 0`` both branches are evaluated and combined;
    ``uncond`` is the EMPTY-text condition. With scale 0 only the
    unconditional branch is used. ``seeds`` (one per sample) override
    ``spec.seed`` for the initial noise. ``clip`` bounds every z0 estimate
    (see :func:`ddim_step`).
    """
    z = z_init.clone() if z_init is not None else initial_noise(tuple(shape), spec.seed if seeds is None else seeds)
    if uncond is None:
        uncond = cond
    ts = timestep_sequence(schedule.T, spec.steps)
    batch = z.shape[0]
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        tt = torch.full((batch,), t, dtype=torch.long)
        if spec.guidance_scale == 0:
            eps = model_fn(z, tt, uncond)
        else:
            eps = cfg_combine(model_fn(z, tt, uncond), model_fn(z, tt, cond), spec.guidance_scale)
        z = ddim_step(z, eps, t, t_prev, schedule, clip).to(z.dtype)
    return z


def training_step(model_fn: Callable, z0: torch.Tensor, cond, schedule: NoiseSchedule, optimizer, scheduler=None,
                  generator: torch.Generator | None = None, step: int | None = None, params=None) -> float:
    """One eps-prediction update; returns the batch loss.

    ``params`` (optional) restricts gradient clearing to a subset; by default
    every parameter the optimizer holds is updated.
    """
    batch = z0.shape[0]
    t = torch.randint(1, schedule.T + 1, (batch,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator)
    z_t = q_sample(z0, t, eps, schedule).to(z0.dtype)
    loss = eps_loss(eps, model_fn(z_t, t, cond))
    value = float(loss.detach())
    if not np.isfinite(value):
        raise TrainingError("diffusion loss became non-finite", step)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return value


@torch.no_grad()
def heldout_eps_loss(model_fn: Callable, z0: torch.Tensor, cond_fn: Callable, schedule: NoiseSchedule, seed: int = 0,
                     batch: int = 64) -> float:
    """Mean eps MSE over ``z0`` with seeded t/eps; ``cond_fn(idx)`` builds the condition."""
    gen = torch.Generator().manual_seed(seed)
    t_all = torch.randint(1, schedule.T + 1, (len(z0),), generator=gen)
    eps_all = torch.randn(z0.shape, generator=gen)
    total = 0.0
    for i in range(0, len(z0), batch):
        sl = slice(i, i + batch)
        idx = torch.arange(len(z0))[sl]
        z_t = q_sample(z0[sl], t_all[sl], eps_all[sl], schedule).to(z0.dtype)
        pred = model_fn(z_t, t_all[sl], cond_fn(idx))
        total += float(((pred - eps_all[sl]) ** 2).sum())
    return total / z0.numel()
