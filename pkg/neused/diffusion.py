"""DDPM machinery: schedule, forward noising, posterior mean, reverse step,
posterior stochastic latents and classifier-free guidance.

All per-timestep coefficients are read as Python floats so the formulas work
unchanged for any image dtype.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

import torch

from .errors import ConfigError, DegenerateTimestepError, DenoiserShapeError, ShapeMismatchError


STRENGTH_TOL = 1e-9


@dataclass(frozen=True)
class DiffusionSchedule:
    num_steps: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    sigmas: torch.Tensor

    def check_t(self, t: int) -> int:
        if not 0 <= int(t) < self.num_steps:
            raise ConfigError(f"timestep {t} outside [0, {self.num_steps})")
        return int(t)

    def alpha(self, t: int) -> float:
        return float(self.alphas[t])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[t])


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")

    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    sigmas = torch.zeros(T, dtype=torch.float64)
    # sigma_0 = 0: the last reverse step is deterministic
    sigmas[1:] = torch.sqrt((1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:])
    return DiffusionSchedule(T, betas, alphas, alpha_bars, sigmas)


@dataclass(frozen=True, eq=False)
class Conditioning:
    """Prompt embedding; ``null_flag`` marks the unconditional prompt, whose embedding is zero.

    A perturbed null prompt is an ordinary conditioning that carries the noisy
    embedding; classifier-free guidance keeps using the true null for its
    unconditional branch.
    """

    embedding: torch.Tensor
    null_flag: bool = False
    prompt: Optional[str] = None

    def __post_init__(self) -> None:
        if self.null_flag and bool(self.embedding.any()):
            raise ConfigError("the null prompt must have a zero embedding")

    @property
    def dim(self) -> int:
        return int(self.embedding.numel())

    @property
    def strength(self) -> float:
        """Embedding norm clipped to 1; the null prompt has strength 0."""
        if self.null_flag:
            return 0.0
        norm = float(self.embedding.norm())
        return 1.0 if norm >= 1.0 - STRENGTH_TOL else norm

    @classmethod
    def null(cls, dim: int) -> "Conditioning":
        return cls(torch.zeros(dim, dtype=torch.float64), null_flag=True, prompt=None)

    @classmethod
    def from_text(cls, text: Optional[str], dim: int) -> "Conditioning":
        """Synthetic embedding seeded from the prompt text; empty text is the null prompt.

        Real text encoders live behind the remote denoiser, which also receives the text.
        """
        if not text:
            return cls.null(dim)
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
        g = torch.Generator().manual_seed(seed)
        emb = torch.randn(dim, generator=g, dtype=torch.float64)
        return cls(emb / emb.norm(), null_flag=False, prompt=text)


class Denoiser(Protocol):
    def __call__(self, x_t: torch.Tensor, t: int, cond: Conditioning) -> torch.Tensor: ...


class LatentRole(str, enum.Enum):
    source = "source"
    target = "target"
    phong = "phong"


@dataclass(frozen=True, eq=False)
class StochasticLatent:
    z: torch.Tensor
    t: int
    role: LatentRole = field(default=LatentRole.source)


def predict_noise(denoiser: Denoiser, x_t: torch.Tensor, t: int, cond: Conditioning) -> torch.Tensor:
    eps = denoiser(x_t, t, cond)
    if tuple(eps.shape) != tuple(x_t.shape):
        raise DenoiserShapeError(f"denoiser returned shape {tuple(eps.shape)} for input {tuple(x_t.shape)}")
    return eps


def forward_noise(x0: torch.Tensor, t: int, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    if x0.shape != eps.shape:
        raise ShapeMismatchError(f"x0 {tuple(x0.shape)} and noise {tuple(eps.shape)} differ")
    a_bar = schedule.alpha_bar(schedule.check_t(t))
    return math.sqrt(a_bar) * x0 + math.sqrt(1.0 - a_bar) * eps


def posterior_mean(
    x_t: torch.Tensor,
    t: int,
    cond: Conditioning,
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
) -> torch.Tensor:
    t = schedule.check_t(t)
    eps = predict_noise(denoiser, x_t, t, cond)
    alpha, a_bar = schedule.alpha(t), schedule.alpha_bar(t)
    return (x_t - (1.0 - alpha) / math.sqrt(1.0 - a_bar) * eps) / math.sqrt(alpha)


def reverse_step(
    x_t: torch.Tensor,
    t: int,
    cond: Conditioning,
    denoiser: Denoiser,
    z: torch.Tensor,
    schedule: DiffusionSchedule,
) -> torch.Tensor:
    if z.shape != x_t.shape:
        raise ShapeMismatchError(f"z {tuple(z.shape)} and x_t {tuple(x_t.shape)} differ")
    return posterior_mean(x_t, t, cond, denoiser, schedule) + schedule.sigma(t) * z


def latent_from_prev(
    x_prev: torch.Tensor,
    x_t: torch.Tensor,
    t: int,
    cond: Conditioning,
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
) -> torch.Tensor:
    """Invert one reverse step: z = (x_{t-1} - mu(x_t, y)) / sigma_t."""
    t = schedule.check_t(t)
    sigma = schedule.sigma(t)
    if sigma <= 0.0:
        raise DegenerateTimestepError(f"sigma_{t} = 0; stochastic latent undefined")
    return (x_prev - posterior_mean(x_t, t, cond, denoiser, schedule)) / sigma


def extract_latent(
    x0: torch.Tensor,
    t: int,
    cond: Conditioning,
    denoiser: Denoiser,
    eps_t: torch.Tensor,
    eps_prev: torch.Tensor,
    schedule: DiffusionSchedule,
    role: LatentRole = LatentRole.source,
) -> StochasticLatent:
    t = schedule.check_t(t)
    if schedule.sigma(t) <= 0.0:
        raise DegenerateTimestepError(f"sigma_{t} = 0; stochastic latent undefined")
    x_t = forward_noise(x0, t, eps_t, schedule)
    x_prev = forward_noise(x0, t - 1, eps_prev, schedule)
    z = latent_from_prev(x_prev, x_t, t, cond, denoiser, schedule)
    return StochasticLatent(z=z, t=t, role=role)


def cfg_epsilon(
    x_t: torch.Tensor,
    t: int,
    cond: Conditioning,
    denoiser: Denoiser,
    guidance_scale: float,
) -> torch.Tensor:
    if guidance_scale < 0:
        raise ConfigError(f"guidance scale must be >= 0, got {guidance_scale}")
    # s = 1 and s = 0 are returned exactly, not through the affine blend
    if cond.null_flag or guidance_scale == 0.0:
        return predict_noise(denoiser, x_t, t, Conditioning.null(cond.dim))
    eps_cond = predict_noise(denoiser, x_t, t, cond)
    if guidance_scale == 1.0:
        return eps_cond
    eps_uncond = predict_noise(denoiser, x_t, t, Conditioning.null(cond.dim))
    return eps_uncond + guidance_scale * (eps_cond - eps_uncond)


class GuidedDenoiser:
    """Classifier-free guidance applied around any denoiser."""

    def __init__(self, base: Denoiser, guidance_scale: float):
        if guidance_scale < 0:
            raise ConfigError(f"guidance scale must be >= 0, got {guidance_scale}")
        self.base = base
        self.guidance_scale = float(guidance_scale)

    def __call__(self, x_t: torch.Tensor, t: int, cond: Conditioning) -> torch.Tensor:
        return cfg_epsilon(x_t, t, cond, self.base, self.guidance_scale)


def sample_timestep(
    schedule: DiffusionSchedule,
    t_min_frac: float,
    t_max_frac: float,
    generator: torch.Generator,
) -> int:
    """Uniform integer t on [max(1, ceil(lo*T)), min(T-1, floor(hi*T))]."""
    lo = max(1, math.ceil(t_min_frac * schedule.num_steps))
    hi = min(schedule.num_steps - 1, math.floor(t_max_frac * schedule.num_steps))
    if lo > hi:
        raise ConfigError(f"empty timestep range [{t_min_frac}, {t_max_frac}] for T={schedule.num_steps}")
    return int(torch.randint(lo, hi + 1, (1,), generator=generator).item())
