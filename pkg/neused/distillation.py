"""Score-distillation losses over posterior stochastic latents.

Gradients are Jacobian-free: every noise prediction is a constant, and the
returned per-pixel gradients are pushed into the renderer through a surrogate
``(x0 * g).sum()`` whose derivative w.r.t. x0 is exactly ``g``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import torch

from .diffusion import (
    Conditioning,
    Denoiser,
    DiffusionSchedule,
    GuidedDenoiser,
    LatentRole,
    StochasticLatent,
    extract_latent,
    forward_noise,
    predict_noise,
    sample_timestep,
)
from .errors import ConfigError, ShapeMismatchError


logger = logging.getLogger(__name__)

WeightFn = Callable[[int, DiffusionSchedule], float]


def one_minus_alpha_bar(t: int, schedule: DiffusionSchedule) -> float:
    return 1.0 - schedule.alpha_bar(t)


def constant_weight(t: int, schedule: DiffusionSchedule) -> float:
    return 1.0


WEIGHTINGS = {"one_minus_alpha_bar": one_minus_alpha_bar, "constant": constant_weight}


@dataclass(frozen=True)
class LossWeights:
    lambda_pds: float = 1.0
    lambda_pe: float = 0.2
    weighting: Union[str, WeightFn] = "one_minus_alpha_bar"

    def __post_init__(self) -> None:
        if self.lambda_pds < 0 or self.lambda_pe < 0:
            raise ConfigError("loss weights must be >= 0")
        if isinstance(self.weighting, str) and self.weighting not in WEIGHTINGS:
            raise ConfigError(f"unknown weighting {self.weighting!r}; expected one of {sorted(WEIGHTINGS)}")

    def w(self, t: int, schedule: DiffusionSchedule) -> float:
        fn = WEIGHTINGS[self.weighting] if isinstance(self.weighting, str) else self.weighting
        value = float(fn(t, schedule))
        if value < 0:
            raise ConfigError(f"weighting returned {value} < 0 at t={t}")
        return value


@dataclass(frozen=True, eq=False)
class DistillStep:
    """One distillation step: a single (t, eps_t, eps_{t-1}) draw shared by every latent."""

    t: int
    eps_t: torch.Tensor
    eps_prev: torch.Tensor
    x0_src: torch.Tensor
    x0_tgt: torch.Tensor
    y_src: Conditioning
    y_tgt: Conditioning
    phong_tgt: Optional[torch.Tensor] = None
    guidance_scale: float = 1.0

    def __post_init__(self) -> None:
        shape = tuple(self.x0_tgt.shape)
        for name in ("eps_t", "eps_prev", "x0_src"):
            if tuple(getattr(self, name).shape) != shape:
                raise ShapeMismatchError(f"{name} {tuple(getattr(self, name).shape)} does not match x0_tgt {shape}")
        if self.phong_tgt is not None and tuple(self.phong_tgt.shape) != shape:
            raise ShapeMismatchError(f"phong_tgt {tuple(self.phong_tgt.shape)} does not match x0_tgt {shape}")
        if self.guidance_scale < 0:
            raise ConfigError("guidance scale must be >= 0")

    @classmethod
    def sample(
        cls,
        x0_src: torch.Tensor,
        x0_tgt: torch.Tensor,
        y_src: Conditioning,
        y_tgt: Conditioning,
        schedule: DiffusionSchedule,
        generator: torch.Generator,
        phong_tgt: Optional[torch.Tensor] = None,
        guidance_scale: float = 1.0,
        t_min_frac: float = 0.05,
        t_max_frac: float = 0.95,
    ) -> "DistillStep":
        """Draw t first, then eps_t and eps_{t-1}, all from ``generator``; images are detached."""
        t = sample_timestep(schedule, t_min_frac, t_max_frac, generator)
        shape, dtype = x0_tgt.shape, x0_tgt.dtype
        eps_t = torch.randn(shape, generator=generator, dtype=dtype)
        eps_prev = torch.randn(shape, generator=generator, dtype=dtype)
        return cls(
            t,
            eps_t,
            eps_prev,
            x0_src.detach(),
            x0_tgt.detach(),
            y_src,
            y_tgt,
            None if phong_tgt is None else phong_tgt.detach(),
            guidance_scale,
        )

    def guided(self, denoiser: Denoiser) -> Denoiser:
        return GuidedDenoiser(denoiser, self.guidance_scale)


@dataclass
class DistillResult:
    t: int
    g_img: torch.Tensor
    g_phong: Optional[torch.Tensor]
    l_pds: float
    l_pe: float
    l_pepds: float
    latents: Tuple[StochasticLatent, StochasticLatent, Optional[StochasticLatent]]


# -- baseline objectives ------------------------------------------------------


@torch.no_grad()
def sds_gradient(step: DistillStep, denoiser: Denoiser, schedule: DiffusionSchedule, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """w(t) (eps_hat(x_t^tgt, y_tgt) - eps_t)."""
    guided = step.guided(denoiser)
    x_t = forward_noise(step.x0_tgt, step.t, step.eps_t, schedule)
    return weights.w(step.t, schedule) * (predict_noise(guided, x_t, step.t, step.y_tgt) - step.eps_t)


@torch.no_grad()
def dds_gradient(step: DistillStep, denoiser: Denoiser, schedule: DiffusionSchedule, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """w(t) (eps_hat(x_t^tgt, y_tgt) - eps_hat(x_t^src, y_src)), both noised with eps_t."""
    guided = step.guided(denoiser)
    x_t_tgt = forward_noise(step.x0_tgt, step.t, step.eps_t, schedule)
    x_t_src = forward_noise(step.x0_src, step.t, step.eps_t, schedule)
    eps_tgt = predict_noise(guided, x_t_tgt, step.t, step.y_tgt)
    eps_src = predict_noise(guided, x_t_src, step.t, step.y_src)
    return weights.w(step.t, schedule) * (eps_tgt - eps_src)


# -- posterior latents --------------------------------------------------------


@torch.no_grad()
def pds_pair(
    step: DistillStep, denoiser: Denoiser, schedule: DiffusionSchedule
) -> Tuple[StochasticLatent, StochasticLatent, Optional[StochasticLatent]]:
    """Source, target and (when a Phong image is present) Phong latents from one noise draw."""
    guided = step.guided(denoiser)

    def latent(x0: torch.Tensor, cond: Conditioning, role: LatentRole) -> StochasticLatent:
        return extract_latent(x0, step.t, cond, guided, step.eps_t, step.eps_prev, schedule, role)

    z_src = latent(step.x0_src, step.y_src, LatentRole.source)
    z_tgt = latent(step.x0_tgt, step.y_tgt, LatentRole.target)
    z_phong = None if step.phong_tgt is None else latent(step.phong_tgt, step.y_tgt, LatentRole.phong)
    return z_src, z_tgt, z_phong


def _squared_l2(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return ((a - b) ** 2).sum()


def _z(x: Union[StochasticLatent, torch.Tensor]) -> torch.Tensor:
    return x.z if isinstance(x, StochasticLatent) else torch.as_tensor(x, dtype=torch.float64)


def pds_loss(z_src, z_tgt) -> torch.Tensor:
    """||z_tgt - z_src||^2."""
    return _squared_l2(_z(z_tgt), _z(z_src), "pds_loss")


def pe_loss(z_src, z_phong) -> torch.Tensor:
    """||z_phong - z_src||^2."""
    return _squared_l2(_z(z_phong), _z(z_src), "pe_loss")


def pepds_loss(z_src, z_tgt, z_phong, weights: LossWeights = LossWeights()) -> torch.Tensor:
    total = weights.lambda_pds * pds_loss(z_src, z_tgt)
    if z_phong is not None and weights.lambda_pe != 0.0:
        total = total + weights.lambda_pe * pe_loss(z_src, z_phong)
    return total


# -- gradients ----------------------------------------------------------------


def _latent_gradients(z_src, z_tgt, z_phong, w: float, weights: LossWeights):
    g_img = weights.lambda_pds * w * (z_tgt.z - z_src.z)
    g_phong = None if z_phong is None else weights.lambda_pe * w * (z_phong.z - z_src.z)
    return g_img, g_phong


def pepds_gradient(
    step: DistillStep, denoiser: Denoiser, schedule: DiffusionSchedule, weights: LossWeights = LossWeights()
) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """(g_img, g_phong) shaped like x0_tgt and phong_tgt."""
    z_src, z_tgt, z_phong = pds_pair(step, denoiser, schedule)
    return _latent_gradients(z_src, z_tgt, z_phong, weights.w(step.t, schedule), weights)


def distill(
    step: DistillStep, denoiser: Denoiser, schedule: DiffusionSchedule, weights: LossWeights = LossWeights()
) -> DistillResult:
    """Latents, loss values and gradients of one step, with a single set of denoiser calls."""
    z_src, z_tgt, z_phong = pds_pair(step, denoiser, schedule)
    g_img, g_phong = _latent_gradients(z_src, z_tgt, z_phong, weights.w(step.t, schedule), weights)
    l_pds = float(pds_loss(z_src, z_tgt))
    l_pe = float(pe_loss(z_src, z_phong)) if z_phong is not None else 0.0
    l_pepds = weights.lambda_pds * l_pds + weights.lambda_pe * l_pe
    return DistillResult(step.t, g_img, g_phong, l_pds, l_pe, l_pepds, (z_src, z_tgt, z_phong))


def surrogate_loss(
    x0_tgt: torch.Tensor,
    g_img: torch.Tensor,
    phong_tgt: Optional[torch.Tensor] = None,
    g_phong: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Scalar whose gradient w.r.t. the rendered images is (g_img, g_phong)."""
    loss = (x0_tgt * g_img.detach().to(x0_tgt.dtype)).sum()
    if phong_tgt is not None and g_phong is not None:
        loss = loss + (phong_tgt * g_phong.detach().to(phong_tgt.dtype)).sum()
    return loss
