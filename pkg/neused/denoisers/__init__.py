from __future__ import annotations

from ..config import DenoiserConfig
from ..diffusion import Denoiser, DiffusionSchedule, build_schedule
from .analytic import AnalyticGaussianDenoiser, GaussianMixtureDenoiser, analytic_gaussian_denoiser
from .remote import RemoteDenoiser, remote_denoiser

__all__ = [
    "AnalyticGaussianDenoiser",
    "GaussianMixtureDenoiser",
    "RemoteDenoiser",
    "analytic_gaussian_denoiser",
    "remote_denoiser",
    "build_denoiser",
    "schedule_from_config",
]


def schedule_from_config(cfg: DenoiserConfig) -> DiffusionSchedule:
    return build_schedule(cfg.num_steps, cfg.beta_start, cfg.beta_end)


def build_denoiser(cfg: DenoiserConfig, schedule: DiffusionSchedule) -> Denoiser:
    """Analytic denoisers take (3,) colours and broadcast them over (3, H, W) images."""
    if cfg.kind == "remote":
        return RemoteDenoiser(cfg.url or "", timeout=cfg.timeout, retries=cfg.retries)

    def colour(values):
        return None if values is None else [[[float(v)]] for v in values]

    return AnalyticGaussianDenoiser(
        colour(cfg.mean),
        cfg.variance,
        schedule,
        null_mean=colour(cfg.null_mean),
        null_variance=cfg.null_variance,
    )
