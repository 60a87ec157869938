"""Closed-form Bayes-optimal noise predictors for Gaussian data.

For x0 ~ N(m, s^2 I) and x_t = sqrt(a) x0 + sqrt(1 - a) eps, the posterior mean is
E[x0 | x_t] = (sqrt(a) s^2 x_t + (1 - a) m) / (a s^2 + 1 - a), and the optimal noise
prediction follows from the forward equation.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import torch

from ..diffusion import Conditioning, DiffusionSchedule
from ..errors import ConfigError


def _as_tensor(value, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(value, dtype=like.dtype, device=like.device)


def gaussian_posterior_mean(x_t: torch.Tensor, a_bar: float, mean, variance: float) -> torch.Tensor:
    m = _as_tensor(mean, x_t)
    return (math.sqrt(a_bar) * variance * x_t + (1.0 - a_bar) * m) / (a_bar * variance + 1.0 - a_bar)


def eps_from_x0(x_t: torch.Tensor, a_bar: float, x0_hat: torch.Tensor) -> torch.Tensor:
    return (x_t - math.sqrt(a_bar) * x0_hat) / math.sqrt(1.0 - a_bar)


class AnalyticGaussianDenoiser:
    """Optimal predictor for x0 ~ N(mean, variance I).

    The null prompt may use its own distribution (null_mean / null_variance); by
    default conditional and unconditional predictions coincide. A prompt of
    strength w in (0, 1), such as a perturbed null prompt, sees the data
    distribution with mean and variance blended by w. ``mean`` broadcasts against
    the noisy sample, so a (3, 1, 1) colour works for any image size.
    """

    def __init__(
        self,
        mean,
        variance: float,
        schedule: DiffusionSchedule,
        null_mean=None,
        null_variance: Optional[float] = None,
    ):
        if variance < 0 or (null_variance is not None and null_variance < 0):
            raise ConfigError("analytic denoiser variance must be >= 0")
        self.mean = torch.as_tensor(mean, dtype=torch.float64)
        self.variance = float(variance)
        self.null_mean = self.mean if null_mean is None else torch.as_tensor(null_mean, dtype=torch.float64)
        self.null_variance = self.variance if null_variance is None else float(null_variance)
        self.schedule = schedule

    def __call__(self, x_t: torch.Tensor, t: int, cond: Conditioning) -> torch.Tensor:
        a_bar = self.schedule.alpha_bar(self.schedule.check_t(t))
        w = cond.strength
        if w == 0.0:
            mean, var = self.null_mean, self.null_variance
        elif w == 1.0:
            mean, var = self.mean, self.variance
        else:
            mean = self.null_mean + w * (self.mean - self.null_mean)
            var = self.null_variance + w * (self.variance - self.null_variance)
        return eps_from_x0(x_t, a_bar, gaussian_posterior_mean(x_t, a_bar, mean, var))


def analytic_gaussian_denoiser(mean, variance: float, schedule: DiffusionSchedule, **kwargs) -> AnalyticGaussianDenoiser:
    return AnalyticGaussianDenoiser(mean, variance, schedule, **kwargs)


def _argmax_component(cond: Conditioning, k: int) -> Optional[int]:
    if cond.null_flag:
        return None
    return int(torch.argmax(cond.embedding[:k]).item())


class GaussianMixtureDenoiser:
    """Optimal predictor for a mixture of isotropic Gaussians.

    A non-null prompt selects one component (by default the argmax over the first K
    embedding entries); the null prompt sees the full mixture. Prompts of strength
    below 1 get the full-mixture estimate pulled toward their component by that strength.
    """

    def __init__(
        self,
        means: Sequence,
        variances: Sequence[float],
        schedule: DiffusionSchedule,
        weights: Optional[Sequence[float]] = None,
        select: Optional[Callable[[Conditioning], Optional[int]]] = None,
    ):
        if len(means) != len(variances) or not means:
            raise ConfigError("mixture needs one variance per mean")
        self.means = [torch.as_tensor(m, dtype=torch.float64) for m in means]
        self.variances = [float(v) for v in variances]
        k = len(self.means)
        w = torch.full((k,), 1.0 / k, dtype=torch.float64) if weights is None else torch.as_tensor(weights, dtype=torch.float64)
        if w.numel() != k or bool(torch.any(w <= 0)):
            raise ConfigError("mixture weights must be positive, one per component")
        self.log_weights = torch.log(w / w.sum())
        self.schedule = schedule
        self.select = select or (lambda cond: _argmax_component(cond, k))

    def posterior_mean(self, x_t: torch.Tensor, t: int, cond: Conditioning) -> torch.Tensor:
        a_bar = self.schedule.alpha_bar(self.schedule.check_t(t))
        idx = self.select(cond)
        w = cond.strength
        if idx is not None and w == 1.0:
            return gaussian_posterior_mean(x_t, a_bar, self.means[idx], self.variances[idx])
        full = self._mixture_mean(x_t, a_bar)
        if idx is None or w == 0.0:
            return full
        return full + w * (gaussian_posterior_mean(x_t, a_bar, self.means[idx], self.variances[idx]) - full)

    def _mixture_mean(self, x_t: torch.Tensor, a_bar: float) -> torch.Tensor:
        n = x_t.numel()
        logits, cond_means = [], []
        for log_w, m, v in zip(self.log_weights, self.means, self.variances):
            c = a_bar * v + 1.0 - a_bar
            resid = x_t - math.sqrt(a_bar) * _as_tensor(m, x_t)
            logits.append(log_w.to(x_t.dtype) - 0.5 * (resid.pow(2).sum() / c + n * math.log(c)))
            cond_means.append(gaussian_posterior_mean(x_t, a_bar, m, v))
        resp = torch.softmax(torch.stack(logits), dim=0)
        return sum(r * e for r, e in zip(resp, cond_means))

    def __call__(self, x_t: torch.Tensor, t: int, cond: Conditioning) -> torch.Tensor:
        a_bar = self.schedule.alpha_bar(t)
        return eps_from_x0(x_t, a_bar, self.posterior_mean(x_t, t, cond))
