"""Closed-form signed distance scenes (negative inside) used as oracles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

from .errors import ConfigError
from .fields import sdf_gradient


@dataclass(frozen=True)
class AnalyticSDF:
    kind: str
    fn: Callable[[torch.Tensor], torch.Tensor]
    grad_fn: Optional[Callable[[torch.Tensor], torch.Tensor]] = None

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.fn(x)

    def gradient(self, x: torch.Tensor) -> torch.Tensor:
        if self.grad_fn is not None:
            return self.grad_fn(x)
        return sdf_gradient(self.fn, x, mode="analytic")


def _vec(values: Sequence[float], like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(values, dtype=like.dtype, device=like.device)


def sphere(radius: float = 1.0, center: Sequence[float] = (0.0, 0.0, 0.0)) -> AnalyticSDF:
    if radius <= 0:
        raise ConfigError("sphere radius must be positive")

    def fn(x):
        return torch.linalg.norm(x - _vec(center, x), dim=-1) - radius

    def grad(x):
        p = x - _vec(center, x)
        return p / torch.linalg.norm(p, dim=-1, keepdim=True)

    return AnalyticSDF("sphere", fn, grad)


def box(half_extents: Sequence[float] = (1.0, 1.0, 1.0)) -> AnalyticSDF:
    if any(h <= 0 for h in half_extents):
        raise ConfigError("box half extents must be positive")

    def fn(x):
        q = x.abs() - _vec(half_extents, x)
        outside = torch.linalg.norm(q.clamp_min(0.0), dim=-1)
        inside = q.max(dim=-1).values.clamp_max(0.0)
        return outside + inside

    return AnalyticSDF("box", fn)


def torus(major: float = 0.5, minor: float = 0.2) -> AnalyticSDF:
    """Ring in the xy-plane around the z axis."""
    if not 0 < minor < major:
        raise ConfigError("torus needs 0 < minor < major")

    def fn(x):
        rho = torch.linalg.norm(x[..., :2], dim=-1)
        q = torch.stack([rho - major, x[..., 2]], dim=-1)
        return torch.linalg.norm(q, dim=-1) - minor

    def grad(x):
        rho = torch.linalg.norm(x[..., :2], dim=-1)
        q0, q1 = rho - major, x[..., 2]
        qn = torch.sqrt(q0 * q0 + q1 * q1)
        radial = x[..., :2] / rho[..., None]
        return torch.cat([radial * (q0 / qn)[..., None], (q1 / qn)[..., None]], dim=-1)

    return AnalyticSDF("torus", fn, grad)


def plane(normal: Sequence[float] = (0.0, 0.0, 1.0), offset: float = 0.0, scale: float = 1.0) -> AnalyticSDF:
    """scale * (x . n_hat - offset); scale != 1 gives a non-eikonal linear field."""
    n = torch.as_tensor(normal, dtype=torch.float64)
    if float(n.norm()) == 0.0:
        raise ConfigError("plane normal must be non-zero")
    n = (n / n.norm()).tolist()

    def fn(x):
        return scale * (x @ _vec(n, x) - offset)

    def grad(x):
        return (scale * _vec(n, x)).expand_as(x).clone()

    return AnalyticSDF("plane", fn, grad)


_KINDS = {"sphere": sphere, "box": box, "torus": torus, "plane": plane}


def analytic_scene(kind: str, **params) -> AnalyticSDF:
    try:
        factory = _KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown analytic scene {kind!r}; expected one of {sorted(_KINDS)}") from None
    return factory(**params)
