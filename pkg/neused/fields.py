"""Neural fields behind the three renderers.

Foreground points live in the cube [-1, 1]^3 around the unit sphere; background
points are encoded in inverted-sphere coordinates (x/|x|, 1/|x|) in [-1, 1]^4.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigError
from .logging_utils import debug_flags


HASH_PRIMES = (1, 2654435761, 805459861, 3674653429)

SdfFn = Callable[[torch.Tensor], Union[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]]


class HashGridEncoding(nn.Module):
    """Multiresolution hash grid with a progressive level mask.

    Levels whose (N_l + 1)^d vertices fit in the table are indexed densely, the
    rest through the spatial hash. Levels at or above ``active_levels`` return
    zeros and never touch their tables.
    """

    def __init__(
        self,
        in_dim: int = 3,
        levels: int = 8,
        features_per_level: int = 2,
        log2_table_size: int = 14,
        base_resolution: int = 16,
        growth_factor: float = 1.5,
        init_levels: Optional[int] = None,
        bound: float = 1.0,
    ):
        super().__init__()
        if in_dim > len(HASH_PRIMES):
            raise ConfigError(f"hash grid supports up to {len(HASH_PRIMES)} dims")
        self.in_dim = in_dim
        self.levels = levels
        self.features_per_level = features_per_level
        self.table_size = 2 ** log2_table_size
        self.base_resolution = base_resolution
        self.growth_factor = growth_factor
        self.bound = bound
        self.init_levels = levels if init_levels is None else init_levels
        self.resolutions: List[int] = [int(math.floor(base_resolution * growth_factor ** l)) for l in range(levels)]
        self.dense: List[bool] = [(r + 1) ** in_dim <= self.table_size for r in self.resolutions]

        self.tables = nn.ParameterList(
            [nn.Parameter(torch.empty(self.table_size, features_per_level).uniform_(-1e-4, 1e-4)) for _ in range(levels)]
        )
        corners = torch.tensor(list(np.ndindex(*([2] * in_dim))), dtype=torch.long)
        self.register_buffer("corners", corners, persistent=False)
        self.register_buffer("_active", torch.tensor(levels, dtype=torch.long), persistent=False)

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    @property
    def active_levels(self) -> int:
        return int(self._active.item())

    @active_levels.setter
    def active_levels(self, value: int) -> None:
        self._active.fill_(max(0, min(self.levels, int(value))))

    def finest_cell(self) -> float:
        """Edge length of the finest active grid cell (coarsest level when none is active)."""
        res = self.resolutions[max(self.active_levels, 1) - 1]
        return 2.0 * self.bound / res

    def _index(self, vertices: torch.Tensor, level: int) -> torch.Tensor:
        res = self.resolutions[level]
        if self.dense[level]:
            idx = torch.zeros(vertices.shape[:-1], dtype=torch.long, device=vertices.device)
            stride = 1
            for i in range(self.in_dim):
                idx = idx + vertices[..., i] * stride
                stride *= res + 1
            return idx
        idx = torch.zeros(vertices.shape[:-1], dtype=torch.long, device=vertices.device)
        for i in range(self.in_dim):
            idx = idx ^ (vertices[..., i] * HASH_PRIMES[i])
        return idx % self.table_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outside = (x.abs() > self.bound).any(dim=-1)
        if bool(outside.any()):
            debug_flags.flag("encode_out_of_box", int(outside.sum()))
            x = x.clamp(-self.bound, self.bound)
        u = (x + self.bound) / (2.0 * self.bound)

        feats = []
        active = self.active_levels
        for level in range(self.levels):
            if level >= active:
                feats.append(x.new_zeros(x.shape[0], self.features_per_level))
                continue
            res = self.resolutions[level]
            pos = u * res
            base = torch.floor(pos).long().clamp(0, res - 1)
            frac = pos - base.to(pos.dtype)
            vertices = base[:, None, :] + self.corners[None]  # N, 2^d, d
            w = torch.where(self.corners[None].bool(), frac[:, None, :], 1.0 - frac[:, None, :]).prod(dim=-1)
            table = self.tables[level]
            f = table[self._index(vertices, level)]  # N, 2^d, F
            feats.append((w[..., None] * f).sum(dim=1))
        return torch.cat(feats, dim=-1)


def encode(enc: HashGridEncoding, x: torch.Tensor) -> torch.Tensor:
    return enc(x)


def progressive_schedule(step: int, total: int, enc: HashGridEncoding) -> int:
    """Active levels: linear ramp from ``enc.init_levels`` to all levels over the first half."""
    if total <= 0 or step >= total / 2:
        return enc.levels
    span = enc.levels - enc.init_levels
    return min(enc.levels, enc.init_levels + int(span * 2 * max(step, 0) / total))


def _mlp(in_dim: int, width: int, layers: int) -> nn.ModuleList:
    dims = [in_dim] + [width] * layers
    return nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))


class GeometryNet(nn.Module):
    """(x, H(x)) -> (sdf, feature), sphere-initialised so the untrained field is |x| - r."""

    def __init__(self, enc_dim: int, feature_dim: int, width: int = 64, layers: int = 2, init_radius: float = 0.5):
        super().__init__()
        self.feature_dim = feature_dim
        self.hidden = _mlp(3 + enc_dim, width, layers)
        self.out = nn.Linear(width, 1 + feature_dim)
        self.act = nn.Softplus(beta=100)

        for i, lin in enumerate(self.hidden):
            nn.init.normal_(lin.weight, 0.0, math.sqrt(2.0) / math.sqrt(lin.out_features))
            nn.init.zeros_(lin.bias)
            if i == 0:
                nn.init.zeros_(lin.weight[:, 3:])
        nn.init.normal_(self.out.weight, mean=math.sqrt(math.pi) / math.sqrt(width), std=1e-4)
        nn.init.constant_(self.out.bias, -init_radius)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        y = torch.cat([x, h], dim=-1)
        for lin in self.hidden:
            y = self.act(lin(y))
        y = self.out(y)
        return y[..., 0], y[..., 1:]


class TargetGeometryNet(nn.Module):
    """(sdf_src, F_src, H_tgt(x)) -> (sdf_tgt, F_tgt) through a zero-initialised residual head."""

    def __init__(self, enc_dim: int, feature_dim: int, width: int = 64, layers: int = 2):
        super().__init__()
        self.hidden = _mlp(1 + feature_dim + enc_dim, width, layers)
        self.head = nn.Linear(width, 1 + feature_dim)
        self.act = nn.Softplus(beta=100)
        self.reset_head()

    def reset_head(self) -> None:
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, sdf_src: torch.Tensor, feat_src: torch.Tensor, h: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        y = torch.cat([sdf_src[..., None], feat_src, h], dim=-1)
        for lin in self.hidden:
            y = self.act(lin(y))
        delta = self.head(y)
        return sdf_src + delta[..., 0], feat_src + delta[..., 1:]


class ColorNet(nn.Module):
    """(feature, view dir[, normal]) -> RGB in [0, 1]; also returns the pre-sigmoid logits."""

    def __init__(self, feature_dim: int, width: int = 64, layers: int = 2, use_normal: bool = True):
        super().__init__()
        self.use_normal = use_normal
        self.hidden = _mlp(feature_dim + 3 + (3 if use_normal else 0), width, layers)
        self.out = nn.Linear(width, 3)

    def forward(
        self, feat: torch.Tensor, d: torch.Tensor, n: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        parts = [feat, d] + ([n] if self.use_normal else [])
        y = torch.cat(parts, dim=-1)
        for lin in self.hidden:
            y = F.relu(lin(y))
        logits = self.out(y)
        return torch.sigmoid(logits), logits


class TargetColorNet(nn.Module):
    """Adds a zero-initialised logit residual on top of the source colour it is given."""

    def __init__(self, feature_dim: int, width: int = 64, layers: int = 2):
        super().__init__()
        self.hidden = _mlp(feature_dim + 3 + 3 + 3, width, layers)
        self.head = nn.Linear(width, 3)
        self.reset_head()

    def reset_head(self) -> None:
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(
        self, feat: torch.Tensor, d: torch.Tensor, n: torch.Tensor, src_rgb: torch.Tensor, src_logits: torch.Tensor
    ) -> torch.Tensor:
        y = torch.cat([feat, d, n, src_rgb], dim=-1)
        for lin in self.hidden:
            y = F.relu(lin(y))
        return torch.sigmoid(src_logits + self.head(y))


class BackgroundField(nn.Module):
    """Density field over inverted-sphere coordinates (x/|x|, 1/|x|)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.encoding = HashGridEncoding(
            in_dim=4,
            levels=cfg.levels,
            features_per_level=cfg.features_per_level,
            log2_table_size=cfg.log2_table_size,
            base_resolution=cfg.base_resolution,
            growth_factor=cfg.growth_factor,
            init_levels=cfg.init_levels,
        )
        self.hidden = _mlp(self.encoding.output_dim, cfg.hidden_width, cfg.hidden_layers)
        self.out = nn.Linear(cfg.hidden_width, 1 + cfg.feature_dim)
        self.color = ColorNet(cfg.feature_dim, cfg.color_hidden_width, cfg.hidden_layers, use_normal=False)

    def forward(self, coords: torch.Tensor, d: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        y = self.encoding(coords)
        for lin in self.hidden:
            y = F.relu(lin(y))
        y = self.out(y)
        density = F.softplus(y[..., 0])
        rgb, _ = self.color(y[..., 1:], d)
        return density, rgb


class FieldBundle(nn.Module):
    """Background, source and target fields of one scene plus the NeuS sharpness per foreground."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg

        def grid() -> HashGridEncoding:
            return HashGridEncoding(
                in_dim=3,
                levels=cfg.levels,
                features_per_level=cfg.features_per_level,
                log2_table_size=cfg.log2_table_size,
                base_resolution=cfg.base_resolution,
                growth_factor=cfg.growth_factor,
                init_levels=cfg.init_levels,
            )

        self.background = BackgroundField(cfg)
        self.source_encoding = grid()
        self.source_geometry = GeometryNet(
            self.source_encoding.output_dim, cfg.feature_dim, cfg.hidden_width, cfg.hidden_layers, cfg.init_radius
        )
        self.source_color = ColorNet(cfg.feature_dim, cfg.color_hidden_width, cfg.hidden_layers)
        self.target_encoding = grid()
        self.target_geometry = TargetGeometryNet(
            self.target_encoding.output_dim, cfg.feature_dim, cfg.hidden_width, cfg.hidden_layers
        )
        self.target_color = TargetColorNet(cfg.feature_dim, cfg.color_hidden_width, cfg.hidden_layers)
        self.log_sharpness_src = nn.Parameter(torch.tensor(math.log(cfg.init_sharpness)))
        self.log_sharpness_tgt = nn.Parameter(torch.tensor(math.log(cfg.init_sharpness)))

    # -- evaluation --------------------------------------------------------

    def sdf_source(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.source_geometry(x, self.source_encoding(x))

    def sdf_target(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        sdf_src, feat_src = self.sdf_source(x)
        return self.target_geometry(sdf_src, feat_src, self.target_encoding(x))

    def sharpness(self, which: str) -> torch.Tensor:
        return torch.exp(self.log_sharpness_src if which == "source" else self.log_sharpness_tgt)

    # -- parameter partition -----------------------------------------------

    def source_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.source_encoding.parameters()
        yield from self.source_geometry.parameters()
        yield from self.source_color.parameters()
        yield self.log_sharpness_src

    def target_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.target_encoding.parameters()
        yield from self.target_geometry.parameters()
        yield from self.target_color.parameters()
        yield self.log_sharpness_tgt

    def background_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.background.parameters()

    def hash_parameters(self) -> List[nn.Parameter]:
        encs = (self.source_encoding, self.target_encoding, self.background.encoding)
        return [p for e in encs for p in e.tables]

    def freeze_identity(self) -> None:
        for p in list(self.source_parameters()) + list(self.background_parameters()):
            p.requires_grad_(False)

    def reset_target(self) -> None:
        """Additive-learning start: target reproduces the source exactly."""
        self.target_geometry.reset_head()
        self.target_color.reset_head()
        with torch.no_grad():
            self.log_sharpness_tgt.copy_(self.log_sharpness_src)

    def numerical_step(self, which: str) -> float:
        """h = half the finest active cell of the field's own grid."""
        enc = self.source_encoding if which == "source" else self.target_encoding
        return 0.5 * enc.finest_cell()

    def parameter_report(self) -> Dict[str, int]:
        def count(params) -> int:
            return sum(p.numel() for p in params)

        src, bg, tgt = count(self.source_parameters()), count(self.background_parameters()), count(self.target_parameters())
        return {"source": src, "background": bg, "identity": src + bg, "target": tgt}


def sdf_source(bundle: FieldBundle, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return bundle.sdf_source(x)


def sdf_target(bundle: FieldBundle, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return bundle.sdf_target(x)


def _sdf_only(out) -> torch.Tensor:
    return out[0] if isinstance(out, tuple) else out


def sdf_and_gradient(field: SdfFn, x: torch.Tensor, create_graph: Optional[bool] = None):
    """Evaluate the field and its reverse-mode spatial gradient in one pass.

    Returns the raw field output (sdf or (sdf, feature)) and the gradient.
    """
    outer_grad = torch.is_grad_enabled()
    if create_graph is None:
        create_graph = torch.is_grad_enabled()
    with torch.enable_grad():
        xq = x if x.requires_grad else x.detach().requires_grad_(True)
        out = field(xq)
        sdf = _sdf_only(out)
        (grad,) = torch.autograd.grad(sdf.sum(), xq, create_graph=create_graph)
    if not outer_grad:
        out = tuple(o.detach() for o in out) if isinstance(out, tuple) else out.detach()
    return out, grad


def sdf_gradient(field: SdfFn, x: torch.Tensor, mode: str = "analytic", h: Optional[float] = None) -> torch.Tensor:
    if mode == "analytic":
        return sdf_and_gradient(field, x)[1]
    if mode != "numerical":
        raise ConfigError(f"unknown gradient mode {mode!r}")
    if h is None or h <= 0:
        raise ConfigError(f"numerical gradient needs h > 0, got {h}")
    offsets = h * torch.eye(3, dtype=x.dtype, device=x.device)
    pts = torch.cat([x[:, None, :] + offsets[None], x[:, None, :] - offsets[None]], dim=1)  # N, 6, 3
    vals = _sdf_only(field(pts.reshape(-1, 3))).reshape(-1, 6)
    return (vals[:, :3] - vals[:, 3:]) / (2.0 * h)


def build_bundle(cfg: ModelConfig, seed: int = 0) -> FieldBundle:
    """Construct a bundle whose initial weights depend only on ``seed``, leaving the global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FieldBundle(cfg)
