"""Ray generation, NeuS foreground rendering, inverted-sphere background,
compositing and the Phong headlight renderer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields as dc_fields
from typing import Optional, Protocol, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .cameras import Camera, check_rigid
from .config import RenderConfig
from .errors import ConfigError
from .fields import FieldBundle, sdf_and_gradient, sdf_gradient
from .logging_utils import debug_flags
from .scenes import AnalyticSDF


logger = logging.getLogger(__name__)

DEPTH_EPS = 1e-8


@dataclass(frozen=True)
class Material:
    ambient: float = 0.1
    diffuse: float = 0.7
    specular: float = 0.2
    shininess: float = 32.0

    @classmethod
    def from_config(cls, cfg: RenderConfig) -> "Material":
        return cls(cfg.ambient, cfg.diffuse, cfg.specular, cfg.shininess)


@dataclass
class RaySamples:
    depths: torch.Tensor  # R, n ascending
    midpoints: torch.Tensor  # R, n-1
    widths: torch.Tensor  # R, n-1


@dataclass
class RenderOutput:
    rgb_fg: torch.Tensor
    rgb_bg: torch.Tensor
    rgb: torch.Tensor
    mask: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    phong: Optional[torch.Tensor] = None
    mask_bg: Optional[torch.Tensor] = None

    @classmethod
    def cat(cls, parts: list["RenderOutput"]) -> "RenderOutput":
        out = {}
        for f in dc_fields(cls):
            vals = [getattr(p, f.name) for p in parts]
            out[f.name] = None if vals[0] is None else torch.cat(vals, dim=0)
        return cls(**out)

    def image(self, name: str, height: int, width: int) -> torch.Tensor:
        """Reshape a per-ray layer into an H x W (x C) image."""
        v = getattr(self, name)
        return v.reshape(height, width, *v.shape[1:])


# -- rays -----------------------------------------------------------------


def pixel_grid(width: int, height: int, x0: int = 0, y0: int = 0, w: Optional[int] = None, h: Optional[int] = None) -> torch.Tensor:
    """Integer (col, row) coordinates of a row-major pixel window."""
    w = width if w is None else w
    h = height if h is None else h
    rows, cols = torch.meshgrid(torch.arange(y0, y0 + h), torch.arange(x0, x0 + w), indexing="ij")
    return torch.stack([cols.reshape(-1), rows.reshape(-1)], dim=-1)


def generate_rays(camera: Camera, pixels: torch.Tensor, dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    """World-space rays through pixel centres; pixels are (col, row) pairs."""
    pose = check_rigid(camera.pose)
    K = camera.intrinsics
    p = pixels.to(torch.float64) + 0.5
    dirs = torch.stack(
        [(p[:, 0] - K.cx) / K.fx, -(p[:, 1] - K.cy) / K.fy, -torch.ones(len(p), dtype=torch.float64)], dim=-1
    )
    R = torch.as_tensor(pose[:3, :3], dtype=torch.float64)
    d = dirs @ R.T
    d = d / torch.linalg.norm(d, dim=-1, keepdim=True)
    o = torch.as_tensor(pose[:3, 3], dtype=torch.float64).expand_as(d)
    return o.to(dtype).contiguous(), d.to(dtype).contiguous()


def near_far_from_sphere(rays_o: torch.Tensor, rays_d: torch.Tensor, radius: float = 1.0):
    mid = -(rays_o * rays_d).sum(dim=-1)
    near = (mid - radius).clamp_min(0.0)
    far = mid + radius
    far = torch.maximum(far, near + 1e-3)
    return near, far


def sample_depths(
    near: torch.Tensor, far: torch.Tensor, n: int, generator: Optional[torch.Generator] = None
) -> RaySamples:
    """Stratified samples; bin centres when no generator is given."""
    bins = torch.arange(n, dtype=near.dtype, device=near.device)
    if generator is None:
        u = torch.full((len(near), n), 0.5, dtype=near.dtype)
    else:
        u = torch.rand((len(near), n), generator=generator, dtype=near.dtype)
    depths = near[:, None] + (far - near)[:, None] * (bins[None] + u) / n
    return RaySamples(depths, 0.5 * (depths[:, 1:] + depths[:, :-1]), depths[:, 1:] - depths[:, :-1])


# -- compositing primitives -------------------------------------------------


def neus_alpha(sdf_i: torch.Tensor, sdf_next: torch.Tensor, s) -> torch.Tensor:
    """alpha = max((Phi_s(d_i) - Phi_s(d_i+1)) / Phi_s(d_i), 0), evaluated in log space."""
    s = torch.as_tensor(s, dtype=sdf_i.dtype)
    if bool(torch.any(s <= 0)):
        raise ConfigError("NeuS sharpness must be positive")
    log_ratio = F.logsigmoid(s * sdf_next) - F.logsigmoid(s * sdf_i)
    return (-torch.expm1(log_ratio)).clamp(0.0, 1.0)


def volume_render(alphas: torch.Tensor, colors: torch.Tensor, depths: torch.Tensor):
    """Front-to-back compositing: w_i = T_i a_i with T_i = prod_{j<i} (1 - a_j).

    Returns (rgb, weight sum M, depth, weights).
    """
    trans = torch.cumprod(torch.cat([torch.ones_like(alphas[..., :1]), 1.0 - alphas[..., :-1]], dim=-1), dim=-1)
    weights = trans * alphas
    rgb = (weights[..., None] * colors).sum(dim=-2)
    acc = weights.sum(dim=-1)
    depth = (weights * depths).sum(dim=-1) / acc.clamp_min(DEPTH_EPS)
    return rgb, acc, depth, weights


def composite(fg: torch.Tensor, bg: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    bad = (mask < 0) | (mask > 1)
    if bool(bad.any()):
        debug_flags.flag("composite_mask_clamped", int(bad.sum()))
        mask = mask.clamp(0.0, 1.0)
    m = mask[..., None] if mask.dim() == fg.dim() - 1 else mask
    return m * fg + (1.0 - m) * bg


def phong_shade(
    normal: torch.Tensor, light_dir: torch.Tensor, view_dir: torch.Tensor, material: Material = Material()
) -> torch.Tensor:
    """Scalar Phong shade replicated to three identical channels."""
    norm = torch.linalg.norm(normal, dim=-1, keepdim=True)
    degenerate = norm[..., 0] < 1e-12
    if bool(degenerate.any()):
        debug_flags.flag("phong_zero_normal", int(degenerate.sum()))
    n = torch.where(degenerate[..., None], torch.zeros_like(normal), normal / norm.clamp_min(1e-12))
    n_dot_l = (n * light_dir).sum(dim=-1)
    r = 2.0 * n_dot_l[..., None] * n - light_dir
    r_dot_v = (r * view_dir).sum(dim=-1)
    shade = (
        material.ambient
        + material.diffuse * n_dot_l.clamp_min(0.0)
        + material.specular * r_dot_v.clamp_min(0.0) ** material.shininess
    )
    shade = shade.clamp(0.0, 1.0)
    return shade[..., None].expand(*shade.shape, 3).contiguous()


# -- field adapters -------------------------------------------------------


class Foreground(Protocol):
    def sdf(self, x: torch.Tensor) -> torch.Tensor: ...

    def evaluate(self, x: torch.Tensor, d: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]: ...

    def sharpness(self) -> torch.Tensor: ...

    def numerical_step(self) -> float: ...


class Background(Protocol):
    def __call__(self, coords: torch.Tensor, d: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]: ...


class SourceForeground:
    def __init__(self, bundle: FieldBundle):
        self.bundle = bundle

    def sdf(self, x):
        return self.bundle.sdf_source(x)[0]

    def evaluate(self, x, d):
        (sdf, feat), grad = sdf_and_gradient(self.bundle.sdf_source, x)
        rgb, _ = self.bundle.source_color(feat, d, F.normalize(grad, dim=-1))
        return sdf, rgb, grad

    def sharpness(self):
        return self.bundle.sharpness("source")

    def numerical_step(self):
        return self.bundle.numerical_step("source")


class TargetForeground:
    """Target field; the source colour it refines is recomputed with the source's own normal."""

    def __init__(self, bundle: FieldBundle):
        self.bundle = bundle

    def sdf(self, x):
        return self.bundle.sdf_target(x)[0]

    def evaluate(self, x, d):
        b = self.bundle
        (sdf_src, feat_src), grad_src = sdf_and_gradient(b.sdf_source, x)
        (sdf, feat), grad = sdf_and_gradient(b.sdf_target, x)
        src_rgb, src_logits = b.source_color(feat_src, d, F.normalize(grad_src, dim=-1))
        rgb = b.target_color(feat, d, F.normalize(grad, dim=-1), src_rgb, src_logits)
        return sdf, rgb, grad

    def sharpness(self):
        return self.bundle.sharpness("target")

    def numerical_step(self):
        return self.bundle.numerical_step("target")


class AnalyticForeground:
    """Closed-form SDF with a constant emissive colour."""

    def __init__(self, scene: AnalyticSDF, color=(0.8, 0.4, 0.2), sharpness: float = 64.0, h: float = 1e-3):
        self.scene = scene
        self.color = torch.as_tensor(color, dtype=torch.float64)
        self._sharpness = float(sharpness)
        self._h = h

    def sdf(self, x):
        return self.scene(x)

    def evaluate(self, x, d):
        sdf = self.scene(x)
        rgb = self.color.to(x.dtype).expand(*x.shape[:-1], 3)
        return sdf, rgb, self.scene.gradient(x)

    def sharpness(self):
        return torch.tensor(self._sharpness)

    def numerical_step(self):
        return self._h


class FieldBackground:
    def __init__(self, bundle_or_field):
        self.field = bundle_or_field.background if isinstance(bundle_or_field, FieldBundle) else bundle_or_field

    def __call__(self, coords, d):
        return self.field(coords, d)


class ConstantBackground:
    def __init__(self, density: float = 50.0, color=(0.3, 0.3, 0.3)):
        self.density = float(density)
        self.color = torch.as_tensor(color, dtype=torch.float64)

    def __call__(self, coords, d):
        sigma = torch.full(coords.shape[:-1], self.density, dtype=coords.dtype)
        return sigma, self.color.to(coords.dtype).expand(*coords.shape[:-1], 3)


def foreground_for(bundle: FieldBundle, which: str) -> Foreground:
    if which == "source":
        return SourceForeground(bundle)
    if which == "target":
        return TargetForeground(bundle)
    raise ConfigError(f"unknown field {which!r}; expected source or target")


# -- background -------------------------------------------------------------


def inverted_sphere(x: torch.Tensor) -> torch.Tensor:
    """(x/|x|, 1/|x|) for points outside the unit sphere."""
    r = torch.linalg.norm(x, dim=-1, keepdim=True)
    return torch.cat([x / r, 1.0 / r], dim=-1)


def render_background(
    rays_o: torch.Tensor,
    rays_d: torch.Tensor,
    background: Background,
    n_samples: int = 32,
    generator: Optional[torch.Generator] = None,
):
    """Composite the background beyond the unit sphere, sampled uniformly in inverse distance.

    Intervals are measured in the bounded coordinate s = 1/|x| so the whole
    unbounded segment has finite total width. Returns (rgb, weight sum).
    """
    t_c = -(rays_o * rays_d).sum(dim=-1)
    foot = rays_o + t_c.clamp_min(0.0)[:, None] * rays_d
    r_start = torch.linalg.norm(foot, dim=-1).clamp_min(1.0)
    perp2 = ((rays_o * rays_o).sum(dim=-1) - t_c * t_c).clamp_min(0.0)

    s_max = 1.0 / r_start
    bins = torch.arange(n_samples, dtype=rays_o.dtype)
    if generator is None:
        u = torch.full((len(rays_o), n_samples), 0.5, dtype=rays_o.dtype)
    else:
        u = torch.rand((len(rays_o), n_samples), generator=generator, dtype=rays_o.dtype)
    s = s_max[:, None] * (1.0 - (bins[None] + u) / n_samples)  # descending: front to back
    radius = 1.0 / s
    t = t_c[:, None] + torch.sqrt((radius * radius - perp2[:, None]).clamp_min(0.0))
    pts = rays_o[:, None, :] + t[..., None] * rays_d[:, None, :]

    bad = ~torch.isfinite(pts).all(dim=-1).all(dim=-1)
    if bool(bad.any()):
        debug_flags.flag("background_ray_not_leaving_sphere", int(bad.sum()))

    coords = inverted_sphere(pts.reshape(-1, 3))
    dirs = rays_d[:, None, :].expand_as(pts).reshape(-1, 3)
    sigma, color = background(coords, dirs)
    sigma = sigma.reshape(len(rays_o), n_samples)
    color = color.reshape(len(rays_o), n_samples, 3)
    alpha = 1.0 - torch.exp(-sigma * (s_max / n_samples)[:, None])
    rgb, acc, _, _ = volume_render(alpha, color, t)
    if bool(bad.any()):
        rgb = torch.where(bad[:, None], torch.zeros_like(rgb), rgb)
        acc = torch.where(bad, torch.zeros_like(acc), acc)
    return rgb, acc


# -- full pipeline ------------------------------------------------------------


def _render_chunk(
    fg: Foreground,
    bg: Background,
    rays_o: torch.Tensor,
    rays_d: torch.Tensor,
    cfg: RenderConfig,
    want_phong: bool,
    phong_gradient: str,
    generator: Optional[torch.Generator],
) -> RenderOutput:
    near, far = near_far_from_sphere(rays_o, rays_d)
    samples = sample_depths(near, far, cfg.n_samples, generator)
    pts = rays_o[:, None, :] + samples.depths[..., None] * rays_d[:, None, :]
    dirs = rays_d[:, None, :].expand_as(pts)

    R, n = samples.depths.shape
    sdf, rgb, grad = fg.evaluate(pts.reshape(-1, 3), dirs.reshape(-1, 3))
    sdf, rgb, grad = sdf.reshape(R, n), rgb.reshape(R, n, 3), grad.reshape(R, n, 3)

    alpha = neus_alpha(sdf[:, :-1], sdf[:, 1:], fg.sharpness().to(sdf.dtype))
    colors = 0.5 * (rgb[:, :-1] + rgb[:, 1:])
    rgb_fg, mask, depth, weights = volume_render(alpha, colors, samples.midpoints)
    normals = F.normalize(grad, dim=-1)
    normal = (weights[..., None] * 0.5 * (normals[:, :-1] + normals[:, 1:])).sum(dim=1)

    rgb_bg, mask_bg = render_background(rays_o, rays_d, bg, cfg.n_background, generator)
    out = RenderOutput(rgb_fg, rgb_bg, composite(rgb_fg, rgb_bg, mask), mask, depth, normal, None, mask_bg)

    if want_phong:
        surface = rays_o + depth[:, None] * rays_d
        h = fg.numerical_step() if phong_gradient == "numerical" else None
        n_s = sdf_gradient(fg.sdf, surface, phong_gradient, h)
        n_s = n_s / torch.linalg.norm(n_s, dim=-1, keepdim=True).clamp_min(1e-12)
        headlight = -rays_d
        out.phong = mask[:, None] * phong_shade(n_s, headlight, headlight, Material.from_config(cfg))
    return out


def render_rays(
    fg: Foreground,
    bg: Background,
    rays_o: torch.Tensor,
    rays_d: torch.Tensor,
    cfg: RenderConfig = RenderConfig(),
    want_phong: bool = False,
    phong_gradient: Optional[str] = None,
    generator: Optional[torch.Generator] = None,
) -> RenderOutput:
    """Render a ray batch in fixed-order chunks so results do not depend on batching."""
    mode = phong_gradient or cfg.phong_gradient
    parts = [
        _render_chunk(fg, bg, rays_o[i : i + cfg.chunk], rays_d[i : i + cfg.chunk], cfg, want_phong, mode, generator)
        for i in range(0, len(rays_o), cfg.chunk)
    ]
    return parts[0] if len(parts) == 1 else RenderOutput.cat(parts)


def render_pixel(
    bundle: FieldBundle,
    ray_o: torch.Tensor,
    ray_d: torch.Tensor,
    which: str = "source",
    want_phong: bool = False,
    cfg: RenderConfig = RenderConfig(),
) -> RenderOutput:
    return render_rays(
        foreground_for(bundle, which), FieldBackground(bundle), ray_o.reshape(1, 3), ray_d.reshape(1, 3), cfg, want_phong
    )


def render_camera(
    fg: Foreground,
    bg: Background,
    camera: Camera,
    cfg: RenderConfig = RenderConfig(),
    want_phong: bool = False,
    pixels: Optional[torch.Tensor] = None,
    dtype: torch.dtype = torch.float32,
) -> RenderOutput:
    K = camera.intrinsics
    pix = pixel_grid(K.width, K.height) if pixels is None else pixels
    rays_o, rays_d = generate_rays(camera, pix, dtype)
    return render_rays(fg, bg, rays_o, rays_d, cfg, want_phong)


def to_image(layer: torch.Tensor, height: int, width: int) -> np.ndarray:
    """Per-ray layer -> H x W x C float array (C = 3 for scalars replicated)."""
    arr = layer.detach().to("cpu", torch.float64).reshape(height, width, -1).numpy()
    return np.repeat(arr, 3, axis=-1) if arr.shape[-1] == 1 else arr
