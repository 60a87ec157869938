"""Stage 1 identity learning, stage 2 distillation editing and proxy metrics."""

from __future__ import annotations

import contextlib
import copy
import logging
import math
import pathlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .cameras import Camera, CameraPath
from .config import EditConfig, RenderConfig, Stage1Config
from .dataset import CalibratedDataset
from .diffusion import Conditioning, Denoiser, DiffusionSchedule
from .distillation import DistillStep, LossWeights, distill, surrogate_loss
from .errors import ConfigError, DivergenceError
from .fields import FieldBundle, SdfFn, progressive_schedule, sdf_and_gradient
from .logging_utils import LossLogger
from .rendering import (
    Background,
    FieldBackground,
    Foreground,
    SourceForeground,
    TargetForeground,
    generate_rays,
    pixel_grid,
    render_camera,
    render_rays,
)


logger = logging.getLogger(__name__)

SURFACE_BAND = 0.02


# -- stage 1 --------------------------------------------------------------------


def eikonal_loss(field: SdfFn, points: torch.Tensor) -> torch.Tensor:
    """mean (|grad sdf| - 1)^2 with autograd spatial gradients."""
    _, grad = sdf_and_gradient(field, points)
    return ((grad.norm(dim=-1) - 1.0) ** 2).mean()


def eikonal_points(n: int, generator: torch.Generator, surface: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Uniform points in [-1, 1]^3, plus jittered copies of ``surface`` points when given."""
    pts = torch.rand((n, 3), generator=generator) * 2.0 - 1.0
    if surface is not None and len(surface):
        jitter = SURFACE_BAND * torch.randn(surface.shape, generator=generator, dtype=surface.dtype)
        pts = torch.cat([pts, (surface.detach() + jitter).clamp(-1.0, 1.0)], dim=0)
    return pts


def _param_groups(params: Sequence[torch.nn.Parameter], hash_params: Sequence[torch.nn.Parameter], lr: float, hash_lr: float):
    hash_ids = {id(p) for p in hash_params}
    tables = [p for p in params if id(p) in hash_ids]
    rest = [p for p in params if id(p) not in hash_ids]
    groups = [{"params": rest, "lr": lr}]
    if tables:
        groups.append({"params": tables, "lr": hash_lr})
    return groups


def _check_finite(value: torch.Tensor, step: int, what: str) -> None:
    if not bool(torch.isfinite(value).all()):
        raise DivergenceError(f"{what} became non-finite at step {step}")


@dataclass
class DatasetRays:
    origins: torch.Tensor
    directions: torch.Tensor
    colors: torch.Tensor

    @classmethod
    def from_dataset(cls, dataset: CalibratedDataset) -> "DatasetRays":
        o, d, c = [], [], []
        for img, cam in zip(dataset.images, dataset.cameras):
            K = cam.intrinsics
            ro, rd = generate_rays(cam, pixel_grid(K.width, K.height))
            o.append(ro)
            d.append(rd)
            c.append(torch.as_tensor(img, dtype=torch.float32).reshape(-1, 3))
        return cls(torch.cat(o), torch.cat(d), torch.cat(c))

    def __len__(self) -> int:
        return len(self.colors)


@dataclass
class Stage1Result:
    bundle: FieldBundle
    losses: List[float] = field(default_factory=list)


def stage1_fit(
    bundle: FieldBundle,
    dataset: CalibratedDataset,
    cfg: Stage1Config = Stage1Config(),
    render_cfg: RenderConfig = RenderConfig(),
    generator: Optional[torch.Generator] = None,
) -> Stage1Result:
    """Fit background + source fields to the images, then freeze them and reset the target."""
    generator = generator or torch.Generator().manual_seed(0)
    rays = DatasetRays.from_dataset(dataset)
    params = list(bundle.source_parameters()) + list(bundle.background_parameters())
    for p in params:
        p.requires_grad_(True)
    optimizer = torch.optim.Adam(
        _param_groups(params, bundle.hash_parameters(), cfg.learning_rate, cfg.hash_learning_rate)
    )
    fg, bg = SourceForeground(bundle), FieldBackground(bundle)
    result = Stage1Result(bundle)
    logger.info("stage 1: %d iterations over %d rays", cfg.iterations, len(rays))

    for step in range(cfg.iterations):
        for enc in (bundle.source_encoding, bundle.background.encoding):
            enc.active_levels = progressive_schedule(step, cfg.iterations, enc)
        idx = torch.randint(0, len(rays), (cfg.rays_per_batch,), generator=generator)
        out = render_rays(fg, bg, rays.origins[idx], rays.directions[idx], render_cfg, generator=generator)
        photometric = ((out.rgb - rays.colors[idx]) ** 2).mean()
        surface = rays.origins[idx] + out.depth.detach()[:, None] * rays.directions[idx]
        surface = surface[out.mask.detach() > 0.5]
        eik = eikonal_loss(bundle.sdf_source, eikonal_points(cfg.eikonal_points, generator, surface))
        loss = photometric + cfg.eikonal_weight * eik
        _check_finite(loss, step, "stage-1 loss")

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        result.losses.append(float(loss))
        if step % cfg.log_every == 0 or step == cfg.iterations - 1:
            logger.info("stage1 step=%d loss=%.6f photometric=%.6f eikonal=%.6f", step, float(loss), float(photometric), float(eik))

    for enc in (bundle.source_encoding, bundle.target_encoding, bundle.background.encoding):
        enc.active_levels = enc.levels
    bundle.freeze_identity()
    bundle.reset_target()
    return result


# -- stage 2 --------------------------------------------------------------------


def perturb_prompt(cond: Conditioning, sigma: float, generator: torch.Generator) -> Conditioning:
    """embedding + N(0, sigma^2 I), keeping the prompt text.

    A perturbed null prompt is no longer null: it carries its noisy embedding to
    the denoiser.
    """
    if sigma < 0:
        raise ConfigError(f"prompt noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return Conditioning(cond.embedding.clone(), cond.null_flag, cond.prompt)
    noise = torch.randn(cond.embedding.shape, generator=generator, dtype=cond.embedding.dtype)
    return Conditioning(cond.embedding + sigma * noise, False, cond.prompt)


def weights_from_config(cfg: EditConfig) -> LossWeights:
    return LossWeights(cfg.lambda_pds, cfg.lambda_pe, cfg.weighting)


@dataclass
class EditRecord:
    step: int
    t: int
    l_pds: float
    l_pe: float
    l_pepds: float
    mean_rgb: List[float]


@dataclass
class EditResult:
    bundle: FieldBundle
    records: List[EditRecord] = field(default_factory=list)


def _restore_requires_grad(params, flags) -> None:
    for p, flag in zip(params, flags):
        p.requires_grad_(flag)


def _as_chw(layer: torch.Tensor, size: int) -> torch.Tensor:
    return layer.reshape(size, size, 3).permute(2, 0, 1)


def _patch(camera: Camera, size: int, generator: torch.Generator) -> torch.Tensor:
    K = camera.intrinsics
    size_x, size_y = min(size, K.width), min(size, K.height)
    x0 = int(torch.randint(0, K.width - size_x + 1, (1,), generator=generator))
    y0 = int(torch.randint(0, K.height - size_y + 1, (1,), generator=generator))
    return pixel_grid(K.width, K.height, x0, y0, size_x, size_y)


def stage2_edit(
    bundle: FieldBundle,
    cameras: Sequence[Camera],
    cfg: EditConfig,
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
    render_cfg: RenderConfig = RenderConfig(),
    generator: Optional[torch.Generator] = None,
    loss_log: Optional[str | pathlib.Path] = None,
) -> EditResult:
    """Optimise the target renderer (or the background) against the distillation loss.

    Foreground mode updates only target parameters and distils both the target
    image and its Phong shading. Background mode updates only the background and
    uses a frozen copy of the original background for the source image.
    """
    generator = generator or torch.Generator().manual_seed(0)
    pool = [cameras[i] for i in cfg.cameras] if cfg.cameras else list(cameras)
    if not pool:
        raise ConfigError("edit needs at least one camera")
    size = min(cfg.patch_size, *(min(c.intrinsics.width, c.intrinsics.height) for c in pool))
    weights = weights_from_config(cfg)

    y_tgt = Conditioning.from_text(cfg.prompt, cfg.embedding_dim)
    y_src_base = Conditioning.from_text(cfg.source_prompt, cfg.embedding_dim)
    y_src = y_src_base
    if cfg.prompt_noise_sigma > 0 and not cfg.prompt_noise_per_step:
        y_src = perturb_prompt(y_src_base, cfg.prompt_noise_sigma, generator)

    source_fg: Foreground = SourceForeground(bundle)
    if cfg.mode == "foreground":
        edit_fg: Foreground = TargetForeground(bundle)
        source_bg: Background = FieldBackground(bundle)
        trainable = list(bundle.target_parameters())
        frozen = list(bundle.source_parameters()) + list(bundle.background_parameters())
    else:
        edit_fg = source_fg
        original = copy.deepcopy(bundle.background)
        for p in original.parameters():
            p.requires_grad_(False)
        source_bg = FieldBackground(original)
        trainable = list(bundle.background_parameters())
        frozen = list(bundle.source_parameters()) + list(bundle.target_parameters())
    edit_bg = FieldBackground(bundle)

    saved = [p.requires_grad for p in frozen + trainable]
    for p in frozen:
        p.requires_grad_(False)
    for p in trainable:
        p.requires_grad_(True)
    optimizer = torch.optim.Adam(
        _param_groups(trainable, bundle.hash_parameters(), cfg.learning_rate, cfg.hash_learning_rate)
    )
    want_phong = cfg.mode == "foreground" and cfg.lambda_pe > 0
    result = EditResult(bundle)
    logger.info("stage 2 (%s): %d iterations, prompt=%r, guidance=%g", cfg.mode, cfg.iterations, cfg.prompt, cfg.guidance_scale)

    with contextlib.ExitStack() as stack:
        stack.callback(_restore_requires_grad, frozen + trainable, saved)
        trace = stack.enter_context(LossLogger(loss_log)) if loss_log is not None else None
        for step in range(cfg.iterations):
            cam = pool[int(torch.randint(0, len(pool), (1,), generator=generator))]
            pix = _patch(cam, size, generator)
            rays_o, rays_d = generate_rays(cam, pix)
            with torch.no_grad():
                src = render_rays(source_fg, source_bg, rays_o, rays_d, render_cfg)
            out = render_rays(edit_fg, edit_bg, rays_o, rays_d, render_cfg, want_phong=want_phong)

            x0_src, x0_tgt = _as_chw(src.rgb, size), _as_chw(out.rgb, size)
            phong = _as_chw(out.phong, size) if want_phong else None
            if cfg.prompt_noise_sigma > 0 and cfg.prompt_noise_per_step:
                y_src = perturb_prompt(y_src_base, cfg.prompt_noise_sigma, generator)

            dstep = DistillStep.sample(
                x0_src, x0_tgt, y_src, y_tgt, schedule, generator,
                phong_tgt=phong,
                guidance_scale=cfg.guidance_scale,
                t_min_frac=cfg.t_min_frac,
                t_max_frac=cfg.t_max_frac,
            )
            res = distill(dstep, denoiser, schedule, weights)
            _check_finite(res.g_img, step, "image gradient")

            optimizer.zero_grad(set_to_none=True)
            surrogate_loss(x0_tgt, res.g_img, phong, res.g_phong).backward()
            for p in trainable:
                if p.grad is not None:
                    _check_finite(p.grad, step, "parameter gradient")
            optimizer.step()

            record = EditRecord(step, res.t, res.l_pds, res.l_pe, res.l_pepds, out.rgb.detach().mean(dim=0).tolist())
            result.records.append(record)
            if step % cfg.log_every == 0 or step == cfg.iterations - 1:
                logger.info("edit step=%d t=%d L_PDS=%.6g L_PE=%.6g L_PEPDS=%.6g", step, res.t, res.l_pds, res.l_pe, res.l_pepds)
                if trace is not None:
                    trace.log(step, res.t, res.l_pds, res.l_pe, res.l_pepds)
    return result


# -- pixel-grid oracle ------------------------------------------------------------


@dataclass
class PixelGridResult:
    image: torch.Tensor
    mean_rgb: List[List[float]] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)


def pixel_grid_edit(
    x_src: torch.Tensor,
    y_src: Conditioning,
    y_tgt: Conditioning,
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
    iterations: int,
    learning_rate: float = 1e-2,
    weights: LossWeights = LossWeights(lambda_pe=0.0),
    guidance_scale: float = 1.0,
    t_min_frac: float = 0.05,
    t_max_frac: float = 0.95,
    generator: Optional[torch.Generator] = None,
    optimizer: str = "adam",
) -> PixelGridResult:
    """The distillation loss applied directly to a free (C, H, W) image initialised at ``x_src``."""
    generator = generator or torch.Generator().manual_seed(0)
    x = x_src.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([x], lr=learning_rate) if optimizer == "adam" else torch.optim.SGD([x], lr=learning_rate)
    result = PixelGridResult(x)
    for _ in range(iterations):
        step = DistillStep.sample(
            x_src, x, y_src, y_tgt, schedule, generator,
            guidance_scale=guidance_scale, t_min_frac=t_min_frac, t_max_frac=t_max_frac,
        )
        res = distill(step, denoiser, schedule, weights)
        opt.zero_grad(set_to_none=True)
        x.grad = res.g_img.to(x.dtype)
        opt.step()
        result.mean_rgb.append(x.detach().mean(dim=(1, 2)).tolist())
        result.losses.append(res.l_pds)
    result.image = x.detach()
    return result


# -- evaluation -------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR for images in [0, 1]; +inf when identical."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return math.inf if mse == 0.0 else -10.0 * math.log10(mse)


@dataclass
class MetricsReport:
    psnr_vs_source: float
    frame_consistency: float
    mask_coverage: float
    frames: int
    per_frame_psnr: List[float] = field(default_factory=list)

    @property
    def identical_to_source(self) -> bool:
        return math.isinf(self.psnr_vs_source)

    def to_dict(self) -> Dict[str, object]:
        """JSON-safe form: an infinite PSNR is written as null with identical_to_source true."""

        def finite(v: float):
            return None if math.isinf(v) else v

        return {
            "psnr_vs_source": finite(self.psnr_vs_source),
            "identical_to_source": self.identical_to_source,
            "frame_consistency": self.frame_consistency,
            "mask_coverage": self.mask_coverage,
            "frames": self.frames,
            "per_frame_psnr": [finite(v) for v in self.per_frame_psnr],
        }


@torch.no_grad()
def render_frames(fg: Foreground, bg: Background, path: CameraPath, cfg: RenderConfig = RenderConfig()):
    return [render_camera(fg, bg, cam, cfg) for cam in path.cameras()]


@torch.no_grad()
def evaluate(bundle: FieldBundle, path: CameraPath, cfg: RenderConfig = RenderConfig()) -> MetricsReport:
    """Target-vs-source PSNR, consecutive-frame L2 and mean opacity along a camera path."""
    if len(path) == 0:
        raise ConfigError("evaluation path has no frames")
    bg = FieldBackground(bundle)
    src = [o.rgb.double().numpy() for o in render_frames(SourceForeground(bundle), bg, path, cfg)]
    tgt_out = render_frames(TargetForeground(bundle), bg, path, cfg)
    tgt = [o.rgb.double().numpy() for o in tgt_out]

    per_frame = [psnr(a, b) for a, b in zip(tgt, src)]
    overall = psnr(np.concatenate(tgt), np.concatenate(src))
    diffs = [float(np.linalg.norm(b - a, axis=-1).mean()) for a, b in zip(tgt[:-1], tgt[1:])]
    consistency = float(np.mean(diffs)) if diffs else 0.0
    coverage = float(np.mean([o.mask.double().mean().item() for o in tgt_out]))
    return MetricsReport(overall, consistency, coverage, len(path), per_frame)
