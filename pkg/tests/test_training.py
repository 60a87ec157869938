from __future__ import annotations

import copy
import math

import numpy as np
import pytest
import torch

from neused import scenes
from neused.cameras import Intrinsics, orbit_positions, spherical_poses
from neused.config import EditConfig, ModelConfig, RenderConfig, Stage1Config
from neused.dataset import CalibratedDataset, orbit_cameras, render_oracle_dataset, sphere_fixture
from neused.denoisers import AnalyticGaussianDenoiser, GaussianMixtureDenoiser
from neused.diffusion import Conditioning, GuidedDenoiser
from neused.distillation import DistillStep, LossWeights, distill
from neused.errors import ConfigError, DivergenceError
from neused.fields import build_bundle
from neused.logging_utils import read_loss_log
from neused.rendering import FieldBackground, SourceForeground, TargetForeground, render_camera, to_image
from neused.training import (
    MetricsReport,
    eikonal_loss,
    eikonal_points,
    evaluate,
    perturb_prompt,
    pixel_grid_edit,
    psnr,
    stage1_fit,
    stage2_edit,
    weights_from_config,
)


RED = [[[1.0]], [[0.0]], [[0.0]]]
GRAY = [[[0.5]], [[0.5]], [[0.5]]]


def _snapshot(params):
    return [p.detach().clone() for p in params]


def _unchanged(before, params):
    return all(torch.equal(a, b) for a, b in zip(before, params))


@pytest.fixture
def red_denoiser(schedule):
    return AnalyticGaussianDenoiser(RED, 0.0, schedule, null_mean=GRAY)


@pytest.fixture
def small_views():
    return orbit_cameras(3, 8, fov_x=0.5)


def _edit_cfg(**kw):
    base = dict(prompt="a red object", guidance_scale=1.0, iterations=3, patch_size=8, log_every=1)
    base.update(kw)
    return EditConfig(**base)


# -- stage 1 ------------------------------------------------------------------------


def test_eikonal_loss_on_closed_form_fields():
    g = torch.Generator().manual_seed(0)
    pts = torch.rand(256, 3, generator=g, dtype=torch.float64) + 0.1
    assert float(eikonal_loss(scenes.sphere(0.5), pts)) < 1e-10
    assert float(eikonal_loss(scenes.plane(scale=2.0), pts)) == pytest.approx(1.0)


def test_eikonal_points_add_jittered_surface_samples(generator):
    surface = torch.zeros(5, 3)
    pts = eikonal_points(10, generator, surface)
    assert pts.shape == (15, 3)
    assert float(pts.abs().max()) <= 1.0
    assert float(pts[10:].abs().max()) < 0.2


def test_minimising_eikonal_alone_reduces_it(tiny_bundle, generator):
    params = list(tiny_bundle.source_parameters())
    opt = torch.optim.Adam(params, lr=1e-2)
    losses = []
    for _ in range(200):
        loss = eikonal_loss(tiny_bundle.sdf_source, eikonal_points(128, generator))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def _tiny_dataset(fast_render_cfg, n=3, size=8):
    return render_oracle_dataset(scenes.sphere(0.5), orbit_cameras(n, size, fov_x=0.5), cfg=fast_render_cfg)


def test_stage1_zero_iterations_leaves_bundle_unchanged(tiny_bundle, fast_render_cfg):
    before = {k: v.clone() for k, v in tiny_bundle.state_dict().items()}
    stage1_fit(tiny_bundle, _tiny_dataset(fast_render_cfg), Stage1Config(iterations=0), fast_render_cfg)
    after = tiny_bundle.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_stage1_freezes_identity_and_resets_target(tiny_bundle, fast_render_cfg):
    cfg = Stage1Config(iterations=4, rays_per_batch=32, eikonal_points=16, log_every=1)
    result = stage1_fit(tiny_bundle, _tiny_dataset(fast_render_cfg), cfg, fast_render_cfg, torch.Generator().manual_seed(0))
    assert len(result.losses) == 4 and all(math.isfinite(v) for v in result.losses)
    assert not any(p.requires_grad for p in tiny_bundle.source_parameters())
    assert not any(p.requires_grad for p in tiny_bundle.background_parameters())
    assert tiny_bundle.source_encoding.active_levels == tiny_bundle.source_encoding.levels
    x = torch.rand(16, 3) - 0.5
    with torch.no_grad():
        assert torch.equal(tiny_bundle.sdf_source(x)[0], tiny_bundle.sdf_target(x)[0])


def test_stage1_aborts_on_nan(tiny_bundle, fast_render_cfg):
    ds = _tiny_dataset(fast_render_cfg)
    bad = CalibratedDataset([np.full_like(img, np.nan) for img in ds.images], ds.cameras)
    with pytest.raises(DivergenceError):
        stage1_fit(tiny_bundle, bad, Stage1Config(iterations=2, rays_per_batch=8, eikonal_points=8), fast_render_cfg)


def _zero_crossing(sdf, direction, start=1.0, n=2000):
    ts = torch.linspace(start, 0.0, n, dtype=torch.float32)
    with torch.no_grad():
        vals = sdf(ts[:, None] * direction[None])
    inside = torch.nonzero(vals < 0)
    if len(inside) == 0:
        return None
    i = int(inside[0])
    return float(ts[i])


@pytest.mark.slow
def test_stage1_reconstructs_sphere_fixture():
    render_cfg = RenderConfig(n_samples=64, n_background=16)
    ds = sphere_fixture(16, 64, 0.5, render_cfg)
    train, held = ds.split([0])
    bundle = build_bundle(ModelConfig(), seed=0)
    cfg = Stage1Config(iterations=3000, rays_per_batch=1024, eikonal_points=512, log_every=500)
    stage1_fit(bundle, train, cfg, render_cfg, torch.Generator().manual_seed(0))

    cam = held.cameras[0]
    with torch.no_grad():
        out = render_camera(SourceForeground(bundle), FieldBackground(bundle), cam, render_cfg)
    img = to_image(out.rgb, cam.intrinsics.height, cam.intrinsics.width)
    assert psnr(img, held.images[0]) >= 30.0

    g = torch.Generator().manual_seed(1)
    dirs = torch.nn.functional.normalize(torch.randn(100, 3, generator=g), dim=-1)
    errors = [_zero_crossing(lambda x: bundle.sdf_source(x)[0], d) for d in dirs]
    assert all(e is not None for e in errors)
    assert max(abs(e - 0.5) for e in errors) < 0.05


# -- stage 2 ------------------------------------------------------------------------


def test_perturb_prompt():
    g = torch.Generator().manual_seed(0)
    base = Conditioning.from_text("statue", 10_000)
    assert torch.equal(perturb_prompt(base, 0.0, g).embedding, base.embedding)
    a = perturb_prompt(base, 0.1, torch.Generator().manual_seed(3))
    b = perturb_prompt(base, 0.1, torch.Generator().manual_seed(3))
    assert torch.equal(a.embedding, b.embedding)
    std = float((a.embedding - base.embedding).std())
    assert abs(std - 0.1) < 0.005
    null = perturb_prompt(Conditioning.null(8), 0.1, g)
    assert not null.null_flag and float(null.embedding.abs().sum()) > 0
    assert 0.0 < null.strength < 1.0
    assert perturb_prompt(Conditioning.null(8), 0.0, g).null_flag
    with pytest.raises(ConfigError):
        perturb_prompt(base, -1.0, g)


def test_perturbed_null_prompt_reaches_the_denoiser(schedule):
    den = GuidedDenoiser(AnalyticGaussianDenoiser([1.0], 0.0, schedule, null_mean=[0.0]), 7.5)
    x = torch.full((1,), 0.3, dtype=torch.float64)
    null = Conditioning.null(4)
    plain = den(x, 200, null)
    perturbed = perturb_prompt(null, 0.2, torch.Generator().manual_seed(5))
    moved = den(x, 200, perturbed)
    assert not torch.allclose(moved, plain)
    # a partial prompt sits between the unconditional and fully conditional predictions
    full = den.base(x, 200, Conditioning.from_text("gold", 4))
    lo, hi = sorted((float(plain), float(full)))
    assert lo < float(den.base(x, 200, perturbed)) < hi


def test_weights_from_config():
    w = weights_from_config(EditConfig(lambda_pds=2.0, lambda_pe=0.0, weighting="constant"))
    assert w == LossWeights(2.0, 0.0, "constant")


def test_foreground_edit_touches_only_target(tiny_bundle, small_views, red_denoiser, schedule, fast_render_cfg):
    tiny_bundle.freeze_identity()
    identity = list(tiny_bundle.source_parameters()) + list(tiny_bundle.background_parameters())
    before_identity, before_target = _snapshot(identity), _snapshot(tiny_bundle.target_parameters())
    cam = small_views[0]
    with torch.no_grad():
        ref = render_camera(TargetForeground(tiny_bundle), FieldBackground(tiny_bundle), cam, fast_render_cfg)
    result = stage2_edit(tiny_bundle, small_views, _edit_cfg(), red_denoiser, schedule, fast_render_cfg)
    assert len(result.records) == 3
    assert _unchanged(before_identity, identity)
    assert not _unchanged(before_target, tiny_bundle.target_parameters())
    with torch.no_grad():
        after = render_camera(TargetForeground(tiny_bundle), FieldBackground(tiny_bundle), cam, fast_render_cfg)
    assert torch.equal(ref.rgb_bg, after.rgb_bg) and torch.equal(ref.mask_bg, after.mask_bg)
    # requires_grad flags restored
    assert not any(p.requires_grad for p in identity)
    assert all(p.requires_grad for p in tiny_bundle.target_parameters())


def test_background_edit_leaves_foreground_bitwise_unchanged(tiny_bundle, small_views, red_denoiser, schedule, fast_render_cfg):
    fg_params = list(tiny_bundle.source_parameters()) + list(tiny_bundle.target_parameters())
    before_fg, before_bg = _snapshot(fg_params), _snapshot(tiny_bundle.background_parameters())
    cam = small_views[0]
    with torch.no_grad():
        ref = render_camera(TargetForeground(tiny_bundle), FieldBackground(tiny_bundle), cam, fast_render_cfg)
    stage2_edit(tiny_bundle, small_views, _edit_cfg(mode="background"), red_denoiser, schedule, fast_render_cfg)
    assert _unchanged(before_fg, fg_params)
    assert not _unchanged(before_bg, tiny_bundle.background_parameters())
    with torch.no_grad():
        after = render_camera(TargetForeground(tiny_bundle), FieldBackground(tiny_bundle), cam, fast_render_cfg)
    assert torch.equal(ref.rgb_fg, after.rgb_fg) and torch.equal(ref.mask, after.mask)


def test_edit_is_deterministic(tiny_bundle, small_views, red_denoiser, schedule, fast_render_cfg):
    cfg = _edit_cfg(prompt_noise_sigma=0.05, prompt_noise_per_step=True)
    a, b = copy.deepcopy(tiny_bundle), copy.deepcopy(tiny_bundle)
    ra = stage2_edit(a, small_views, cfg, red_denoiser, schedule, fast_render_cfg, torch.Generator().manual_seed(7))
    rb = stage2_edit(b, small_views, cfg, red_denoiser, schedule, fast_render_cfg, torch.Generator().manual_seed(7))
    assert [r.t for r in ra.records] == [r.t for r in rb.records]
    assert [r.l_pepds for r in ra.records] == [r.l_pepds for r in rb.records]
    for pa, pb in zip(a.target_parameters(), b.target_parameters()):
        assert torch.equal(pa, pb)


def test_edit_writes_loss_log(tiny_bundle, small_views, red_denoiser, schedule, fast_render_cfg, tmp_path):
    log = tmp_path / "loss_log.jsonl"
    stage2_edit(tiny_bundle, small_views, _edit_cfg(iterations=4, log_every=2), red_denoiser, schedule, fast_render_cfg, loss_log=log)
    rows = read_loss_log(log)
    assert [r["step"] for r in rows] == [0, 2, 3]
    assert set(rows[0]) == {"step", "t", "L_PDS", "L_PE", "L_PEPDS"}
    assert all(r["L_PE"] >= 0 for r in rows)


def test_edit_camera_subset_validation(tiny_bundle, red_denoiser, schedule, fast_render_cfg):
    with pytest.raises(ConfigError):
        stage2_edit(tiny_bundle, [], _edit_cfg(), red_denoiser, schedule, fast_render_cfg)


def test_pixel_grid_oracle_converges_to_red(red_denoiser, schedule):
    x_src = torch.full((3, 4, 4), 0.5, dtype=torch.float64)
    res = pixel_grid_edit(
        x_src, Conditioning.null(8), Conditioning.from_text("red", 8), red_denoiser, schedule, iterations=300,
        generator=torch.Generator().manual_seed(0),
    )
    r, g, b = res.mean_rgb[-1]
    assert abs(r - 1.0) < 0.05 and abs(g) < 0.05 and abs(b) < 0.05
    reds = [m[0] for m in res.mean_rgb]
    assert all(x > 0.5 for x in reds)


def test_pixel_grid_oracle_with_same_prompt_is_a_fixed_point(red_denoiser, schedule):
    x_src = torch.rand(3, 4, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    y = Conditioning.from_text("red", 8)
    res = pixel_grid_edit(x_src, y, y, red_denoiser, schedule, iterations=20)
    assert torch.equal(res.image, x_src)
    assert all(v == 0.0 for v in res.losses)


@pytest.mark.slow
def test_edit_tracks_pixel_grid_oracle(red_denoiser, schedule, tiny_model_cfg):
    render_cfg = RenderConfig(n_samples=32, n_background=8, chunk=4096)
    views = orbit_cameras(4, 16, fov_x=0.35)
    bundle = build_bundle(tiny_model_cfg, seed=0)
    bundle.freeze_identity()
    cfg = _edit_cfg(iterations=200, patch_size=16, log_every=20, lambda_pe=0.0, hash_learning_rate=1e-2, learning_rate=1e-2)
    result = stage2_edit(bundle, views, cfg, red_denoiser, schedule, render_cfg, torch.Generator().manual_seed(0))

    with torch.no_grad():
        src = render_camera(SourceForeground(bundle), FieldBackground(bundle), views[0], render_cfg)
    x_src = src.rgb.reshape(16, 16, 3).permute(2, 0, 1).double()
    oracle = pixel_grid_edit(
        x_src, Conditioning.null(16), Conditioning.from_text(cfg.prompt, 16), red_denoiser, schedule, iterations=200,
        learning_rate=1e-2, generator=torch.Generator().manual_seed(0),
    )
    start_edit, start_oracle = result.records[0].mean_rgb, oracle.mean_rgb[0]
    for step in range(20, 200, 20):
        edit_delta = np.sign(np.subtract(result.records[step].mean_rgb, start_edit))
        oracle_delta = np.sign(np.subtract(oracle.mean_rgb[step], start_oracle))
        assert edit_delta[0] == oracle_delta[0] == 1.0, step
    end = result.records[-1].mean_rgb
    assert end[0] - start_edit[0] > 0.1
    assert end[0] > end[1] and end[0] > end[2]


@pytest.mark.slow
def test_edit_fixed_point_preserves_identity(schedule, tiny_model_cfg):
    render_cfg = RenderConfig(n_samples=32, n_background=8)
    views = orbit_cameras(1, 16, fov_x=0.5)
    bundle = build_bundle(tiny_model_cfg, seed=0)
    bundle.freeze_identity()
    with torch.no_grad():
        src = render_camera(SourceForeground(bundle), FieldBackground(bundle), views[0], render_cfg)
    mean = src.rgb.reshape(16, 16, 3).permute(2, 0, 1).double()
    denoiser = AnalyticGaussianDenoiser(mean, 0.0, schedule)
    stage2_edit(bundle, views, _edit_cfg(iterations=100, patch_size=16), denoiser, schedule, render_cfg)
    with torch.no_grad():
        tgt = render_camera(TargetForeground(bundle), FieldBackground(bundle), views[0], render_cfg)
    assert psnr(tgt.rgb.numpy(), src.rgb.numpy()) >= 35.0


def _phong_loss(bundle, cam, denoiser, schedule, render_cfg, y_tgt):
    with torch.no_grad():
        src = render_camera(SourceForeground(bundle), FieldBackground(bundle), cam, render_cfg)
    out = render_camera(TargetForeground(bundle), FieldBackground(bundle), cam, render_cfg, want_phong=True)
    size = cam.intrinsics.width
    chw = lambda v: v.reshape(size, size, 3).permute(2, 0, 1)  # noqa: E731
    losses = []
    for seed in range(8):
        step = DistillStep.sample(
            chw(src.rgb), chw(out.rgb), Conditioning.null(y_tgt.dim), y_tgt, schedule,
            torch.Generator().manual_seed(seed), phong_tgt=chw(out.phong),
        )
        losses.append(distill(step, denoiser, schedule).l_pe)
    return float(np.mean(losses))


@pytest.mark.slow
def test_phong_term_lowers_phong_loss(schedule, tiny_model_cfg):
    render_cfg = RenderConfig(n_samples=32, n_background=8)
    views = orbit_cameras(1, 16, fov_x=0.4)
    base = build_bundle(tiny_model_cfg, seed=0)
    base.freeze_identity()
    with torch.no_grad():
        shaded = render_camera(
            SourceForeground(base), FieldBackground(base), views[0], render_cfg, want_phong=True
        ).phong.reshape(16, 16, 3).permute(2, 0, 1).double()
    denoiser = AnalyticGaussianDenoiser(shaded, 0.0, schedule)
    y_tgt = Conditioning.from_text("a shaded sphere", 16)

    final = {}
    for lam in (0.0, 0.2):
        bundle = copy.deepcopy(base)
        cfg = _edit_cfg(prompt="a shaded sphere", iterations=100, patch_size=16, lambda_pe=lam, lambda_pds=1.0)
        stage2_edit(bundle, views, cfg, denoiser, schedule, render_cfg, torch.Generator().manual_seed(0))
        final[lam] = _phong_loss(bundle, views[0], denoiser, schedule, render_cfg, y_tgt)
    assert final[0.2] < final[0.0]


@pytest.mark.slow
def test_guidance_scale_increases_conditional_pull(schedule):
    mixture = GaussianMixtureDenoiser(
        [[[[-1.0]]] * 3, [[[1.0]]] * 3], [0.01, 0.01], schedule, select=lambda c: None if c.null_flag else 1
    )
    x_src = torch.zeros(3, 2, 2, dtype=torch.float64)
    y_tgt = Conditioning.from_text("the bright mode", 8)
    distances = []
    for s in (1.0, 350.0):
        res = pixel_grid_edit(
            x_src, Conditioning.null(8), y_tgt, mixture, schedule, iterations=300, guidance_scale=s,
            generator=torch.Generator().manual_seed(0),
        )
        distances.append(float(res.image.mean()))
    assert distances[1] > distances[0] > 0.0


# -- evaluation ---------------------------------------------------------------------


def test_psnr():
    a = np.zeros((4, 4, 3))
    assert math.isinf(psnr(a, a))
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_metrics_report_serialises_infinite_psnr():
    report = MetricsReport(math.inf, 0.0, 0.5, 2, [math.inf, 31.0])
    d = report.to_dict()
    assert d["psnr_vs_source"] is None and d["identical_to_source"] is True
    assert d["per_frame_psnr"] == [None, 31.0]


def test_evaluate_fresh_bundle_is_identical_to_source(tiny_bundle, fast_render_cfg):
    path = spherical_poses(orbit_positions(6), 3, Intrinsics.from_fov(6, 6, 0.7))
    report = evaluate(tiny_bundle, path, fast_render_cfg)
    assert report.identical_to_source and report.frames == 3
    assert 0.0 <= report.mask_coverage <= 1.0


def test_static_path_has_zero_frame_difference(tiny_bundle, fast_render_cfg):
    cams = np.tile([[0.0, -3.0, 0.5]], (3, 1))
    path = spherical_poses(cams, 3, Intrinsics.from_fov(6, 6, 0.7))
    assert evaluate(tiny_bundle, path, fast_render_cfg).frame_consistency == 0.0


def test_smooth_path_frame_consistency_regression(tiny_bundle, fast_render_cfg):
    path = spherical_poses(orbit_positions(12), 8, Intrinsics.from_fov(12, 12, 0.7))
    assert evaluate(tiny_bundle, path, fast_render_cfg).frame_consistency < 0.25


def test_evaluate_rejects_empty_path(tiny_bundle):
    path = spherical_poses(orbit_positions(3), 1, Intrinsics.from_fov(4, 4, 0.7))
    path.poses = path.poses[:0]
    with pytest.raises(ConfigError):
        evaluate(tiny_bundle, path)
