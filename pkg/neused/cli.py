from __future__ import annotations

import argparse
import json
import logging
import pathlib
import sys
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from rich.console import Console
from rich.table import Table

from .cameras import CameraPath, spherical_poses
from .checkpoint import load_checkpoint, save_checkpoint
from .config import AppConfig, load_config
from .dataset import CalibratedDataset, load_dataset, orbit_cameras
from .denoisers import build_denoiser, schedule_from_config
from .errors import ConfigError, NeusedError
from .fields import FieldBundle, build_bundle
from .images import contact_sheet, write_png
from .logging_utils import debug_flags, setup_logging
from .manifest import RunManifest
from .mesh import MIN_RESOLUTION, export_mesh, extract_mesh
from .rendering import FieldBackground, SourceForeground, TargetForeground, render_camera, to_image
from .training import evaluate, stage1_fit, stage2_edit


console = Console()
err_console = Console(stderr=True)
logger = logging.getLogger(__name__)

SOURCE_CKPT = "source.ckpt"
EDIT_CKPT = "edit.ckpt"
LOSS_LOG = "loss_log.jsonl"
LAYERS = ("source", "target", "background", "mask", "normal", "phong")
DEFAULT_VIEW = (64, 64, 0.7)


def build_arg_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Path to config.yaml")
    common.add_argument("--out", type=str, default=None, help="Output directory (overrides run.out)")
    common.add_argument("--seed", type=int, default=None, help="Random seed (overrides run.seed)")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    p = argparse.ArgumentParser(prog="neused", description="Text-guided neural implicit surface editing")
    sub = p.add_subparsers(dest="command", required=True)

    rec = sub.add_parser("reconstruct", parents=[common], help="Stage 1: learn the source scene")
    rec.add_argument("--dataset", type=str, default=None, help="Dataset directory")
    rec.add_argument("--format", choices=["blender_transforms", "pose_txt"], default=None)
    rec.add_argument("--iterations", type=int, default=None)

    ed = sub.add_parser("edit", parents=[common], help="Stage 2: distil an edit into the target renderer")
    ed.add_argument("--checkpoint", type=str, default=None, help="Stage-1 checkpoint (default <out>/source.ckpt)")
    ed.add_argument("--prompt", type=str, default=None)
    ed.add_argument("--source-prompt", type=str, default=None)
    ed.add_argument("--guidance", type=float, default=None, help="Classifier-free guidance scale")
    ed.add_argument("--denoiser", type=str, default=None, help="analytic | remote:URL")
    ed.add_argument("--iterations", type=int, default=None)
    ed.add_argument("--mode", choices=["foreground", "background"], default=None)

    def with_checkpoint(sp: argparse.ArgumentParser) -> argparse.ArgumentParser:
        sp.add_argument("--checkpoint", type=str, default=None, help="Checkpoint (default: latest in <out>)")
        return sp

    def with_path(sp: argparse.ArgumentParser) -> argparse.ArgumentParser:
        sp.add_argument("--path", type=str, default="spherical", help="'spherical' or a camera path JSON file")
        sp.add_argument("--frames", type=int, default=8)
        return sp

    with_path(with_checkpoint(sub.add_parser("render", parents=[common], help="Render all layers along a path")))

    me = with_checkpoint(sub.add_parser("mesh", parents=[common], help="Extract a coloured mesh"))
    me.add_argument("--which", choices=["source", "target"], default="target")
    me.add_argument("--res", type=int, default=128)
    me.add_argument("--format", choices=["obj", "ply"], default="obj")

    ev = with_path(with_checkpoint(sub.add_parser("eval", parents=[common], help="Proxy metrics along a path")))
    ev.add_argument("--report", type=str, default=None, help="Report path (default <out>/metrics.json)")
    return p


def parse_denoiser(spec: str) -> Tuple[str, Optional[str]]:
    if spec == "analytic":
        return "analytic", None
    if spec.startswith("remote:") and len(spec) > len("remote:"):
        return "remote", spec[len("remote:") :]
    raise ConfigError(f"--denoiser must be 'analytic' or 'remote:URL', got {spec!r}")


def merge_overrides(cfg: AppConfig, args: argparse.Namespace) -> AppConfig:
    if args.out is not None:
        cfg.run.out = args.out
    if args.seed is not None:
        cfg.run.seed = args.seed

    if args.command == "reconstruct":
        if args.dataset is not None:
            cfg.dataset.path = args.dataset
        if args.format is not None:
            cfg.dataset.format = args.format
        if args.iterations is not None:
            cfg.stage1.iterations = args.iterations

    if args.command == "edit":
        ec = cfg.edit
        if args.prompt is not None:
            ec.prompt = args.prompt
        if args.source_prompt is not None:
            ec.source_prompt = args.source_prompt
        if args.guidance is not None:
            ec.guidance_scale = args.guidance
        if args.iterations is not None:
            ec.iterations = args.iterations
        if args.mode is not None:
            ec.mode = args.mode
        if args.denoiser is not None:
            cfg.denoiser.kind, url = parse_denoiser(args.denoiser)
            if url is not None:
                cfg.denoiser.url = url

    return cfg.validate()


# -- helpers ----------------------------------------------------------------------


def _out_dir(cfg: AppConfig) -> pathlib.Path:
    out = pathlib.Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _latest_checkpoint(cfg: AppConfig, explicit: Optional[str]) -> pathlib.Path:
    if explicit:
        return pathlib.Path(explicit)
    out = pathlib.Path(cfg.run.out)
    return out / EDIT_CKPT if (out / EDIT_CKPT).exists() else out / SOURCE_CKPT


def _load_dataset(cfg: AppConfig) -> CalibratedDataset:
    if not cfg.dataset.path:
        raise ConfigError("no dataset given; set dataset.path or pass --dataset")
    return load_dataset(cfg.dataset.path, cfg.dataset.format)


def _path_for(cfg: AppConfig, spec: str, frames: int) -> CameraPath:
    if spec != "spherical":
        return CameraPath.load(spec)
    if frames < 1:
        raise ConfigError("--frames must be >= 1")
    if cfg.dataset.path and pathlib.Path(cfg.dataset.path).is_dir():
        cams = load_dataset(cfg.dataset.path, cfg.dataset.format).cameras
    else:
        cams = orbit_cameras(16, DEFAULT_VIEW[0], fov_x=DEFAULT_VIEW[2])
    positions = np.stack([c.position for c in cams])
    return spherical_poses(positions, frames, cams[0].intrinsics)


def print_parameter_report(bundle: FieldBundle) -> None:
    report = bundle.parameter_report()
    table = Table(title="Parameters")
    table.add_column("Renderer")
    table.add_column("Count", justify="right")
    for name in ("background", "source", "identity", "target"):
        table.add_row(name, f"{report[name]:,}")
    console.print(table)


def _seeded(cfg: AppConfig) -> torch.Generator:
    if cfg.run.threads:
        torch.set_num_threads(cfg.run.threads)
    return torch.Generator().manual_seed(cfg.run.seed)


# -- commands ---------------------------------------------------------------------


def cmd_reconstruct(cfg: AppConfig, args: argparse.Namespace) -> int:
    out = _out_dir(cfg)
    manifest = RunManifest.begin(cfg, "source")
    manifest.write(out)
    dataset = _load_dataset(cfg)
    if cfg.dataset.holdout:
        train, held = dataset.split(cfg.dataset.holdout)
    else:
        train, held = dataset, CalibratedDataset(dataset.images[-1:], dataset.cameras[-1:])

    generator = _seeded(cfg)
    bundle = build_bundle(cfg.model, cfg.run.seed)
    print_parameter_report(bundle)
    console.rule("Stage 1: identity learning")
    stage1_fit(bundle, train, cfg.stage1, cfg.render, generator)

    ckpt = save_checkpoint(bundle, out / SOURCE_CKPT, "source", {"config_hash": cfg.digest()})
    manifest.add_output("checkpoint", ckpt)

    rows = []
    with torch.no_grad():
        for img, cam in zip(held.images, held.cameras):
            r = render_camera(SourceForeground(bundle), FieldBackground(bundle), cam, cfg.render)
            rows.append([img, to_image(r.rgb, cam.intrinsics.height, cam.intrinsics.width)])
    sheet = out / "contact_sheet.png"
    write_png(sheet, contact_sheet(rows))
    manifest.add_output("contact_sheet", sheet)
    manifest.write(out, "done")
    console.print(f"[green]Checkpoint written to[/green] [bold]{ckpt}[/bold]")
    return 0


def cmd_edit(cfg: AppConfig, args: argparse.Namespace) -> int:
    out = _out_dir(cfg)
    manifest = RunManifest.begin(cfg, "edit")
    manifest.write(out)
    bundle, header = load_checkpoint(pathlib.Path(args.checkpoint) if args.checkpoint else out / SOURCE_CKPT)
    if header["stage"] == "init":
        raise ConfigError("edit needs a checkpoint from a completed reconstruction")

    if cfg.dataset.path and pathlib.Path(cfg.dataset.path).is_dir():
        cameras = _load_dataset(cfg).cameras
    else:
        cameras = orbit_cameras(16, DEFAULT_VIEW[0], fov_x=DEFAULT_VIEW[2])
    schedule = schedule_from_config(cfg.denoiser)
    denoiser = build_denoiser(cfg.denoiser, schedule)
    print_parameter_report(bundle)
    console.rule(f"Stage 2: edit ({cfg.edit.mode}) prompt={cfg.edit.prompt!r} guidance={cfg.edit.guidance_scale:g}")

    try:
        stage2_edit(bundle, cameras, cfg.edit, denoiser, schedule, cfg.render, _seeded(cfg), out / LOSS_LOG)
    finally:
        close = getattr(denoiser, "close", None)
        if close is not None:
            close()

    ckpt = save_checkpoint(bundle, out / EDIT_CKPT, "edit", {"config_hash": cfg.digest(), "prompt": cfg.edit.prompt})
    manifest.add_output("checkpoint", ckpt)
    manifest.add_output("loss_log", out / LOSS_LOG)
    manifest.write(out, "done")
    console.print(f"[green]Edited checkpoint written to[/green] [bold]{ckpt}[/bold]")
    return 0


def render_layers(bundle: FieldBundle, cam, cfg: AppConfig) -> Dict[str, np.ndarray]:
    K = cam.intrinsics
    bg = FieldBackground(bundle)
    with torch.no_grad():
        src = render_camera(SourceForeground(bundle), bg, cam, cfg.render)
        tgt = render_camera(TargetForeground(bundle), bg, cam, cfg.render, want_phong=True)

    def img(t: torch.Tensor) -> np.ndarray:
        return to_image(t, K.height, K.width)

    return {
        "source": img(src.rgb),
        "target": img(tgt.rgb),
        "background": img(tgt.rgb_bg),
        "mask": img(tgt.mask[:, None]),
        "normal": img(0.5 * (tgt.normal + 1.0)),
        "phong": img(tgt.phong),
    }


def cmd_render(cfg: AppConfig, args: argparse.Namespace) -> int:
    out = _out_dir(cfg)
    bundle, header = load_checkpoint(_latest_checkpoint(cfg, args.checkpoint))
    path = _path_for(cfg, args.path, args.frames)
    frames_dir = out / "frames"
    manifest = RunManifest.begin(cfg, "render")
    manifest.write(out)
    for i, cam in enumerate(path.cameras()):
        for name, img in render_layers(bundle, cam, cfg).items():
            write_png(frames_dir / f"frame_{i:03d}_{name}.png", img)
        logger.info("rendered frame %d/%d", i + 1, len(path))
    manifest.add_output("frames", frames_dir)
    manifest.write(out, "done")
    console.print(f"[green]{len(path)} frame(s) x {len(LAYERS)} layers written to[/green] [bold]{frames_dir}[/bold]")
    return 0


def cmd_mesh(cfg: AppConfig, args: argparse.Namespace) -> int:
    if args.res < MIN_RESOLUTION:
        raise ConfigError(f"--res must be >= {MIN_RESOLUTION}, got {args.res}")
    out = _out_dir(cfg)
    bundle, _ = load_checkpoint(_latest_checkpoint(cfg, args.checkpoint))
    manifest = RunManifest.begin(cfg, "mesh")
    manifest.write(out)
    mesh = extract_mesh(bundle, args.which, args.res)
    path = export_mesh(mesh, out / f"mesh_{args.which}.{args.format}")
    manifest.add_output(f"mesh_{args.which}", path)
    manifest.write(out, "done")
    console.print(f"[green]{len(mesh.vertices)} vertices, {len(mesh.faces)} faces ->[/green] [bold]{path}[/bold]")
    return 0


def cmd_eval(cfg: AppConfig, args: argparse.Namespace) -> int:
    out = _out_dir(cfg)
    bundle, _ = load_checkpoint(_latest_checkpoint(cfg, args.checkpoint))
    manifest = RunManifest.begin(cfg, "eval")
    manifest.write(out)
    report = evaluate(bundle, _path_for(cfg, args.path, args.frames), cfg.render)
    path = pathlib.Path(args.report) if args.report else out / "metrics.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    manifest.add_output("metrics", path)
    manifest.write(out, "done")

    table = Table(title="Metrics")
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    psnr = "identical" if report.identical_to_source else f"{report.psnr_vs_source:.3f} dB"
    table.add_row("PSNR vs source", psnr)
    table.add_row("frame consistency", f"{report.frame_consistency:.6f}")
    table.add_row("mask coverage", f"{report.mask_coverage:.4f}")
    console.print(table)
    return 0


COMMANDS: Dict[str, Callable[[AppConfig, argparse.Namespace], int]] = {
    "reconstruct": cmd_reconstruct,
    "edit": cmd_edit,
    "render": cmd_render,
    "mesh": cmd_mesh,
    "eval": cmd_eval,
}


def report_error(e: BaseException, code: int) -> None:
    console.print(f"[red]Error: {e}[/red]")
    detail = str(e).replace("\n", " ")
    err_console.print(f"error kind={type(e).__name__} code={code} detail={detail}", markup=False, highlight=False)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_arg_parser().parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO, err_console)
    debug_flags.reset()
    try:
        cfg = merge_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except NeusedError as e:
        report_error(e, e.exit_code)
        return e.exit_code
    except KeyboardInterrupt:
        console.print("\n[yellow]Stopped by user.[/yellow]")
        return 1
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        report_error(e, 1)
        return 1


if __name__ == "__main__":
    sys.exit(main())
