from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import pathlib
from typing import Any, Dict, List, Optional

import yaml

from .errors import ConfigError


DEFAULT_CONFIG_PATH = pathlib.Path(__file__).resolve().parents[1] / "config.yaml"


@dataclasses.dataclass
class ModelConfig:
    levels: int = 8
    features_per_level: int = 2
    log2_table_size: int = 14
    base_resolution: int = 16
    growth_factor: float = 1.5
    init_levels: int = 2  # progressive encoding starts here
    hidden_width: int = 64
    hidden_layers: int = 2
    feature_dim: int = 16
    color_hidden_width: int = 64
    init_radius: float = 0.5
    init_sharpness: float = 20.0

    def validate(self) -> None:
        if self.levels < 1 or self.features_per_level < 1:
            raise ConfigError("model.levels and model.features_per_level must be >= 1")
        if not 0 <= self.init_levels <= self.levels:
            raise ConfigError("model.init_levels must lie in [0, levels]")
        if self.growth_factor <= 1.0:
            raise ConfigError("model.growth_factor must be > 1")
        if self.log2_table_size < 2:
            raise ConfigError("model.log2_table_size must be >= 2")
        if self.init_sharpness <= 0:
            raise ConfigError("model.init_sharpness must be positive")


@dataclasses.dataclass
class RenderConfig:
    n_samples: int = 64
    n_background: int = 32
    chunk: int = 4096
    phong_gradient: str = "numerical"  # numerical | analytic
    ambient: float = 0.1
    diffuse: float = 0.7
    specular: float = 0.2
    shininess: float = 32.0

    def validate(self) -> None:
        if self.n_samples < 2 or self.n_background < 1:
            raise ConfigError("render.n_samples must be >= 2 and render.n_background >= 1")
        if self.phong_gradient not in ("numerical", "analytic"):
            raise ConfigError(f"render.phong_gradient: unknown mode {self.phong_gradient!r}")


@dataclasses.dataclass
class Stage1Config:
    iterations: int = 800
    rays_per_batch: int = 512
    learning_rate: float = 1e-3
    hash_learning_rate: float = 1e-3
    eikonal_weight: float = 0.1
    eikonal_points: int = 256
    log_every: int = 50

    def validate(self) -> None:
        if self.iterations < 0 or self.rays_per_batch < 1:
            raise ConfigError("stage1.iterations must be >= 0 and stage1.rays_per_batch >= 1")
        if self.eikonal_weight <= 0:
            raise ConfigError("stage1.eikonal_weight must be > 0")


@dataclasses.dataclass
class EditConfig:
    prompt: str = ""
    source_prompt: Optional[str] = None
    guidance_scale: float = 350.0
    lambda_pds: float = 1.0
    lambda_pe: float = 0.2
    weighting: str = "one_minus_alpha_bar"  # one_minus_alpha_bar | constant
    t_min_frac: float = 0.05
    t_max_frac: float = 0.95
    iterations: int = 300
    learning_rate: float = 1e-3
    hash_learning_rate: float = 1e-2
    patch_size: int = 64
    cameras: Optional[List[int]] = None
    prompt_noise_sigma: float = 0.0
    prompt_noise_per_step: bool = False
    embedding_dim: int = 16
    mode: str = "foreground"  # foreground | background
    log_every: int = 10

    def validate(self) -> None:
        if not 0.0 < self.t_min_frac < self.t_max_frac < 1.0:
            raise ConfigError("edit: need 0 < t_min_frac < t_max_frac < 1")
        if self.guidance_scale < 0:
            raise ConfigError("edit.guidance_scale must be >= 0")
        if self.lambda_pds < 0 or self.lambda_pe < 0:
            raise ConfigError("edit.lambda_pds and edit.lambda_pe must be >= 0")
        if self.prompt_noise_sigma < 0:
            raise ConfigError("edit.prompt_noise_sigma must be >= 0")
        if self.mode not in ("foreground", "background"):
            raise ConfigError(f"edit.mode: unknown mode {self.mode!r}")
        if self.weighting not in ("one_minus_alpha_bar", "constant"):
            raise ConfigError(f"edit.weighting: unknown weighting {self.weighting!r}")
        if self.iterations < 0 or self.patch_size < 1:
            raise ConfigError("edit.iterations must be >= 0 and edit.patch_size >= 1")


@dataclasses.dataclass
class DenoiserConfig:
    kind: str = "analytic"  # analytic | remote
    url: Optional[str] = None
    timeout: float = 30.0
    retries: int = 3
    mean: List[float] = dataclasses.field(default_factory=lambda: [0.5, 0.5, 0.5])
    variance: float = 0.0
    null_mean: Optional[List[float]] = None
    null_variance: Optional[float] = None
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self) -> None:
        if self.kind not in ("analytic", "remote"):
            raise ConfigError(f"denoiser.kind: unknown kind {self.kind!r}")
        if self.kind == "remote" and not self.url:
            raise ConfigError("denoiser.url is required for the remote denoiser")
        if self.variance < 0 or (self.null_variance is not None and self.null_variance < 0):
            raise ConfigError("denoiser variances must be >= 0")
        if self.retries < 0:
            raise ConfigError("denoiser.retries must be >= 0")


@dataclasses.dataclass
class DatasetConfig:
    path: Optional[str] = None
    format: str = "blender_transforms"  # blender_transforms | pose_txt
    holdout: List[int] = dataclasses.field(default_factory=list)

    def validate(self) -> None:
        if self.format not in ("blender_transforms", "pose_txt"):
            raise ConfigError(f"dataset.format: unknown format {self.format!r}")


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    threads: Optional[int] = None

    def validate(self) -> None:
        if self.threads is not None and self.threads < 1:
            raise ConfigError("run.threads must be >= 1")


@dataclasses.dataclass
class AppConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    render: RenderConfig = dataclasses.field(default_factory=RenderConfig)
    stage1: Stage1Config = dataclasses.field(default_factory=Stage1Config)
    edit: EditConfig = dataclasses.field(default_factory=EditConfig)
    denoiser: DenoiserConfig = dataclasses.field(default_factory=DenoiserConfig)
    dataset: DatasetConfig = dataclasses.field(default_factory=DatasetConfig)
    run: RunConfig = dataclasses.field(default_factory=RunConfig)

    def validate(self) -> "AppConfig":
        for f in dataclasses.fields(self):
            getattr(self, f.name).validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """sha256 of the canonical JSON form; the run output directory is excluded."""
        data = self.to_dict()
        data["run"] = {k: v for k, v in data["run"].items() if k != "out"}
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def load_config(path: Optional[pathlib.Path | str] = None) -> AppConfig:
    cfg_path = pathlib.Path(path) if path is not None else _resolve_config_path()
    if path is not None and not cfg_path.exists():
        raise ConfigError(f"config file not found: {cfg_path}")
    if cfg_path.exists():
        with open(cfg_path, "r", encoding="utf-8") as f:
            try:
                data: Dict[str, Any] = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{cfg_path}: invalid YAML: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{cfg_path}: top level must be a mapping")
        cfg = from_dict(data)
    else:
        cfg = AppConfig()

    threads = os.environ.get("NEUSED_THREADS")
    if threads:
        try:
            cfg.run.threads = int(threads)
        except ValueError as e:
            raise ConfigError(f"NEUSED_THREADS must be an integer, got {threads!r}") from e
    return cfg.validate()


def _resolve_config_path() -> pathlib.Path:
    """Return the config.yaml to use when none is given.

    Priority: ./config.yaml in the working directory, then the project root copy.
    """
    cwd_cfg = pathlib.Path.cwd() / "config.yaml"
    if cwd_cfg.exists():
        return cwd_cfg
    return DEFAULT_CONFIG_PATH


def from_dict(d: Dict[str, Any]) -> AppConfig:
    sections = {f.name: f for f in dataclasses.fields(AppConfig)}
    unknown = sorted(set(d) - set(sections))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")

    kwargs: Dict[str, Any] = {}
    for name, f in sections.items():
        section_cls = f.default_factory().__class__  # type: ignore[misc]
        kwargs[name] = _section(name, section_cls, d.get(name) or {})
    return AppConfig(**kwargs)


def _section(name: str, cls: type, values: Any) -> Any:
    if not isinstance(values, dict):
        raise ConfigError(f"section [{name}] must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    defaults = dataclasses.asdict(cls())
    try:
        return cls(**{**defaults, **values})
    except TypeError as e:
        raise ConfigError(f"section [{name}]: {e}") from e
