"""Run manifest written next to every command's outputs."""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
import pathlib
import subprocess
from dataclasses import asdict, dataclass, field
from typing import Dict

from .config import AppConfig


MANIFEST_NAME = "manifest.json"


def git_describe(cwd: str | pathlib.Path | None = None) -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=cwd or pathlib.Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def file_sha256(path: str | pathlib.Path) -> str:
    h = hashlib.sha256()
    with pathlib.Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    git: str
    stage: str
    status: str = "started"
    wall_clock: str = ""
    outputs: Dict[str, str] = field(default_factory=dict)
    output_hashes: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def begin(cls, cfg: AppConfig, stage: str) -> "RunManifest":
        return cls(cfg.digest(), cfg.run.seed, git_describe(), stage)

    def add_output(self, name: str, path: str | pathlib.Path) -> None:
        self.outputs[name] = str(path)
        if pathlib.Path(path).is_file():
            self.output_hashes[name] = file_sha256(path)

    def fingerprint(self) -> str:
        """Hash of everything except the wall clock and output locations."""
        data = {k: v for k, v in asdict(self).items() if k not in ("wall_clock", "outputs")}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode("utf-8")).hexdigest()

    def write(self, out_dir: str | pathlib.Path, status: str | None = None) -> pathlib.Path:
        if status is not None:
            self.status = status
        self.wall_clock = dt.datetime.now(dt.timezone.utc).isoformat()
        out_dir = pathlib.Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_NAME
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps({**asdict(self), "fingerprint": self.fingerprint()}, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)
        return path


def read_manifest(out_dir: str | pathlib.Path) -> dict:
    return json.loads((pathlib.Path(out_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))
