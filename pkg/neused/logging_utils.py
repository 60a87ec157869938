from __future__ import annotations

import collections
import json
import logging
import pathlib
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler


logger = logging.getLogger(__name__)


class DebugFlags:
    """Counts soft anomalies (clamped queries, degenerate normals, ...) by name."""

    def __init__(self) -> None:
        self.counts: collections.Counter[str] = collections.Counter()

    def flag(self, name: str, n: int = 1, detail: str = "") -> None:
        if n <= 0:
            return
        self.counts[name] += n
        logging.getLogger("neused.debug").debug("%s x%d %s", name, n, detail)

    def reset(self) -> None:
        self.counts.clear()

    def __getitem__(self, name: str) -> int:
        return self.counts[name]


debug_flags = DebugFlags()


def setup_logging(level: int = logging.INFO, console: Optional[Console] = None) -> None:
    handler = RichHandler(console=console or Console(stderr=True), show_path=False, rich_tracebacks=True)
    root = logging.getLogger("neused")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


class LossLogger:
    """JSON-lines trace of the distillation losses, one record per logged step."""

    def __init__(self, path: str | pathlib.Path, append: bool = False):
        self.path = pathlib.Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.append = append
        self._file = None

    def __enter__(self):
        mode = "a" if self.append else "w"
        self._file = self.path.open(mode, encoding="utf-8")
        return self

    def __exit__(self, exc_type, exc, tb):
        if self._file:
            self._file.close()
            self._file = None

    def log(self, step: int, t: int, l_pds: float, l_pe: float, l_pepds: float) -> None:
        if not self._file:
            raise RuntimeError("LossLogger must be used as a context manager")
        record = {"step": int(step), "t": int(t), "L_PDS": float(l_pds), "L_PE": float(l_pe), "L_PEPDS": float(l_pepds)}
        self._file.write(json.dumps(record) + "\n")
        self._file.flush()


def read_loss_log(path: str | pathlib.Path) -> list[dict]:
    with pathlib.Path(path).open("r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
