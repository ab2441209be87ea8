"""Run manifests: one JSON file per command invocation.

The `determines` section (command, resolved config, seed material) fixes every
primary output byte-for-byte; the `record` section holds context that may vary
between reruns (wall clock, versions, artifact paths).
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__


@dataclass
class RunManifest:
    command: str
    config: dict
    artifacts: dict[str, str] = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "determines": {"command": self.command, "config": self.config},
            "record": {
                "artifacts": self.artifacts,
                "wall_clock_s": self.wall_clock_s,
                "versions": {
                    "disentangleformer": __version__,
                    "numpy": np.__version__,
                    "python": platform.python_version(),
                },
            },
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


class Stopwatch:
    def __enter__(self):
        self._t0 = time.monotonic()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.monotonic() - self._t0
