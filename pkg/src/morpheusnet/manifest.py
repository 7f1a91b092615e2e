"""Reproducibility manifests written beside every produced artifact."""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    def __init__(self, command: str, seed: int | None = None,
                 config_path: str | None = None, extra: dict | None = None):
        self.command = command
        self.seed = seed
        self.config_path = config_path
        self.extra = extra or {}
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.started_at = datetime.now(timezone.utc).isoformat()

    def add_input(self, path) -> None:
        p = Path(path)
        self.inputs[str(p)] = _sha256(p)

    def add_output(self, path) -> None:
        self.outputs.append(str(path))

    def write(self, beside) -> Path:
        """Write ``<artifact>.manifest.json`` next to the artifact."""
        target = Path(str(beside) + ".manifest.json")
        payload = {
            "command": self.command,
            "config": self.config_path,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started_at": self.started_at,
            "finished_at": datetime.now(timezone.utc).isoformat(),
        }
        payload.update(self.extra)
        target.write_text(json.dumps(payload, indent=2) + "\n")
        return target
