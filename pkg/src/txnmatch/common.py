"""Shared error types, hashing, and run manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from pathlib import Path
from typing import Any, Mapping

PACKAGE_VERSION = "0.1.0"


class ConfigError(ValueError):
    """Invalid configuration or arguments; the CLI maps this to exit code 2."""


class FormatError(ValueError):
    """A persisted artifact has a bad magic, version, or structure."""


class TrainingDivergedError(RuntimeError):
    """Loss became NaN/Inf; carries the iteration and offending batch hash."""

    def __init__(self, iteration: int, batch_hash: str):
        super().__init__(
            f"training diverged at iteration {iteration} (batch {batch_hash})"
        )
        self.iteration = iteration
        self.batch_hash = batch_hash


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stable_json(obj: Any) -> str:
    """Canonical JSON: sorted keys, no whitespace, dataclasses unwrapped."""
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


@dataclasses.dataclass
class RunManifest:
    """Written next to every CLI command's outputs.

    Output hashes are deterministic under a fixed seed; wall_time_s is
    informational and excluded from any determinism comparison.
    """

    command: str
    seed: int | None
    config: dict[str, Any]
    inputs: dict[str, str]
    outputs: dict[str, str]
    wall_time_s: float
    version: str = PACKAGE_VERSION

    def write(self, path: str | Path) -> None:
        payload = _plain(self)
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


class ManifestTimer:
    """Collects inputs/outputs while timing a CLI command."""

    def __init__(self, command: str, seed: int | None, config: dict[str, Any]):
        self.command = command
        self.seed = seed
        self.config = config
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self._t0 = time.perf_counter()

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path: str | Path) -> None:
        self.outputs[str(path)] = sha256_file(path)

    def finish(self, manifest_path: str | Path) -> RunManifest:
        manifest = RunManifest(
            command=self.command,
            seed=self.seed,
            config=_plain(self.config),
            inputs=self.inputs,
            outputs=self.outputs,
            wall_time_s=time.perf_counter() - self._t0,
        )
        manifest.write(manifest_path)
        return manifest
