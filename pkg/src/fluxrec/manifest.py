"""Run manifests: provenance record written alongside every CLI output."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field


@dataclass
class RunManifest:
    """What ran, with which inputs (by digest) and which outputs."""

    subcommand: str
    config: dict
    seeds: list[int]
    input_digests: dict[str, str] = field(default_factory=dict)
    output_digests: dict[str, str] = field(default_factory=dict)
    version: str = ""
    runtime_seconds: float = 0.0

    def add_input(self, path) -> None:
        self.input_digests[str(path)] = sha256_of(path)

    def add_output(self, path) -> None:
        self.output_digests[str(path)] = sha256_of(path)

    def write(self, path) -> None:
        """Atomic write: temp file in the target directory, then rename."""
        payload = json.dumps(asdict(self), indent=2, sort_keys=True)
        directory = os.path.dirname(os.path.abspath(path)) or "."
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".manifest.tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(payload + "\n")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def sha256_of(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
