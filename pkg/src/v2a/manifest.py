"""Run manifests: stage bookkeeping with content-hash integrity.

Each stage records the artifacts it consumed and produced along with their
hashes; a later stage refuses to run if one of its declared inputs is
missing or no longer matches the recorded hash.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from .errors import ManifestError

MANIFEST_NAME = "manifest.json"


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


class RunManifest:
    def __init__(self, run_dir, run_id: str = "", config_hash: str = "", seed: int = 0):
        self.run_dir = Path(run_dir)
        self.path = self.run_dir / MANIFEST_NAME
        if self.path.exists():
            doc = json.loads(self.path.read_text())
            self.doc = doc
        else:
            self.doc = {
                "run_id": run_id or self.run_dir.name,
                "config_hash": config_hash,
                "seed": seed,
                "stages": [],
            }

    def save(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.doc, indent=1, sort_keys=True) + "\n")

    def record_stage(self, name: str, inputs: list, outputs: list):
        """Append a stage entry; paths are stored relative to the run dir."""
        entry = {
            "stage": name,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "inputs": [
                {"path": str(Path(p).relative_to(self.run_dir)), "hash": file_hash(p)}
                for p in inputs
            ],
            "outputs": [
                {"path": str(Path(p).relative_to(self.run_dir)), "hash": file_hash(p)}
                for p in outputs
            ],
        }
        self.doc["stages"] = [s for s in self.doc["stages"] if s["stage"] != name] + [entry]
        self.save()

    def stage_entry(self, name: str) -> dict | None:
        for s in self.doc["stages"]:
            if s["stage"] == name:
                return s
        return None

    def require_inputs(self, stage: str, paths: list):
        """Verify inputs exist and hash-match what their producing stage recorded."""
        recorded = {}
        for s in self.doc["stages"]:
            for out in s["outputs"]:
                recorded[out["path"]] = (s["stage"], out["hash"])
        for p in paths:
            p = Path(p)
            if not p.exists():
                raise ManifestError(f"stage {stage!r}: missing input artifact {p}")
            rel = str(p.relative_to(self.run_dir))
            if rel in recorded:
                producer, expected = recorded[rel]
                actual = file_hash(p)
                if actual != expected:
                    raise ManifestError(
                        f"stage {stage!r}: input {rel} is stale "
                        f"(hash {actual} != {expected} recorded by stage {producer!r})"
                    )
