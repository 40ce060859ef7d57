"""
Workspace layout.

::

    <root>/
      run.toml
      features/            features.npy, clips.csv
      dataset/             audio.npy, images.npy, images.csv, pairs.csv, dataset.json
      runs/<arch>/fold<k>/ history.jsonl, summary.txt, best.pt, epoch-<n>.pt
      evaluations/         <arch>-<set>.json
      tsne/                <arch>-<set>.csv, <arch>-<set>.png
      manifests/           <command>[-<tag>].json
      report.json, report.csv
"""

import contextlib
import json
import os
import tempfile
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Any

WORKSPACE_ENV = "AVGUARD_WORKSPACE"


@contextlib.contextmanager
def atomic_output(path: Path) -> Iterator[Path]:
    """Yield a temporary sibling of ``path`` and move it into place only if the block succeeds."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    tmp_path = Path(tmp)
    try:
        yield tmp_path
        os.replace(tmp_path, path)
    finally:
        tmp_path.unlink(missing_ok=True)


def write_json(path: Path, payload: Any) -> Path:
    with atomic_output(path) as tmp:
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


@dataclass(frozen=True)
class Workspace:
    root: Path

    @classmethod
    def resolve(cls, flag: str | os.PathLike | None = None, configured: str | os.PathLike | None = None) -> "Workspace":
        """A ``--workspace`` flag wins over ``AVGUARD_WORKSPACE``, which wins over the configured path."""
        return cls(Path(flag or os.environ.get(WORKSPACE_ENV) or configured or ".").resolve())

    @property
    def config_path(self) -> Path:
        return self.root / "run.toml"

    @property
    def features_dir(self) -> Path:
        return self.root / "features"

    @property
    def dataset_dir(self) -> Path:
        return self.root / "dataset"

    @property
    def evaluations_dir(self) -> Path:
        return self.root / "evaluations"

    @property
    def tsne_dir(self) -> Path:
        return self.root / "tsne"

    @property
    def manifests_dir(self) -> Path:
        return self.root / "manifests"

    def run_dir(self, arch: str, fold: int) -> Path:
        return self.root / "runs" / arch / f"fold{fold}"

    def evaluation_path(self, arch: str, subset: str) -> Path:
        return self.evaluations_dir / f"{arch}-{subset}.json"

    def manifest_path(self, command: str, tag: str | None = None) -> Path:
        name = f"{command}-{tag}" if tag else command
        return self.manifests_dir / f"{name}.json"

    def relative(self, path: Path) -> str:
        try:
            return path.resolve().relative_to(self.root).as_posix()
        except ValueError:
            return path.resolve().as_posix()

    def write_manifest(self, command: str, record: dict[str, Any], artifacts: Iterable[Path], tag: str | None = None) -> Path:
        """
        Record one command run.

        A rerun of the same command and tag replaces its manifest, so each
        artifact path stays listed in exactly one manifest.
        """
        payload = {"command": command, **record, "artifacts": sorted({self.relative(p) for p in artifacts})}
        return write_json(self.manifest_path(command, tag), payload)
