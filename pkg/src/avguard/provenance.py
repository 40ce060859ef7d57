"""Reproducibility facts recorded in every run manifest."""

import hashlib
import json
import logging
import os
import shlex
import subprocess
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any

log = logging.getLogger(__name__)

TRACKED_PACKAGES = ("avguard", "numpy", "scipy", "torch", "pandas", "pillow", "scikit-learn")


@dataclass(frozen=True)
class GitState:
    revision: str
    dirty_paths: tuple[str, ...] = field(default_factory=tuple)

    @property
    def dirty(self) -> bool:
        return bool(self.dirty_paths)


def _unquote_filepath(filepath: str) -> str:
    # git quotes paths containing spaces or special characters
    return shlex.split(filepath)[0]


def parse_git_status_porcelain(output: str) -> list[str]:
    """
    Paths with uncommitted changes from ``git status --porcelain=v1``.

    Each line is two status characters, a space and the path; renames and
    copies are written ``old -> new`` and report the new path.
    """
    paths = []
    for line in output.split("\n"):
        if len(line) < 4:
            continue
        filepath = line[3:]
        if " -> " in filepath:
            _, filepath = filepath.split(" -> ", 1)
        paths.append(_unquote_filepath(filepath))
    return paths


def _git(args: list[str], cwd: Path) -> str:
    result = subprocess.run(["git", *args], cwd=cwd, capture_output=True, text=True, check=True)
    return result.stdout


def git_state(repo_path: str | os.PathLike = ".") -> GitState | None:
    """Revision and dirty paths of the checkout at ``repo_path``, or ``None`` outside a git repository."""
    cwd = Path(repo_path)
    try:
        revision = _git(["rev-parse", "HEAD"], cwd).strip()
        status = _git(["status", "--porcelain=v1", "."], cwd)
    except FileNotFoundError:
        log.debug("git is not installed; skipping source revision")
        return None
    except subprocess.CalledProcessError as e:
        log.debug("Not recording source revision: %s", (e.stderr or "").strip())
        return None

    state = GitState(revision=revision, dirty_paths=tuple(parse_git_status_porcelain(status)))
    if state.dirty:
        log.warning(
            "Source tree has %d uncommitted paths; results may not be reproducible from %s", len(state.dirty_paths), revision[:12]
        )
    return state


def package_versions(names: tuple[str, ...] = TRACKED_PACKAGES) -> dict[str, str | None]:
    versions: dict[str, str | None] = {}
    for name in names:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def config_digest(config: dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a configuration mapping."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def run_record(config: dict[str, Any], seeds: dict[str, int], dataset_digest: str | None = None) -> dict[str, Any]:
    state = git_state(Path(__file__).parent)
    return {
        "config_digest": config_digest(config),
        "dataset_digest": dataset_digest,
        "seeds": seeds,
        "versions": package_versions(),
        "git": None if state is None else {"revision": state.revision, "dirty_paths": list(state.dirty_paths)},
    }
