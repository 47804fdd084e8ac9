"""Run directories, manifests, split markers and training lineage.

Every command writes ``manifest.json`` next to its outputs: the command
line, the resolved configuration, the seeds in force, SHA-256 digests of its
inputs and outputs, and the package version. Manifests hold no timestamps or
absolute paths, so rerunning a command with the same inputs reproduces its
manifest byte for byte.

Dataset folders written by ``gen-data`` carry a ``SPLIT`` marker file naming
their split. Only ``eval-seg`` may read a folder marked ``labeled_test``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

from . import __version__
from .errors import ValidationError

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SPLIT_MARKER = "SPLIT"
SPLITS = ("labeled_train", "labeled_test", "unlabeled")
TEST_SPLIT = "labeled_test"


def prepare_out_dir(path: Path, force: bool = False) -> Path:
    """Create ``path``; an existing nonempty directory is only replaced with ``force``."""
    path = Path(path)
    if path.exists():
        if not path.is_dir():
            raise ValidationError(f"{path} exists and is not a directory")
        if any(path.iterdir()):
            if not force:
                raise ValidationError(f"{path} already exists; pass --force to overwrite it")
            logger.warning("removing existing run directory %s", path)
            shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def prepare_out_file(path: Path, force: bool = False) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise ValidationError(f"{path} already exists; pass --force to overwrite it")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_tree(root: Path, exclude: Iterable[str] = (MANIFEST,)) -> str:
    """Digest of every file under ``root`` (relative path and content), in sorted order."""
    root = Path(root)
    skip = set(exclude)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if path.name in skip:
            continue
        digest.update(rel.encode("utf-8") + b"\0")
        digest.update(sha256_file(path).encode("ascii"))
    return digest.hexdigest()


def digest_input(path: Path) -> str:
    path = Path(path)
    if path.is_dir():
        return sha256_tree(path)
    return sha256_file(path)


def list_outputs(root: Path, exclude: Iterable[str] = (MANIFEST,)) -> Dict[str, str]:
    root = Path(root)
    skip = set(exclude)
    return {
        p.relative_to(root).as_posix(): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


def write_manifest(
    path: Path,
    command: str,
    argv: Sequence[str],
    config: Optional[Mapping[str, Any]],
    seeds: Mapping[str, int],
    inputs: Mapping[str, Path],
    outputs: Mapping[str, str],
    extra: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write a manifest to ``path`` (a file name, or a directory that receives ``manifest.json``)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    doc: Dict[str, Any] = {
        "command": command,
        "argv": list(argv),
        "ddmm_version": __version__,
        "config": dict(config) if config is not None else None,
        "seeds": dict(seeds),
        "inputs": {name: digest_input(p) for name, p in inputs.items()},
        "outputs": dict(outputs),
    }
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %s", path)
    return path


def read_manifest(path: Path) -> Optional[Dict[str, Any]]:
    """The manifest in (or at) ``path``, or None when there is none."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.is_file():
        return None
    try:
        return json.loads(path.read_text())
    except ValueError as e:
        raise ValidationError(f"{path}: unreadable manifest ({e})") from e


def write_split_marker(folder: Path, split: str) -> None:
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r}")
    (Path(folder) / SPLIT_MARKER).write_text(split + "\n")


def read_split(folder: Path) -> Optional[str]:
    marker = Path(folder) / SPLIT_MARKER
    if not marker.is_file():
        return None
    return marker.read_text().strip()


def guard_split(folder: Path, command: str) -> Optional[str]:
    """Refuse the labeled test split for every command but ``eval-seg``; return the split name."""
    split = read_split(folder)
    if split == TEST_SPLIT and command != "eval-seg":
        raise ValidationError(f"{command} may not read the held-out test split in {folder}")
    return split


def lineage(folder: Path) -> List[str]:
    """``trained_on`` names recorded in the manifest of ``folder`` (empty if none)."""
    doc = read_manifest(folder)
    if not doc:
        return []
    return list(doc.get("trained_on", []))


def check_disjoint(test_names: Iterable[str], trained_on: Iterable[str]) -> None:
    """Raise if any test item was seen by a training stage."""
    overlap = sorted(set(test_names) & set(trained_on))
    if overlap:
        raise ValidationError(
            f"{len(overlap)} test item(s) were used in training, e.g. {overlap[0]}; the test split must be held out"
        )
