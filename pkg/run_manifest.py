# run_manifest.py
"""
Run manifests: one structured record per CLI command, written next to its
outputs. Records carry the seed, the config hash and a SHA-256 for every
output file. No timestamps, so reruns produce byte-identical manifests.
"""

import hashlib
import logging
from pathlib import Path
from typing import Literal, Optional, TypedDict

from constants import FILE_LOG, FILE_MANIFEST
from storage import write_json

logger = logging.getLogger(__name__)

# Action types for run records
ActionType = Literal[
    "SIMULATE",
    "ESTIMATE",
    "EVALUATE",
]

ACTION_NAMES = {
    "SIMULATE": "ground truth and observations simulated",
    "ESTIMATE": "flows and costs estimated",
    "EVALUATE": "estimate evaluated",
}


class ManifestRecord(TypedDict):
    action: ActionType
    description: str
    seed: Optional[int]
    config_hash: str
    config: dict
    inputs: dict
    outputs: dict
    summary: dict


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_outputs(directory) -> dict:
    """name -> sha256 of every file in the directory except the log and the manifest."""
    directory = Path(directory)
    return {
        p.name: file_sha256(p)
        for p in sorted(directory.iterdir())
        if p.is_file() and p.name not in (FILE_LOG, FILE_MANIFEST)
    }


def build_record(
    action: ActionType,
    config_hash: str,
    config: dict,
    outputs: dict,
    seed: Optional[int] = None,
    inputs: Optional[dict] = None,
    summary: Optional[dict] = None,
) -> ManifestRecord:
    return ManifestRecord(
        action=action,
        description=ACTION_NAMES[action],
        seed=seed,
        config_hash=config_hash,
        config=config,
        inputs=dict(inputs or {}),
        outputs=dict(outputs),
        summary=dict(summary or {}),
    )


def write_manifest(directory, record: ManifestRecord) -> Path:
    path = Path(directory) / FILE_MANIFEST
    write_json(path, dict(record))
    logger.info(f"[{record['action']}] {record['description']}: {len(record['outputs'])} files, "
                f"config {record['config_hash'][:12]}")
    return path
