# src/run_manifest.py
"""
AdvMetric - Run Manifests, Hashing and Seed Streams
Everything needed to replay a run, written before any long computation
"""

import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional

import numpy as np

from errors import ConfigError

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"

# Named random sub-streams derived from the single run seed
SEED_STREAMS = {
    'init': 1,
    'shuffle': 2,
    'negatives': 3,
}


def stable_hash(payload: Any) -> str:
    """Deterministic key for JSON-serialisable payloads"""
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.md5(text.encode()).hexdigest()


def file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def derive_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for one named sub-stream of a run seed"""
    if stream not in SEED_STREAMS:
        raise ConfigError(f"unknown seed stream '{stream}' (known: {sorted(SEED_STREAMS)})")
    return np.random.default_rng([int(seed), SEED_STREAMS[stream]])


@dataclass
class RunManifest:
    """What was run, with which inputs, and where the artifacts went"""
    command: str
    config_hash: str
    arguments: List[str]
    seeds: List[int]
    artifacts: Dict[str, str] = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    created_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec='seconds'))
    config: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, out_dir: str) -> str:
        """Write manifest.json into out_dir and return its path"""
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, 'manifest.json')
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        logger.info("wrote run manifest %s", path)
        return path

    @classmethod
    def read(cls, path: str) -> "RunManifest":
        with open(path) as f:
            return cls(**json.load(f))

    @classmethod
    def for_command(cls, command: str, config: Dict[str, Any], seeds: List[int],
                    argv: Optional[List[str]] = None) -> "RunManifest":
        return cls(
            command=command,
            config_hash=stable_hash(config),
            arguments=list(sys.argv[1:] if argv is None else argv),
            seeds=[int(s) for s in seeds],
            config=config,
        )
