# src/artifact_cache.py
"""
AdvMetric - Attack Set Caching
Model-independent invariance sets are expensive to build and identical for
every run over the same data, so they are kept on disk between runs
"""

import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional

from attacks import AttackConfig, AttackSet, Oracle, build_attack_set, load_attack_set, save_attack_set
from errors import DataError
from mnist_data import LabeledDataset, fingerprint
from run_manifest import stable_hash

logger = logging.getLogger(__name__)

ENTRY_FILE = 'entry.json'


@dataclass
class CacheEntry:
    """Metadata stored next to a cached attack set"""
    cache_key: str
    params: Dict[str, Any]
    timestamp: float
    hit_count: int = 0


class ArtifactCache:
    """On-disk attack-set cache keyed by generation parameters and data fingerprints"""

    def __init__(self, cache_dir: str):
        self.cache_dir = cache_dir
        os.makedirs(cache_dir, exist_ok=True)
        self.stats = {
            'hits': 0,
            'misses': 0,
            'stores': 0,
            'total_requests': 0,
        }

    @staticmethod
    def make_key(cfg: AttackConfig, dataset: LabeledDataset, trainset: LabeledDataset) -> str:
        """Deterministic key: workers and block size do not change the result, so they are left out"""
        params = cfg.to_dict()
        params.pop('workers')
        params.pop('block_size')
        return stable_hash({
            'attack': params,
            'dataset': fingerprint(dataset),
            'trainset': fingerprint(trainset),
        })

    def _entry_dir(self, cache_key: str) -> str:
        return os.path.join(self.cache_dir, cache_key)

    def get(self, cache_key: str) -> Optional[AttackSet]:
        """Cached attack set, or None; unreadable entries are dropped"""
        self.stats['total_requests'] += 1
        entry_dir = self._entry_dir(cache_key)
        entry_path = os.path.join(entry_dir, ENTRY_FILE)
        if os.path.exists(entry_path):
            try:
                aset = load_attack_set(entry_dir)
                with open(entry_path) as f:
                    entry = CacheEntry(**json.load(f))
            except (DataError, ValueError, TypeError) as e:
                logger.warning("dropping unreadable cache entry %s: %s", cache_key, e)
                self._remove_entry(cache_key)
            else:
                entry.hit_count += 1
                with open(entry_path, 'w') as f:
                    json.dump(asdict(entry), f, indent=2)
                self.stats['hits'] += 1
                logger.info("attack set cache hit %s", cache_key)
                return aset

        self.stats['misses'] += 1
        return None

    def put(self, cache_key: str, aset: AttackSet, params: Optional[Dict[str, Any]] = None):
        entry_dir = self._entry_dir(cache_key)
        save_attack_set(aset, entry_dir)
        # entry.json last: its presence marks a complete entry
        with open(os.path.join(entry_dir, ENTRY_FILE), 'w') as f:
            json.dump(asdict(CacheEntry(cache_key, params or {}, time.time())), f, indent=2)
        self.stats['stores'] += 1

    def _remove_entry(self, cache_key: str):
        shutil.rmtree(self._entry_dir(cache_key), ignore_errors=True)

    def get_stats(self) -> Dict[str, Any]:
        total_requests = self.stats['total_requests']
        hit_rate = (self.stats['hits'] / total_requests * 100) if total_requests > 0 else 0
        entries = [d for d in os.listdir(self.cache_dir)
                   if os.path.exists(os.path.join(self.cache_dir, d, ENTRY_FILE))]
        return {
            'hit_rate_percent': round(hit_rate, 1),
            'cache_size': len(entries),
            'hits': self.stats['hits'],
            'misses': self.stats['misses'],
            'stores': self.stats['stores'],
            'total_requests': total_requests,
        }

    def clear(self):
        for name in os.listdir(self.cache_dir):
            self._remove_entry(name)
        self.stats = {key: 0 for key in self.stats}


def cached_invariance_set(cache: Optional[ArtifactCache], dataset: LabeledDataset, trainset: LabeledDataset,
                          cfg: AttackConfig, oracle: Optional[Oracle] = None) -> AttackSet:
    """Invariance set for ``dataset``, generated at most once per cache"""
    if cache is None:
        return build_attack_set(None, dataset, cfg, trainset=trainset, oracle=oracle)
    key = cache.make_key(cfg, dataset, trainset)
    aset = cache.get(key)
    if aset is None:
        aset = build_attack_set(None, dataset, cfg, trainset=trainset, oracle=oracle)
        cache.put(key, aset, params=cfg.to_dict())
    return aset
