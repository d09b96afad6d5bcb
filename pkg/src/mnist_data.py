# src/mnist_data.py
"""
AdvMetric - MNIST Ingestion and Sampling
IDX parsing/serialisation, [0,1] normalisation, seeded batching, and
class-indexed negative sampling
"""

import gzip
import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

NUM_CLASSES = 10
IMAGE_SHAPE = (1, 28, 28)

IDX_UBYTE = 0x08
IDX_FLOAT = 0x0D
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

_IDX_DTYPES = {
    IDX_UBYTE: np.dtype(">u1"),
    IDX_FLOAT: np.dtype(">f4"),
}

SeedLike = Union[int, Sequence[int]]

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}


@dataclass
class LabeledDataset:
    """Images in [0,1] with integer labels and a per-class index"""
    images: np.ndarray            # (N, 1, 28, 28) float32
    labels: np.ndarray            # (N,) int64
    split: str = 'train'
    class_index: Dict[int, np.ndarray] = field(default_factory=dict)
    _complements: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"image/label count mismatch: {self.images.shape[0]} images, {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise DataError(f"labels must lie in 0..{NUM_CLASSES - 1}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixels must lie in [0, 1]")
        if not self.class_index:
            self.class_index = {
                int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)
            }

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def classes(self) -> Tuple[int, ...]:
        return tuple(sorted(c for c, idx in self.class_index.items() if idx.size))

    def complement(self, label: int) -> np.ndarray:
        """Indices of every sample whose label differs from ``label``"""
        label = int(label)
        if label not in self._complements:
            self._complements[label] = np.flatnonzero(self.labels != label)
        return self._complements[label]


########### IDX codec ###########

def _open(path: str) -> BinaryIO:
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    return gzip.open(path, 'rb') if path.endswith('.gz') else open(path, 'rb')


def read_idx_array(path: str, expected_magic: Optional[int] = None) -> np.ndarray:
    """Parse an IDX file into a numpy array (big-endian header, row-major payload)"""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise DataError(f"truncated IDX file {path}: missing magic number")
    magic, = struct.unpack('>I', raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise DataError(f"bad magic number 0x{magic:08X} in {path} (expected 0x{expected_magic:08X})")
    if magic >> 16 != 0:
        raise DataError(f"bad magic number 0x{magic:08X} in {path}")
    type_code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if type_code not in _IDX_DTYPES or ndim == 0:
        raise DataError(f"unsupported IDX type 0x{type_code:02X} / rank {ndim} in {path}")

    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataError(f"truncated IDX file {path}: incomplete dimension header")
    dims = struct.unpack(f'>{ndim}I', raw[4:header_end])
    dtype = _IDX_DTYPES[type_code]
    expected_bytes = int(np.prod(dims)) * dtype.itemsize
    payload = raw[header_end:]
    if len(payload) < expected_bytes:
        raise DataError(f"truncated IDX file {path}: {len(payload)} payload bytes, expected {expected_bytes}")
    return np.frombuffer(payload[:expected_bytes], dtype=dtype).reshape(dims)


def write_idx_array(path: str, array: np.ndarray, type_code: int = IDX_UBYTE):
    """Serialise an array using the IDX layout"""
    if type_code not in _IDX_DTYPES:
        raise DataError(f"unsupported IDX type 0x{type_code:02X}")
    array = np.ascontiguousarray(array, dtype=_IDX_DTYPES[type_code])
    magic = (type_code << 8) | array.ndim
    opener = gzip.open if path.endswith('.gz') else open
    with opener(path, 'wb') as f:
        f.write(struct.pack('>I', magic))
        f.write(struct.pack(f'>{array.ndim}I', *array.shape))
        f.write(array.tobytes())


def load_idx(images_path: str, labels_path: str, split: str = 'train') -> LabeledDataset:
    """Load an MNIST image/label file pair; pixel bytes are scaled by 1/255"""
    raw_images = read_idx_array(images_path, expected_magic=IMAGES_MAGIC)
    raw_labels = read_idx_array(labels_path, expected_magic=LABELS_MAGIC)
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise DataError(
            f"image/label count mismatch: {images_path} has {raw_images.shape[0]}, "
            f"{labels_path} has {raw_labels.shape[0]}"
        )
    images = (raw_images.astype(np.float32) / np.float32(255.0)).reshape(-1, *IMAGE_SHAPE)
    dataset = LabeledDataset(images=images, labels=raw_labels.astype(np.int64), split=split)
    logger.info("loaded %d %s images from %s", len(dataset), split, images_path)
    return dataset


def write_idx(ds: LabeledDataset, images_path: str, labels_path: str):
    """Inverse of load_idx: pixels are rounded back to bytes"""
    pixels = np.rint(ds.images.reshape(len(ds), IMAGE_SHAPE[1], IMAGE_SHAPE[2]) * 255.0).astype(np.uint8)
    write_idx_array(images_path, pixels, IDX_UBYTE)
    write_idx_array(labels_path, ds.labels.astype(np.uint8), IDX_UBYTE)


def load_mnist(data_dir: str, split: str) -> LabeledDataset:
    """Locate and load the canonical MNIST files for a split"""
    if split not in MNIST_FILES:
        raise DataError(f"unknown split '{split}' (expected one of {sorted(MNIST_FILES)})")
    paths = []
    for base in MNIST_FILES[split]:
        candidates = [os.path.join(data_dir, base), os.path.join(data_dir, base + '.gz')]
        found = next((c for c in candidates if os.path.exists(c)), None)
        if found is None:
            raise DataError(f"MNIST file not found: {candidates[0]}")
        paths.append(found)
    return load_idx(paths[0], paths[1], split=split)


########### Dataset utilities ###########

def subset(ds: LabeledDataset, limit: Optional[int]) -> LabeledDataset:
    """Deterministic prefix subset; None or a large limit returns the dataset itself"""
    if limit is None or limit >= len(ds):
        return ds
    return LabeledDataset(images=ds.images[:limit], labels=ds.labels[:limit], split=ds.split)


def fingerprint(ds: LabeledDataset) -> str:
    digest = hashlib.sha256()
    digest.update(ds.images.tobytes())
    digest.update(ds.labels.tobytes())
    return digest.hexdigest()


def batch_indices(n: int, batch_size: int, seed: SeedLike, epoch: int = 0) -> Iterator[np.ndarray]:
    """Shuffled index batches, deterministic per (seed, epoch); the short final batch is kept"""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([*np.atleast_1d(seed).tolist(), epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def batches(ds: LabeledDataset, batch_size: int, seed: SeedLike, epoch: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """(images, labels) batches in the order given by batch_indices"""
    for idx in batch_indices(len(ds), batch_size, seed, epoch):
        yield ds.images[idx], ds.labels[idx]


def sample_negative(ds: LabeledDataset, y: int, rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    """Draw one image uniformly from all samples whose label differs from y"""
    pool = ds.complement(y)
    if len(ds.classes) < 2 or pool.size == 0:
        raise DataError("negative sampling needs at least two classes")
    index = int(pool[rng.integers(pool.size)])
    return ds.images[index], int(ds.labels[index])


def sample_negatives(ds: LabeledDataset, labels: Sequence[int], rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Batch form of sample_negative; one uniform draw per label, in order"""
    if len(ds.classes) < 2:
        raise DataError("negative sampling needs at least two classes")
    chosen = np.empty(len(labels), dtype=np.int64)
    for i, y in enumerate(labels):
        pool = ds.complement(int(y))
        if pool.size == 0:
            raise DataError(f"no sample with a label other than {int(y)}")
        chosen[i] = pool[rng.integers(pool.size)]
    return ds.images[chosen], ds.labels[chosen]
