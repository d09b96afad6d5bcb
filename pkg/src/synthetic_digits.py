# src/synthetic_digits.py
"""
AdvMetric - Synthetic Digit Dataset Generator
Seven-segment style 28x28 digits with jitter and noise, in the MNIST value
range, for tests and smoke runs without the real MNIST files
"""

import logging
import os
from typing import Tuple

import numpy as np

from mnist_data import MNIST_FILES, NUM_CLASSES, LabeledDataset, write_idx

logger = logging.getLogger(__name__)

# Segment rectangles (row_start, row_stop, col_start, col_stop) on the 28x28 canvas
SEGMENTS = {
    'a': (5, 7, 9, 19),     # top
    'b': (5, 15, 18, 20),   # top right
    'c': (13, 23, 18, 20),  # bottom right
    'd': (21, 23, 9, 19),   # bottom
    'e': (13, 23, 8, 10),   # bottom left
    'f': (5, 15, 8, 10),    # top left
    'g': (13, 15, 9, 19),   # middle
}

DIGIT_SEGMENTS = {
    0: 'abcdef',
    1: 'bc',
    2: 'abged',
    3: 'abgcd',
    4: 'fgbc',
    5: 'afgcd',
    6: 'afgedc',
    7: 'abc',
    8: 'abcdefg',
    9: 'abcdfg',
}

MAX_JITTER = 3
NOISE_STD = 0.05


def render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    """Render one jittered, noisy digit as a (28, 28) array quantised to 1/255 steps"""
    canvas = np.zeros((28, 28), dtype=np.float64)
    intensity = rng.uniform(0.7, 1.0)
    for segment in DIGIT_SEGMENTS[digit]:
        r0, r1, c0, c1 = SEGMENTS[segment]
        canvas[r0:r1, c0:c1] = intensity
    dy, dx = rng.integers(-MAX_JITTER, MAX_JITTER + 1, size=2)
    canvas = np.roll(canvas, (int(dy), int(dx)), axis=(0, 1))
    canvas += rng.normal(0.0, NOISE_STD, size=canvas.shape) * (canvas > 0)
    canvas = np.clip(canvas, 0.0, 1.0)
    return (np.rint(canvas * 255.0) / 255.0).astype(np.float32)


def make_dataset(n: int, seed: int = 0, split: str = 'train') -> LabeledDataset:
    """Balanced synthetic dataset of n samples, deterministic per seed"""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % NUM_CLASSES)
    images = np.stack([render_digit(int(y), rng) for y in labels]) if n else np.zeros((0, 28, 28), np.float32)
    return LabeledDataset(images=images.reshape(n, 1, 28, 28), labels=labels, split=split)


def write_synthetic_mnist(data_dir: str, n_train: int = 2000, n_test: int = 500, seed: int = 0) -> Tuple[str, str]:
    """Write train/test IDX files under the canonical MNIST names"""
    os.makedirs(data_dir, exist_ok=True)
    for split, n, offset in (('train', n_train, 0), ('test', n_test, 1)):
        ds = make_dataset(n, seed=seed + offset, split=split)
        images_name, labels_name = MNIST_FILES[split]
        write_idx(ds, os.path.join(data_dir, images_name), os.path.join(data_dir, labels_name))
        logger.info("wrote %d synthetic %s digits to %s", n, split, data_dir)
    return os.path.join(data_dir, MNIST_FILES['train'][0]), os.path.join(data_dir, MNIST_FILES['test'][0])


if __name__ == "__main__":
    out_dir = os.path.join('data', 'synthetic')
    write_synthetic_mnist(out_dir)
    sample = make_dataset(20, seed=0)
    print(f"Created synthetic digits in '{out_dir}'")
    print("\nClass Distribution:")
    for label, idx in sorted(sample.class_index.items()):
        print(f"  {label}: {idx.size} samples")
