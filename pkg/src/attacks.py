# src/attacks.py
"""
AdvMetric - Sensitivity and Invariance Attacks
FGSM perturbations, shift-aligned nearest-different-class projections, and
the k-NN labelling oracle that decides which invariance examples are admitted
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import tensor_autodiff as ad
from errors import AttackError, ConfigError, DataError
from metric_losses import cross_entropy
from mnist_data import IDX_FLOAT, IMAGE_SHAPE, LabeledDataset, read_idx_array, write_idx_array

logger = logging.getLogger(__name__)

SENSITIVITY = 'sensitivity'
INVARIANCE = 'invariance'
ATTACK_KINDS = (SENSITIVITY, INVARIANCE)
ABSTAIN = -1

DEFAULT_EPSILON = {
    SENSITIVITY: 0.1,
    INVARIANCE: 0.4,
}

MANIFEST_FILE = 'manifest.csv'
IMAGES_FILE = 'images-idx4-float'
MANIFEST_COLUMNS = ['source_index', 'label', 'verdict', 'kind', 'epsilon', 'checkpoint_hash',
                    'admitted', 'target_index', 'shift_dy', 'shift_dx']


@dataclass(frozen=True)
class AttackConfig:
    """One attack family with its L-infinity budget and oracle settings"""
    kind: str = SENSITIVITY
    epsilon: float = 0.1
    oracle_k: int = 5
    oracle_tau: float = 0.8
    shift_radius: int = 2
    shortlist: int = 32
    workers: int = 1
    block_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, 'epsilon', float(self.epsilon))
        object.__setattr__(self, 'oracle_tau', float(self.oracle_tau))
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"attack kind must be one of {ATTACK_KINDS}, got '{self.kind}'")
        if not 0 < self.epsilon <= 1:
            raise ConfigError(f"attack epsilon must lie in (0, 1], got {self.epsilon}")
        if self.oracle_k < 1:
            raise ConfigError(f"oracle_k must be >= 1, got {self.oracle_k}")
        if not 0 < self.oracle_tau <= 1:
            raise ConfigError(f"oracle_tau must lie in (0, 1], got {self.oracle_tau}")
        if self.shift_radius < 0 or self.shortlist < 1 or self.workers < 1 or self.block_size < 1:
            raise ConfigError("shift_radius must be >= 0 and shortlist, workers, block_size >= 1")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "AttackConfig":
        overrides.setdefault('epsilon', DEFAULT_EPSILON.get(kind, 0.1))
        return cls(kind=kind, **overrides)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


########### Oracle ###########

def _pairwise_sq_distances(queries: np.ndarray, reference: np.ndarray, reference_sq: np.ndarray) -> np.ndarray:
    """||q||^2 + ||r||^2 - 2 q.r, clipped at zero"""
    query_sq = np.einsum('ij,ij->i', queries, queries)
    dist = query_sq[:, None] + reference_sq[None, :] - 2.0 * (queries @ reference.T)
    return np.maximum(dist, 0.0)


def _k_smallest(dist: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k smallest entries per row, ordered by (distance, index)"""
    k = min(k, dist.shape[1])
    if k < dist.shape[1]:
        candidates = np.argpartition(dist, k - 1, axis=1)[:, :k]
    else:
        candidates = np.tile(np.arange(dist.shape[1]), (dist.shape[0], 1))
    ordered = np.empty_like(candidates)
    for row, cand in enumerate(candidates):
        ordered[row] = cand[np.lexsort((cand, dist[row, cand]))]
    return ordered


class Oracle:
    """k-nearest-neighbour labeller over clean reference pixels, abstaining below a vote fraction"""

    def __init__(self, reference: LabeledDataset, k: int = 5, tau: float = 0.8, block_size: int = 256):
        if len(reference) == 0:
            raise AttackError("oracle needs a non-empty reference set")
        self.reference = reference
        self.k = min(int(k), len(reference))
        self.tau = float(tau)
        self.block_size = int(block_size)
        self._flat = reference.images.reshape(len(reference), -1)
        self._flat_sq = np.einsum('ij,ij->i', self._flat, self._flat)

    @classmethod
    def from_config(cls, reference: LabeledDataset, cfg: AttackConfig) -> "Oracle":
        return cls(reference, k=cfg.oracle_k, tau=cfg.oracle_tau, block_size=cfg.block_size)

    def neighbours(self, queries: np.ndarray) -> np.ndarray:
        """Reference indices of the k nearest neighbours of each query"""
        flat = np.asarray(queries, dtype=np.float32).reshape(len(queries), -1)
        out = np.empty((flat.shape[0], self.k), dtype=np.int64)
        for start in range(0, flat.shape[0], self.block_size):
            block = flat[start:start + self.block_size]
            dist = _pairwise_sq_distances(block, self._flat, self._flat_sq)
            out[start:start + len(block)] = _k_smallest(dist, self.k)
        return out

    def label(self, queries: np.ndarray) -> np.ndarray:
        """Majority label per query, or ABSTAIN when the winning fraction is below tau"""
        votes = self.reference.labels[self.neighbours(queries)]
        verdicts = np.full(votes.shape[0], ABSTAIN, dtype=np.int64)
        for i, row in enumerate(votes):
            counts = np.bincount(row, minlength=1)
            best = counts.max()
            # among tied labels, the one held by the nearest neighbour wins
            winner = next(int(v) for v in row if counts[v] == best)
            if best >= self.tau * self.k - 1e-9:
                verdicts[i] = winner
        return verdicts


def oracle_label(oracle: Oracle, x: np.ndarray) -> Any:
    """Oracle verdict for one image (int) or a batch of images (array); ABSTAIN is -1"""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim <= 3:
        return int(oracle.label(x.reshape(1, -1))[0])
    return oracle.label(x)


########### Sensitivity (FGSM) ###########

def fgsm(model: Callable, x: np.ndarray, y: Sequence[int], epsilon: float) -> np.ndarray:
    """x* = clip(x + epsilon * sign(grad_x CE(f(x), y)), 0, 1)"""
    x = np.asarray(x, dtype=np.float32)
    grad = ad.grad_wrt_input(model, x, y, lambda out, labels: cross_entropy(out[1], labels, reduction='sum'))
    x_star = x + np.float32(epsilon) * np.sign(grad.data)
    return np.clip(x_star, 0.0, 1.0).astype(np.float32)


########### Invariance ###########

def shift_image(images: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation over the last two axes with zero fill"""
    out = np.zeros_like(images)
    h, w = images.shape[-2:]
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = images[..., src_y, src_x]
    return out


def shift_offsets(radius: int) -> List[Tuple[int, int]]:
    return [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]


@dataclass
class InvarianceTargets:
    """Nearest shifted different-class training image per source"""
    images: np.ndarray
    target_index: np.ndarray
    shift_dy: np.ndarray
    shift_dx: np.ndarray


def find_invariance_targets(x: np.ndarray, y: Sequence[int], trainset: LabeledDataset,
                            shift_radius: int = 2, shortlist: int = 32,
                            block_size: int = 256) -> InvarianceTargets:
    """
    Two-stage nearest different-class search: an unshifted L2 shortlist, then
    every integer shift of each shortlisted image. Ties resolve to the earlier
    shift in row-major offset order, then the lower training index.
    """
    x = np.asarray(x, dtype=np.float32).reshape(-1, *IMAGE_SHAPE)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    train_flat = trainset.images.reshape(len(trainset), -1)
    train_sq = np.einsum('ij,ij->i', train_flat, train_flat)
    offsets = shift_offsets(shift_radius)

    n = x.shape[0]
    targets = np.empty_like(x)
    target_index = np.empty(n, dtype=np.int64)
    shift_dy = np.empty(n, dtype=np.int64)
    shift_dx = np.empty(n, dtype=np.int64)

    for start in range(0, n, block_size):
        block = x[start:start + block_size]
        labels = y[start:start + block_size]
        dist = _pairwise_sq_distances(block.reshape(len(block), -1), train_flat, train_sq)
        dist[trainset.labels[None, :] == labels[:, None]] = np.inf
        short = _k_smallest(dist, shortlist)

        for row in range(len(block)):
            i = start + row
            cand = short[row][np.isfinite(dist[row, short[row]])]
            if cand.size == 0:
                raise AttackError(f"no training sample with a label other than {int(labels[row])}")
            cand = np.sort(cand)
            images = trainset.images[cand]
            best = (np.inf, 0, 0)
            for s, (dy, dx) in enumerate(offsets):
                shifted = shift_image(images, dy, dx)
                d = ((shifted - block[row]) ** 2).reshape(len(cand), -1).sum(axis=1, dtype=np.float64)
                j = int(np.argmin(d))
                if d[j] < best[0]:
                    best = (float(d[j]), j, s)
            _, j, s = best
            dy, dx = offsets[s]
            targets[i] = shift_image(images[j], dy, dx)
            target_index[i], shift_dy[i], shift_dx[i] = cand[j], dy, dx

    return InvarianceTargets(targets, target_index, shift_dy, shift_dx)


def project_into_ball(x: np.ndarray, target: np.ndarray, epsilon: float) -> np.ndarray:
    """x + clip(target - x, -epsilon, epsilon), with pixels clipped to [0, 1]"""
    step = np.clip(target - x, -epsilon, epsilon)
    return np.clip(x + step, 0.0, 1.0).astype(np.float32)


def invariance_attack(x: np.ndarray, y: int, epsilon: float, trainset: LabeledDataset,
                      oracle: Oracle, shift_radius: int = 2, shortlist: int = 32) -> Tuple[np.ndarray, int]:
    """
    Move x towards its nearest shifted different-class training image within
    the epsilon ball. Returns (x*, oracle verdict); the example is admitted
    only when the verdict is neither y nor ABSTAIN.
    """
    x = np.asarray(x, dtype=np.float32)
    found = find_invariance_targets(x[None], [y], trainset, shift_radius, shortlist)
    x_star = project_into_ball(x.reshape(IMAGE_SHAPE), found.images[0], epsilon).reshape(x.shape)
    return x_star, oracle_label(oracle, x_star)


def is_admitted(verdict: int, label: int) -> bool:
    return verdict != ABSTAIN and verdict != label


########### Attack sets ###########

@dataclass
class AttackRecord:
    """Provenance of one perturbed image"""
    source_index: int
    label: int
    verdict: int
    kind: str
    epsilon: float
    checkpoint_hash: str = ''
    admitted: bool = True
    target_index: int = -1
    shift_dy: int = 0
    shift_dx: int = 0


@dataclass
class AttackSet:
    """Perturbed images aligned one-to-one with their records"""
    images: np.ndarray
    records: List[AttackRecord] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32).reshape(-1, *IMAGE_SHAPE)
        if len(self.records) != self.images.shape[0]:
            raise DataError(f"attack set has {self.images.shape[0]} images but {len(self.records)} records")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def kind(self) -> Optional[str]:
        return self.records[0].kind if self.records else None

    @property
    def checkpoint_hash(self) -> str:
        return self.records[0].checkpoint_hash if self.records else ''

    @property
    def source_indices(self) -> np.ndarray:
        return np.array([r.source_index for r in self.records], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def verdicts(self) -> np.ndarray:
        return np.array([r.verdict for r in self.records], dtype=np.int64)

    @property
    def admitted_mask(self) -> np.ndarray:
        return np.array([r.admitted for r in self.records], dtype=bool)

    def admitted(self) -> "AttackSet":
        """Only the records usable as adversarial examples"""
        mask = self.admitted_mask
        return AttackSet(self.images[mask], [r for r, keep in zip(self.records, mask) if keep])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=MANIFEST_COLUMNS)

    def check_bounds(self, sources: LabeledDataset, tol: float = 1e-6) -> int:
        """Number of records violating the epsilon bound or the pixel range"""
        if not self.records:
            return 0
        clean = sources.images[self.source_indices]
        eps = np.array([r.epsilon for r in self.records], dtype=np.float64)
        linf = np.abs(self.images.astype(np.float64) - clean).reshape(len(self), -1).max(axis=1)
        out_of_range = (self.images < 0).reshape(len(self), -1).any(axis=1) | (self.images > 1).reshape(len(self), -1).any(axis=1)
        return int(np.count_nonzero((linf > eps + tol) | out_of_range))


def _blocks(n: int, block_size: int) -> List[np.ndarray]:
    return [np.arange(start, min(start + block_size, n)) for start in range(0, n, block_size)]


def _run_blocks(fn: Callable[[np.ndarray], Any], n: int, cfg: AttackConfig) -> List[Any]:
    """Apply fn to index blocks, results in block order regardless of scheduling"""
    blocks = _blocks(n, cfg.block_size)
    if cfg.workers == 1 or len(blocks) <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(fn, blocks))


def build_attack_set(model: Any, dataset: LabeledDataset, cfg: AttackConfig,
                     trainset: Optional[LabeledDataset] = None,
                     oracle: Optional[Oracle] = None) -> AttackSet:
    """
    One attack per source sample, in source order.

    Sensitivity sets need a model and are stamped with its parameter hash;
    when no oracle is given their verdict is the source label (small budgets
    preserve the oracle label). Invariance sets need the training set and an
    oracle (built from the training set when not given).
    """
    n = len(dataset)
    if cfg.kind == SENSITIVITY:
        if model is None:
            raise AttackError("sensitivity attacks need a trained model")
        checkpoint_hash = model.param_hash()
        with model.frozen():
            chunks = _run_blocks(
                lambda idx: fgsm(model, dataset.images[idx], dataset.labels[idx], cfg.epsilon), n, cfg)
        if model.param_hash() != checkpoint_hash:
            raise AttackError("model parameters changed during attack generation")
        images = np.concatenate(chunks) if chunks else np.zeros((0,) + IMAGE_SHAPE, np.float32)
        verdicts = oracle.label(images) if oracle is not None else dataset.labels.copy()
        records = [
            AttackRecord(source_index=i, label=int(dataset.labels[i]), verdict=int(verdicts[i]),
                         kind=SENSITIVITY, epsilon=cfg.epsilon, checkpoint_hash=checkpoint_hash,
                         admitted=bool(verdicts[i] == dataset.labels[i]) if oracle is not None else True)
            for i in range(n)
        ]
    else:
        if trainset is None:
            raise AttackError("invariance attacks need the training set")
        oracle = oracle or Oracle.from_config(trainset, cfg)

        def invariance_block(idx: np.ndarray):
            found = find_invariance_targets(dataset.images[idx], dataset.labels[idx], trainset,
                                            cfg.shift_radius, cfg.shortlist, cfg.block_size)
            x_star = project_into_ball(dataset.images[idx], found.images, cfg.epsilon)
            return x_star, oracle.label(x_star), found

        chunks = _run_blocks(invariance_block, n, cfg)
        images = np.concatenate([c[0] for c in chunks]) if chunks else np.zeros((0,) + IMAGE_SHAPE, np.float32)
        records = []
        for idx, (_, verdicts, found) in zip(_blocks(n, cfg.block_size), chunks):
            for row, i in enumerate(idx):
                label = int(dataset.labels[i])
                records.append(AttackRecord(
                    source_index=int(i), label=label, verdict=int(verdicts[row]), kind=INVARIANCE,
                    epsilon=cfg.epsilon, admitted=is_admitted(int(verdicts[row]), label),
                    target_index=int(found.target_index[row]), shift_dy=int(found.shift_dy[row]),
                    shift_dx=int(found.shift_dx[row]),
                ))

    aset = AttackSet(images, records)
    logger.info("built %s attack set: %d records, %d admitted (eps=%.3f)",
                cfg.kind, len(aset), int(aset.admitted_mask.sum()), cfg.epsilon)
    return aset


def save_attack_set(aset: AttackSet, directory: str):
    """manifest.csv plus the images in IDX float32 layout"""
    os.makedirs(directory, exist_ok=True)
    aset.to_frame().to_csv(os.path.join(directory, MANIFEST_FILE), index=False, float_format='%.17g')
    write_idx_array(os.path.join(directory, IMAGES_FILE), aset.images, IDX_FLOAT)


def load_attack_set(directory: str) -> AttackSet:
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    images_path = os.path.join(directory, IMAGES_FILE)
    for path in (manifest_path, images_path):
        if not os.path.exists(path):
            raise DataError(f"attack set file not found: {path}")
    frame = pd.read_csv(manifest_path, dtype={'checkpoint_hash': str, 'kind': str},
                        keep_default_na=False, float_precision='round_trip')
    missing = set(MANIFEST_COLUMNS) - set(frame.columns)
    if missing:
        raise DataError(f"attack manifest {manifest_path} lacks columns {sorted(missing)}")
    images = read_idx_array(images_path, expected_magic=(IDX_FLOAT << 8) | 4).astype(np.float32)
    records = [
        AttackRecord(
            source_index=int(row.source_index), label=int(row.label), verdict=int(row.verdict),
            kind=str(row.kind), epsilon=float(row.epsilon), checkpoint_hash=str(row.checkpoint_hash),
            admitted=str(row.admitted).lower() == 'true', target_index=int(row.target_index),
            shift_dy=int(row.shift_dy), shift_dx=int(row.shift_dx),
        )
        for row in frame.itertuples(index=False)
    ]
    return AttackSet(images, records)


def attack_success_rates(model: Any, clean: LabeledDataset, sensitivity_set: Optional[AttackSet] = None,
                         invariance_set: Optional[AttackSet] = None) -> Dict[str, float]:
    """
    Definition-level success rates, in percent: FGSM examples of correctly
    classified sources that change the prediction, and admitted invariance
    examples whose prediction stays at the source prediction.
    """
    rates: Dict[str, float] = {}
    clean_pred = model.predict(clean.images)
    if sensitivity_set is not None and len(sensitivity_set):
        src = sensitivity_set.source_indices
        correct = clean_pred[src] == clean.labels[src]
        adv_pred = model.predict(sensitivity_set.images)
        flipped = adv_pred[correct] != clean_pred[src][correct]
        rates['sensitivity_success'] = 100.0 * float(flipped.mean()) if flipped.size else 0.0
    if invariance_set is not None:
        admitted = invariance_set.admitted()
        if len(admitted):
            kept = model.predict(admitted.images) == clean_pred[admitted.source_indices]
            rates['invariance_success'] = 100.0 * float(kept.mean())
        else:
            rates['invariance_success'] = 0.0
    return rates
