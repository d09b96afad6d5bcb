# src/eval_analytics.py
"""
AdvMetric - Evaluation and Embedding Analytics
Clean / sensitivity / invariance accuracy, PCA of penultimate embeddings,
cluster dispersion, and the report CSV format
"""

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Hashable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from attacks import AttackSet
from errors import CheckpointError, DataError, ShapeError
from mnist_data import LabeledDataset

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ['model', 'seed', 'clean_acc', 'fgsm_acc', 'inv_acc', 'inv_admitted', 'config_hash']
PCA_COLUMNS = ['pc1', 'pc2', 'label', 'kind']
MEAN_SEED = 'mean'

REPORT_HEADER = (
    "baseline: FGSM adversarial training on a 50/50 mixture of clean and FGSM cross-entropy",
    "inv_acc: scored against oracle labels over admitted invariance examples only",
    "accuracies in percent; seed=mean rows average the seeded rows of each model",
)


@dataclass
class RunReport:
    """Accuracy triple of one trained model (or the mean over seeds)"""
    model: str
    seed: Union[int, str]
    clean_acc: float
    fgsm_acc: float
    inv_acc: float
    inv_admitted: int
    config_hash: str = ''

    def __post_init__(self):
        for name in ('clean_acc', 'fgsm_acc', 'inv_acc'):
            value = float(getattr(self, name))
            if not math.isnan(value) and not 0.0 <= value <= 100.0:
                raise DataError(f"{name} must lie in [0, 100], got {value}")
            setattr(self, name, value)
        self.inv_admitted = int(self.inv_admitted)
        if self.inv_admitted < 0:
            raise DataError(f"inv_admitted must be non-negative, got {self.inv_admitted}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _accuracy(predictions: np.ndarray, targets: np.ndarray) -> float:
    if targets.size == 0:
        return float('nan')
    return 100.0 * float(np.mean(predictions == targets))


def evaluate(model: Any, clean: LabeledDataset, sensitivity_set: AttackSet, invariance_set: AttackSet,
             kind: str = '', seed: Union[int, str] = 0, config_hash: str = '') -> RunReport:
    """
    Clean and FGSM accuracy are scored against the source label; invariance
    accuracy against the oracle label over admitted examples only.
    """
    model_hash = model.param_hash()
    if len(sensitivity_set) and sensitivity_set.checkpoint_hash != model_hash:
        raise CheckpointError(
            f"sensitivity set was generated against checkpoint {sensitivity_set.checkpoint_hash}, "
            f"but the model under evaluation is {model_hash}"
        )
    admitted = invariance_set.admitted()
    if len(admitted) > len(invariance_set):
        raise DataError("admitted invariance count exceeds the number of sources")

    report = RunReport(
        model=kind,
        seed=seed,
        clean_acc=_accuracy(model.predict(clean.images), clean.labels),
        fgsm_acc=_accuracy(model.predict(sensitivity_set.images), sensitivity_set.labels),
        inv_acc=_accuracy(model.predict(admitted.images), admitted.verdicts),
        inv_admitted=len(admitted),
        config_hash=config_hash,
    )
    logger.info("%s seed %s: clean %.2f, fgsm %.2f, invariance %.2f (%d admitted)",
                kind, seed, report.clean_acc, report.fgsm_acc, report.inv_acc, report.inv_admitted)
    return report


########### PCA ###########

@dataclass
class PcaProjection:
    """Scores of points on the leading principal components, with per-point tags"""
    scores: np.ndarray                 # (N, k)
    explained_variance_ratio: np.ndarray
    components: np.ndarray             # (k, d), orthonormal rows
    mean: np.ndarray                   # (d,)
    labels: Optional[np.ndarray] = None
    kinds: Optional[np.ndarray] = None

    def transform(self, embeddings: np.ndarray) -> np.ndarray:
        return (np.asarray(embeddings, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, scores: np.ndarray) -> np.ndarray:
        return np.asarray(scores, dtype=np.float64) @ self.components + self.mean


def _orthogonalize(v: np.ndarray, basis: Sequence[np.ndarray]) -> np.ndarray:
    # two Gram-Schmidt passes
    for _ in range(2):
        for b in basis:
            v = v - (v @ b) * b
    return v


def _fill_direction(dim: int, basis: Sequence[np.ndarray]) -> np.ndarray:
    """First standard basis vector not spanned by the existing components"""
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = 1.0
        v = _orthogonalize(e, basis)
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            return v / norm
    raise ShapeError("pca_project", (dim,), detail="no direction left to fill")


def pca_project(embeddings: np.ndarray, k: int = 2, labels: Optional[Sequence[int]] = None,
                kinds: Optional[Sequence[str]] = None, tol: float = 1e-10,
                max_iter: int = 10_000) -> PcaProjection:
    """
    Top-k principal components by power iteration with deflation.

    Each component has its largest-magnitude coordinate positive. Directions
    with zero variance are filled from the standard basis, so degenerate input
    still yields an orthonormal basis with zero variance ratios.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < k or x.shape[1] < k:
        raise ShapeError("pca_project", x.shape, detail=f"need at least {k} samples and {k} dimensions")
    n, d = x.shape
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / max(n - 1, 1)
    total_variance = float(np.trace(cov))

    deflated = cov.copy()
    start = np.random.default_rng(0).standard_normal(d)
    components: List[np.ndarray] = []
    eigenvalues: List[float] = []
    scale = max(total_variance, 1e-300)
    for _ in range(k):
        v = _orthogonalize(start, components)
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = _orthogonalize(deflated @ v, components)
            norm = np.linalg.norm(w)
            if norm <= 1e-12 * scale:
                v = None
                break
            w /= norm
            if w @ v < 0:
                w = -w
            converged = np.linalg.norm(w - v) < tol
            v = w
            if converged:
                break
        if v is None:
            v = _fill_direction(d, components)
        eigenvalue = max(float(v @ cov @ v), 0.0)
        deflated -= eigenvalue * np.outer(v, v)
        top = int(np.argmax(np.abs(v)))
        if v[top] < 0:
            v = -v
        components.append(v)
        eigenvalues.append(eigenvalue)

    components_arr = np.array(components)
    ratios = np.array(eigenvalues) / total_variance if total_variance > 0 else np.zeros(k)
    order = np.argsort(-ratios, kind='stable')
    components_arr, ratios = components_arr[order], ratios[order]
    return PcaProjection(
        scores=centered @ components_arr.T,
        explained_variance_ratio=ratios,
        components=components_arr,
        mean=mean,
        labels=None if labels is None else np.asarray(labels),
        kinds=None if kinds is None else np.asarray(kinds),
    )


def cluster_dispersion(projection: Union[PcaProjection, np.ndarray], tags: Sequence[Hashable],
                       normalize: bool = False) -> Dict[Hashable, float]:
    """
    Mean Euclidean distance to the group centroid, per tag.

    With ``normalize`` the result is divided by the RMS radius of all points
    about their overall centroid, so values from different models compare.
    """
    points = projection.scores if isinstance(projection, PcaProjection) else np.asarray(projection, dtype=np.float64)
    tags = list(tags)
    if len(tags) != points.shape[0]:
        raise ShapeError("cluster_dispersion", points.shape, (len(tags),))
    scale = 1.0
    if normalize:
        radius = float(np.sqrt(np.mean(np.sum((points - points.mean(axis=0)) ** 2, axis=1))))
        scale = radius if radius > 0 else 1.0
    groups: Dict[Hashable, List[int]] = {}
    for i, tag in enumerate(tags):
        groups.setdefault(tag, []).append(i)
    result = {}
    for tag, members in groups.items():
        group = points[members]
        result[tag] = float(np.mean(np.linalg.norm(group - group.mean(axis=0), axis=1))) / scale
    return result


########### Report files ###########

def aggregate_reports(reports: Sequence[RunReport]) -> List[RunReport]:
    """One seed=mean row per model, in order of first appearance"""
    by_model: Dict[str, List[RunReport]] = {}
    for r in reports:
        if r.seed != MEAN_SEED:
            by_model.setdefault(r.model, []).append(r)
    means = []
    for model, rows in by_model.items():
        hashes = sorted({r.config_hash for r in rows})
        means.append(RunReport(
            model=model,
            seed=MEAN_SEED,
            clean_acc=float(np.mean([r.clean_acc for r in rows])),
            fgsm_acc=float(np.mean([r.fgsm_acc for r in rows])),
            inv_acc=float(np.mean([r.inv_acc for r in rows])),
            inv_admitted=int(round(float(np.mean([r.inv_admitted for r in rows])))),
            config_hash=hashes[0] if len(hashes) == 1 else '+'.join(hashes),
        ))
    return means


def emit_report(reports: Sequence[RunReport], path: str, header: Sequence[str] = REPORT_HEADER):
    """CSV with '#' header lines; floats are written with full precision"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame = pd.DataFrame([r.to_dict() for r in reports], columns=REPORT_COLUMNS)
    with open(path, 'w') as f:
        for line in header:
            f.write(f"# {line}\n")
        frame.to_csv(f, index=False, float_format='%.17g', na_rep='nan')
    logger.info("wrote report %s (%d rows)", path, len(frame))


def load_report(path: str) -> List[RunReport]:
    if not os.path.exists(path):
        raise DataError(f"report not found: {path}")
    frame = pd.read_csv(path, comment='#', dtype={'model': str, 'seed': str, 'config_hash': str},
                        keep_default_na=False, float_precision='round_trip')
    missing = set(REPORT_COLUMNS) - set(frame.columns)
    if missing:
        raise DataError(f"report {path} lacks columns {sorted(missing)}")
    return [
        RunReport(
            model=row.model,
            seed=row.seed if row.seed == MEAN_SEED else int(row.seed),
            clean_acc=float(row.clean_acc),
            fgsm_acc=float(row.fgsm_acc),
            inv_acc=float(row.inv_acc),
            inv_admitted=int(row.inv_admitted),
            config_hash=row.config_hash,
        )
        for row in frame.itertuples(index=False)
    ]


def emit_pca_csv(projection: PcaProjection, path: str):
    n = projection.scores.shape[0]
    frame = pd.DataFrame({
        'pc1': projection.scores[:, 0],
        'pc2': projection.scores[:, 1] if projection.scores.shape[1] > 1 else np.zeros(n),
        'label': projection.labels if projection.labels is not None else np.full(n, -1),
        'kind': projection.kinds if projection.kinds is not None else np.full(n, 'clean'),
    }, columns=PCA_COLUMNS)
    frame.to_csv(path, index=False, float_format='%.17g')
