# src/metric_losses.py
"""
AdvMetric - Metric Learning Losses
Angular distance, triplet hinge, cross-entropy, embedding-norm penalty and
the combined adversarial metric-learning objective
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Sequence

import numpy as np

import tensor_autodiff as ad
from errors import ConfigError, DataError, ShapeError
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    """Coefficients of the combined objective"""
    lambda1: float = 1.0      # sensitivity triplet term
    lambda2: float = 1.0      # invariance triplet term
    lambda3: float = 0.001    # embedding-norm penalty
    margin: float = 0.2
    eps_div: float = 1e-8

    def __post_init__(self):
        for name in ('lambda1', 'lambda2', 'lambda3', 'margin', 'eps_div'):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ('lambda1', 'lambda2', 'lambda3', 'margin'):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"loss.{name} must be a finite non-negative number, got {value}")
        if not self.eps_div > 0:
            raise ConfigError(f"loss.eps_div must be positive, got {self.eps_div}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class LossBreakdown:
    """Scalar components of one evaluation of the combined objective"""
    l_ce: float
    l_t_sa: float
    l_t_ia: float
    l_norm: float
    l_all: float
    total: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def to_log(self) -> Dict[str, float]:
        return {
            'L_ce': self.l_ce,
            'L_t_sa': self.l_t_sa,
            'L_t_ia': self.l_t_ia,
            'L_norm': self.l_norm,
            'L_all': self.l_all,
        }

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.to_log().values())


def angular_distance(u: Any, v: Any, eps_div: float = 1e-8) -> Tensor:
    """
    D(u, v) = 1 - |u.v| / (||u|| ||v|| + eps_div), row-wise over the last axis.

    Antipodal vectors are at distance 0 because of the absolute value.
    """
    u, v = ad.as_tensor(u), ad.as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError("angular_distance", u.shape, v.shape)
    dot = ad.sum(ad.mul(u, v), axis=-1)
    denom = ad.add(ad.mul(ad.l2norm(u, axis=-1), ad.l2norm(v, axis=-1)), eps_div)
    # clamp float rounding just below zero
    return ad.relu(ad.sub(1.0, ad.div(ad.abs(dot), denom)))


def triplet_hinge(d_ap: Any, d_an: Any, margin: float) -> Tensor:
    """max(d_ap - d_an + margin, 0), elementwise"""
    return ad.relu(ad.add(ad.sub(d_ap, d_an), margin))


def triplet_loss(anchor: Any, positive: Any, negative: Any, margin: float = 0.2,
                 eps_div: float = 1e-8) -> Tensor:
    """Batch-mean triplet hinge on angular distances; 1-D inputs are a single triplet"""
    anchor, positive, negative = ad.as_tensor(anchor), ad.as_tensor(positive), ad.as_tensor(negative)
    if not anchor.shape == positive.shape == negative.shape:
        raise ShapeError("triplet_loss", anchor.shape, positive.shape, negative.shape)
    hinge = triplet_hinge(angular_distance(anchor, positive, eps_div),
                          angular_distance(anchor, negative, eps_div), margin)
    return hinge if hinge.ndim == 0 else ad.mean(hinge)


def cross_entropy(logits: Any, labels: Any, reduction: str = 'mean') -> Tensor:
    """-log softmax(logits)[label] with max-subtraction; reduction is 'mean' or 'sum'"""
    logits = ad.as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, -1))
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(f"labels must lie in 0..{logits.shape[1] - 1}")
    one_hot = np.zeros(logits.shape, dtype=np.float32)
    one_hot[np.arange(labels.shape[0]), labels] = 1.0
    nll = ad.neg(ad.sum(ad.mul(ad.log_softmax(logits), one_hot), axis=1))
    if reduction == 'mean':
        return ad.mean(nll)
    if reduction == 'sum':
        return ad.sum(nll)
    raise ConfigError(f"unknown reduction '{reduction}'")


def norm_penalty(*embeddings: Any) -> Tensor:
    """Batch mean of the summed row L2 norms of equally shaped embedding batches"""
    tensors = [ad.as_tensor(e) for e in embeddings]
    if not tensors:
        raise DataError("norm_penalty needs at least one embedding batch")
    if any(t.shape != tensors[0].shape for t in tensors):
        raise ShapeError("norm_penalty", *(t.shape for t in tensors))
    if tensors[0].ndim == 1:
        tensors = [ad.reshape(t, (1, -1)) for t in tensors]
    total = ad.l2norm(tensors[0], axis=1)
    for t in tensors[1:]:
        total = ad.add(total, ad.l2norm(t, axis=1))
    return ad.mean(total)


def combined_loss(h_a: Tensor, logits_a: Tensor, labels: Sequence[int], cfg: LossConfig,
                  h_p_sa: Optional[Tensor] = None, h_p_ia: Optional[Tensor] = None,
                  h_n: Optional[Tensor] = None, invariance_rows: Optional[Sequence[int]] = None,
                  adversarial_logits: Optional[Tensor] = None) -> LossBreakdown:
    """
    L_all = L_ce + lambda1 * L_t,sa + lambda2 * L_t,ia + lambda3 * L_norm over one batch.

    ``h_p_ia`` holds invariance positives only for ``invariance_rows``; the
    invariance term sums their hinges and divides by the full batch size, so
    rows without a positive contribute zero. A term whose coefficient is zero
    is not evaluated and is reported as 0. When ``adversarial_logits`` is
    given, L_ce is the equal-weight mean of clean and adversarial
    cross-entropy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    batch = labels.shape[0]
    if h_a.ndim != 2 or h_a.shape[0] != batch or logits_a.shape[0] != batch:
        raise ShapeError("combined_loss", h_a.shape, logits_a.shape, labels.shape, detail="misaligned batch sizes")
    for name, other in (('sensitivity positives', h_p_sa), ('negatives', h_n)):
        if other is not None and other.shape != h_a.shape:
            raise ShapeError("combined_loss", h_a.shape, other.shape, detail=f"misaligned {name}")
    if adversarial_logits is not None and adversarial_logits.shape != logits_a.shape:
        raise ShapeError("combined_loss", logits_a.shape, adversarial_logits.shape, detail="misaligned adversarial logits")

    ce = cross_entropy(logits_a, labels)
    if adversarial_logits is not None:
        ce = ad.mul(ad.add(ce, cross_entropy(adversarial_logits, labels)), 0.5)
    total = ce
    zero = Tensor(np.float32(0.0))
    t_sa = t_ia = norm = zero

    if cfg.lambda1 > 0 and h_p_sa is not None:
        if h_n is None:
            raise DataError("the sensitivity triplet term needs negatives")
        t_sa = triplet_loss(h_a, h_p_sa, h_n, cfg.margin, cfg.eps_div)
        total = ad.add(total, ad.mul(t_sa, cfg.lambda1))

    rows = np.asarray(invariance_rows if invariance_rows is not None else [], dtype=np.int64)
    use_invariance = cfg.lambda2 > 0 and h_p_ia is not None and rows.size > 0
    if use_invariance:
        if h_n is None:
            raise DataError("the invariance triplet term needs negatives")
        if h_p_ia.shape != (rows.size, h_a.shape[1]):
            raise ShapeError("combined_loss", h_p_ia.shape, (rows.size, h_a.shape[1]),
                             detail="invariance positives must align with invariance_rows")
        a_rows = ad.index_rows(h_a, rows)
        hinge = triplet_hinge(angular_distance(a_rows, h_p_ia, cfg.eps_div),
                              angular_distance(a_rows, ad.index_rows(h_n, rows), cfg.eps_div), cfg.margin)
        t_ia = ad.div(ad.sum(hinge), float(batch))
        total = ad.add(total, ad.mul(t_ia, cfg.lambda2))

    if cfg.lambda3 > 0:
        streams = [h for h in (h_a, h_p_sa, h_n) if h is not None]
        norm = norm_penalty(*streams)
        if use_invariance:
            norm = ad.add(norm, ad.div(ad.sum(ad.l2norm(h_p_ia, axis=1)), float(batch)))
        total = ad.add(total, ad.mul(norm, cfg.lambda3))

    return LossBreakdown(
        l_ce=ce.item(),
        l_t_sa=t_sa.item(),
        l_t_ia=t_ia.item(),
        l_norm=norm.item(),
        l_all=total.item(),
        total=total,
    )
