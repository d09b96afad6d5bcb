# src/trainer.py
"""
AdvMetric - Training Orchestration
Seeded training runs for the baseline, +MLS and +MLS+MLI configurations, and
the three-configuration accuracy comparison
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

import tensor_autodiff as ad
from artifact_cache import ArtifactCache, cached_invariance_set
from attacks import AttackSet, Oracle, build_attack_set, fgsm
from classifier_model import ClassifierModel, SGDMomentum, save_checkpoint
from errors import DataError, NumericalFailure
from eval_analytics import (PcaProjection, RunReport, aggregate_reports, cluster_dispersion, emit_report,
                            evaluate, pca_project)
from metric_losses import LossBreakdown, combined_loss
from mnist_data import LabeledDataset, batch_indices, sample_negatives
from report_plots import emit_pca_comparison
from run_config import CONFIG_KINDS, TrainConfig
from run_manifest import SEED_STREAMS, derive_rng, stable_hash
from training_monitor import TrainingMonitor

logger = logging.getLogger(__name__)


def run_dir_name(kind: str) -> str:
    return kind.replace('+', '_')


@dataclass
class TripletBatch:
    """Aligned anchors, positives and negatives for one optimisation step"""
    anchors: np.ndarray
    labels: np.ndarray
    sensitivity_positives: Optional[np.ndarray] = None
    invariance_positives: Optional[np.ndarray] = None
    invariance_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    negatives: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.labels)
        for name in ('anchors', 'sensitivity_positives', 'negatives'):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise DataError(f"{name} has {len(value)} rows, expected {n}")
        rows = 0 if self.invariance_positives is None else len(self.invariance_positives)
        if rows != len(self.invariance_rows):
            raise DataError(f"{rows} invariance positives for {len(self.invariance_rows)} rows")


@dataclass
class TrainResult:
    """Outcome of one (configuration, seed) run"""
    kind: str
    seed: int
    model: ClassifierModel
    checkpoint_path: Optional[str]
    log_path: Optional[str]
    config_hash: str
    steps: List[Dict[str, float]] = field(default_factory=list)
    epochs: List[Dict[str, Any]] = field(default_factory=list)


def invariance_lookup(invariance_set: AttackSet, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """(row of each source's admitted example or -1, admitted images)"""
    admitted = invariance_set.admitted()
    lookup = np.full(n, -1, dtype=np.int64)
    src = admitted.source_indices
    if src.size and src.max() >= n:
        raise DataError(f"invariance set refers to source {int(src.max())} beyond the {n} training samples")
    lookup[src] = np.arange(src.size)
    return lookup, admitted.images


def _split_rows(tensor: ad.Tensor, sizes: List[int]) -> List[ad.Tensor]:
    parts, start = [], 0
    for size in sizes:
        parts.append(ad.index_rows(tensor, np.arange(start, start + size)))
        start += size
    return parts


def training_step(model: ClassifierModel, batch: TripletBatch, cfg: TrainConfig) -> LossBreakdown:
    """Forward every stream through the model once and evaluate the combined objective"""
    streams = [batch.anchors]
    for extra in (batch.sensitivity_positives, batch.negatives, batch.invariance_positives):
        if extra is not None:
            streams.append(extra)
    embeddings, logits = model(np.concatenate(streams))
    sizes = [len(s) for s in streams]
    emb_parts = _split_rows(embeddings, sizes)
    logit_parts = _split_rows(logits, sizes)

    h_a, logits_a = emb_parts[0], logit_parts[0]
    pos = 1
    h_p_sa = adversarial_logits = h_n = h_p_ia = None
    if batch.sensitivity_positives is not None:
        h_p_sa, adversarial_logits = emb_parts[pos], logit_parts[pos]
        pos += 1
    if batch.negatives is not None:
        h_n = emb_parts[pos]
        pos += 1
    if batch.invariance_positives is not None:
        h_p_ia = emb_parts[pos]

    mix = cfg.kind == 'baseline' or cfg.mix_adversarial_ce
    return combined_loss(
        h_a, logits_a, batch.labels, cfg.effective_loss,
        h_p_sa=h_p_sa if cfg.effective_loss.lambda1 > 0 else None,
        h_p_ia=h_p_ia,
        h_n=h_n,
        invariance_rows=batch.invariance_rows,
        adversarial_logits=adversarial_logits if mix else None,
    )


def train_run(cfg: TrainConfig, trainset: LabeledDataset, seed: int,
              invariance_set: Optional[AttackSet] = None, out_dir: Optional[str] = None) -> TrainResult:
    """
    Train one model. Each step draws anchors, builds FGSM positives against
    the live model, fetches admitted invariance positives by source index,
    draws negatives, and takes one SGD step on the combined objective.
    """
    loss_cfg = cfg.effective_loss
    use_invariance = cfg.needs_invariance
    if use_invariance and invariance_set is None:
        raise DataError(f"configuration '{cfg.kind}' needs a precomputed invariance set")
    use_sensitivity = loss_cfg.lambda1 > 0 or cfg.kind == 'baseline' or cfg.mix_adversarial_ce
    use_negatives = loss_cfg.lambda1 > 0 or use_invariance

    config_hash = stable_hash(cfg.to_dict())
    model = ClassifierModel.initialize(derive_rng(seed, 'init'), seed=seed)
    model.config_hash = config_hash
    optimizer = SGDMomentum(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    negative_rng = derive_rng(seed, 'negatives')
    shuffle_seed = [seed, SEED_STREAMS['shuffle']]
    if use_invariance:
        lookup, inv_images = invariance_lookup(invariance_set, len(trainset))

    log_path = checkpoint_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, f'train_log_seed{seed}.jsonl')
        checkpoint_path = os.path.join(out_dir, f'checkpoint_seed{seed}.ckpt')
    steps_per_epoch = -(-len(trainset) // cfg.batch_size)
    monitor = TrainingMonitor(log_path)
    monitor.start_session(f'{cfg.kind}-seed{seed}', total_steps=steps_per_epoch * cfg.epochs)

    try:
        step = 0
        for epoch in range(cfg.epochs):
            for idx in batch_indices(len(trainset), cfg.batch_size, shuffle_seed, epoch):
                x, y = trainset.images[idx], trainset.labels[idx]
                fields: Dict[str, Any] = {}
                if use_sensitivity:
                    fields["sensitivity_positives"] = fgsm(model, x, y, cfg.sensitivity.epsilon)
                if use_negatives:
                    fields["negatives"], _ = sample_negatives(trainset, y, negative_rng)
                if use_invariance:
                    rows = np.flatnonzero(lookup[idx] >= 0)
                    if rows.size:
                        fields["invariance_rows"] = rows
                        fields["invariance_positives"] = inv_images[lookup[idx[rows]]]
                batch = TripletBatch(anchors=x, labels=y, **fields)

                with ad.tape_scope():
                    breakdown = training_step(model, batch, cfg)
                    if not breakdown.is_finite():
                        raise NumericalFailure(
                            f"non-finite loss at epoch {epoch}, step {step}",
                            diagnostics={'epoch': epoch, 'step': step, 'kind': cfg.kind, 'seed': seed,
                                         **breakdown.to_log()},
                        )
                    optimizer.zero_grad()
                    ad.backward(breakdown.total)
                    optimizer.step()
                monitor.record_step(epoch, step, breakdown)
                step += 1
            monitor.end_epoch(epoch)
    finally:
        session = monitor.end_session()

    analytics = monitor.get_session_analytics(session)
    if out_dir:
        save_checkpoint(model, checkpoint_path)
        with open(os.path.join(out_dir, f'epochs_seed{seed}.json'), 'w') as f:
            json.dump(analytics, f, indent=2, default=str)
    return TrainResult(
        kind=cfg.kind, seed=seed, model=model, checkpoint_path=checkpoint_path, log_path=log_path,
        config_hash=config_hash,
        steps=[asdict(r) for r in session.steps],
        epochs=analytics['epochs'],
    )


def train(cfg: TrainConfig, trainset: LabeledDataset, invariance_set: Optional[AttackSet] = None,
          out_dir: Optional[str] = None) -> Dict[int, TrainResult]:
    """One run per configured seed"""
    return {seed: train_run(cfg, trainset, seed, invariance_set, out_dir) for seed in cfg.seeds}


########### Three-configuration comparison ###########

@dataclass
class Table1Job:
    """Everything a worker process needs for one (configuration, seed) cell"""
    cfg: TrainConfig
    seed: int
    trainset: LabeledDataset
    testset: LabeledDataset
    train_invariance: Optional[AttackSet]
    test_invariance: AttackSet
    out_dir: str


@dataclass
class Table1Cell:
    report: RunReport
    dispersion: Dict[str, float]
    projection: PcaProjection


def embedding_geometry(model: ClassifierModel, testset: LabeledDataset, sensitivity_set: AttackSet,
                       invariance_set: AttackSet) -> Tuple[PcaProjection, Dict[str, float]]:
    """
    Joint PCA of clean, FGSM and admitted invariance test embeddings, and the
    scale-normalised per-class dispersion of each point kind
    """
    admitted = invariance_set.admitted()
    images = np.concatenate([testset.images, sensitivity_set.images, admitted.images])
    labels = np.concatenate([testset.labels, sensitivity_set.labels, admitted.verdicts])
    kinds = np.array(['clean'] * len(testset) + ['sensitivity'] * len(sensitivity_set)
                     + ['invariance'] * len(admitted))
    projection = pca_project(model.embed(images), k=2, labels=labels, kinds=kinds)
    per_group = cluster_dispersion(projection, list(zip(kinds, labels.tolist())), normalize=True)
    dispersion = {}
    for kind in ('clean', 'sensitivity', 'invariance'):
        values = [v for (k, _), v in per_group.items() if k == kind]
        dispersion[kind] = float(np.mean(values)) if values else float('nan')
    return projection, dispersion


def run_table1_job(job: Table1Job) -> Table1Cell:
    cfg = job.cfg
    result = train_run(cfg, job.trainset, job.seed, job.train_invariance, job.out_dir)
    sensitivity_set = build_attack_set(result.model, job.testset, cfg.sensitivity)
    report = evaluate(result.model, job.testset, sensitivity_set, job.test_invariance,
                      kind=cfg.kind, seed=job.seed, config_hash=result.config_hash)
    projection, dispersion = embedding_geometry(result.model, job.testset, sensitivity_set, job.test_invariance)
    return Table1Cell(report, dispersion, projection)


def run_table1(cfg: TrainConfig, trainset: LabeledDataset, testset: LabeledDataset, out_dir: str,
               jobs: int = 1, cache: Optional[ArtifactCache] = None) -> List[RunReport]:
    """
    Train and evaluate every configuration for every seed, then write
    table1.csv (seeded rows plus per-configuration means), dispersion.csv, and
    the side-by-side PCA figure of the two metric-learning models.
    """
    os.makedirs(out_dir, exist_ok=True)
    oracle = Oracle.from_config(trainset, cfg.invariance)
    test_invariance = cached_invariance_set(cache, testset, trainset, cfg.invariance, oracle)
    train_invariance = None
    if any(cfg.with_kind(kind).needs_invariance for kind in CONFIG_KINDS):
        train_invariance = cached_invariance_set(cache, trainset, trainset, cfg.invariance, oracle)

    work = [
        Table1Job(cfg.with_kind(kind), seed, trainset, testset,
                  train_invariance if cfg.with_kind(kind).needs_invariance else None,
                  test_invariance, os.path.join(out_dir, run_dir_name(kind)))
        for kind in CONFIG_KINDS for seed in cfg.seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(run_table1_job, work))
    else:
        cells = [run_table1_job(job) for job in work]

    reports = [c.report for c in cells]
    emit_report(reports + aggregate_reports(reports), os.path.join(out_dir, 'table1.csv'))
    _write_dispersion(cells, os.path.join(out_dir, 'dispersion.csv'))

    first_seed = cfg.seeds[0]
    panels = {c.report.model: c.projection for c in cells
              if c.report.seed == first_seed and c.report.model in ('mls', 'mls+mli')}
    if panels:
        emit_pca_comparison(panels, os.path.join(out_dir, f'pca_comparison_seed{first_seed}.svg'))
    return reports


def _write_dispersion(cells: List[Table1Cell], path: str):
    rows = [{'model': c.report.model, 'seed': c.report.seed,
             'clean_dispersion': c.dispersion['clean'],
             'fgsm_dispersion': c.dispersion['sensitivity'],
             'inv_dispersion': c.dispersion['invariance']} for c in cells]
    pd.DataFrame(rows).to_csv(path, index=False, float_format='%.17g')
    logger.info("wrote embedding dispersion %s", path)
