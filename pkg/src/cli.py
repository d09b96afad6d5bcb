# src/cli.py
"""
AdvMetric - Command Line Entry Point
train / attack / eval / pca / table1 subcommands with reproducible manifests
"""

import argparse
import logging
import os
import sys
from typing import List, Optional, Tuple

from dotenv import load_dotenv

from artifact_cache import ArtifactCache, cached_invariance_set
from attacks import ATTACK_KINDS, SENSITIVITY, Oracle, build_attack_set, load_attack_set, save_attack_set
from classifier_model import load_checkpoint
from errors import AdvMetricError, ConfigError, DataError, NumericalFailure
from eval_analytics import aggregate_reports, emit_pca_csv, emit_report, evaluate
from mnist_data import LabeledDataset, load_mnist, subset
from report_plots import emit_pca_plot
from run_config import CONFIG_KINDS, RunConfigManager, TrainConfig, dump_config
from run_manifest import RunManifest, file_hash, stable_hash
from synthetic_digits import make_dataset
from trainer import embedding_geometry, run_dir_name, run_table1, train
from training_monitor import loss_trend, read_step_log

load_dotenv()

logger = logging.getLogger("advmetric")

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
SYNTHETIC_SIZES = {'train': 2000, 'test': 500}


########### Shared plumbing ###########

def load_config(args: argparse.Namespace) -> TrainConfig:
    if args.config:
        cfg = RunConfigManager.load(args.config, out_dir=args.out)
    else:
        cfg = RunConfigManager.get_preset(args.preset, out_dir=args.out)
    if getattr(args, 'kind', None) in CONFIG_KINDS:
        cfg = cfg.with_kind(args.kind)
    if getattr(args, 'seed', None) is not None:
        cfg.seeds = [args.seed]
    return cfg


def load_split(args: argparse.Namespace, cfg: TrainConfig, split: str) -> LabeledDataset:
    limit = cfg.train_limit if split == 'train' else cfg.test_limit
    if args.synthetic:
        ds = make_dataset(limit or SYNTHETIC_SIZES[split], seed=0 if split == 'train' else 1, split=split)
    elif args.data_dir:
        ds = load_mnist(args.data_dir, split)
    else:
        raise DataError("no MNIST directory: pass --data-dir or set ADVMETRIC_DATA_DIR (or use --synthetic)")
    return subset(ds, limit)


def write_manifest(args: argparse.Namespace, cfg: TrainConfig, artifacts: dict, argv: List[str]) -> RunManifest:
    """Recorded before any long computation, next to a config.cfg that reloads to the effective config"""
    manifest = RunManifest.for_command(args.command, cfg.to_dict(), cfg.seeds, argv)
    if args.config:
        manifest.config_hash = file_hash(args.config)
    os.makedirs(args.out, exist_ok=True)
    config_path = os.path.join(args.out, 'config.cfg')
    dump_config(cfg, config_path)
    artifacts = {**artifacts, 'config': config_path}
    manifest.artifacts = {name: os.path.abspath(path) for name, path in artifacts.items()}
    manifest.write(args.out)
    return manifest


def open_cache(args: argparse.Namespace) -> Optional[ArtifactCache]:
    if getattr(args, 'no_cache', False):
        return None
    return ArtifactCache(args.cache_dir)


def _load_sets(args: argparse.Namespace) -> Tuple:
    if not args.sensitivity_set:
        raise DataError("--sensitivity-set is required")
    sensitivity = load_attack_set(args.sensitivity_set)
    invariance = load_attack_set(args.invariance_set) if args.invariance_set else None
    return sensitivity, invariance


########### Commands ###########

def cmd_train(args: argparse.Namespace, argv: List[str]) -> int:
    cfg = load_config(args)
    run_dir = os.path.join(args.out, run_dir_name(cfg.kind))
    write_manifest(args, cfg, {'run_dir': run_dir}, argv)
    trainset = load_split(args, cfg, 'train')

    invariance_set = None
    if cfg.needs_invariance:
        if args.invariance_set:
            invariance_set = load_attack_set(args.invariance_set)
        else:
            invariance_set = cached_invariance_set(open_cache(args), trainset, trainset, cfg.invariance)
    results = train(cfg, trainset, invariance_set, out_dir=run_dir)
    for seed, result in results.items():
        records = read_step_log(result.log_path)
        trend = loss_trend([r.L_all for r in records])
        print(f"{cfg.kind} seed {seed}: checkpoint {result.checkpoint_path} ({result.model.param_hash()[:12]}), "
              f"{len(records)} steps, final L_all {records[-1].L_all:.4f} ({trend})")
    return 0


def cmd_attack(args: argparse.Namespace, argv: List[str]) -> int:
    cfg = load_config(args)
    attack_cfg = cfg.sensitivity if args.attack_kind == SENSITIVITY else cfg.invariance
    if args.epsilon is not None:
        attack_cfg = type(attack_cfg)(**{**attack_cfg.to_dict(), 'epsilon': args.epsilon})
    target_dir = os.path.join(args.out, f'{args.attack_kind}_{args.split}')
    write_manifest(args, cfg, {'attack_set': target_dir}, argv)

    dataset = load_split(args, cfg, args.split)
    if args.attack_kind == SENSITIVITY:
        if not args.checkpoint:
            raise DataError("sensitivity attacks need --checkpoint")
        aset = build_attack_set(load_checkpoint(args.checkpoint), dataset, attack_cfg)
    else:
        trainset = load_split(args, cfg, 'train')
        aset = cached_invariance_set(open_cache(args), dataset, trainset, attack_cfg,
                                     Oracle.from_config(trainset, attack_cfg))
    save_attack_set(aset, target_dir)
    print(f"{args.attack_kind} attack set: {len(aset)} records, {int(aset.admitted_mask.sum())} admitted -> {target_dir}")
    return 0


def cmd_eval(args: argparse.Namespace, argv: List[str]) -> int:
    cfg = load_config(args)
    report_path = os.path.join(args.out, 'report.csv')
    write_manifest(args, cfg, {'report': report_path}, argv)
    if not args.checkpoint:
        raise DataError("eval needs --checkpoint")
    model = load_checkpoint(args.checkpoint)
    sensitivity, invariance = _load_sets(args)
    if invariance is None:
        raise DataError("eval needs --invariance-set")
    testset = load_split(args, cfg, 'test')
    report = evaluate(model, testset, sensitivity, invariance, kind=cfg.kind,
                      seed=model.seed if model.seed is not None else cfg.seeds[0],
                      config_hash=model.config_hash or stable_hash(cfg.to_dict()))
    emit_report([report] + aggregate_reports([report]), report_path)
    print(f"clean {report.clean_acc:.2f}  fgsm {report.fgsm_acc:.2f}  invariance {report.inv_acc:.2f} "
          f"({report.inv_admitted} admitted) -> {report_path}")
    return 0


def cmd_pca(args: argparse.Namespace, argv: List[str]) -> int:
    cfg = load_config(args)
    csv_path, svg_path = os.path.join(args.out, 'pca.csv'), os.path.join(args.out, 'pca.svg')
    write_manifest(args, cfg, {'pca_csv': csv_path, 'pca_svg': svg_path}, argv)
    if not args.checkpoint:
        raise DataError("pca needs --checkpoint")
    model = load_checkpoint(args.checkpoint)
    testset = load_split(args, cfg, 'test')
    if args.sensitivity_set:
        sensitivity = load_attack_set(args.sensitivity_set)
    else:
        sensitivity = build_attack_set(model, testset, cfg.sensitivity)
    if args.invariance_set:
        invariance = load_attack_set(args.invariance_set)
    else:
        trainset = load_split(args, cfg, 'train')
        invariance = cached_invariance_set(open_cache(args), testset, trainset, cfg.invariance)
    projection, dispersion = embedding_geometry(model, testset, sensitivity, invariance)
    emit_pca_csv(projection, csv_path)
    emit_pca_plot(projection, svg_path, title=f"Penultimate embedding: {cfg.kind}")
    print(f"explained variance {projection.explained_variance_ratio.round(4).tolist()}, "
          f"dispersion {dispersion} -> {csv_path}, {svg_path}")
    return 0


def cmd_table1(args: argparse.Namespace, argv: List[str]) -> int:
    cfg = load_config(args)
    write_manifest(args, cfg, {'table1': os.path.join(args.out, 'table1.csv'),
                               'dispersion': os.path.join(args.out, 'dispersion.csv')}, argv)
    trainset = load_split(args, cfg, 'train')
    testset = load_split(args, cfg, 'test')
    reports = run_table1(cfg, trainset, testset, args.out, jobs=args.jobs, cache=open_cache(args))
    for r in aggregate_reports(reports):
        print(f"{r.model:8s} clean {r.clean_acc:6.2f}  fgsm {r.fgsm_acc:6.2f}  invariance {r.inv_acc:6.2f}")
    return 0


COMMANDS = {
    'train': cmd_train,
    'attack': cmd_attack,
    'eval': cmd_eval,
    'pca': cmd_pca,
    'table1': cmd_table1,
}


class CliParser(argparse.ArgumentParser):
    """Usage errors exit with the configuration code; 2 stays reserved for data errors"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(
        prog='advmetric',
        description="Adversarial metric learning on MNIST",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    common = argparse.ArgumentParser(add_help=False)
    source = common.add_mutually_exclusive_group()
    source.add_argument('--config', help="sectioned key = value config file")
    source.add_argument('--preset', default='full', choices=RunConfigManager.preset_names(),
                        help="named preset used when no --config is given")
    common.add_argument('--data-dir', default=os.getenv('ADVMETRIC_DATA_DIR'), help="MNIST IDX directory")
    common.add_argument('--synthetic', action='store_true', help="use synthetic digits instead of MNIST")
    common.add_argument('--out', default='out', help="output directory")
    common.add_argument('--cache-dir', default=os.getenv('ADVMETRIC_CACHE_DIR', '.advmetric_cache'),
                        help="invariance attack-set cache")
    common.add_argument('--no-cache', action='store_true', help="always regenerate invariance sets")
    common.add_argument('--log-level', default=os.getenv('ADVMETRIC_LOG_LEVEL', 'INFO'),
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])

    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument('--seed', type=int, default=None, help="run a single seed instead of the configured list")
    kinded = argparse.ArgumentParser(add_help=False)
    kinded.add_argument('--kind', choices=CONFIG_KINDS, default=None, help="override trainer.kind")

    sets = argparse.ArgumentParser(add_help=False)
    sets.add_argument('--checkpoint', default=None, help="model checkpoint")
    sets.add_argument('--sensitivity-set', default=None, help="sensitivity attack-set directory")
    sets.add_argument('--invariance-set', default=None, help="invariance attack-set directory")

    sub = parser.add_subparsers(dest='command', required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = sub.add_parser('train', parents=[common, seeded, kinded], formatter_class=fmt, help="train one configuration")
    p.add_argument('--invariance-set', default=None, help="precomputed invariance set over the training split")

    p = sub.add_parser('attack', parents=[common, seeded], formatter_class=fmt, help="generate an attack set")
    p.add_argument('--kind', dest='attack_kind', choices=ATTACK_KINDS, default=SENSITIVITY, help="attack family")
    p.add_argument('--checkpoint', default=None, help="model checkpoint (sensitivity attacks)")
    p.add_argument('--split', choices=['train', 'test'], default='test', help="source split")
    p.add_argument('--epsilon', type=float, default=None, help="override the configured budget")

    sub.add_parser('eval', parents=[common, seeded, kinded, sets], formatter_class=fmt, help="score a checkpoint")
    sub.add_parser('pca', parents=[common, seeded, kinded, sets], formatter_class=fmt, help="PCA of the embedding")

    p = sub.add_parser('table1', parents=[common], formatter_class=fmt, help="all configurations and seeds")
    p.add_argument('--jobs', type=int, default=1, help="worker processes for the (configuration, seed) runs")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        return COMMANDS[args.command](args, argv)
    except NumericalFailure as e:
        logger.error("%s; diagnostics: %s", e, e.diagnostics)
        return e.exit_code
    except AdvMetricError as e:
        logger.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
