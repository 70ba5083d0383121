"""
GCDR - Main Entry Point

Command-line harness for generalized cross-domain recognition experiments:

    python main.py generate --config gen.cfg      samples + split manifest
    python main.py validate --set seed=0          re-check a split manifest
    python main.py train    --config train.cfg    one variant, checkpoint + metrics CSV
    python main.py ablate   --config train.cfg    every variant, comparison table
    python main.py curve    --config train.cfg    stage-2 gain at stage-1 checkpoints

Every command takes `--config FILE` (flat `key = value` lines) and repeated
`--set key=value` overrides. Exit code 0 on success, 1 on error, 2 when a
split violates the GCDR constraints or a requested check fails.
"""

import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd

from compare_variants import (curve_checks, make_jobs, ordering_checks, print_checks,
                              run_ablation, summary_table)
from evaluation import metrics_frame, write_metrics_csv
from nn.augment import AugmentationError
from nn.dataset import (AttributeSchema, ManifestError, load_samples, read_manifest,
                        save_samples, validate_gcdr, write_manifest)
from nn.model import save_checkpoint
from nn.numerics import NonFiniteError
from nn.prepare_data import (CMNIST_SCHEMA, build_cmnist_split, build_grouped_split,
                             builtin_cmnist_corpus, compact, generate_tabular,
                             idx_cmnist_corpus, load_idx)
from nn.train import ConfigError, TrainConfig, stage2_improvement_curve, train
from run_config import COMMANDS, RunConfig, RunConfigError, describe_keys, parse_overrides, read_config_file

logger = logging.getLogger(__name__)

SAMPLES_FILE = "samples.npz"
MANIFEST_FILE = "split.manifest"
IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2


def banner(title):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def _idx_path(directory, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"missing IDX file {stem}[.gz] in {directory}")


def _print_report(report):
    for line in report.lines():
        print(f"  {line}")
    print(f"\nGCDR constraints: {'PASS' if report.passed else 'FAIL'}")


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------
def cmd_generate(cfg):
    """Build a dataset and its GCDR split, write both, print the validation report."""
    banner(f"Generating {cfg.dataset} data (seed {cfg.seed})")
    edges = list(cfg.causal_edges)
    if cfg.dataset == "cmnist":
        if edges:
            raise RunConfigError("causal_edges is only supported for tabular data")
        if cfg.idx_dir:
            arrays = {key: load_idx(_idx_path(cfg.idx_dir, stem)) for key, stem in IDX_FILES.items()}
            corpus = idx_cmnist_corpus(arrays["train_images"], arrays["train_labels"],
                                       arrays["test_images"], arrays["test_labels"], cfg.seed)
        else:
            corpus = builtin_cmnist_corpus(cfg.train_pool, cfg.test_pool, cfg.seed, verbose=cfg.verbose)
        if len(cfg.bg_pair) != 2:
            raise RunConfigError(f"bg_pair needs two colors, got {cfg.bg_pair}")
        schema = CMNIST_SCHEMA
        split = build_cmnist_split(corpus, schema, cfg.seed, tuple(cfg.bg_pair), cfg.validation_fraction)
        samples, split = compact(corpus, split)
    elif cfg.dataset == "tabular":
        if len(edges) > 1:
            raise RunConfigError("tabular data supports at most one causal edge")
        schema = AttributeSchema(names=cfg.names, cardinalities=cfg.cardinalities)
        samples = generate_tabular(cfg.n_samples, schema, edges[0] if edges else None,
                                   cfg.seed, cfg.feature_dim)
        schema = schema.grouped_on(cfg.grouping_attribute)
        split = build_grouped_split(samples, schema, cfg.grouping_attribute, cfg.seed, cfg.validation_fraction)
    else:
        raise RunConfigError(f"unknown dataset kind {cfg.dataset!r}, expected cmnist or tabular")

    os.makedirs(cfg.data_dir, exist_ok=True)
    save_samples(os.path.join(cfg.data_dir, SAMPLES_FILE), samples)
    write_manifest(os.path.join(cfg.data_dir, MANIFEST_FILE), split, samples.a, schema, cfg.seed, edges)
    print(f"Samples:  {len(samples):,}")
    print(f"Split:    {split.summary()}")
    print(f"Written:  {cfg.data_dir}")

    report = validate_gcdr(split, schema)
    _print_report(report)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def load_run_data(cfg):
    """Samples and manifest from cfg.data_dir, cross-checked against each other."""
    samples_path = os.path.join(cfg.data_dir, SAMPLES_FILE)
    manifest_path = os.path.join(cfg.data_dir, MANIFEST_FILE)
    for path in (samples_path, manifest_path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path} not found; run 'generate' first")
    samples = load_samples(samples_path)
    manifest = read_manifest(manifest_path, n_samples=len(samples))
    indices = np.array(sorted(manifest.attributes), dtype=np.int64)
    listed = np.array([manifest.attributes[i] for i in indices], dtype=np.int64)
    if len(indices) and not np.array_equal(samples.a[indices], listed):
        raise ManifestError(f"{manifest_path}: attributes disagree with {samples_path}")
    return samples, manifest


def cmd_validate(cfg):
    banner(f"Validating split in {cfg.data_dir}")
    _, manifest = load_run_data(cfg)
    print(f"Split: {manifest.split.summary()}")
    report = validate_gcdr(manifest.split, manifest.schema)
    _print_report(report)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def train_config(cfg, manifest, variant=None):
    edges = cfg.causal_edges if "causal_edges" in cfg.explicit else manifest.causal_edges
    return TrainConfig(
        batch_size=cfg.batch_size,
        stage1_epochs=cfg.stage1_epochs,
        stage2_epochs=cfg.stage2_epochs,
        step_ratio=cfg.step_ratio,
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
        variant=variant or cfg.variant,
        screening_threshold=cfg.screening_threshold,
        augment_factor=cfg.augment_factor,
        augment_count=cfg.augment_count,
        causal_edges=tuple(edges),
        verbose=cfg.verbose,
    )


def _prepare_training(cfg):
    samples, manifest = load_run_data(cfg)
    report = validate_gcdr(manifest.split, manifest.schema)
    if not report.passed:
        _print_report(report)
        return None
    cfg.write_resolved(cfg.output_dir)
    return samples, manifest


def cmd_train(cfg):
    banner(f"Training variant {cfg.variant} (seed {cfg.seed})")
    prepared = _prepare_training(cfg)
    if prepared is None:
        return EXIT_CHECK_FAILED
    samples, manifest = prepared
    config = train_config(cfg, manifest)

    result = train(samples, manifest.split, manifest.schema, config)
    checkpoint = os.path.join(cfg.output_dir, "checkpoint.gcdr")
    save_checkpoint(result.graph, checkpoint)
    frame = metrics_frame(result.history + list(result.reports.values()), run_id=cfg.run_id)
    write_metrics_csv(os.path.join(cfg.output_dir, "metrics.csv"), frame)

    banner("Training complete!")
    for stack, report in result.reports.items():
        print(f"Test [{stack}]: {report.describe()}")
    print(f"Checkpoint saved to: {checkpoint}")
    return EXIT_OK


def cmd_ablate(cfg):
    banner(f"Ablation over {len(cfg.variants)} variants (seed {cfg.seed})")
    if not cfg.variants:
        raise RunConfigError("variants must name at least one variant")
    prepared = _prepare_training(cfg)
    if prepared is None:
        return EXIT_CHECK_FAILED
    samples, manifest = prepared
    base = train_config(cfg, manifest, variant=cfg.variants[0])
    jobs = make_jobs(cfg.variants, base, os.path.join(cfg.data_dir, SAMPLES_FILE), manifest,
                     cfg.run_id, cfg.output_dir)

    reports, frame = run_ablation(jobs, workers=cfg.workers, samples=samples)
    write_metrics_csv(os.path.join(cfg.output_dir, "ablation.csv"), frame)
    table = summary_table(reports)
    table.to_csv(os.path.join(cfg.output_dir, "summary.csv"), index=False, float_format="%.6f",
                 lineterminator="\n")

    banner("ABLATION RESULTS (held-out test)")
    with pd.option_context("display.float_format", "{:.4f}".format, "display.width", 120):
        print(table.to_string(index=False))
    checks = ordering_checks(reports)
    print_checks(checks)
    if cfg.check and not all(c.passed for c in checks):
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_curve(cfg):
    banner(f"Stage-2 improvement curve at stage-1 epochs {list(cfg.marks)}")
    prepared = _prepare_training(cfg)
    if prepared is None:
        return EXIT_CHECK_FAILED
    samples, manifest = prepared
    config = train_config(cfg, manifest)

    points = stage2_improvement_curve(samples, manifest.split, manifest.schema, config, cfg.marks)
    frame = pd.DataFrame(
        [(p.epoch, p.auc_before, p.auc_after) for p in points],
        columns=["epoch", "aauc_before", "aauc_after"],
    )
    frame.to_csv(os.path.join(cfg.output_dir, "curve.csv"), index=False, float_format="%.6f",
                 lineterminator="\n", encoding="utf-8")

    print(f"{'Epoch':>6} | {'before':>8} | {'after':>8} | {'gain':>8}")
    for p in points:
        print(f"{p.epoch:>6} | {p.auc_before:8.4f} | {p.auc_after:8.4f} | {p.gain:+8.4f}")
    checks = curve_checks(points)
    print_checks(checks)
    if cfg.check and not all(c.passed for c in checks):
        return EXIT_CHECK_FAILED
    return EXIT_OK


COMMAND_HELP = {
    "generate": "build a dataset and its GCDR split",
    "validate": "re-check a split manifest against the GCDR constraints",
    "train": "train one variant",
    "ablate": "train and compare several variants",
    "curve": "stage-2 gain at stage-1 checkpoints",
}

HANDLERS = {
    "generate": cmd_generate,
    "validate": cmd_validate,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "curve": cmd_curve,
}


def build_parser():
    parser = argparse.ArgumentParser(
        description="Generalized cross-domain recognition experiments.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command, help=COMMAND_HELP[command],
                           epilog="keys:\n" + describe_keys(command),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = RunConfig.resolve(args.command, file_values, parse_overrides(args.overrides))
        return HANDLERS[args.command](cfg)
    except (RunConfigError, ConfigError, ManifestError, AugmentationError, NonFiniteError,
            FileNotFoundError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
