"""
Compare training variants on one split.

Trains every requested variant with the same seed, collects their held-out
test reports into one table and checks the expected ordering between them.
Variants may run in parallel worker processes; each writes into its own
subdirectory of the run output directory.
"""

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple

import pandas as pd

from evaluation import metrics_frame, write_metrics_csv
from nn.dataset import load_samples
from nn.model import save_checkpoint
from nn.train import TrainConfig, train

logger = logging.getLogger(__name__)

# minimum aAUC gaps, absolute
STAGE2_GAIN = 0.03
BRANCH_GAP = 0.10
SINGLE_DIRECT_TOLERANCE = 0.05
EO_RATIO = 0.8
CURVE_EARLY_GAIN = 0.10
CURVE_LATE_TOLERANCE = 0.01


class Check(NamedTuple):
    name: str
    passed: bool
    detail: str


@dataclass
class VariantJob:
    """Everything a worker needs to train one variant from disk."""

    samples_path: str
    manifest: object
    config: TrainConfig
    run_id: str
    output_dir: str


def run_variant(job, samples=None):
    """
    Train one variant, write its checkpoint and metrics CSV.

    Returns:
        (variant, {stack: MetricsReport}, metrics DataFrame)
    """
    if samples is None:
        samples = load_samples(job.samples_path)
    os.makedirs(job.output_dir, exist_ok=True)
    result = train(samples, job.manifest.split, job.manifest.schema, job.config)
    save_checkpoint(result.graph, os.path.join(job.output_dir, "checkpoint.gcdr"))
    frame = metrics_frame(result.history + list(result.reports.values()), run_id=job.run_id)
    write_metrics_csv(os.path.join(job.output_dir, "metrics.csv"), frame)
    return job.config.variant, result.reports, frame


def run_ablation(jobs, workers=1, samples=None):
    """
    Train every job; results come back in job order.

    Args:
        workers: > 1 runs jobs in that many processes (each loads its own samples)
        samples: preloaded SampleSet reused by sequential runs
    """
    if not jobs:
        raise ValueError("no variants to compare")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_variant, jobs))
    else:
        results = [run_variant(job, samples) for job in jobs]
    reports = {variant: stacks for variant, stacks, _ in results}
    frame = pd.concat([f for _, _, f in results], ignore_index=True)
    return reports, frame


def make_jobs(variants, base_config, samples_path, manifest, run_id, output_dir):
    return [
        VariantJob(
            samples_path=samples_path,
            manifest=manifest,
            config=replace(base_config, variant=variant),
            run_id=run_id,
            output_dir=os.path.join(output_dir, variant),
        )
        for variant in variants
    ]


def summary_table(reports):
    """One row per (variant, stack) with the reported metrics."""
    rows = []
    for variant, stacks in reports.items():
        for stack, report in stacks.items():
            row = {"variant": variant, "stage": stack}
            row.update(dict(report.values()))
            rows.append(row)
    columns = ["variant", "stage", "aauc", "afar", "afrr", "combined", "acc1", "eo_gap"]
    return pd.DataFrame(rows).reindex(columns=columns)


def _final(reports, variant):
    stacks = reports.get(variant)
    if not stacks:
        return None
    return stacks.get("stage2", stacks["stage1"])


def ordering_checks(reports):
    """
    Expected ordering between variants; checks whose variants are missing are skipped.

    aAUC comparisons use the deepest stack of each variant, except "stage 1",
    which is the full variant's stage-1 stack (or the stage1-only variant).
    """
    checks = []
    full = reports.get("full", {})
    stage12 = full.get("stage2")
    stage1 = full.get("stage1") or _final(reports, "stage1-only")

    if stage12 is not None and stage1 is not None:
        gain = stage12.auc - stage1.auc
        checks.append(Check("stage 2 improves stage 1", gain >= STAGE2_GAIN,
                            f"aAUC {stage1.auc:.4f} -> {stage12.auc:.4f} ({gain:+.4f}, need >= {STAGE2_GAIN:+.2f})"))

    no_adv = _final(reports, "no-adv-stage1")
    shared = _final(reports, "shared-d")
    if stage1 is not None and no_adv is not None:
        checks.append(Check("stage 1 beats no-adv-stage1", stage1.auc > no_adv.auc,
                            f"{stage1.auc:.4f} vs {no_adv.auc:.4f}"))
    if no_adv is not None and shared is not None:
        checks.append(Check("no-adv-stage1 >= shared-d", no_adv.auc >= shared.auc,
                            f"{no_adv.auc:.4f} vs {shared.auc:.4f}"))

    single = _final(reports, "single-branch")
    direct = _final(reports, "direct")
    if single is not None and direct is not None:
        gap = abs(single.auc - direct.auc)
        checks.append(Check("single-branch close to direct", gap <= SINGLE_DIRECT_TOLERANCE,
                            f"{single.auc:.4f} vs {direct.auc:.4f} (|gap| {gap:.4f})"))
    if stage1 is not None:
        for name, report in (("single-branch", single), ("direct", direct)):
            if report is not None:
                checks.append(Check(f"{name} well below stage 1", report.auc <= stage1.auc - BRANCH_GAP,
                                    f"{report.auc:.4f} vs {stage1.auc:.4f} - {BRANCH_GAP:.2f}"))

    best = _final(reports, "full")
    if best is not None and direct is not None and best.eo_gap is not None and direct.eo_gap is not None:
        checks.append(Check("full narrows the EO gap", best.eo_gap <= EO_RATIO * direct.eo_gap,
                            f"{best.eo_gap:.4f} vs {EO_RATIO} x {direct.eo_gap:.4f}"))
    return checks


def curve_checks(points):
    checks = []
    if not points:
        return checks
    epochs = [p.epoch for p in points]
    finite = all(math.isfinite(p.auc_before) and math.isfinite(p.auc_after) for p in points)
    checks.append(Check("curve ascending and finite", epochs == sorted(epochs) and finite,
                        f"epochs {epochs}"))
    first, last = points[0], points[-1]
    checks.append(Check("early stage-2 gain", first.gain >= CURVE_EARLY_GAIN,
                        f"epoch {first.epoch}: {first.gain:+.4f} (need >= {CURVE_EARLY_GAIN:+.2f})"))
    checks.append(Check("late stage-2 gain", last.gain >= -CURVE_LATE_TOLERANCE,
                        f"epoch {last.epoch}: {last.gain:+.4f} (need >= {-CURVE_LATE_TOLERANCE:+.2f})"))
    return checks


def print_checks(checks):
    print("\n" + "-" * 60)
    print("Checks:")
    print("-" * 60)
    for check in checks:
        print(f"  [{'PASS' if check.passed else 'FAIL'}] {check.name}: {check.detail}")
    if not checks:
        print("  (no checks applicable to these variants)")
