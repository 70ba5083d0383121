"""
Two-stage training for GCDR.

Stage 1 (one-versus-rest disentangling), per scheduling unit and mini-batch:
    discriminator phase (step_ratio[0] steps):
        attribute     CE(D_jj(f_j), a_j) * w_j                -> P, G, D_jj
        discriminate  MSE(D_jj'(f_j), a_j') * w~_jj' * L_jj'   -> D_jj' (j' != j)
    adversarial phase (step_ratio[1] steps):
        reinforce     MSE(D_jj(f_j), a_j) * w~_jj             -> P
        confuse       MSE(D_jj'(f_j), 1 - a_j') * w~_jj' * L_jj' -> P, G

Stage 2 (additive), per mini-batch of recombined features:
        seen[j]       CE(R_j(u), a_j) * w'_j                  -> R_j, T_j
        unseen[j]     CE(R_j(u), a_j) * w'_j                  -> R_j, T_{S_j}

L is the causal prior. Every loss term carries the names of the parameters it
may update; gradients still flow through everything else on its path.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from tqdm import tqdm

from evaluation import evaluate_scores, select_thresholds
from nn.augment import SCREENING_THRESHOLD, augmented_batches, make_augmented
from nn.dataset import GcdrDataset, batches
from nn.model import CausalPrior, LossWeights, ModelGraph, ModelWidths
from nn.numerics import (LEARNING_RATE, LossSpec, NonFiniteError, ParamSet, backward,
                         check_finite, loss_value, one_hot, seed_everything)

logger = logging.getLogger(__name__)

VARIANTS = ("full", "stage1-only", "single-branch", "shared-d",
            "no-adv-stage1", "no-adv-at-all", "direct")

# variant -> (uses stage 2, adversarial stage 1, first branch only)
_VARIANT_TRAITS = {
    "full": (True, True, False),
    "stage1-only": (False, True, False),
    "single-branch": (False, True, True),
    "shared-d": (True, True, False),
    "no-adv-stage1": (True, False, False),
    "no-adv-at-all": (True, False, False),
    "direct": (False, False, True),
}


class ConfigError(ValueError):
    """Invalid training configuration."""


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults are the desk-scale protocol."""

    batch_size: int = 64
    stage1_epochs: int = 30
    stage2_epochs: int = 10
    step_ratio: tuple = (1, 5)
    learning_rate: float = LEARNING_RATE
    seed: int = 0
    variant: str = "full"
    screening_threshold: float = SCREENING_THRESHOLD
    augment_factor: float = 4.0
    augment_count: int = None
    causal_edges: tuple = ()
    weights: LossWeights = None
    widths: ModelWidths = field(default_factory=ModelWidths)
    eval_batch_size: int = 256
    verbose: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {', '.join(VARIANTS)}")
        self.step_ratio = tuple(int(r) for r in self.step_ratio)
        if len(self.step_ratio) != 2 or min(self.step_ratio) < 1:
            raise ConfigError(f"step ratio parts must be >= 1, got {self.step_ratio}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.stage1_epochs < 1 or self.stage2_epochs < 0:
            raise ConfigError("need at least one stage-1 epoch and a non-negative stage-2 count")
        if not 0.0 <= self.screening_threshold <= 1.0:
            raise ConfigError(f"screening threshold must be in [0, 1], got {self.screening_threshold}")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.augment_factor <= 0 and self.augment_count is None:
            raise ConfigError("augment_factor must be positive")
        self.causal_edges = tuple(tuple(e) for e in self.causal_edges)

    @property
    def uses_stage2(self):
        return _VARIANT_TRAITS[self.variant][0] and self.stage2_epochs > 0

    @property
    def adversarial(self):
        return _VARIANT_TRAITS[self.variant][1]

    def branches(self, n_attributes):
        """0-based branches trained in stage 1."""
        return [0] if _VARIANT_TRAITS[self.variant][2] else list(range(n_attributes))

    def build_graph(self, schema, input_shape):
        n = schema.n_attributes
        return ModelGraph(
            schema,
            input_shape,
            widths=self.widths,
            prior=CausalPrior.from_edges(n, self.causal_edges),
            weights=self.weights or LossWeights.default(n),
            shared_discriminators=self.variant == "shared-d",
            seed=self.seed,
        )


class LossTerm(NamedTuple):
    name: str
    loss: torch.Tensor
    trainable: tuple


# ----------------------------------------------------------------------
# Routing
# ----------------------------------------------------------------------
def route(terms, params):
    """
    Accumulate each term's gradient into its own trainable set.

    Terms with the same trainable set are summed first; the result is the
    same as routing them one by one.

    Returns:
        dict term name -> loss value
    """
    grouped = {}
    record = {}
    for term in terms:
        try:
            check_finite(term.loss.detach(), term.name)
        except NonFiniteError:
            raise NonFiniteError(f"non-finite loss in component {term.name!r}") from None
        record[term.name] = float(term.loss.detach())
        key = tuple(term.trainable)
        grouped[key] = term.loss if key not in grouped else grouped[key] + term.loss
    for trainable, loss in grouped.items():
        backward(loss, params, trainable)
    return record


# ----------------------------------------------------------------------
# Stage 1
# ----------------------------------------------------------------------
def stage1_losses(graph, params, x, a, config, phase):
    """
    Loss terms of one stage-1 phase on a batch.

    Args:
        x: input batch
        a: (batch, m + 1) 0-based attributes
        phase: "discriminate" or "adversarial"

    Returns:
        list of LossTerm; masked pairs are present with weight 0
    """
    if phase not in ("discriminate", "adversarial"):
        raise ValueError(f"unknown stage-1 phase {phase!r}")
    branches = config.branches(graph.n_attributes)
    if phase == "adversarial" and not config.adversarial:
        return []

    k = graph.schema.cardinalities
    weights = graph.weights
    w_tilde, _ = graph.effective_weights()
    targets = [one_hot(a[:, j], k[j]) for j in range(graph.n_attributes)]
    out = graph.forward_stage1(x)
    others = [(j, jp) for j in branches for jp in range(graph.n_attributes) if jp != j]

    terms = []
    if phase == "discriminate":
        trainable = tuple(params.names_of(graph.P, *(graph.G[j] for j in branches),
                                          *(graph.D[j][j] for j in branches)))
        for j in branches:
            spec = LossSpec("cross-entropy", targets[j], weights.w[j])
            terms.append(LossTerm(f"attribute[{j + 1}]", loss_value(out.d[j][j], spec), trainable))
        if config.adversarial:
            trainable = tuple(params.names_of(*(graph.D[j][jp] for j, jp in others)))
            for j, jp in others:
                spec = LossSpec("mse", targets[jp], w_tilde[j][jp])
                terms.append(LossTerm(f"discriminate[{j + 1},{jp + 1}]",
                                      loss_value(out.d[j][jp], spec), trainable))
        return terms

    trainable = tuple(params.names_of(graph.P))
    for j in branches:
        spec = LossSpec("mse", targets[j], w_tilde[j][j])
        terms.append(LossTerm(f"reinforce[{j + 1}]", loss_value(out.d[j][j], spec), trainable))
    trainable = tuple(params.names_of(graph.P, *(graph.G[j] for j in branches)))
    for j, jp in others:
        spec = LossSpec("mse", 1.0 - targets[jp], w_tilde[j][jp])
        terms.append(LossTerm(f"confuse[{j + 1},{jp + 1}]", loss_value(out.d[j][jp], spec), trainable))
    return terms


def stage1_step(graph, params, x, a, config):
    """
    One scheduling unit: step_ratio[0] discriminator steps, then
    step_ratio[1] adversarial steps, each with a fresh forward pass.

    Returns:
        dict component name -> loss value (last value seen)
    """
    record = {}
    for phase, steps in zip(("discriminate", "adversarial"), config.step_ratio):
        for _ in range(steps):
            params.zero_grad()
            terms = stage1_losses(graph, params, x, a, config, phase)
            if not terms:
                break
            record.update(route(terms, params))
            params.step(config.learning_rate)
    params.zero_grad()
    return record


# ----------------------------------------------------------------------
# Stage 2
# ----------------------------------------------------------------------
def stage2_losses(graph, params, features, a, seen, config):
    """
    Recognition terms on a batch of recombined features.

    Args:
        features: one (batch, branch_out) tensor per branch, treated as constants
        a: (batch, m + 1) 0-based attributes
        seen: (batch,) bool
    """
    k = graph.schema.cardinalities
    _, additive_targets = graph.effective_weights()
    w_prime = graph.weights.w_prime
    features = [f.detach() for f in features]

    terms = []
    for flag, group in ((True, "seen"), (False, "unseen")):
        mask = seen == flag
        if not bool(mask.any()):
            continue
        out = graph.forward_stage2([f[mask] for f in features])
        for j in range(graph.n_attributes):
            if config.variant == "no-adv-at-all":
                modules = [*graph.T, graph.R[j]]
            elif flag:
                modules = [graph.R[j], graph.T[j]]
            else:
                modules = [graph.R[j], *(graph.T[jp] for jp in additive_targets[j])]
            spec = LossSpec("cross-entropy", one_hot(a[mask, j], k[j]), w_prime[j])
            terms.append(LossTerm(f"{group}[{j + 1}]", loss_value(out.r[j], spec),
                                  tuple(params.names_of(*modules))))
    return terms


def stage2_step(graph, params, features, a, seen, config):
    params.zero_grad()
    record = route(stage2_losses(graph, params, features, a, seen, config), params)
    params.step(config.learning_rate)
    params.zero_grad()
    return record


# ----------------------------------------------------------------------
# Evaluation helpers
# ----------------------------------------------------------------------
def grouping_attribute(schema):
    """1-based domain attribute along which classes are grouped (first non-sharing one)."""
    for j in range(1, schema.n_attributes):
        if not schema.class_sharing[j]:
            return j + 1
    return 2


@torch.no_grad()
def predict_scores(graph, dataset, indices, stack, batch_size=256):
    """Class scores of one inference stack, in `indices` order."""
    loader = batches(dataset, indices, batch_size, shuffle=False)
    return np.concatenate([graph.infer(x, stack).numpy() for x, _ in loader])


def _labels(samples, indices):
    return samples.a[indices, 0] - 1


def _validation_report(graph, samples, dataset, split, stack, config, epoch):
    scores = predict_scores(graph, dataset, split.validation, stack, config.eval_batch_size)
    return evaluate_scores(scores, _labels(samples, split.validation),
                           variant=config.variant, stage=stack, epoch=epoch, split="validation")


def evaluate_stack(graph, samples, split, stack, config, schema, dataset=None, epoch=0):
    """
    Held-out test metrics for one inference stack.

    Thresholds are selected on the validation indices. The EO gap is measured
    on train plus held-out test with the grouping attribute as the domain.
    """
    if dataset is None:
        dataset = GcdrDataset(samples)
    heldout = split.heldout
    val_scores = predict_scores(graph, dataset, split.validation, stack, config.eval_batch_size)
    thresholds, fallback = select_thresholds(val_scores, _labels(samples, split.validation),
                                             return_skipped=True)

    scores = predict_scores(graph, dataset, heldout, stack, config.eval_batch_size)
    pool = np.concatenate([split.train, heldout])
    pool_scores = np.concatenate([
        predict_scores(graph, dataset, split.train, stack, config.eval_batch_size), scores
    ])
    g = grouping_attribute(schema)
    eo_pool = (np.argmax(pool_scores, axis=1), _labels(samples, pool), samples.a[pool, g - 1])
    report = evaluate_scores(scores, _labels(samples, heldout), thresholds=thresholds, eo_pool=eo_pool,
                             variant=config.variant, stage=stack, epoch=epoch, split="test")
    if fallback:
        report.skipped["thresholds"] = fallback
    return report, thresholds


# ----------------------------------------------------------------------
# Training loops
# ----------------------------------------------------------------------
def run_stage1(graph, samples, split, config, epochs=None, dataset=None, marks=None, on_mark=None):
    """
    Stage-1 epochs with best-validation selection.

    Args:
        marks: optional epoch numbers at which `on_mark(epoch, graph)` is called
            with the current (not best) weights

    Returns:
        history of validation MetricsReports; the graph holds the best state
    """
    if dataset is None:
        dataset = GcdrDataset(samples)
    epochs = epochs or config.stage1_epochs
    params = ParamSet.from_module(graph, lr=config.learning_rate)
    marks = set(marks or ())

    history = []
    best_auc, best_state = -np.inf, None
    for epoch in tqdm(range(1, epochs + 1), desc="Stage 1", disable=not config.verbose):
        totals = {}
        n_batches = 0
        # Training phase: one scheduling unit per mini-batch
        for x, a in batches(dataset, split.train, config.batch_size, seed=config.seed, epoch=epoch):
            record = stage1_step(graph, params, x, a, config)
            for name, value in record.items():
                totals[name] = totals.get(name, 0.0) + value
            n_batches += 1

        # Validation phase
        report = _validation_report(graph, samples, dataset, split, "stage1", config, epoch)
        history.append(report)
        saved = ""
        # Save best model
        if report.auc > best_auc:
            best_auc, best_state = report.auc, copy.deepcopy(graph.state_dict())
            saved = " (saved)"
        attribute_loss = sum(v for name, v in totals.items() if name.startswith("attribute")) / max(n_batches, 1)
        logger.info("Stage 1 epoch %2d/%d | attribute loss %.4f | val aAUC %.4f%s",
                    epoch, epochs, attribute_loss, report.auc, saved)
        # Improvement-curve hook
        if epoch in marks and on_mark is not None:
            on_mark(epoch, graph)

    # Restore best model
    graph.load_state_dict(best_state)
    return history


def run_stage2(graph, samples, split, config, dataset=None):
    """
    Augment from the current stage-1 weights and train T and R.

    Returns:
        (history, AugmentedSet); the graph holds the best stage-2 state
    """
    if dataset is None:
        dataset = GcdrDataset(samples)
    n_items = config.augment_count or max(1, int(round(config.augment_factor * len(split.train))))
    augmented = make_augmented(graph, dataset, split, n_items, config.seed, config.screening_threshold,
                               batch_size=config.eval_batch_size, verbose=config.verbose)
    params = ParamSet.from_module(graph, lr=config.learning_rate)

    history = []
    best_auc, best_state = -np.inf, None
    for epoch in tqdm(range(1, config.stage2_epochs + 1), desc="Stage 2", disable=not config.verbose):
        # Training phase on recombined features
        for *features, a, seen in augmented_batches(augmented, config.batch_size, seed=config.seed, epoch=epoch):
            stage2_step(graph, params, features, a, seen, config)

        # Validation phase
        report = _validation_report(graph, samples, dataset, split, "stage2", config, epoch)
        history.append(report)
        saved = ""
        # Save best model
        if report.auc > best_auc:
            best_auc, best_state = report.auc, copy.deepcopy(graph.state_dict())
            saved = " (saved)"
        logger.info("Stage 2 epoch %2d/%d | val aAUC %.4f%s", epoch, config.stage2_epochs, report.auc, saved)

    # Restore best model
    graph.load_state_dict(best_state)
    return history, augmented


@dataclass
class TrainResult:
    graph: ModelGraph
    history: list
    reports: dict            # inference stack -> held-out test MetricsReport
    thresholds: dict         # inference stack -> per-class thresholds
    augmented: object = None

    @property
    def final(self):
        """Report of the deepest stack that was trained."""
        return self.reports.get("stage2", self.reports["stage1"])


def train(samples, split, schema, config, graph=None):
    """
    Train one variant end to end.

    Args:
        samples: SampleSet with materialized features
        split: GcdrSplit over `samples`
        schema: AttributeSchema of `samples.a`
        config: TrainConfig
        graph: optional pre-built ModelGraph (otherwise built from config)

    Returns:
        TrainResult
    """
    if len(split.validation) == 0:
        raise ConfigError("the split has no validation samples")
    seed_everything(config.seed)
    graph = graph or config.build_graph(schema, samples.feature_shape)
    dataset = GcdrDataset(samples)

    logger.info("Training variant %s on %s", config.variant, split.summary())
    history = run_stage1(graph, samples, split, config, dataset=dataset)
    reports, thresholds = {}, {}
    reports["stage1"], thresholds["stage1"] = evaluate_stack(
        graph, samples, split, "stage1", config, schema, dataset, epoch=len(history))

    augmented = None
    if config.uses_stage2:
        stage2_history, augmented = run_stage2(graph, samples, split, config, dataset)
        history.extend(stage2_history)
        reports["stage2"], thresholds["stage2"] = evaluate_stack(
            graph, samples, split, "stage2", config, schema, dataset, epoch=len(stage2_history))

    for stack, report in reports.items():
        logger.info("Test %s [%s]: %s", config.variant, stack, report.describe())
    return TrainResult(graph=graph, history=history, reports=reports,
                       thresholds=thresholds, augmented=augmented)


class CurvePoint(NamedTuple):
    epoch: int
    auc_before: float
    auc_after: float

    @property
    def gain(self):
        return self.auc_after - self.auc_before


def stage2_improvement_curve(samples, split, schema, config, marks):
    """
    Held-out aAUC before and after stage 2, started from stage-1 snapshots.

    Stage 1 runs once up to max(marks); at each mark a copy of the current
    graph goes through stage 2.

    Returns:
        list of CurvePoint in ascending epoch order
    """
    if config.variant != "full":
        raise ConfigError(f"the improvement curve needs the full variant, got {config.variant!r}")
    marks = sorted(set(int(e) for e in marks))
    if not marks or marks[0] < 1:
        raise ConfigError("curve marks must be positive epoch numbers")
    if len(split.validation) == 0:
        raise ConfigError("the split has no validation samples")

    seed_everything(config.seed)
    graph = config.build_graph(schema, samples.feature_shape)
    dataset = GcdrDataset(samples)
    points = []

    def on_mark(epoch, current):
        snapshot = copy.deepcopy(current)
        before, _ = evaluate_stack(snapshot, samples, split, "stage1", config, schema, dataset, epoch)
        run_stage2(snapshot, samples, split, config, dataset)
        after, _ = evaluate_stack(snapshot, samples, split, "stage2", config, schema, dataset, epoch)
        points.append(CurvePoint(epoch, before.auc, after.auc))
        logger.info("Curve mark %d: aAUC %.4f -> %.4f", epoch, before.auc, after.auc)

    run_stage1(graph, samples, split, config, epochs=marks[-1], dataset=dataset,
               marks=marks, on_mark=on_mark)
    return points
