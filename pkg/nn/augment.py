"""
Feature recombination for the additive stage.

A trained stage 1 gives, for every training sample l and branch j, a feature
f_j^l = G_j(P(x^l)). An augmented item picks an independent donor per branch
and stacks their features:

    (f_1^{l_1}, ..., f_{m+1}^{l_{m+1}})  with attributes  (a_1^{l_1}, ..., a_{m+1}^{l_{m+1}})

Items whose donors are not confidently recognized by their own diagonal
discriminator are screened out. The rest are split into seen items (attribute
tuple present in the training set) and unseen items.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from nn.dataset import EpochSampler, GcdrDataset

logger = logging.getLogger(__name__)

SCREENING_THRESHOLD = 0.9


class AugmentationError(RuntimeError):
    """No augmented item survived screening."""


@dataclass
class AugmentedSet:
    """
    features:   one float32 tensor (n, branch_out) per branch
    attributes: int64 (n, m + 1), 1-based
    seen:       bool (n,), True iff the attribute tuple is a training combination
    donors:     int64 (n, m + 1) corpus index of the donor for each branch
    """

    features: list
    attributes: np.ndarray
    seen: np.ndarray
    donors: np.ndarray

    def __len__(self):
        return len(self.attributes)

    @property
    def n_seen(self):
        return int(self.seen.sum())

    @property
    def n_unseen(self):
        return len(self) - self.n_seen

    def summary(self):
        return f"{len(self)} items ({self.n_seen} seen, {self.n_unseen} unseen)"


@torch.no_grad()
def branch_features(graph, samples, indices, batch_size=256):
    """
    Branch features and diagonal confidences for the given samples.

    Returns:
        features: list of (len(indices), branch_out) tensors, one per branch
        confidence: (len(indices), m + 1) array, D_jj's score on the true a_j
    """
    dataset = samples if isinstance(samples, GcdrDataset) else GcdrDataset(samples)
    loader = DataLoader(dataset, batch_size=batch_size,
                        sampler=EpochSampler(indices, seed=0, shuffle=False))
    n = graph.n_attributes
    features = [[] for _ in range(n)]
    confidence = []
    for x, a in loader:
        out = graph.forward_stage1(x)
        for j in range(n):
            features[j].append(out.f[j])
        confidence.append(torch.stack(
            [out.d[j][j].gather(1, a[:, j:j + 1]).squeeze(1) for j in range(n)], dim=1
        ))
    return [torch.cat(f) for f in features], torch.cat(confidence).numpy()


def make_augmented(graph, samples, split, n_items, seed, threshold=SCREENING_THRESHOLD,
                   batch_size=256, verbose=False):
    """
    Draw `n_items` recombined feature tuples from the training indices.

    Args:
        graph: ModelGraph after stage 1 (not modified)
        samples: SampleSet or GcdrDataset with materialized features
        split: GcdrSplit; donors come from split.train and seen-ness from
            split.train_combinations
        n_items: number of draws before screening
        threshold: minimum diagonal confidence of every donor

    Returns:
        AugmentedSet of the items that passed screening
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"screening threshold must be in [0, 1], got {threshold}")
    if n_items < 1:
        raise ValueError(f"need at least one augmented item, got {n_items}")
    train = np.asarray(split.train, dtype=np.int64)
    n = graph.n_attributes

    features, confidence = branch_features(graph, samples, train, batch_size)
    attributes = (samples.a if not isinstance(samples, GcdrDataset) else samples.a.numpy() + 1)[train]

    rng = np.random.default_rng([seed, 13])
    picks = rng.integers(0, len(train), size=(n_items, n))

    keep = np.ones(n_items, dtype=bool)
    for j in range(n):
        keep &= confidence[picks[:, j], j] >= threshold
    if not keep.any():
        raise AugmentationError(
            f"all {n_items} augmented items were screened out at threshold {threshold}; "
            "lower the screening threshold or train stage 1 longer"
        )
    picks = picks[keep]

    items = np.stack([attributes[picks[:, j], j] for j in range(n)], axis=1)
    seen = np.array([tuple(int(v) for v in row) in split.train_combinations
                     for row in tqdm(items, desc="Screening", disable=not verbose)], dtype=bool)
    index = torch.from_numpy(picks)
    augmented = AugmentedSet(
        features=[features[j][index[:, j]] for j in range(n)],
        attributes=items.astype(np.int64),
        seen=seen,
        donors=train[picks],
    )
    logger.info("Augmentation kept %d/%d items: %s", len(augmented), n_items, augmented.summary())
    return augmented


def augmented_batches(augmented, batch_size, seed=0, epoch=0, shuffle=True):
    """Mini-batches of (features..., attributes - 1, seen) over an AugmentedSet."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    dataset = TensorDataset(
        *augmented.features,
        torch.from_numpy(augmented.attributes - 1),
        torch.from_numpy(augmented.seen),
    )
    return DataLoader(
        dataset,
        batch_size=batch_size,
        sampler=EpochSampler(np.arange(len(augmented)), seed, epoch, shuffle),
        num_workers=0,
    )
