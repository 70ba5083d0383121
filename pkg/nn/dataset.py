"""
Dataset utilities for generalized cross-domain recognition (GCDR).

Every sample is a feature tensor x plus a generalized attribute vector
a = (y, h_1, ..., h_m): attribute 1 is the class, the rest are the domain
attributes. Attribute values are stored 1-based, a_j in {1, ..., k_j}, exactly
as they appear in split manifests. Networks see them 0-based (a - 1).

A GcdrSplit partitions sample indices into train (Omega), test (Omega-bar) and
a validation subset carved from test, and records the attribute combinations
and class groups needed to check the GCDR constraints:

    - train and test share no index
    - train and test share no full attribute combination
    - within train, different domains of a grouping attribute share no class
"""

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset, Sampler

logger = logging.getLogger(__name__)

MANIFEST_MAGIC = "# gcdr-split v1"
ROLES = ("train", "validation", "test")


class SplitConstructionError(ValueError):
    """A split builder cannot produce a GCDR split from the given samples."""


class ManifestError(ValueError):
    """A split manifest is malformed."""


# ----------------------------------------------------------------------
# Samples and schema
# ----------------------------------------------------------------------
class Sample(NamedTuple):
    x: np.ndarray
    a: np.ndarray


@dataclass(frozen=True)
class AttributeSchema:
    """
    Names and cardinalities of the m + 1 attributes.

    `class_sharing[j]` marks domain attributes that may share classes across
    their domains in the training set (e.g. the C-MNIST foreground color).
    """

    names: tuple
    cardinalities: tuple
    class_sharing: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "cardinalities", tuple(int(k) for k in self.cardinalities))
        if len(self.names) != len(self.cardinalities):
            raise ValueError("names and cardinalities must have the same length")
        if len(self.names) < 2:
            raise ValueError("a schema needs the class and at least one domain attribute")
        for name, k in zip(self.names, self.cardinalities):
            if k < 2:
                raise ValueError(f"attribute {name!r} has cardinality {k}, expected >= 2")
        sharing = self.class_sharing
        if sharing is None:
            sharing = (False,) * len(self.names)
        sharing = tuple(bool(s) for s in sharing)
        if len(sharing) != len(self.names):
            raise ValueError("class_sharing must have one flag per attribute")
        if sharing[0]:
            raise ValueError("the class attribute cannot be flagged class-sharing")
        object.__setattr__(self, "class_sharing", sharing)

    @property
    def m(self):
        """Number of domain-difference types."""
        return len(self.names) - 1

    @property
    def n_attributes(self):
        return len(self.names)

    def grouped_on(self, attribute):
        """Copy where every domain attribute except `attribute` (1-based) shares classes."""
        sharing = tuple(j not in (1, attribute) for j in range(1, self.n_attributes + 1))
        return replace(self, class_sharing=sharing)

    def check(self, attributes):
        """Raise ValueError unless every a_j lies in [1, k_j]."""
        attributes = np.asarray(attributes)
        if attributes.ndim != 2 or attributes.shape[1] != self.n_attributes:
            raise ValueError(
                f"attribute array shape {attributes.shape} does not match {self.n_attributes} attributes"
            )
        for j, (name, k) in enumerate(zip(self.names, self.cardinalities)):
            column = attributes[:, j]
            if len(column) and (column.min() < 1 or column.max() > k):
                raise ValueError(f"attribute {name!r} values outside [1, {k}]")


@dataclass
class SampleSet:
    """
    Columnar sample storage.

    x:         float32 features, (n, d) for vectors or (n, 3, h, w) for images
    a:         int64 attributes, (n, m + 1), 1-based
    partition: optional source pool per sample (0 = original train, 1 = original test)
    gray:      optional uint8 grayscale images the colored x was rendered from
    """

    a: np.ndarray
    x: np.ndarray = None
    partition: np.ndarray = None
    gray: np.ndarray = None

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.int64)
        if self.x is not None:
            self.x = np.asarray(self.x, dtype=np.float32)
            if len(self.x) != len(self.a):
                raise ValueError("x and a must have the same number of samples")
            if not np.isfinite(self.x).all():
                raise ValueError("sample features must be finite")

    def __len__(self):
        return len(self.a)

    def __getitem__(self, i):
        return Sample(self.x[i], self.a[i])

    @property
    def feature_shape(self):
        return tuple(self.x.shape[1:])

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return SampleSet(
            a=self.a[indices],
            x=None if self.x is None else self.x[indices],
            partition=None if self.partition is None else self.partition[indices],
            gray=None if self.gray is None else self.gray[indices],
        )


class GcdrDataset(Dataset):
    """Torch view of a SampleSet: items are (x, a - 1)."""

    def __init__(self, samples):
        if samples.x is None:
            raise ValueError("samples have no materialized features")
        self.x = torch.from_numpy(samples.x)
        self.a = torch.from_numpy(samples.a - 1)

    def __len__(self):
        return len(self.a)

    def __getitem__(self, idx):
        return self.x[idx], self.a[idx]


class EpochSampler(Sampler):
    """Deterministic per-epoch order over a fixed index list."""

    def __init__(self, indices, seed, epoch=0, shuffle=True):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.seed = seed
        self.epoch = epoch
        self.shuffle = shuffle

    def __iter__(self):
        if not self.shuffle:
            return iter(self.indices.tolist())
        rng = np.random.default_rng([self.seed, self.epoch])
        return iter(self.indices[rng.permutation(len(self.indices))].tolist())

    def __len__(self):
        return len(self.indices)


def batches(samples, indices, batch_size, seed=0, shuffle=True, epoch=0):
    """
    Mini-batches of (x, a - 1) over `indices`.

    The order is a deterministic function of (seed, epoch); the final short
    batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(indices) == 0:
        raise ValueError("cannot batch an empty index set")
    dataset = samples if isinstance(samples, GcdrDataset) else GcdrDataset(samples)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        sampler=EpochSampler(indices, seed, epoch, shuffle),
        drop_last=False,
        num_workers=0,
    )


# ----------------------------------------------------------------------
# Splits
# ----------------------------------------------------------------------
def combinations_of(attributes, indices):
    return frozenset(tuple(int(v) for v in row) for row in attributes[indices])


def class_groups_of(attributes, indices):
    """(domain attribute j, domain r) -> classes seen with it; j and r 1-based."""
    groups = {}
    rows = attributes[indices]
    for j in range(1, attributes.shape[1]):
        for r in np.unique(rows[:, j]):
            classes = np.unique(rows[rows[:, j] == r, 0])
            groups[(j + 1, int(r))] = frozenset(int(c) for c in classes)
    return groups


@dataclass
class GcdrSplit:
    """
    Index sets of a GCDR split.

    `validation` is a subset of `test`; `heldout` is test without validation
    and is what final test metrics are computed on.
    """

    train: np.ndarray
    test: np.ndarray
    validation: np.ndarray
    train_combinations: frozenset = field(default_factory=frozenset)
    test_combinations: frozenset = field(default_factory=frozenset)
    class_groups: dict = field(default_factory=dict)
    seed: int = None

    @classmethod
    def from_indices(cls, attributes, train, test, validation=(), seed=None):
        attributes = np.asarray(attributes)
        train = np.sort(np.asarray(train, dtype=np.int64))
        test = np.sort(np.asarray(test, dtype=np.int64))
        validation = np.sort(np.asarray(validation, dtype=np.int64))
        return cls(
            train=train,
            test=test,
            validation=validation,
            train_combinations=combinations_of(attributes, train),
            test_combinations=combinations_of(attributes, test),
            class_groups=class_groups_of(attributes, train),
            seed=seed,
        )

    @property
    def heldout(self):
        return np.setdiff1d(self.test, self.validation)

    def summary(self):
        return (f"train={len(self.train)} test={len(self.test)} "
                f"(validation={len(self.validation)}, heldout={len(self.heldout)}) "
                f"train combos={len(self.train_combinations)} test combos={len(self.test_combinations)}")


def carve_validation(attributes, test, fraction, seed):
    """Seeded `fraction` of the test indices, stratified by attribute combination."""
    rng = np.random.default_rng([seed, 7])
    test = np.asarray(test, dtype=np.int64)
    rows = attributes[test]
    _, inverse = np.unique(rows, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    chosen = []
    for combo in range(inverse.max() + 1 if len(inverse) else 0):
        members = test[inverse == combo]
        take = int(round(len(members) * fraction))
        if take:
            chosen.append(rng.choice(members, size=take, replace=False))
    if not chosen:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate(chosen))


@dataclass
class Violation:
    constraint: str
    message: str


@dataclass
class ValidationReport:
    checks: dict
    violations: list

    @property
    def passed(self):
        return all(self.checks.values())

    def lines(self):
        out = [f"{name:<26} {'PASS' if ok else 'FAIL'}" for name, ok in self.checks.items()]
        out += [f"  - [{v.constraint}] {v.message}" for v in self.violations]
        return out


def validate_gcdr(split, schema):
    """
    Check a split against the GCDR constraints. Violations are reported, never raised.
    """
    violations = []

    overlap = np.intersect1d(split.train, split.test)
    if len(overlap):
        violations.append(Violation(
            "index-disjointness",
            f"{len(overlap)} indices in both train and test (e.g. {overlap[:5].tolist()})",
        ))

    outside = np.setdiff1d(split.validation, split.test)
    if len(outside):
        violations.append(Violation(
            "validation-subset",
            f"{len(outside)} validation indices are not test indices (e.g. {outside[:5].tolist()})",
        ))

    shared = split.train_combinations & split.test_combinations
    for combo in sorted(shared)[:10]:
        violations.append(Violation(
            "combination-disjointness",
            f"combination {combo} appears in both train and test",
        ))
    if len(shared) > 10:
        violations.append(Violation("combination-disjointness", f"... {len(shared) - 10} more"))

    for j in range(2, schema.n_attributes + 1):
        if schema.class_sharing[j - 1]:
            continue
        domains_of_class = {}
        for (attr, r), classes in split.class_groups.items():
            if attr != j:
                continue
            for c in classes:
                domains_of_class.setdefault(c, []).append(r)
        for c, domains in sorted(domains_of_class.items()):
            if len(domains) > 1:
                violations.append(Violation(
                    "class-group-disjointness",
                    f"attribute {schema.names[j - 1]!r}: class {c} appears under domains {sorted(domains)}",
                ))

    kinds = {v.constraint for v in violations}
    checks = {name: name not in kinds for name in (
        "index-disjointness", "validation-subset",
        "combination-disjointness", "class-group-disjointness",
    )}
    return ValidationReport(checks=checks, violations=violations)


# ----------------------------------------------------------------------
# Manifest and sample files
# ----------------------------------------------------------------------
def _flags(values):
    return ",".join(str(int(v)) for v in values)


def format_edges(edges):
    return ",".join(f"{a}>{b}" for a, b in edges) if edges else "-"


def parse_edges(text):
    """'2>1,3>2' -> [(2, 1), (3, 2)]; '-' or '' -> []."""
    text = (text or "").strip()
    if text in ("", "-"):
        return []
    edges = []
    for item in text.split(","):
        try:
            cause, effect = item.split(">")
            edges.append((int(cause), int(effect)))
        except ValueError:
            raise ValueError(f"bad causal edge {item!r}, expected 'cause>effect'") from None
    return edges


def write_manifest(path, split, attributes, schema, seed, causal_edges=()):
    """
    Line-oriented split manifest:

        # gcdr-split v1
        # schema names=... cardinalities=... class_sharing=...
        # seed <seed>
        # causal_edges <cause>effect,...>
        index<TAB>role<TAB>a_1,...,a_{m+1}
    """
    roles = {}
    for i in split.train:
        roles[int(i)] = "train"
    for i in split.test:
        roles[int(i)] = "test"
    for i in split.validation:
        roles[int(i)] = "validation"
    lines = [
        MANIFEST_MAGIC,
        f"# schema names={','.join(schema.names)} cardinalities={_flags(schema.cardinalities)} "
        f"class_sharing={_flags(schema.class_sharing)}",
        f"# seed {seed}",
        f"# causal_edges {format_edges(causal_edges)}",
        "index\trole\tattributes",
    ]
    for i in sorted(roles):
        lines.append(f"{i}\t{roles[i]}\t{_flags(attributes[i])}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


@dataclass
class Manifest:
    split: GcdrSplit
    schema: AttributeSchema
    seed: int
    causal_edges: list
    attributes: dict


def read_manifest(path, n_samples=None):
    """Parse a manifest written by write_manifest."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise ManifestError(f"{path}: missing '{MANIFEST_MAGIC}' header")

    header = {}
    body_start = None
    for n, line in enumerate(lines[1:], start=1):
        if line.startswith("# "):
            key, _, value = line[2:].partition(" ")
            header[key] = value
        elif line == "index\trole\tattributes":
            body_start = n + 1
            break
        else:
            raise ManifestError(f"{path}:{n + 1}: unexpected header line {line!r}")
    if body_start is None or not {"schema", "seed"} <= header.keys():
        raise ManifestError(f"{path}: incomplete header")

    try:
        fields = dict(item.split("=", 1) for item in header["schema"].split())
        schema = AttributeSchema(
            names=fields["names"].split(","),
            cardinalities=[int(k) for k in fields["cardinalities"].split(",")],
            class_sharing=[bool(int(s)) for s in fields["class_sharing"].split(",")],
        )
        seed = int(header["seed"])
        edges = parse_edges(header.get("causal_edges", "-"))
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"{path}: bad header ({exc})") from None

    members = {role: [] for role in ROLES}
    attributes = {}
    for n, line in enumerate(lines[body_start:], start=body_start + 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[1] not in ROLES:
            raise ManifestError(f"{path}:{n}: malformed row {line!r}")
        try:
            index = int(parts[0])
            attrs = tuple(int(v) for v in parts[2].split(","))
        except ValueError:
            raise ManifestError(f"{path}:{n}: malformed row {line!r}") from None
        if len(attrs) != schema.n_attributes:
            raise ManifestError(f"{path}:{n}: expected {schema.n_attributes} attributes")
        if index in attributes:
            raise ManifestError(f"{path}:{n}: index {index} listed twice")
        if n_samples is not None and not 0 <= index < n_samples:
            raise ManifestError(f"{path}:{n}: index {index} out of range")
        attributes[index] = attrs
        members[parts[1]].append(index)

    table = np.zeros((max(attributes, default=-1) + 1, schema.n_attributes), dtype=np.int64)
    for i, attrs in attributes.items():
        table[i] = attrs
    try:
        schema.check(table[list(attributes)])
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    test = members["test"] + members["validation"]
    split = GcdrSplit.from_indices(table, members["train"], test, members["validation"], seed=seed)
    return Manifest(split=split, schema=schema, seed=seed, causal_edges=edges, attributes=attributes)


def save_samples(path, samples):
    """
    Write samples with np.savez_compressed. Colorized image sets store the
    grayscale source plus attributes and are re-colorized on load.
    """
    arrays = {"a": samples.a}
    if samples.gray is not None:
        arrays["gray"] = samples.gray
    else:
        arrays["x"] = samples.x
    if samples.partition is not None:
        arrays["partition"] = samples.partition
    np.savez_compressed(path, **arrays)


def load_samples(path):
    from nn.prepare_data import colorize_batch

    with np.load(path) as data:
        a = data["a"]
        partition = data["partition"] if "partition" in data else None
        if "gray" in data:
            gray = data["gray"]
            x = colorize_batch(gray, a[:, 1], a[:, 2])
            samples = SampleSet(a=a, x=x, partition=partition, gray=gray)
        else:
            samples = SampleSet(a=a, x=data["x"], partition=partition)
    logger.info("Loaded %d samples from %s", len(samples), path)
    return samples
