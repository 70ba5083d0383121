"""
Data preparation: MNIST IDX files, C-MNIST colorization, synthetic data and
the GCDR split builders.

C-MNIST protocol (one grouping attribute, the background color):

    train: digits 0-4 on background A, digits 5-9 on background B
    test:  digits 0-4 on background B, digits 5-9 on background A

Foreground colors are drawn uniformly and may share digits. Training samples
come from the original training pool and test samples from the original test
pool, which is why a full 60k/10k corpus yields roughly 6000/1000 instances.

When no IDX files are available, `render_glyphs` draws 7-segment style digits
so everything works offline.
"""

import gzip
import logging
import struct

import numpy as np
from tqdm import tqdm

from nn.dataset import (
    AttributeSchema,
    GcdrSplit,
    SampleSet,
    SplitConstructionError,
    carve_validation,
)

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
VALIDATION_FRACTION = 0.1
GLYPH_SIZE = 28

# Palette tables are versioned; samples.npz files record gray + indices only,
# so changing a table must bump the version.
PALETTE_VERSION = 1
BACKGROUND_PALETTE = np.array([
    [0.10, 0.65, 0.20],   # green
    [0.95, 0.45, 0.75],   # pink
    [0.15, 0.25, 0.80],   # blue
    [0.90, 0.15, 0.10],   # red
    [0.95, 0.80, 0.10],   # yellow
    [0.10, 0.75, 0.80],   # cyan
    [0.55, 0.20, 0.70],   # purple
    [0.95, 0.55, 0.05],   # orange
    [0.45, 0.30, 0.15],   # brown
    [0.50, 0.50, 0.50],   # gray
], dtype=np.float32)
FOREGROUND_PALETTE = np.array([
    [1.00, 1.00, 1.00],   # white
    [0.00, 0.00, 0.00],   # black
    [0.60, 1.00, 0.60],   # light green
    [1.00, 0.85, 0.60],   # peach
    [0.60, 0.80, 1.00],   # light blue
    [0.35, 0.00, 0.00],   # maroon
    [0.00, 0.30, 0.30],   # teal
    [1.00, 1.00, 0.55],   # light yellow
    [0.85, 0.65, 1.00],   # lavender
    [0.20, 0.20, 0.45],   # navy
], dtype=np.float32)

CMNIST_SCHEMA = AttributeSchema(
    names=("digit", "background", "foreground"),
    cardinalities=(10, 10, 10),
    class_sharing=(False, False, True),
)


class IdxFormatError(ValueError):
    """Not an IDX image or label stream."""


class IdxLengthError(IdxFormatError):
    """The IDX payload is shorter than its header promises."""


# ----------------------------------------------------------------------
# IDX files
# ----------------------------------------------------------------------
def parse_idx(data):
    """
    Parse an IDX byte stream.

    Images (magic 0x00000803): float32 array (n, rows, cols) scaled to [0, 1].
    Labels (magic 0x00000801): int64 array (n,).
    """
    if len(data) < 4:
        raise IdxLengthError(f"IDX stream too short for a header ({len(data)} bytes)")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IMAGE_MAGIC:
        rank = 3
    elif magic == LABEL_MAGIC:
        rank = 1
    else:
        raise IdxFormatError(f"unknown IDX magic 0x{magic:08X}")

    header_len = 4 + 4 * rank
    if len(data) < header_len:
        raise IdxLengthError("IDX header truncated")
    dims = struct.unpack(">" + "I" * rank, data[4:header_len])
    expected = int(np.prod(dims))
    payload = data[header_len:]
    if len(payload) < expected:
        raise IdxLengthError(f"IDX payload has {len(payload)} bytes, header promises {expected}")

    raw = np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(dims)
    if rank == 1:
        return raw.astype(np.int64)
    return raw.astype(np.float32) / np.float32(255.0)


def serialize_idx(array):
    """Inverse of parse_idx: rank-3 images in [0, 1] (or uint8) or rank-1 labels."""
    array = np.asarray(array)
    if array.ndim == 3:
        magic = IMAGE_MAGIC
        if array.dtype != np.uint8:
            array = np.rint(array * 255.0)
    elif array.ndim == 1:
        magic = LABEL_MAGIC
    else:
        raise ValueError(f"IDX writer supports rank 1 or 3, got rank {array.ndim}")
    if array.min(initial=0) < 0 or array.max(initial=0) > 255:
        raise ValueError("IDX values must fit in an unsigned byte")
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape)
    return header + array.astype(np.uint8).tobytes()


def load_idx(path):
    """Read an IDX file; `.gz` files are decompressed on the fly."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return parse_idx(f.read())


# ----------------------------------------------------------------------
# Colorization
# ----------------------------------------------------------------------
def _check_color_index(index, name):
    index = np.asarray(index)
    if index.size and (index.min() < 1 or index.max() > 10):
        raise ValueError(f"{name} color index must be in [1, 10]")


def colorize(gray, bg_index, fg_index, background=BACKGROUND_PALETTE, foreground=FOREGROUND_PALETTE):
    """
    Blend one grayscale image (h, w) in [0, 1] into RGB (3, h, w):

        pixel = g * fg_rgb + (1 - g) * bg_rgb
    """
    _check_color_index(bg_index, "background")
    _check_color_index(fg_index, "foreground")
    g = np.asarray(gray, dtype=np.float32)[None, :, :]
    bg = background[bg_index - 1][:, None, None]
    fg = foreground[fg_index - 1][:, None, None]
    return (g * fg + (1.0 - g) * bg).astype(np.float32)


def colorize_batch(gray, bg_index, fg_index):
    """Vectorized colorize over (n, h, w); uint8 input is scaled by 1/255."""
    gray = np.asarray(gray)
    if gray.dtype == np.uint8:
        gray = gray.astype(np.float32) / np.float32(255.0)
    bg_index = np.asarray(bg_index)
    fg_index = np.asarray(fg_index)
    _check_color_index(bg_index, "background")
    _check_color_index(fg_index, "foreground")
    g = gray[:, None, :, :].astype(np.float32)
    bg = BACKGROUND_PALETTE[bg_index - 1][:, :, None, None]
    fg = FOREGROUND_PALETTE[fg_index - 1][:, :, None, None]
    return (g * fg + (1.0 - g) * bg).astype(np.float32)


# ----------------------------------------------------------------------
# Built-in glyphs
# ----------------------------------------------------------------------
# Segment endpoints in a unit box, (x, y) with y pointing down.
SEGMENTS = {
    "a": ((0.0, 0.0), (1.0, 0.0)),
    "b": ((1.0, 0.0), (1.0, 0.5)),
    "c": ((1.0, 0.5), (1.0, 1.0)),
    "d": ((0.0, 1.0), (1.0, 1.0)),
    "e": ((0.0, 0.5), (0.0, 1.0)),
    "f": ((0.0, 0.0), (0.0, 0.5)),
    "g": ((0.0, 0.5), (1.0, 0.5)),
}
DIGIT_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abged", 3: "abgcd", 4: "fgbc",
    5: "afgcd", 6: "afgedc", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


def _segment_distance(px, py, p0, p1):
    x0, y0 = p0
    x1, y1 = p1
    dx, dy = x1 - x0, y1 - y0
    t = ((px - x0) * dx + (py - y0) * dy) / max(dx * dx + dy * dy, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def render_glyph(digit, rng, size=GLYPH_SIZE):
    """One jittered 7-segment digit as uint8 (size, size)."""
    height = rng.uniform(15.0, 20.0)
    width = height * rng.uniform(0.45, 0.6)
    cx = size / 2 + rng.uniform(-2.5, 2.5)
    cy = size / 2 + rng.uniform(-2.5, 2.5)
    slant = rng.uniform(-0.25, 0.25)
    stroke = rng.uniform(1.6, 2.8)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    # map pixels back into the unit box, undoing the slant
    v = (yy - (cy - height / 2)) / height
    u = (xx - (cx - width / 2) - slant * (cy - yy)) / width

    dist = np.full((size, size), np.inf)
    for name in DIGIT_SEGMENTS[int(digit)]:
        p0, p1 = SEGMENTS[name]
        # distances measured in pixels
        d = _segment_distance(u * width, v * height,
                              (p0[0] * width, p0[1] * height), (p1[0] * width, p1[1] * height))
        dist = np.minimum(dist, d)

    intensity = np.clip(stroke / 2 + 0.5 - dist, 0.0, 1.0)
    intensity += rng.normal(0.0, 0.04, intensity.shape)
    return np.rint(np.clip(intensity, 0.0, 1.0) * 255).astype(np.uint8)


def render_glyphs(digits, seed, size=GLYPH_SIZE, verbose=False):
    """Deterministic synthetic digit images for 0-based `digits`."""
    rng = np.random.default_rng([seed, 28])
    digits = np.asarray(digits)
    images = np.empty((len(digits), size, size), dtype=np.uint8)
    for i, d in enumerate(tqdm(digits, desc="Rendering glyphs", disable=not verbose)):
        images[i] = render_glyph(d, rng, size)
    return images


def assign_colors(n, seed):
    """Uniform 1-based background and foreground color indices."""
    rng = np.random.default_rng([seed, 3])
    return rng.integers(1, 11, size=n), rng.integers(1, 11, size=n)


def cmnist_corpus(gray, digits, partition, seed):
    """
    Attach colors to a grayscale digit corpus (not yet colorized).

    Args:
        gray: uint8 (n, 28, 28)
        digits: 0-based digit labels (n,)
        partition: source pool per image, 0 = train pool, 1 = test pool
    """
    bg, fg = assign_colors(len(digits), seed)
    a = np.stack([np.asarray(digits) + 1, bg, fg], axis=1)
    return SampleSet(a=a, gray=np.asarray(gray, dtype=np.uint8),
                     partition=None if partition is None else np.asarray(partition))


def builtin_cmnist_corpus(train_pool, test_pool, seed, verbose=False):
    """A C-MNIST-style corpus from rendered glyphs with balanced digits."""
    n = train_pool + test_pool
    rng = np.random.default_rng([seed, 10])
    digits = rng.permutation(np.arange(n) % 10)
    gray = render_glyphs(digits, seed, verbose=verbose)
    partition = np.concatenate([np.zeros(train_pool, dtype=np.int64), np.ones(test_pool, dtype=np.int64)])
    return cmnist_corpus(gray, digits, partition, seed)


def idx_cmnist_corpus(train_images, train_labels, test_images, test_labels, seed):
    """A C-MNIST corpus from real MNIST IDX arrays (images as parsed floats)."""
    gray = np.concatenate([train_images, test_images])
    gray = np.rint(gray * 255).astype(np.uint8)
    digits = np.concatenate([train_labels, test_labels])
    partition = np.concatenate([np.zeros(len(train_labels), dtype=np.int64),
                                np.ones(len(test_labels), dtype=np.int64)])
    return cmnist_corpus(gray, digits, partition, seed)


# ----------------------------------------------------------------------
# Split builders
# ----------------------------------------------------------------------
def build_cmnist_split(samples, schema=CMNIST_SCHEMA, seed=0, bg_pair=(1, 2),
                       validation_fraction=VALIDATION_FRACTION):
    """
    C-MNIST GCDR split over the corpus indices; unselected samples are dropped.
    """
    if schema.m != 2:
        raise SplitConstructionError(f"C-MNIST split expects m = 2, got m = {schema.m}")
    if not schema.class_sharing[2]:
        raise SplitConstructionError("the foreground attribute must be flagged class-sharing")
    a = samples.a
    bg_a, bg_b = bg_pair
    if bg_a == bg_b:
        raise SplitConstructionError("background pair must name two different colors")
    present = set(np.unique(a[:, 1]).tolist())
    if len(present) < 2 or not {bg_a, bg_b} <= present:
        raise SplitConstructionError(
            f"need backgrounds {bg_a} and {bg_b} present, found {sorted(present)}"
        )

    low = a[:, 0] <= 5   # digits 0-4 are attribute values 1-5
    seen = (low & (a[:, 1] == bg_a)) | (~low & (a[:, 1] == bg_b))
    swapped = (low & (a[:, 1] == bg_b)) | (~low & (a[:, 1] == bg_a))

    if samples.partition is not None:
        seen &= samples.partition == 0
        swapped &= samples.partition == 1

    train = np.flatnonzero(seen)
    test = np.flatnonzero(swapped)
    if not len(train) or not len(test):
        raise SplitConstructionError("C-MNIST split is empty; corpus too small")
    validation = carve_validation(a, test, validation_fraction, seed)
    split = GcdrSplit.from_indices(a, train, test, validation, seed=seed)
    logger.info("C-MNIST split: %s", split.summary())
    return split


def build_grouped_split(samples, schema, grouping_attribute=2, seed=0,
                        validation_fraction=VALIDATION_FRACTION):
    """
    Grouped GCDR split for vector data.

    Classes are cut into k_g contiguous groups, where k_g is the cardinality of
    the grouping attribute; group r is trained only under domain r and tested
    under every other domain.
    """
    g = grouping_attribute
    if not 2 <= g <= schema.n_attributes:
        raise SplitConstructionError(f"grouping attribute {g} is not a domain attribute")
    n_classes = schema.cardinalities[0]
    n_domains = schema.cardinalities[g - 1]
    if n_classes < n_domains:
        raise SplitConstructionError(
            f"{n_classes} classes cannot be grouped over {n_domains} domains"
        )
    groups = np.array_split(np.arange(1, n_classes + 1), n_domains)
    train_domain = np.zeros(n_classes + 1, dtype=np.int64)
    for r, classes in enumerate(groups, start=1):
        train_domain[classes] = r

    a = samples.a
    in_train = a[:, g - 1] == train_domain[a[:, 0]]
    train = np.flatnonzero(in_train)
    test = np.flatnonzero(~in_train)
    if not len(train) or not len(test):
        raise SplitConstructionError("grouped split is empty")
    validation = carve_validation(a, test, validation_fraction, seed)
    split = GcdrSplit.from_indices(a, train, test, validation, seed=seed)
    logger.info("Grouped split on attribute %d: %s", g, split.summary())
    return split


def compact(samples, split):
    """
    Keep only the samples a split uses, colorizing images on the way.

    Returns the reduced SampleSet and the split re-indexed into it.
    """
    keep = np.union1d(split.train, split.test)
    remap = np.full(len(samples), -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    reduced = samples.subset(keep)
    if reduced.x is None and reduced.gray is not None:
        reduced.x = colorize_batch(reduced.gray, reduced.a[:, 1], reduced.a[:, 2])
    new_split = GcdrSplit.from_indices(
        reduced.a, remap[split.train], remap[split.test], remap[split.validation], seed=split.seed
    )
    return reduced, new_split


# ----------------------------------------------------------------------
# Synthetic tabular data
# ----------------------------------------------------------------------
CAUSAL_STRENGTH = 0.7


def generate_tabular(n, schema, causal_edge=None, seed=0, feature_dim=32,
                     class_scale=3.0, offset_scale=2.0, noise=1.0):
    """
    Gaussian-cluster vector data with additive domain offsets.

    x = center[class] + sum_j offset_j[a_j] + N(0, noise^2)

    With `causal_edge = (cause, effect)` (1-based attributes), the effect is
    tied to the cause 70% of the time, a_effect = ((a_cause - 1) mod k_effect) + 1,
    and uniform otherwise.
    """
    required = int(np.prod(schema.cardinalities))
    if n < required:
        raise ValueError(f"n = {n} is smaller than the {required} attribute combinations")

    rng = np.random.default_rng([seed, 41])
    k = schema.cardinalities
    a = np.stack([rng.integers(1, kj + 1, size=n) for kj in k], axis=1)

    if causal_edge is not None:
        cause, effect = causal_edge
        for j in (cause, effect):
            if not 1 <= j <= schema.n_attributes:
                raise ValueError(f"causal edge attribute {j} out of range")
        if cause == effect:
            raise ValueError("a causal edge needs two different attributes")
        tied = rng.random(n) < CAUSAL_STRENGTH
        k_eff = k[effect - 1]
        a[tied, effect - 1] = (a[tied, cause - 1] - 1) % k_eff + 1

    centers = rng.normal(0.0, class_scale, size=(k[0], feature_dim))
    x = centers[a[:, 0] - 1]
    for j in range(1, schema.n_attributes):
        offsets = rng.normal(0.0, offset_scale, size=(k[j], feature_dim))
        x = x + offsets[a[:, j] - 1]
    x = x + rng.normal(0.0, noise, size=x.shape)
    return SampleSet(a=a, x=x.astype(np.float32))
