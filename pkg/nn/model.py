"""
Multi-branch network for disentangled attribute learning.

    x --P--> f_c --G_j--> f_j --D_jj'--> d_jj'          (stage 1)
    f~_j --T_j--> s_j,  u = s_1 + ... + s_{m+1},  r_j = R_j(u)   (stage 2)

P is a two-layer CNN for images or a one-hidden-layer dense net for vectors.
G_j and T_j are one-hidden-layer tanh nets; D_jj' and R_j are linear + softmax.
The "diagonal" head D_jj predicts branch j's own attribute; D_jj' (j' != j) is
the adversarial head for attribute j' on branch j.

Inference stacks:
    stage 1: P -> G_1 -> D_11
    stage 2: P -> G_1 -> T_1 -> R_1   (u is s_1 alone)

Attribute indices in code are 0-based: branch 0 is the class.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from nn.dataset import AttributeSchema
from nn.numerics import ConvStack, Dense, DimensionError, HiddenNet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GCDRCKPT"
CHECKPOINT_VERSION = 1
OTHER_WEIGHT = 0.1


@dataclass
class ModelWidths:
    """Layer widths; the conv stack fixes f_c for images."""

    input_hidden: int = 128
    branch_hidden: int = 64
    branch_out: int = 32
    additive_hidden: int = 64
    additive_out: int = 32
    conv_channels: tuple = (16, 32)


@dataclass
class LossWeights:
    """
    w (attribute learning), w_tilde (adversarial pairs) and w_prime (recognition).

    Defaults: w_1 = w'_1 = 1, w~_j1 = 1 for every branch j, everything else 0.1.
    """

    w: list
    w_tilde: list
    w_prime: list

    @classmethod
    def default(cls, n_attributes, other=OTHER_WEIGHT):
        w = [1.0] + [other] * (n_attributes - 1)
        w_prime = [1.0] + [other] * (n_attributes - 1)
        w_tilde = [[1.0 if jp == 0 else other for jp in range(n_attributes)]
                   for _ in range(n_attributes)]
        return cls(w=w, w_tilde=w_tilde, w_prime=w_prime)

    def __post_init__(self):
        n = len(self.w)
        if len(self.w_prime) != n or len(self.w_tilde) != n or any(len(row) != n for row in self.w_tilde):
            raise ValueError("weight tables must all cover the same attributes")
        values = list(self.w) + list(self.w_prime) + [v for row in self.w_tilde for v in row]
        if any(v < 0 for v in values):
            raise ValueError("loss weights must be >= 0")


class CausalPrior:
    """
    Lambda in {0,1}^{(m+1)x(m+1)} and the pruned stage-2 sets S_j.

    Lambda[j][j'] = 0 when attribute j' causes attribute j: the (j, j') adversarial
    terms of stage 1 are switched off. S_j drops j' when j causes j'.
    """

    def __init__(self, matrix):
        matrix = np.asarray(matrix)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"prior must be square, got shape {matrix.shape}")
        if not np.isin(matrix, (0, 1)).all():
            raise ValueError("prior entries must be 0 or 1")
        self.matrix = matrix.astype(np.int64)

    @classmethod
    def identity(cls, n_attributes):
        return cls(np.ones((n_attributes, n_attributes), dtype=np.int64))

    @classmethod
    def from_edges(cls, n_attributes, edges):
        """`edges` are 1-based (cause, effect) pairs."""
        matrix = np.ones((n_attributes, n_attributes), dtype=np.int64)
        for cause, effect in edges:
            if not (1 <= cause <= n_attributes and 1 <= effect <= n_attributes) or cause == effect:
                raise ValueError(f"bad causal edge {cause}>{effect}")
            matrix[effect - 1, cause - 1] = 0
        return cls(matrix)

    @property
    def n_attributes(self):
        return len(self.matrix)

    def edges(self):
        return [(jp + 1, j + 1) for j in range(self.n_attributes)
                for jp in range(self.n_attributes) if j != jp and self.matrix[j, jp] == 0]

    def additive_targets(self, j):
        """S_j (0-based): every other branch not caused by j."""
        return [jp for jp in range(self.n_attributes) if jp != j and self.matrix[jp, j] == 1]


def apply_causal_prior(weights, prior):
    """
    Effective weights and pruned sets.

    Returns:
        (w_tilde table with off-diagonal entries multiplied by Lambda, [S_1, ..., S_{m+1}])
    """
    n = prior.n_attributes
    effective = [[weights.w_tilde[j][jp] * (1 if j == jp else int(prior.matrix[j, jp]))
                  for jp in range(n)] for j in range(n)]
    return effective, [prior.additive_targets(j) for j in range(n)]


class BranchOutputs(NamedTuple):
    f_c: torch.Tensor
    f: list
    d: list          # d[j][j'] = softmax scores of D_jj' on f_j


class AdditiveOutputs(NamedTuple):
    s: list
    u: torch.Tensor
    r: list


class ModelGraph(nn.Module):
    """
    All networks of both stages.

    The full topology is always built; training variants decide which parts
    are updated. With `shared_discriminators`, D_jj' is one module per j' shared
    by every branch j.
    """

    def __init__(self, schema, input_shape, widths=None, prior=None, weights=None,
                 shared_discriminators=False, seed=0):
        super().__init__()
        self.schema = schema
        self.input_shape = tuple(input_shape)
        self.widths = widths or ModelWidths()
        n = schema.n_attributes
        self.prior = prior or CausalPrior.identity(n)
        if self.prior.n_attributes != n:
            raise ValueError("prior size does not match the schema")
        self.weights = weights or LossWeights.default(n)
        if len(self.weights.w) != n:
            raise ValueError("weight tables do not match the schema")
        self.shared_discriminators = shared_discriminators

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self._build()

    def _build(self):
        n = self.schema.n_attributes
        k = self.schema.cardinalities
        wd = self.widths
        if len(self.input_shape) == 3:
            self.P = ConvStack(self.input_shape, channels=tuple(wd.conv_channels))
            fc = self.P.out_features
        elif len(self.input_shape) == 1:
            self.P = Dense(self.input_shape[0], wd.input_hidden, "tanh")
            fc = wd.input_hidden
        else:
            raise DimensionError(f"unsupported input shape {self.input_shape}")

        self.G = nn.ModuleList([HiddenNet(fc, wd.branch_hidden, wd.branch_out) for _ in range(n)])
        if self.shared_discriminators:
            heads = [Dense(wd.branch_out, k[jp], "softmax") for jp in range(n)]
            self.D = nn.ModuleList([nn.ModuleList(heads) for _ in range(n)])
        else:
            self.D = nn.ModuleList([
                nn.ModuleList([Dense(wd.branch_out, k[jp], "softmax") for jp in range(n)])
                for _ in range(n)
            ])
        self.T = nn.ModuleList([HiddenNet(wd.branch_out, wd.additive_hidden, wd.additive_out)
                                for _ in range(n)])
        self.R = nn.ModuleList([Dense(wd.additive_out, k[j], "softmax") for j in range(n)])

    @property
    def n_attributes(self):
        return self.schema.n_attributes

    def _check_input(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"input shape {tuple(x.shape[1:])} does not match {self.input_shape}")

    def features(self, x):
        """f_c and every f_j."""
        self._check_input(x)
        f_c = self.P(x)
        return f_c, [g(f_c) for g in self.G]

    def forward_stage1(self, x):
        f_c, f = self.features(x)
        d = [[head(f[j]) for head in self.D[j]] for j in range(self.n_attributes)]
        return BranchOutputs(f_c=f_c, f=f, d=d)

    def infer_stage1(self, x):
        """Class scores from P -> G_1 -> D_11."""
        self._check_input(x)
        return self.D[0][0](self.G[0](self.P(x)))

    def forward_stage2(self, features):
        """
        Args:
            features: one (batch, branch_out) tensor per attribute, in branch order
        """
        if len(features) != self.n_attributes:
            raise DimensionError(f"expected {self.n_attributes} feature blocks, got {len(features)}")
        for j, f in enumerate(features):
            if f.dim() != 2 or f.shape[1] != self.widths.branch_out:
                raise DimensionError(f"feature block {j} has shape {tuple(f.shape)}")
        s = [t(f) for t, f in zip(self.T, features)]
        u = s[0]
        for s_j in s[1:]:
            u = u + s_j
        return AdditiveOutputs(s=s, u=u, r=[head(u) for head in self.R])

    def infer_stage2(self, x):
        """Class scores from P -> G_1 -> T_1 -> R_1."""
        self._check_input(x)
        return self.R[0](self.T[0](self.G[0](self.P(x))))

    def infer(self, x, stack):
        if stack == "stage1":
            return self.infer_stage1(x)
        if stack == "stage2":
            return self.infer_stage2(x)
        raise ValueError(f"unknown inference stack {stack!r}")

    def effective_weights(self):
        return apply_causal_prior(self.weights, self.prior)


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------
class CheckpointFormatError(ValueError):
    """Not a readable checkpoint."""


class CheckpointLengthError(CheckpointFormatError):
    """The checkpoint ends before its manifest says it should."""


class CheckpointSchemaError(CheckpointFormatError):
    """The checkpoint was written for a different attribute schema."""


def _manifest(graph):
    schema = graph.schema
    return {
        "format_version": CHECKPOINT_VERSION,
        "schema": {
            "names": list(schema.names),
            "cardinalities": list(schema.cardinalities),
            "class_sharing": list(schema.class_sharing),
        },
        "input_shape": list(graph.input_shape),
        "widths": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(graph.widths).items()},
        "shared_discriminators": graph.shared_discriminators,
        "prior": graph.prior.matrix.tolist(),
        "weights": asdict(graph.weights),
        "parameters": [{"name": name, "shape": list(p.shape)} for name, p in graph.named_parameters()],
    }


def save_checkpoint(graph, path):
    """
    Layout: 8-byte magic, u32 version, u32 manifest length, UTF-8 JSON
    manifest, then little-endian float32 parameters in manifest order.
    """
    manifest = json.dumps(_manifest(graph), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(manifest)))
        f.write(manifest)
        for _, p in graph.named_parameters():
            f.write(p.detach().cpu().numpy().astype("<f4").tobytes())


def load_checkpoint(path, schema=None):
    """
    Rebuild a ModelGraph from a checkpoint.

    Args:
        schema: if given, the checkpoint's schema must have the same cardinalities
    """
    with open(path, "rb") as f:
        data = f.read()
    header = len(CHECKPOINT_MAGIC) + 8
    if len(data) < header:
        raise CheckpointLengthError(f"{path}: truncated header")
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint")
    version, manifest_len = struct.unpack("<II", data[len(CHECKPOINT_MAGIC):header])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < header + manifest_len:
        raise CheckpointLengthError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[header:header + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt manifest ({exc})") from None

    stored = AttributeSchema(**manifest["schema"])
    if schema is not None and tuple(schema.cardinalities) != stored.cardinalities:
        raise CheckpointSchemaError(
            f"{path}: checkpoint cardinalities {stored.cardinalities} "
            f"do not match {tuple(schema.cardinalities)}"
        )

    widths = manifest["widths"]
    widths["conv_channels"] = tuple(widths["conv_channels"])
    graph = ModelGraph(
        stored,
        manifest["input_shape"],
        widths=ModelWidths(**widths),
        prior=CausalPrior(manifest["prior"]),
        weights=LossWeights(**manifest["weights"]),
        shared_discriminators=manifest["shared_discriminators"],
    )

    offset = header + manifest_len
    params = dict(graph.named_parameters())
    if [e["name"] for e in manifest["parameters"]] != list(params):
        raise CheckpointFormatError(f"{path}: parameter layout does not match the architecture")
    with torch.no_grad():
        for entry in manifest["parameters"]:
            p = params[entry["name"]]
            if list(p.shape) != entry["shape"]:
                raise CheckpointFormatError(f"{path}: shape mismatch for {entry['name']}")
            nbytes = 4 * p.numel()
            if len(data) < offset + nbytes:
                raise CheckpointLengthError(f"{path}: parameter payload truncated at {entry['name']}")
            values = np.frombuffer(data, dtype="<f4", count=p.numel(), offset=offset)
            p.copy_(torch.from_numpy(values.astype(np.float32).reshape(p.shape)))
            offset += nbytes
    if offset != len(data):
        raise CheckpointLengthError(f"{path}: {len(data) - offset} trailing bytes")
    return graph
