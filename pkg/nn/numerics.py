"""
Differentiable building blocks with selective gradient routing.

Everything here is a thin layer over torch. The one thing torch does not give
us directly is "train only this subset of parameters for this loss, but let
gradients flow through the rest". ParamSet and backward() add that.
A loss is routed to a set of parameter names; parameters outside the set keep
an exactly-zero gradient accumulator and are never touched by the optimizer.

Layers:
    Dense       input @ W + b, followed by none / tanh / softmax
    ConvStack   conv(5x5, same) -> tanh -> maxpool(2) twice, then flatten
    HiddenNet   one tanh hidden layer + linear output (G_j and T_j)
"""

import logging
import random
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

DTYPE = torch.float32
CLAMP_EPS = 1e-7
ACTIVATIONS = ("none", "tanh", "softmax")
LOSS_KINDS = ("cross-entropy", "mse")

# Adam defaults
LEARNING_RATE = 1e-3
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class DimensionError(ValueError):
    """Input, weight or target shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or Inf."""


class UnknownParameterError(KeyError):
    """A trainable set names a parameter that does not exist."""


def seed_everything(seed):
    """Seed python, numpy and torch, and ask torch for deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def check_finite(tensor, name):
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"non-finite values in {name}")


def _activate(z, activation):
    if activation == "none":
        return z
    if activation == "tanh":
        return torch.tanh(z)
    if activation == "softmax":
        return torch.softmax(z, dim=1)
    raise ValueError(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")


# ----------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------
def dense_forward(x, weight, bias, activation="none"):
    """
    Generalized linear layer.

    Args:
        x: (batch, in_features)
        weight: (in_features, out_features)
        bias: (out_features,)
        activation: "none", "tanh" or "softmax"

    Returns:
        (batch, out_features) tensor
    """
    if x.dim() != 2:
        raise DimensionError(f"dense input must be rank 2, got shape {tuple(x.shape)}")
    if weight.dim() != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"dense input width {x.shape[1]} does not match weight {tuple(weight.shape)}"
        )
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias shape {tuple(bias.shape)} does not match weight {tuple(weight.shape)}")
    return _activate(x @ weight + bias, activation)


def conv2d_forward(x, weight, bias, stride=1, padding="same"):
    """
    Cross-correlation over a (batch, channels, height, width) input.

    `padding` is "same" (stride 1 only), "valid", or an explicit integer.
    """
    if x.dim() != 4:
        raise DimensionError(f"conv input must be rank 4, got shape {tuple(x.shape)}")
    if weight.dim() != 4 or weight.shape[1] != x.shape[1]:
        raise DimensionError(
            f"kernel {tuple(weight.shape)} does not match {x.shape[1]} input channels"
        )
    kh, kw = weight.shape[2], weight.shape[3]
    if padding == "same":
        pad_h, pad_w = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        pad_h = pad_w = 0
    else:
        pad_h = pad_w = int(padding)
    if kh > x.shape[2] + 2 * pad_h or kw > x.shape[3] + 2 * pad_w:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {x.shape[2]}x{x.shape[3]}"
        )
    if padding == "same":
        if stride != 1:
            raise DimensionError("same padding requires stride 1")
        return F.conv2d(x, weight, bias, stride=1, padding="same")
    return F.conv2d(x, weight, bias, stride=stride, padding=pad_h)


class Dense(nn.Module):
    """Dense layer with Glorot-uniform weights and zero bias."""

    def __init__(self, in_features, out_features, activation="none"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.weight = nn.Parameter(torch.empty(in_features, out_features, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=DTYPE))
        nn.init.xavier_uniform_(self.weight)

    @property
    def out_features(self):
        return self.weight.shape[1]

    def forward(self, x):
        return dense_forward(x, self.weight, self.bias, self.activation)


class Conv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size=5, padding="same"):
        super().__init__()
        self.padding = padding
        self.weight = nn.Parameter(
            torch.empty(out_channels, in_channels, kernel_size, kernel_size, dtype=DTYPE)
        )
        self.bias = nn.Parameter(torch.zeros(out_channels, dtype=DTYPE))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x):
        return conv2d_forward(x, self.weight, self.bias, stride=1, padding=self.padding)


class ConvStack(nn.Module):
    """
    Input-feature network for images:

        conv(c -> 16, 5x5) -> tanh -> maxpool 2x2
        conv(16 -> 32, 5x5) -> tanh -> maxpool 2x2 -> flatten
    """

    def __init__(self, input_shape, channels=(16, 32), kernel_size=5):
        super().__init__()
        c, h, w = input_shape
        self.conv1 = Conv2d(c, channels[0], kernel_size)
        self.conv2 = Conv2d(channels[0], channels[1], kernel_size)
        self.out_features = channels[1] * (h // 4) * (w // 4)

    def forward(self, x):
        x = F.max_pool2d(torch.tanh(self.conv1(x)), 2)
        x = F.max_pool2d(torch.tanh(self.conv2(x)), 2)
        return x.flatten(start_dim=1)


class HiddenNet(nn.Module):
    """One tanh hidden layer followed by a linear output layer."""

    def __init__(self, in_features, hidden, out_features):
        super().__init__()
        self.hidden = Dense(in_features, hidden, "tanh")
        self.output = Dense(hidden, out_features, "none")
        self.out_features = out_features

    def forward(self, x):
        return self.output(self.hidden(x))


# ----------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------
@dataclass
class LossSpec:
    """What a prediction is compared against, and how much it counts."""

    kind: str
    target: torch.Tensor
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}, expected one of {LOSS_KINDS}")
        if self.weight < 0:
            raise ValueError(f"loss weight must be >= 0, got {self.weight}")


def loss_value(pred, spec):
    """
    Weighted batch-mean loss as a 0-dim float64 tensor.

    Cross-entropy clamps predictions to [eps, 1 - eps] before the log; the
    batch accumulation happens in float64.
    """
    if pred.shape != spec.target.shape:
        raise DimensionError(
            f"prediction shape {tuple(pred.shape)} does not match target {tuple(spec.target.shape)}"
        )
    p = pred.to(torch.float64)
    t = spec.target.to(torch.float64)
    if spec.kind == "cross-entropy":
        p = p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
        value = -(t * torch.log(p)).sum(dim=1).mean()
    else:
        value = ((p - t) ** 2).mean()
    return value * spec.weight


def one_hot(labels, num_classes):
    """0-based integer labels -> float32 one-hot rows."""
    return F.one_hot(labels.long(), num_classes).to(DTYPE)


# ----------------------------------------------------------------------
# Parameter routing
# ----------------------------------------------------------------------
class ParamSet:
    """
    Named trainable parameters plus routed gradient accumulators and Adam state.

    Names come from `module.named_parameters()`, so a parameter shared by two
    sub-modules appears once under its first name.
    """

    def __init__(self, named_parameters, lr=LEARNING_RATE, betas=BETAS, eps=ADAM_EPS):
        self._params = {}
        for name, param in named_parameters:
            if name in self._params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._params[name] = param
        self._by_id = {id(p): name for name, p in self._params.items()}
        self._grads = {name: torch.zeros_like(p) for name, p in self._params.items()}
        self._members = set()
        self.optimizer = torch.optim.Adam(list(self._params.values()), lr=lr, betas=betas, eps=eps)

    @classmethod
    def from_module(cls, module, **adam):
        return cls(module.named_parameters(), **adam)

    @property
    def names(self):
        return list(self._params)

    @property
    def members(self):
        """Names that received a routed gradient since the last zero_grad()."""
        return frozenset(self._members)

    def __getitem__(self, name):
        try:
            return self._params[name]
        except KeyError:
            raise UnknownParameterError(name) from None

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names_of(self, *modules):
        """Parameter names owned by the given modules, in registration order."""
        names = []
        seen = set()
        for module in modules:
            for p in module.parameters():
                name = self._by_id.get(id(p))
                if name is None:
                    raise UnknownParameterError(f"module parameter not registered in this set: {module}")
                if name not in seen:
                    seen.add(name)
                    names.append(name)
        return names

    def grad(self, name):
        if name not in self._grads:
            raise UnknownParameterError(name)
        return self._grads[name]

    def accumulate(self, name, grad):
        self.grad(name).add_(grad)
        self._members.add(name)

    def zero_grad(self):
        for g in self._grads.values():
            g.zero_()
        self._members.clear()

    def snapshot(self):
        """Detached copies of every parameter (for bit-identity checks)."""
        return {name: p.detach().clone() for name, p in self._params.items()}

    def step(self, lr=None):
        """Adam update on routed members only; everything else stays bit-identical."""
        if lr is not None:
            for group in self.optimizer.param_groups:
                group["lr"] = lr
        for name, param in self._params.items():
            if name in self._members:
                grad = self._grads[name]
                if not torch.isfinite(grad).all():
                    raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
                param.grad = grad.clone()
            else:
                param.grad = None
        self.optimizer.step()
        for param in self._params.values():
            param.grad = None


def backward(loss, params, trainable, retain_graph=True):
    """
    Route d(loss)/d(param) into the accumulators of `trainable` only.

    Gradients flow through every parameter on the path (frozen or not); only
    the accumulators of the named parameters change.

    Args:
        loss: 0-dim tensor
        params: ParamSet
        trainable: iterable of parameter names
        retain_graph: keep the graph for further routed backward calls

    Returns:
        dict name -> gradient of this loss (zeros outside `trainable`)
    """
    trainable = list(dict.fromkeys(trainable))
    for name in trainable:
        if name not in params:
            raise UnknownParameterError(name)
    check_finite(loss.detach(), "loss")

    grads = {name: torch.zeros_like(params[name]) for name in params.names}
    if not trainable:
        return grads

    computed = torch.autograd.grad(
        loss,
        [params[name] for name in trainable],
        retain_graph=retain_graph,
        allow_unused=True,
    )
    for name, g in zip(trainable, computed):
        if g is None:
            g = torch.zeros_like(params[name])
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
        params.accumulate(name, g)
    return grads


def optimizer_step(params, lr=LEARNING_RATE):
    """Apply one Adam step to the parameters routed since the last zero_grad()."""
    params.step(lr)
