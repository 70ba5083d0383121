import numpy as np
import pytest
import torch

from nn.dataset import AttributeSchema
from nn.model import LossWeights, ModelGraph, ModelWidths
from nn.prepare_data import build_grouped_split, generate_tabular

TINY_WIDTHS = ModelWidths(input_hidden=8, branch_hidden=6, branch_out=5,
                          additive_hidden=6, additive_out=5, conv_channels=(2, 3))


@pytest.fixture
def tiny_schema():
    return AttributeSchema(names=("class", "domain"), cardinalities=(3, 2))


@pytest.fixture
def three_schema():
    return AttributeSchema(names=("class", "device", "site"), cardinalities=(4, 2, 3))


def make_graph(schema, input_dim=8, seed=0, **kwargs):
    return ModelGraph(schema, (input_dim,), widths=TINY_WIDTHS, seed=seed, **kwargs)


@pytest.fixture
def tiny_graph(tiny_schema):
    return make_graph(tiny_schema)


def random_batch(schema, n=12, input_dim=8, seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(n, input_dim, generator=gen)
    a = torch.stack([torch.randint(0, k, (n,), generator=gen) for k in schema.cardinalities], dim=1)
    return x, a


@pytest.fixture
def tabular_problem():
    """Small grouped tabular split: 6 classes over 3 devices, 2 sites."""
    schema = AttributeSchema(names=("class", "device", "site"), cardinalities=(6, 3, 2))
    samples = generate_tabular(900, schema, seed=3, feature_dim=8)
    schema = schema.grouped_on(2)
    split = build_grouped_split(samples, schema, grouping_attribute=2, seed=3)
    return samples, split, schema


@pytest.fixture
def equal_weights():
    return lambda n: LossWeights(w=[1.0] * n, w_tilde=[[1.0] * n for _ in range(n)], w_prime=[1.0] * n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
