import numpy as np
import pytest
import torch

from conftest import TINY_WIDTHS, random_batch
from nn.augment import AugmentationError, augmented_batches, branch_features, make_augmented
from nn.dataset import AttributeSchema, GcdrSplit
from nn.model import ModelGraph
from nn.numerics import NonFiniteError, ParamSet
from nn.train import (VARIANTS, ConfigError, LossTerm, TrainConfig, grouping_attribute, route,
                      stage1_losses, stage1_step, stage2_improvement_curve, stage2_losses,
                      stage2_step, train)


def _config(**kwargs):
    kwargs.setdefault("widths", TINY_WIDTHS)
    return TrainConfig(**kwargs)


def _setup(schema, **kwargs):
    config = _config(**kwargs)
    graph = config.build_graph(schema, (8,))
    return config, graph, ParamSet.from_module(graph, lr=config.learning_rate)


def _changed(before, params, *modules):
    names = params.names_of(*modules)
    return {name for name in names if not torch.equal(before[name], params[name])}


def _route_and_step(terms, params, config):
    params.zero_grad()
    route(terms, params)
    params.step(config.learning_rate)
    params.zero_grad()


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------
@pytest.mark.parametrize("kwargs", [
    {"variant": "bogus"},
    {"step_ratio": (0, 5)},
    {"step_ratio": (1, 2, 3)},
    {"screening_threshold": 1.5},
    {"batch_size": 0},
    {"learning_rate": 0.0},
    {"stage1_epochs": 0},
])
def test_config_rejects_invalid_values(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_variant_traits(three_schema):
    assert _config(variant="full").uses_stage2
    assert not _config(variant="stage1-only").uses_stage2
    assert not _config(variant="full", stage2_epochs=0).uses_stage2
    assert _config(variant="single-branch").branches(3) == [0]
    assert _config(variant="direct").branches(3) == [0]
    assert not _config(variant="direct").adversarial
    assert _config(variant="no-adv-at-all").uses_stage2
    assert _config(variant="shared-d").build_graph(three_schema, (8,)).shared_discriminators
    assert set(VARIANTS) == {"full", "stage1-only", "single-branch", "shared-d",
                             "no-adv-stage1", "no-adv-at-all", "direct"}


def test_grouping_attribute_is_first_non_sharing_domain():
    schema = AttributeSchema(("digit", "bg", "fg"), (10, 10, 10), class_sharing=(False, False, True))
    assert grouping_attribute(schema) == 2
    assert grouping_attribute(schema.grouped_on(3)) == 3


# ----------------------------------------------------------------------
# Stage-1 routing
# ----------------------------------------------------------------------
def test_discriminate_phase_terms(tiny_schema):
    config, graph, params = _setup(tiny_schema)
    x, a = random_batch(tiny_schema)
    terms = stage1_losses(graph, params, x, a, config, "discriminate")
    assert [t.name for t in terms] == ["attribute[1]", "attribute[2]",
                                       "discriminate[1,2]", "discriminate[2,1]"]
    attribute = set(terms[0].trainable)
    assert attribute == set(params.names_of(graph.P, *graph.G, graph.D[0][0], graph.D[1][1]))
    assert set(terms[2].trainable) == set(params.names_of(graph.D[0][1], graph.D[1][0]))


def test_discriminate_phase_updates(tiny_schema):
    config, graph, params = _setup(tiny_schema)
    x, a = random_batch(tiny_schema)
    before = params.snapshot()
    _route_and_step(stage1_losses(graph, params, x, a, config, "discriminate"), params, config)

    assert _changed(before, params, graph.P, *graph.G, graph.D[0][0], graph.D[1][1],
                    graph.D[0][1], graph.D[1][0])
    assert not _changed(before, params, *graph.T, *graph.R)


def test_discriminate_terms_only_move_off_diagonal_heads(tiny_schema):
    config, graph, params = _setup(tiny_schema)
    x, a = random_batch(tiny_schema)
    terms = [t for t in stage1_losses(graph, params, x, a, config, "discriminate")
             if t.name.startswith("discriminate")]
    before = params.snapshot()
    _route_and_step(terms, params, config)

    assert not _changed(before, params, graph.P, *graph.G, graph.D[0][0], graph.D[1][1])
    assert _changed(before, params, graph.D[0][1]) and _changed(before, params, graph.D[1][0])


def test_confuse_terms_never_move_discriminators(tiny_schema):
    config, graph, params = _setup(tiny_schema)
    x, a = random_batch(tiny_schema)
    terms = stage1_losses(graph, params, x, a, config, "adversarial")
    assert [t.name for t in terms] == ["reinforce[1]", "reinforce[2]", "confuse[1,2]", "confuse[2,1]"]
    before = params.snapshot()
    _route_and_step([t for t in terms if t.name.startswith("confuse")], params, config)

    assert not _changed(before, params, *(d for row in graph.D for d in row), *graph.T, *graph.R)
    assert _changed(before, params, graph.P)
    assert _changed(before, params, graph.G[0]) and _changed(before, params, graph.G[1])


def test_reinforce_terms_only_move_shared_layer(tiny_schema):
    config, graph, params = _setup(tiny_schema)
    x, a = random_batch(tiny_schema)
    terms = [t for t in stage1_losses(graph, params, x, a, config, "adversarial")
             if t.name.startswith("reinforce")]
    before = params.snapshot()
    _route_and_step(terms, params, config)

    assert _changed(before, params, graph.P)
    everything_else = [*graph.G, *(d for row in graph.D for d in row), *graph.T, *graph.R]
    assert not _changed(before, params, *everything_else)


def test_masked_pairs_keep_zero_weight(tiny_schema):
    # edge 1 -> 2 switches off the (branch 2, attribute 1) pairs
    config, graph, params = _setup(tiny_schema, causal_edges=((1, 2),))
    x, a = random_batch(tiny_schema)
    for phase, name in (("discriminate", "discriminate[2,1]"), ("adversarial", "confuse[2,1]")):
        terms = {t.name: t for t in stage1_losses(graph, params, x, a, config, phase)}
        assert name in terms
        assert terms[name].loss.item() == 0.0
        params.zero_grad()
        route([terms[name]], params)
        assert all(torch.count_nonzero(params.grad(n)) == 0 for n in terms[name].trainable)
    params.zero_grad()


def test_direct_variant_trains_first_branch_only(three_schema):
    config, graph, params = _setup(three_schema, variant="direct")
    x, a = random_batch(three_schema)
    assert stage1_losses(graph, params, x, a, config, "adversarial") == []
    before = params.snapshot()
    record = stage1_step(graph, params, x, a, config)

    assert set(record) == {"attribute[1]"}
    assert _changed(before, params, graph.P, graph.G[0], graph.D[0][0])
    off_diagonal = [graph.D[j][jp] for j in range(3) for jp in range(3) if j != jp]
    assert not _changed(before, params, *off_diagonal, *graph.T, *graph.R, graph.G[1], graph.G[2],
                        graph.D[1][1], graph.D[2][2])


def test_stage1_step_is_deterministic(tiny_schema):
    x, a = random_batch(tiny_schema)
    results = []
    for _ in range(2):
        config, graph, params = _setup(tiny_schema, seed=11)
        record = stage1_step(graph, params, x, a, config)
        results.append((record, params.snapshot()))
    assert results[0][0] == results[1][0]
    for name, value in results[0][1].items():
        assert torch.equal(value, results[1][1][name])


def test_route_names_the_non_finite_component(tiny_graph):
    params = ParamSet.from_module(tiny_graph)
    bad = LossTerm("confuse[1,2]", torch.tensor(float("nan"), dtype=torch.float64, requires_grad=True),
                   tuple(params.names_of(tiny_graph.P)))
    with pytest.raises(NonFiniteError, match=r"confuse\[1,2\]"):
        route([bad], params)


def _separable(n=60, seed=0):
    rng = np.random.default_rng(seed)
    a = np.stack([np.arange(n) % 3 + 1, rng.integers(1, 3, size=n)], axis=1)
    x = np.eye(3, 8)[a[:, 0] - 1] * 3.0 + rng.normal(0.0, 0.3, size=(n, 8))
    return torch.from_numpy(x.astype(np.float32)), torch.from_numpy(a - 1)


@pytest.mark.parametrize("variant,lr,ratio", [
    ("no-adv-stage1", 1e-2, 0.25),
    ("full", 1e-2, 0.1),
    ("full", 1e-3, 0.25),
])
def test_attribute_loss_decreases(tiny_schema, variant, lr, ratio):
    config, graph, params = _setup(tiny_schema, variant=variant, learning_rate=lr, seed=2)
    x, a = _separable()
    first = stage1_step(graph, params, x, a, config)["attribute[1]"]
    for _ in range(199):
        last = stage1_step(graph, params, x, a, config)["attribute[1]"]
    assert last < ratio * first


# ----------------------------------------------------------------------
# Stage-2 routing
# ----------------------------------------------------------------------
def _stage2_batch(schema, n=16, seed=0):
    gen = torch.Generator().manual_seed(seed)
    features = [torch.randn(n, TINY_WIDTHS.branch_out, generator=gen) for _ in schema.cardinalities]
    _, a = random_batch(schema, n=n, seed=seed)
    seen = torch.arange(n) % 2 == 0
    return features, a, seen


def test_stage2_routing_sets(three_schema):
    # 1 -> 2 drops branch 2 from S_1
    config, graph, params = _setup(three_schema, causal_edges=((1, 2),))
    features, a, seen = _stage2_batch(three_schema)
    terms = {t.name: t for t in stage2_losses(graph, params, features, a, seen, config)}

    assert set(terms) == {"seen[1]", "seen[2]", "seen[3]", "unseen[1]", "unseen[2]", "unseen[3]"}
    assert set(terms["seen[2]"].trainable) == set(params.names_of(graph.R[1], graph.T[1]))
    assert set(terms["unseen[1]"].trainable) == set(params.names_of(graph.R[0], graph.T[2]))
    assert set(terms["unseen[2]"].trainable) == set(params.names_of(graph.R[1], graph.T[0], graph.T[2]))


def test_stage2_without_adversarial_routing_trains_every_transformer(three_schema):
    config, graph, params = _setup(three_schema, variant="no-adv-at-all")
    features, a, seen = _stage2_batch(three_schema)
    for term in stage2_losses(graph, params, features, a, seen, config):
        j = int(term.name[-2]) - 1
        assert set(term.trainable) == set(params.names_of(*graph.T, graph.R[j]))


def test_stage2_step_leaves_stage1_untouched(three_schema):
    config, graph, params = _setup(three_schema)
    features, a, seen = _stage2_batch(three_schema)
    before = params.snapshot()
    stage2_step(graph, params, features, a, seen, config)

    stage1 = [graph.P, *graph.G, *(d for row in graph.D for d in row)]
    assert not _changed(before, params, *stage1)
    assert _changed(before, params, *graph.T, *graph.R)


def _step_stage2_term(graph, params, config, features, a, seen, name):
    terms = {t.name: t for t in stage2_losses(graph, params, features, a, seen, config)}
    before = params.snapshot()
    _route_and_step([terms[name]], params, config)
    return before


def test_seen_loss_moves_only_its_own_transformer(three_schema):
    config, graph, params = _setup(three_schema)
    features, a, _ = _stage2_batch(three_schema)
    seen = torch.ones(16, dtype=torch.bool)
    before = _step_stage2_term(graph, params, config, features, a, seen, "seen[1]")

    assert _changed(before, params, graph.T[0]) and _changed(before, params, graph.R[0])
    assert not _changed(before, params, graph.T[1], graph.T[2], graph.R[1], graph.R[2])
    assert not _changed(before, params, graph.P, *graph.G, *(d for row in graph.D for d in row))


def test_unseen_loss_moves_the_other_transformer(tiny_schema):
    config, graph, params = _setup(tiny_schema)
    features, a, _ = _stage2_batch(tiny_schema)
    unseen = torch.zeros(16, dtype=torch.bool)
    before = _step_stage2_term(graph, params, config, features, a, unseen, "unseen[2]")

    assert _changed(before, params, graph.T[0]) and _changed(before, params, graph.R[1])
    assert not _changed(before, params, graph.T[1], graph.R[0])
    assert not _changed(before, params, graph.P, *graph.G, *(d for row in graph.D for d in row))


def test_unseen_loss_skips_caused_transformer(three_schema):
    # 1 -> 2: the unseen attribute-1 loss may not reshape T_2
    config, graph, params = _setup(three_schema, causal_edges=((1, 2),))
    features, a, _ = _stage2_batch(three_schema)
    unseen = torch.zeros(16, dtype=torch.bool)
    before = _step_stage2_term(graph, params, config, features, a, unseen, "unseen[1]")

    assert not _changed(before, params, graph.T[1])
    assert not _changed(before, params, graph.T[0], graph.R[1], graph.R[2])
    assert _changed(before, params, graph.T[2]) and _changed(before, params, graph.R[0])


def test_stage2_skips_missing_group(tiny_schema):
    config, graph, params = _setup(tiny_schema)
    features, a, _ = _stage2_batch(tiny_schema)
    terms = stage2_losses(graph, params, features, a, torch.ones(16, dtype=torch.bool), config)
    assert [t.name for t in terms] == ["seen[1]", "seen[2]"]


# ----------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------
def test_augmentation_without_screening(tabular_problem):
    samples, split, schema = tabular_problem
    graph = ModelGraph(schema, (8,), widths=TINY_WIDTHS)
    augmented = make_augmented(graph, samples, split, n_items=300, seed=4, threshold=0.0)

    assert len(augmented) == 300
    for j in range(3):
        assert np.array_equal(augmented.attributes[:, j], samples.a[augmented.donors[:, j], j])
    expected = [tuple(row) in split.train_combinations for row in augmented.attributes.tolist()]
    assert augmented.seen.tolist() == expected
    assert 0 < augmented.n_seen < len(augmented)
    assert np.isin(augmented.donors, split.train).all()

    features, _ = branch_features(graph, samples, augmented.donors[:5, 1])
    torch.testing.assert_close(augmented.features[1][:5], features[1])


def test_augmentation_is_seeded(tabular_problem):
    samples, split, schema = tabular_problem
    graph = ModelGraph(schema, (8,), widths=TINY_WIDTHS)
    first = make_augmented(graph, samples, split, n_items=50, seed=4, threshold=0.0)
    second = make_augmented(graph, samples, split, n_items=50, seed=4, threshold=0.0)
    other = make_augmented(graph, samples, split, n_items=50, seed=5, threshold=0.0)
    assert np.array_equal(first.donors, second.donors)
    assert not np.array_equal(first.donors, other.donors)


def test_screening_drops_unconfident_donors(tabular_problem):
    samples, split, schema = tabular_problem
    graph = ModelGraph(schema, (8,), widths=TINY_WIDTHS)
    _, confidence = branch_features(graph, samples, split.train)
    threshold = float(np.median(confidence[:, 0]))
    augmented = make_augmented(graph, samples, split, n_items=200, seed=1, threshold=threshold)

    position = {int(i): p for p, i in enumerate(split.train)}
    rows = np.vectorize(position.get)(augmented.donors)
    for j in range(3):
        assert (confidence[rows[:, j], j] >= threshold).all()
    assert len(augmented) < 200


def test_everything_screened_out(tabular_problem):
    samples, split, schema = tabular_problem
    graph = ModelGraph(schema, (8,), widths=TINY_WIDTHS)
    with pytest.raises(AugmentationError, match="lower the screening threshold"):
        make_augmented(graph, samples, split, n_items=20, seed=0, threshold=1.0)


def test_augmentation_rejects_bad_arguments(tabular_problem):
    samples, split, schema = tabular_problem
    graph = ModelGraph(schema, (8,), widths=TINY_WIDTHS)
    with pytest.raises(ValueError):
        make_augmented(graph, samples, split, n_items=10, seed=0, threshold=-0.1)
    with pytest.raises(ValueError):
        make_augmented(graph, samples, split, n_items=0, seed=0)


def test_augmented_batches_cover_every_item(tabular_problem):
    samples, split, schema = tabular_problem
    graph = ModelGraph(schema, (8,), widths=TINY_WIDTHS)
    augmented = make_augmented(graph, samples, split, n_items=70, seed=0, threshold=0.0)
    total = 0
    for *features, a, seen in augmented_batches(augmented, batch_size=32, seed=0, epoch=1):
        assert len(features) == 3
        assert a.min() >= 0
        assert seen.dtype == torch.bool
        total += len(a)
    assert total == 70


# ----------------------------------------------------------------------
# End to end
# ----------------------------------------------------------------------
def _quick(**kwargs):
    kwargs.setdefault("stage1_epochs", 2)
    kwargs.setdefault("stage2_epochs", 1)
    return _config(batch_size=64, screening_threshold=0.0, augment_count=200, seed=5, **kwargs)


def test_train_is_deterministic(tabular_problem):
    samples, split, schema = tabular_problem
    first = train(samples, split, schema, _quick())
    second = train(samples, split, schema, _quick())

    assert set(first.reports) == {"stage1", "stage2"}
    assert first.final is first.reports["stage2"]
    assert first.final.values() == second.final.values()
    assert len(first.history) == 3
    for (name, p), (_, q) in zip(first.graph.named_parameters(), second.graph.named_parameters()):
        assert torch.equal(p, q), name
    assert first.augmented is not None and len(first.augmented) == 200


@pytest.mark.parametrize("variant", ["stage1-only", "single-branch", "direct"])
def test_stage1_variants_skip_additive_stage(tabular_problem, variant):
    samples, split, schema = tabular_problem
    result = train(samples, split, schema, _quick(variant=variant, stage1_epochs=1))
    assert set(result.reports) == {"stage1"}
    assert result.augmented is None
    assert 0.0 <= result.final.auc <= 1.0


def test_train_needs_validation(tabular_problem):
    samples, split, schema = tabular_problem
    bare = GcdrSplit.from_indices(samples.a, split.train, split.test)
    with pytest.raises(ConfigError):
        train(samples, bare, schema, _quick())


def test_improvement_curve(tabular_problem):
    samples, split, schema = tabular_problem
    points = stage2_improvement_curve(samples, split, schema, _quick(), marks=[2, 1])
    assert [p.epoch for p in points] == [1, 2]
    for p in points:
        assert 0.0 <= p.auc_before <= 1.0 and 0.0 <= p.auc_after <= 1.0
        assert p.gain == pytest.approx(p.auc_after - p.auc_before)


def test_improvement_curve_needs_full_variant(tabular_problem):
    samples, split, schema = tabular_problem
    with pytest.raises(ConfigError):
        stage2_improvement_curve(samples, split, schema, _quick(variant="direct"), marks=[1])
    with pytest.raises(ConfigError):
        stage2_improvement_curve(samples, split, schema, _quick(), marks=[0])


def test_train_accepts_prebuilt_graph(tabular_problem):
    samples, split, schema = tabular_problem
    config = _quick(stage2_epochs=0)
    graph = config.build_graph(schema, samples.feature_shape)
    result = train(samples, split, schema, config, graph=graph)
    assert result.graph is graph
    assert set(result.reports) == {"stage1"}

