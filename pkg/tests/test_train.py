import numpy as np
import pytest

from zigcompress import fixtures as F
from zigcompress.erase_space import erasing_space
from zigcompress.params import random_params
from zigcompress.partition import GroupPartition
from zigcompress.prune_space import pruning_space
from zigcompress.sparse_opt import OptimizerConfig, resolve_target
from zigcompress.train import TrainingError, flatten_params, train, train_baseline, unflatten_into

from conftest import dataset_for


def cfg(**kw):
    base = dict(variant="sgd_momentum", lr=0.02, steps=30, batch_size=16, target=0.5)
    base.update(kw)
    return OptimizerConfig(**base)


def zero_zigs(part: GroupPartition, params) -> set[int]:
    return set(part.zero_groups(params))


@pytest.fixture(scope="module")
def small():
    g = F.demonet(1, 16, 8, 4)
    return g, random_params(g, np.random.default_rng(0), bn_stats=True), dataset_for(g, 128)


def test_zero_target_bit_matches_baseline(small):
    g, p, data = small
    part = pruning_space(g)
    a = train(g, p, part, cfg(target=0), data)
    b = train_baseline(g, p, cfg(target=0), data)
    assert a.params.bit_equal(b.params)
    assert [r.loss for r in a.history] == [r.loss for r in b.history]


def test_dhspg_zeroes_exactly_k(small):
    g, p, data = small
    part = pruning_space(g)
    res = train(g, p, part, cfg(), data)
    k = resolve_target(0.5, len(part.zig_groups))
    assert zero_zigs(part, res.params) == set(res.classification.redundant)
    assert len(res.classification.redundant) == k
    assert 0 <= res.natural_zero <= k
    # important groups keep nonzero values
    assert not (zero_zigs(part, res.params) & res.classification.important)


def test_h2spg_shortfall_is_flagged():
    g = F.regnet_toy()
    p = random_params(g, np.random.default_rng(1), bn_stats=True)
    part = erasing_space(g)
    eg = part.meta["erasing_graph"]
    res = train(g, p, part, cfg(target=0.9), dataset_for(g, 96), "h2spg", eg)
    k = resolve_target(0.9, len(part.zig_groups))
    assert res.classification.shortfall == k - len(res.classification.redundant) > 0
    assert any("hierarchical search accepted" in f for f in res.flags)
    assert zero_zigs(part, res.params) == set(res.classification.redundant)


def test_mode_argument_checks(small):
    g, p, data = small
    part = erasing_space(g)
    with pytest.raises(ValueError, match="erasing graph"):
        train(g, p, part, cfg(), data, "h2spg")
    with pytest.raises(ValueError, match="does not take"):
        train(g, p, part, cfg(), data, "dhspg", part.meta["erasing_graph"])
    with pytest.raises(ValueError, match="unknown training mode"):
        train(g, p, part, cfg(), data, "sgd")


def test_zero_steps_is_rejected(small):
    g, p, data = small
    with pytest.raises(ValueError, match="warm-up requires"):
        train(g, p, pruning_space(g), cfg(steps=0), data)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(small):
    g, p, data = small
    with pytest.raises(TrainingError, match="step"):
        train(g, p, pruning_space(g), cfg(lr=1e6, steps=40), data)


def test_zero_count_never_decreases_during_hybrid_phase(small):
    g, p, data = small
    res = train(g, p, pruning_space(g), cfg(steps=40, final_projection=False), data)
    hybrid = [r.zero_groups for r in res.history if r.phase == "hybrid"]
    assert hybrid and all(a <= b for a, b in zip(hybrid, hybrid[1:]))


def test_history_csv(small):
    g, p, data = small
    res = train(g, p, pruning_space(g), cfg(steps=10), data)
    lines = res.history_csv().splitlines()
    assert lines[0] == "step,loss,zero_groups,lr"
    assert len(lines) == 11
    assert float(lines[1].split(",")[1]) == res.history[0].loss


def test_flatten_roundtrip(small):
    g, p, _ = small
    names = g.trainable_names()
    x = flatten_params(p, names)
    assert x.dtype == np.float32
    assert unflatten_into(p, names, x).bit_equal(p)


def test_training_does_not_mutate_inputs(small):
    g, p, data = small
    before = p.copy()
    train(g, p, pruning_space(g), cfg(steps=10), data)
    assert p.bit_equal(before)


def test_same_seed_same_result(small):
    g, p, data = small
    a = train(g, p, pruning_space(g), cfg(steps=12), data)
    b = train(g, p, pruning_space(g), cfg(steps=12), data)
    assert a.params.bit_equal(b.params)

