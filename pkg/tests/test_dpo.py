import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from votedpo.diffusion import Arch, DenoiserParams, init_params, linear_schedule
from votedpo.dpo import (DpoConfig, ModelPair, PairBatch, balanced_loss_and_grad, bt_loss, bt_probability,
                         dpo_loss_and_grad, l_theta, l_theta_batch, pair_batch, vanilla_loss_and_grad)
from votedpo.prefcore import ConsensusLabel, ValidationError, seeded_rng

from conftest import random_pairs
from gradcheck import fd_grad, rel_err


def random_batch(n, seed, k=4, T=10, C=3):
    g = np.random.default_rng(seed)
    return PairBatch(
        g.normal(size=(n, 2)), g.normal(size=(n, 2)), g.integers(0, C, n), g.integers(1, T + 1, n),
        g.normal(size=(n, 2)), g.normal(size=(n, 2)),
        g.choice([-1.0, 1.0], n), g.choice([-1.0, 0.0, 1.0], (n, k)),
    )


@pytest.fixture
def models(small_arch, small_params):
    ref = init_params(small_arch, seeded_rng(8).split("ref"), out_scale=1.0)
    return ModelPair(small_params, ref)


def test_bt():
    assert bt_probability(1.0, 1.0) == 0.5
    assert bt_probability(3.0, 1.0) == pytest.approx(1 / (1 + math.exp(-2)))
    assert bt_loss([(2.0, 0.0), (0.0, 0.0)]) == pytest.approx((math.log1p(math.exp(-2)) + math.log(2)) / 2)
    assert bt_loss([(1000.0, 0.0)]) == pytest.approx(0.0)
    assert math.isfinite(bt_loss([(0.0, 1000.0)]))


def test_surrogate_sign():
    # theta predicts eps_a perfectly while ref does not: l must be positive
    arch = Arch(d=2, m=1, C=1, h=2, T_steps=5)
    zero = DenoiserParams(arch)
    b = PairBatch(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(1, int), np.array([3]),
                  np.zeros((1, 2)), np.ones((1, 2)))
    bad = DenoiserParams(arch)
    bad.b3[...] = 1.0
    val, _ = l_theta(ModelPair(zero, bad), linear_schedule(5), b)
    assert val > 0


@pytest.mark.parametrize("seed", range(3))
def test_l_theta_gradient(models, small_schedule, seed):
    b = random_batch(1, seed)
    _, grad = l_theta(models, small_schedule, b)
    f = lambda v: l_theta(ModelPair(models.theta.with_vec(v), models.ref), small_schedule, b)[0]
    assert rel_err(grad, fd_grad(f, models.theta.vec)) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_balanced_gradient(models, small_schedule, seed):
    b = random_batch(5, seed)
    _, grad = balanced_loss_and_grad(models, small_schedule, b, 0.7)
    f = lambda v: balanced_loss_and_grad(ModelPair(models.theta.with_vec(v), models.ref), small_schedule, b, 0.7)[0]
    assert rel_err(grad, fd_grad(f, models.theta.vec)) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_vanilla_gradient(models, small_schedule, seed):
    b = random_batch(5, seed)
    w = (0.1, 0.2, 0.3, 0.4)
    _, grad = vanilla_loss_and_grad(models, small_schedule, b, 1.3, w)
    f = lambda v: vanilla_loss_and_grad(ModelPair(models.theta.with_vec(v), models.ref), small_schedule, b, 1.3, w)[0]
    assert rel_err(grad, fd_grad(f, models.theta.vec)) < 1e-6


# the fixtures are read-only, so sharing them across examples is safe
@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 10_000), st.integers(1, 8), st.floats(0.01, 50.0))
def test_identity_at_reference(small_params, small_schedule, seed, n, beta):
    same = ModelPair(small_params, small_params.copy())
    b = random_batch(n, seed)
    loss, _ = balanced_loss_and_grad(same, small_schedule, b, beta)
    assert abs(loss - math.log(2)) < 1e-12
    loss, _ = vanilla_loss_and_grad(same, small_schedule, b, beta, (0.25, 0.25, 0.25, 0.25))
    assert abs(loss - math.log(2)) < 1e-12


def test_conflicting_votes_cancel(small_params, small_schedule):
    same = ModelPair(small_params, small_params.copy())
    for seed in range(10):
        b = random_batch(1, seed)
        b.votes = np.array([[1.0, -1.0]])
        _, g_da = vanilla_loss_and_grad(same, small_schedule, b, 1.0, (0.5, 0.5))
        assert np.linalg.norm(g_da) <= 1e-12
        for s in (1.0, -1.0):
            b.s = np.array([s])
            _, g_agg = balanced_loss_and_grad(same, small_schedule, b, 1.0)
            assert np.linalg.norm(g_agg) > 0


def test_label_flip_matches_winner_loser_loss(models, small_schedule):
    for seed in range(20):
        b = random_batch(3, seed)
        b.s = np.ones(3)
        assert balanced_loss_and_grad(models, small_schedule, b, 2.0)[0] == pytest.approx(
            dpo_loss_and_grad(models, small_schedule, b, 2.0)[0], abs=1e-12)
        b.s = -np.ones(3)
        assert balanced_loss_and_grad(models, small_schedule, b, 2.0)[0] == pytest.approx(
            dpo_loss_and_grad(models, small_schedule, b.swapped(), 2.0)[0], abs=1e-12)


def test_swapping_a_pair_leaves_loss_unchanged(models, small_schedule):
    b = random_batch(6, 4)
    l1, g1 = balanced_loss_and_grad(models, small_schedule, b, 1.0)
    l2, g2 = balanced_loss_and_grad(models, small_schedule, b.swapped(), 1.0)
    assert l1 == pytest.approx(l2, abs=1e-12)
    assert np.allclose(g1, g2, atol=1e-12)


def test_zero_votes_contribute_log2_without_gradient(models, small_schedule):
    b = random_batch(4, 1)
    b.votes = np.zeros((4, 4))
    loss, grad = vanilla_loss_and_grad(models, small_schedule, b, 1.0)
    assert loss == pytest.approx(math.log(2))
    assert not np.any(grad)


def test_batch_surrogate_matches_single_pairs(models, small_schedule):
    b = random_batch(4, 9)
    l, _ = l_theta_batch(models, small_schedule, b)
    for i in range(4):
        one = PairBatch(b.x_a[i:i + 1], b.x_b[i:i + 1], b.c[i:i + 1], b.t[i:i + 1], b.eps_a[i:i + 1], b.eps_b[i:i + 1])
        assert l_theta(models, small_schedule, one)[0] == pytest.approx(l[i], abs=1e-13)


def test_pair_batch_from_records():
    from votedpo.aggregate import AggregationPolicy, label_dataset
    pairs, _ = label_dataset(random_pairs(3), AggregationPolicy())
    b = pair_batch(pairs, [1, 2, 3], np.zeros((3, 2)), np.zeros((3, 2)))
    assert b.s.tolist() == [p.consensus.s for p in pairs]
    assert b.votes.shape == (3, 4)
    assert pair_batch([p.unlabeled() for p in pairs], [1, 2, 3], np.zeros((3, 2)), np.zeros((3, 2))).s is None


def test_validation(models, small_schedule):
    with pytest.raises(ValidationError):
        DpoConfig(beta=0.0)
    with pytest.raises(ValidationError):
        DpoConfig(loss_mode="ipo")
    b = random_batch(2, 0)
    b.s = np.array([1.0, 0.0])
    with pytest.raises(ValidationError):
        balanced_loss_and_grad(models, small_schedule, b, 1.0)
    b.votes = None
    with pytest.raises(ValidationError):
        vanilla_loss_and_grad(models, small_schedule, b, 1.0)
    with pytest.raises(ValidationError):
        l_theta(models, small_schedule, random_batch(2, 0))
    with pytest.raises(ValidationError):
        ModelPair(models.theta, DenoiserParams(Arch()))
