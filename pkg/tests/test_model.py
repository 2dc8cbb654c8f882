import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repudiate.data import MiniBatchSpec
from repudiate.model import (Hyperparams, ModelSpec, OptimizerState, batch_grads, finite_diff_grad, fit,
                             forward, init_params, logit_confidence, logits, loss_and_grad, lr_at,
                             modified_sgd_step, per_sample_loss, sgd_step, train_step)


def _fd_check(spec, ds, batch, seed, wd=0.0):
    params = init_params(spec, seed) * 2.0
    _, g = loss_and_grad(params, spec, batch, ds, wd)
    fd = finite_diff_grad(lambda p: loss_and_grad(p, spec, batch, ds, wd)[0], params)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("c", [2, 3])
def test_logreg_gradient_matches_finite_differences(blobs, c):
    ds = blobs if c == 3 else blobs.subset(np.flatnonzero(blobs.labels < 2))
    _fd_check(ModelSpec.logreg(4, c), ds, MiniBatchSpec((0, 3, 5, 7)), seed=2, wd=0.01)


def test_mlp_gradient_matches_finite_differences(blobs):
    _fd_check(ModelSpec.mlp((4, 5, 4, 3)), blobs, MiniBatchSpec((1, 2, 8, 9, 11)), seed=3)


def test_cnn_gradient_matches_finite_differences(images):
    spec = ModelSpec.cnn((2,), (8, 7, 1), 2)
    _fd_check(spec, images, MiniBatchSpec((0, 4, 9), (1, 0, 1)), seed=4)


def test_binary_logreg_logits_are_zero_and_z():
    spec = ModelSpec.logreg(3, 2)
    params = np.array([1.0, -2.0, 0.5, 0.25])
    z = logits(params, spec, np.array([[1.0, 1.0, 2.0]]))
    np.testing.assert_allclose(z, [[0.0, 1.0 - 2.0 + 1.0 + 0.25]])


def test_forward_rows_sum_to_one(blobs):
    spec = ModelSpec.mlp((4, 6, 3))
    p = forward(init_params(spec, 0), spec, blobs.features)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_uniform_output_cross_entropy_is_log_c(blobs):
    spec = ModelSpec.logreg(4, 3)
    loss = per_sample_loss(np.zeros(spec.param_count), spec, blobs.features[:5], blobs.labels[:5])
    np.testing.assert_allclose(loss, math.log(3))


@given(st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_logit_confidence_is_log_odds(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec.mlp((3, 4, 3))
    params = init_params(spec, seed)
    x, y = rng.normal(size=(6, 3)), rng.integers(0, 3, 6)
    p = forward(params, spec, x)[np.arange(6), y]
    np.testing.assert_allclose(logit_confidence(params, spec, x, y), np.log(p / (1 - p)), rtol=1e-9, atol=1e-9)


def test_batched_gradients_equal_single_batch_bitwise(blobs):
    spec = ModelSpec.mlp((4, 7, 3))
    params = init_params(spec, 5)
    batches = [MiniBatchSpec(tuple(range(i, i + 6))) for i in range(0, 60, 6)]
    stacked = batch_grads(params, spec, batches, blobs, 0.01)
    for row, b in zip(stacked, batches):
        assert np.array_equal(row, loss_and_grad(params, spec, b, blobs, 0.01)[1])


def test_weight_decay_adds_two_wd_theta(blobs):
    spec = ModelSpec.logreg(4, 3)
    params = init_params(spec, 0)
    b = MiniBatchSpec((0, 1, 2))
    l0, g0 = loss_and_grad(params, spec, b, blobs)
    l1, g1 = loss_and_grad(params, spec, b, blobs, 0.1)
    assert l1 == pytest.approx(l0 + 0.1 * params @ params)
    np.testing.assert_allclose(g1 - g0, 0.2 * params)


def test_batch_order_and_permutation_do_not_change_gradient(blobs):
    spec = ModelSpec.mlp((4, 5, 3))
    params = init_params(spec, 1)
    a = loss_and_grad(params, spec, MiniBatchSpec((3, 1, 2)), blobs)[1]
    b = loss_and_grad(params, spec, MiniBatchSpec((1, 2, 3)), blobs)[1]
    assert np.array_equal(a, b)


def test_cosine_schedule_endpoints_and_midpoint():
    hp = Hyperparams(0.1, 4, 10, lr_schedule="cosine", lr_min=0.01)
    assert lr_at(0, hp) == pytest.approx(0.1)
    assert lr_at(10, hp) == pytest.approx(0.01)
    assert lr_at(5, hp) == pytest.approx(0.055)
    with pytest.raises(ValueError):
        lr_at(11, hp)


def test_heavy_ball_step_matches_hand_computation():
    hp = Hyperparams(0.5, 1, 3, momentum=0.9)
    theta, v = np.array([1.0, 2.0]), np.array([0.1, -0.1])
    g = np.array([0.2, 0.4])
    new, state = modified_sgd_step(theta, g, OptimizerState(v, 0), hp)
    np.testing.assert_allclose(state.velocity, [0.29, 0.31])
    np.testing.assert_allclose(new, theta - 0.5 * np.array([0.29, 0.31]))
    assert state.t == 1


def test_plain_step_reduces_to_sgd(blobs):
    spec = ModelSpec.logreg(4, 3)
    params = init_params(spec, 0)
    hp = Hyperparams(0.3, 3, 5)
    b = MiniBatchSpec((4, 5, 6))
    new, _, _, g = train_step(params, spec, b, blobs, OptimizerState.zeros(params.size), hp)
    assert np.array_equal(new, sgd_step(params, g, 0.3))


def test_non_finite_loss_raises(blobs):
    spec = ModelSpec.logreg(4, 3)
    params = np.full(spec.param_count, np.nan)
    with pytest.raises(FloatingPointError):
        train_step(params, spec, MiniBatchSpec((0,)), blobs, OptimizerState.zeros(params.size),
                   Hyperparams(0.1, 1, 1))


def test_init_is_float32_exact_and_seeded():
    spec = ModelSpec.mlp((5, 4, 2))
    a, b = init_params(spec, 7), init_params(spec, 7)
    assert np.array_equal(a, b)
    assert np.array_equal(a, a.astype(np.float32).astype(np.float64))
    assert not np.array_equal(a, init_params(spec, 8))


def test_spec_round_trip_and_validation():
    spec = ModelSpec.cnn((2, 3), (12, 11, 1), 10)
    assert ModelSpec.from_json(spec.to_json()) == spec
    with pytest.raises(ValueError, match="too small"):
        ModelSpec.cnn((2, 3), (9, 9, 1), 10)
    with pytest.raises(ValueError):
        ModelSpec("rnn", (3, 2))
    with pytest.raises(ValueError):
        Hyperparams(0.0, 1, 1)


def test_fit_learns_separable_blobs(blobs):
    spec = ModelSpec.logreg(4, 3)
    params = fit(spec, blobs, Hyperparams(0.2, 10, 200), 0, 1)
    acc = np.mean(logits(params, spec, blobs.features).argmax(1) == blobs.labels)
    assert acc > 0.9
