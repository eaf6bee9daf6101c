import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infkit.errors import DomainError, NumericError, RefusedError, ShapeError
from infkit.model import (ACTIVATIONS, LOSSES, BatchSample, LabeledSet, ModelSpec, TrainConfig, TrainLog,
                          dense_hessian, forward, grad, hvp, hvp_batch, loss, losses, per_example_grads, predict,
                          train)

from conftest import random_problem


def fd_grad(spec, params, data, mask, h=1e-6):
    theta = params.values
    out = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        up = (mask * losses(spec, theta + e, data.inputs, data.labels)).sum()
        dn = (mask * losses(spec, theta - e, data.inputs, data.labels)).sum()
        out[j] = (up - dn) / (2 * h)
    return out


@pytest.mark.parametrize("activation", ACTIVATIONS)
@pytest.mark.parametrize("loss_kind", LOSSES)
def test_grad_matches_finite_differences(activation, loss_kind):
    spec, params, data = random_problem(1, activation=activation, loss_kind=loss_kind)
    mask = np.random.default_rng(2).uniform(size=data.size)
    g = grad(spec, params, data, mask)
    ref = fd_grad(spec, params, data, mask)
    assert np.linalg.norm(g - ref) <= 1e-6 * max(np.linalg.norm(ref), 1.0)


@pytest.mark.parametrize("activation", ACTIVATIONS)
@pytest.mark.parametrize("loss_kind", LOSSES)
def test_hvp_matches_gradient_differences(activation, loss_kind):
    spec, params, data = random_problem(3, activation=activation, loss_kind=loss_kind)
    v = np.random.default_rng(4).standard_normal(params.n)
    mask = np.ones(data.size)
    h = 1e-5
    ref = (grad(spec, params.values + h * v, data, mask) - grad(spec, params.values - h * v, data, mask)) / (2 * h)
    out = hvp(spec, params, data, mask, v)
    assert np.linalg.norm(out - ref) <= 1e-5 * max(np.linalg.norm(ref), 1.0)


def test_hvp_batch_matches_columns():
    spec, params, data = random_problem(5, sizes=(3, 4, 4, 2), activation="sigmoid")
    V = np.random.default_rng(6).standard_normal((params.n, 7))
    w = np.linspace(0, 1, data.size)
    batch = hvp_batch(spec, params, data, w, V)
    single = np.stack([hvp(spec, params, data, w, V[:, j]) for j in range(V.shape[1])], axis=1)
    np.testing.assert_allclose(batch, single, rtol=1e-12, atol=1e-12)


def test_dense_hessian_is_symmetric_and_capped():
    spec, params, data = random_problem(7)
    H = dense_hessian(spec, params, data)
    np.testing.assert_allclose(H, H.T, atol=1e-14)
    with pytest.raises(RefusedError):
        dense_hessian(spec, params, data, cap=5)


def test_l2_term_enters_only_when_regularized():
    spec, params, data = random_problem(8, l2=0.5)
    mask = np.ones(data.size)
    np.testing.assert_allclose(grad(spec, params, data, mask, regularized=True) - grad(spec, params, data, mask),
                               0.5 * params.values, atol=1e-12)
    v = np.ones(params.n)
    np.testing.assert_allclose(hvp(spec, params, data, mask, v, True) - hvp(spec, params, data, mask, v), 0.5 * v,
                               atol=1e-12)


def test_per_example_grads_sum_to_grad(small_problem):
    spec, params, data = small_problem
    G = per_example_grads(spec, params, data)
    np.testing.assert_allclose(G.sum(axis=0), grad(spec, params, data), atol=1e-12)


def test_forward_shapes_and_errors(small_problem):
    spec, params, data = small_problem
    assert forward(spec, params, data.inputs).shape == (data.size, 3)
    with pytest.raises(ShapeError):
        forward(spec, params, np.ones((2, 9)))
    bad = params.values.copy()
    bad[0] = np.inf
    with pytest.raises(NumericError):
        forward(spec, bad, data.inputs)


def test_loss_of_single_example(small_problem):
    spec, params, data = small_problem
    assert loss(spec, params, (data.inputs[0], data.labels[0])) == pytest.approx(
        losses(spec, params, data.inputs[:1], data.labels[:1])[0])


def test_spec_validation():
    with pytest.raises(DomainError):
        ModelSpec.mlp([2, 2], loss_kind="hinge")
    with pytest.raises(DomainError):
        ModelSpec.mlp([2, 2], l2_weight=-1.0)
    with pytest.raises(ShapeError):
        LabeledSet(np.ones((3, 2)), np.ones(2))
    with pytest.raises(DomainError):
        LabeledSet(np.ones((3, 2)), np.ones(3), mask=np.array([0, 2, 1]))


def test_spec_round_trip():
    spec = ModelSpec.mlp([3, 5, 2], activation="relu", loss_kind="mse", l2_weight=0.1)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_layer_map_layout():
    spec = ModelSpec.mlp([3, 5, 2])
    slots = spec.layer_map()
    assert [s.name for s in slots] == ["dense0.weight", "dense0.bias", "dense1.weight", "dense1.bias"]
    assert slots[-1].stop == spec.param_count == 3 * 5 + 5 + 5 * 2 + 2


def test_training_fits_separable_data():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-2, 0.5, (30, 2)), rng.normal(2, 0.5, (30, 2))])
    y = np.repeat([0, 1], 30)
    spec = ModelSpec.mlp([2, 4, 2])
    log = TrainLog()
    params = train(spec, spec.init_params(0), LabeledSet(X, y), TrainConfig(lr=0.5, epochs=100, momentum=0.9), log)
    assert np.mean(predict(spec, params, X) == y) == 1.0
    assert log.losses[-1] < log.losses[0]


def test_training_is_seed_deterministic(small_problem):
    spec, params, data = small_problem
    cfg = TrainConfig(lr=0.1, epochs=5, batch=4, seed=3)
    a = train(spec, params, data, cfg)
    b = train(spec, params, data, cfg)
    assert np.array_equal(a.values, b.values)


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 50), data=st.data())
def test_batch_sample_draws_distinct_rows(m, data):
    t = data.draw(st.integers(1, m))
    sample = BatchSample.draw(m, t, seed=data.draw(st.integers(0, 2**31)))
    assert len(set(sample.indices)) == t
    assert sample.weights(m).sum() == t
