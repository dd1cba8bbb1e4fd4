import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionfilter import _kernels_py, kernels
from fusionfilter.errors import ConfigError, DataError, ShapeError
from fusionfilter.nncore import (
    MlpModel,
    MlpSpec,
    TrainConfig,
    _MlpObjective,
    bce_loss,
    dumps_model,
    forward,
    forward_batch,
    init_model,
    load_model,
    loads_model,
    param_count,
    save_model,
    train,
)

from oracles import bce, central_difference, mlp_forward, relative_error


def test_param_counts():
    assert init_model(MlpSpec((4, 1)), 7).n_params == 5
    assert param_count(MlpSpec((8, 16, 6))) == 8 * 16 + 16 + 16 * 6 + 6 == 246


@given(st.lists(st.integers(1, 12), min_size=2, max_size=5))
def test_param_count_matches_enumeration(widths):
    model = init_model(MlpSpec(tuple(widths)), 0)
    assert param_count(model.spec) == sum(w.size for w in model.weights) + sum(b.size for b in model.biases)


@pytest.mark.parametrize("widths", [(3,), (), (4, 0, 1), (2, -1)])
def test_invalid_spec(widths):
    with pytest.raises(ConfigError):
        MlpSpec(widths)


def test_init_deterministic_and_scheme():
    spec = MlpSpec((8, 16, 6))
    a = init_model(spec, 42)
    b = init_model(spec, 42)
    assert a.same_parameters(b)
    assert not a.same_parameters(init_model(spec, 43))
    for W, bias in zip(a.weights, a.biases):
        limit = math.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        assert np.all(np.abs(W) <= limit)
        assert np.all(bias == 0)


def test_zero_parameters_give_half():
    model = MlpModel(MlpSpec((5, 7, 3)), np.zeros(param_count(MlpSpec((5, 7, 3)))), 0)
    np.testing.assert_array_equal(forward(model, np.arange(5.0)), [0.5, 0.5, 0.5])


def test_single_unit_identity():
    model = MlpModel(MlpSpec((1, 1)), np.array([1.0, 0.0]), 0)
    assert forward(model, [0.0]).tolist() == [0.5]


def test_hand_computed_2x2_chain():
    # W1 = [[1, -2], [0.5, 1]], b1 = [0, 0.5]; W2 = [[1, 0], [-1, 2]], b2 = [0.25, -1]
    params = np.array([1, -2, 0.5, 1, 0, 0.5, 1, 0, -1, 2, 0.25, -1], dtype=float)
    model = MlpModel(MlpSpec((2, 2, 2)), params, 0)
    x = np.array([1.0, 2.0])
    # hidden pre-activation: [1*1 + 2*0.5 + 0, 1*-2 + 2*1 + 0.5] = [2, 0.5]
    # output pre-activation: [2*1 + 0.5*-1 + 0.25, 2*0 + 0.5*2 - 1] = [1.75, 0]
    expected = [1 / (1 + math.exp(-1.75)), 0.5]
    np.testing.assert_allclose(forward(model, x), expected, rtol=0, atol=1e-15)


def test_forward_matches_oracle(rng):
    spec = MlpSpec((6, 9, 4, 3))
    model = init_model(spec, 3)
    model = model.with_params(model.params + rng.normal(0, 0.1, model.n_params))
    X = rng.normal(size=(17, 6))
    np.testing.assert_allclose(forward_batch(model, X), mlp_forward(model.weights, model.biases, X), rtol=1e-12)


def test_forward_scores_inside_unit_interval(rng):
    model = init_model(MlpSpec((3, 4, 2)), 0)
    big = model.with_params(model.params * 1e4)
    out = forward_batch(big, rng.normal(size=(50, 3)) * 100)
    assert np.all(out > 0) and np.all(out < 1)


def test_forward_shape_error():
    model = init_model(MlpSpec((3, 2)), 0)
    with pytest.raises(ShapeError):
        forward(model, np.zeros(4))


def test_bce_values():
    assert bce_loss([0.5], [1]) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss([0.9, 0.1], [1, 0]) == pytest.approx(-math.log(0.9), abs=1e-12)
    with pytest.raises(ShapeError):
        bce_loss([0.5, 0.5], [1])


def test_bce_score_derivative_matches_finite_difference(rng):
    s = rng.uniform(0.05, 0.95, 8)
    y = (rng.random(8) < 0.5).astype(float)
    analytic = (s - y) / (s * (1 - s)) / s.size
    numeric = central_difference(lambda p: bce_loss(p, y), s, step=1e-6)
    assert np.max(relative_error(analytic, numeric)) < 1e-6


def _random_small_model(rng):
    depth = rng.integers(1, 4)
    widths = tuple(int(w) for w in rng.integers(1, 9, size=depth + 1))
    model = init_model(MlpSpec(widths), int(rng.integers(1 << 31)))
    # nonzero biases so no unit sits exactly on a ReLU kink
    return model.with_params(model.params + rng.normal(0, 0.05, model.n_params))


def gradient_agreement(model, rng, batch=5):
    """Fraction of coordinates within 1e-4 relative error, and the worst error."""
    X = rng.normal(size=(batch, model.spec.n_inputs))
    Y = (rng.random((batch, model.spec.n_outputs)) < 0.5).astype(float)
    obj = _MlpObjective(model.spec, X, Y, batch)
    idx = np.arange(batch)
    grad = np.zeros(model.n_params)
    obj.loss_grad(model.params.copy(), idx, grad)

    def loss(p):
        m = model.with_params(p)
        return bce(mlp_forward(m.weights, m.biases, X), Y)

    numeric = central_difference(loss, model.params)
    err = relative_error(grad, numeric)
    return float(np.mean(err <= 1e-4)), float(err.max())


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        frac, _ = gradient_agreement(_random_small_model(rng), rng)
        assert frac >= 0.99


def test_lr_zero_returns_initial_parameters(rng):
    model = init_model(MlpSpec((3, 4, 1)), 5)
    X = rng.normal(size=(40, 3))
    Y = (X[:, 0] > 0).astype(float)
    trained, log = train(model, X, Y, TrainConfig(epochs=1, learning_rate=0.0))
    assert trained.same_parameters(model)
    assert len(log.epochs) == 1


def test_lr_schedule_exact():
    tc = TrainConfig(learning_rate=1e-3, lr_decay_gamma=0.95)
    for k in range(60):
        assert tc.lr_at(k) == 1e-3 * 0.95 ** k


def test_lr_schedule_reaches_optimizer(rng, monkeypatch):
    seen = []
    real = kernels.adam_update

    def spy(params, grad, m, v, lr, *rest):
        seen.append(lr)
        return real(params, grad, m, v, lr, *rest)

    monkeypatch.setattr(kernels, "adam_update", spy)
    X = rng.normal(size=(20, 2))
    tc = TrainConfig(epochs=4, batch_size=8, learning_rate=0.01, lr_decay_gamma=0.5)
    train(init_model(MlpSpec((2, 1)), 0), X, (X[:, 0] > 0).astype(float), tc)
    assert sorted(set(seen), reverse=True) == [0.01, 0.005, 0.0025, 0.00125]


def _blobs(seed, n=200):
    r = np.random.default_rng(seed)
    y = (r.random(n) < 0.5).astype(float)
    X = r.normal(0, 0.6, size=(n, 2)) + np.where(y[:, None] == 1, 1.5, -1.5)
    return X, y


def test_separable_toy_set_reaches_95_percent():
    X, y = _blobs(0)
    # oracle: the known separator x0 + x1 = 0 classifies the set (nearly) perfectly
    assert np.mean((X.sum(axis=1) > 0) == (y == 1)) >= 0.97
    tc = TrainConfig(seed=0)
    model, log = train(init_model(MlpSpec((2, 16, 1)), 0), X, y, tc)
    from fusionfilter.nncore import split_indices

    _, val = split_indices(len(y), tc.validation_fraction, tc.seed)
    acc = np.mean((forward_batch(model, X[val])[:, 0] >= 0.5) == (y[val] == 1))
    assert acc >= 0.95


def test_best_model_selection(rng):
    X, y = _blobs(1)
    model, log = train(init_model(MlpSpec((2, 4, 1)), 1), X, y, TrainConfig(epochs=10, learning_rate=0.05))
    assert log.best_val_loss <= min(log.val_losses)
    assert log.val_losses[log.best_epoch] == log.best_val_loss
    from fusionfilter.nncore import split_indices

    _, val = split_indices(len(y), 0.1, 0)
    assert bce_loss(forward_batch(model, X[val])[:, 0], y[val]) == pytest.approx(log.best_val_loss, rel=1e-12)


def test_training_deterministic():
    X, y = _blobs(2)
    tc = TrainConfig(epochs=5, seed=9)
    a, la = train(init_model(MlpSpec((2, 8, 1)), 0), X, y, tc)
    b, lb = train(init_model(MlpSpec((2, 8, 1)), 0), X, y, tc)
    assert a.same_parameters(b)
    assert la.val_losses == lb.val_losses


@pytest.mark.parametrize(
    "X, Y",
    [(np.zeros((0, 2)), np.zeros(0)), (np.zeros((5, 2)), np.zeros(4)), (np.zeros((5, 3)), np.zeros(5))],
)
def test_train_input_errors(X, Y):
    with pytest.raises(ConfigError):
        train(init_model(MlpSpec((2, 1)), 0), X, Y, TrainConfig(epochs=1))


@pytest.mark.parametrize(
    "kwargs",
    [dict(epochs=0), dict(batch_size=0), dict(learning_rate=-1), dict(lr_decay_gamma=0), dict(validation_fraction=1)],
)
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_model_round_trip(tmp_path, rng):
    model = init_model(MlpSpec((5, 3, 2), output_activation="relu"), 2**40 + 3)
    model = model.with_params(rng.normal(size=model.n_params))
    back = load_model(save_model(model, tmp_path / "m.mlp"))
    assert back.same_parameters(model)
    assert back.spec == model.spec and back.rng_seed == model.rng_seed
    assert dumps_model(back) == dumps_model(model)


def test_model_file_bad_magic():
    with pytest.raises(DataError):
        loads_model(b"NOTAMODEL" + bytes(40))


def test_model_file_truncated(rng):
    data = dumps_model(init_model(MlpSpec((3, 4, 1)), 0))
    with pytest.raises(DataError):
        loads_model(data[:20])


def test_backends_agree(rng):
    ext = pytest.importorskip("fusionfilter._kernels", reason="compiled kernels not built")

    for widths in [(16, 64, 32), (64, 32, 6), (3, 1)]:
        w = np.asarray(widths, dtype=np.int64)
        params = rng.normal(size=param_count(MlpSpec(widths)))
        X = rng.normal(size=(11, widths[0]))
        acts_a = np.empty(11 * sum(widths[1:]))
        acts_b = np.empty_like(acts_a)
        for relu_out in (False, True):
            out_a = np.array(ext.mlp_forward(params, w, relu_out, X, acts_a))
            out_b = np.array(_kernels_py.mlp_forward(params, w, relu_out, X, acts_b))
            np.testing.assert_allclose(out_a, out_b, rtol=1e-13, atol=1e-15)
        dz = rng.normal(size=(11, widths[-1]))
        ga, gb = np.zeros_like(params), np.zeros_like(params)
        dxa, dxb = np.zeros_like(X), np.zeros_like(X)
        ext.mlp_backward(params, w, X, acts_a, dz, ga, dxa)
        _kernels_py.mlp_backward(params, w, X, acts_b, dz, gb, dxb)
        np.testing.assert_allclose(ga, gb, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(dxa, dxb, rtol=1e-12, atol=1e-14)
    p1, p2 = rng.normal(size=50), None
    p2 = p1.copy()
    g = rng.normal(size=50)
    m1, v1, m2, v2 = (np.zeros(50) for _ in range(4))
    for step in range(1, 4):
        ext.adam_update(p1, g, m1, v1, 1e-3, 0.9, 0.999, 1e-8, step)
        _kernels_py.adam_update(p2, g, m2, v2, 1e-3, 0.9, 0.999, 1e-8, step)
    np.testing.assert_allclose(p1, p2, rtol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_same_seed_same_init(seed):
    spec = MlpSpec((4, 5, 2))
    assert init_model(spec, seed).same_parameters(init_model(spec, seed))
