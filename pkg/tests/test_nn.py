import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affectcal.datamodel import ClassPriorTable
from affectcal.errors import BatchTooSmallError, ConfigError, DegenerateClassError, DivergenceError, ShapeError
from affectcal.nn import (
    LossSpec,
    NetworkSpec,
    TcnSpec,
    TrainConfig,
    ccc_with_grad,
    class_weights,
    dilated_conv,
    forward,
    grad_check,
    init_state,
    load_network,
    loss_focal,
    loss_mse_ccc,
    loss_weighted_binary,
    loss_weighted_ce,
    pos_weights,
    predict,
    preset,
    save_network,
    train,
)
from affectcal.nn.losses import weighted_softmax
from affectcal.nn.network import dilated_conv_backward


def naive_conv(h, W, b, d):
    T, cin = h.shape
    k, _, cout = W.shape
    half = (k - 1) // 2
    out = np.tile(b, (T, 1)).astype(float)
    for t in range(T):
        for j in range(k):
            s = t + (j - half) * d
            if 0 <= s < T:
                out[t] += h[s] @ W[j]
    return out


@pytest.mark.parametrize("d,k", [(1, 3), (2, 3), (4, 5), (16, 3)])
def test_dilated_conv_matches_loop(d, k):
    rng = np.random.default_rng(d)
    h = rng.normal(size=(20, 3))
    W = rng.normal(size=(k, 3, 4))
    b = rng.normal(size=4)
    np.testing.assert_allclose(dilated_conv(h, W, b, d), naive_conv(h, W, b, d), atol=1e-12)
    batched = dilated_conv(np.stack([h, 2 * h]), W, b, d)
    np.testing.assert_allclose(batched[1], naive_conv(2 * h, W, b, d), atol=1e-12)


def test_dilated_conv_backward_adjoint():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(2, 11, 3))
    W = rng.normal(size=(3, 3, 2))
    dout = rng.normal(size=(2, 11, 2))
    dh, dW, db = dilated_conv_backward(h, W, 2, dout)
    # <conv(h), dout> is linear in h and W, so its gradients are exact adjoints.
    zero = np.zeros(2)
    assert np.isclose(np.sum(dilated_conv(h, W, zero, 2) * dout), np.sum(dh * h))
    assert np.isclose(np.sum(dilated_conv(h, W, zero, 2) * dout), np.sum(dW * W))
    np.testing.assert_allclose(db, dout.sum(axis=(0, 1)))


def test_tcn_shapes_and_receptive_field():
    spec = preset("tcn", 6, channels=8)
    assert spec.temporal_head.dilations == (1, 2, 4, 8, 16)
    assert spec.temporal_head.receptive_field == 1 + 2 * (1 + 2 + 4 + 8 + 16)
    state = init_state(spec, 0)
    out = forward(state, spec, np.zeros((3, 32, 6))).outputs
    assert out.shape == (3, 32, 2)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0)
    with pytest.raises(ConfigError):
        TcnSpec(kernel_size=4)


def test_tcn_is_local_within_receptive_field():
    spec = NetworkSpec(3, 2, (), temporal_head=TcnSpec(num_layers=2, kernel_size=3, channels=4, dilations=(1, 2)))
    state = init_state(spec, 1)
    x = np.random.default_rng(0).normal(size=(40, 3))
    base = forward(state, spec, x).logits
    y = x.copy()
    y[30] += 5.0
    moved = np.flatnonzero(np.any(forward(state, spec, y).logits != base, axis=1))
    assert moved.min() >= 30 - 3 and moved.max() <= 30 + 3


def test_forward_rejects_bad_input():
    spec = preset("expr", 4)
    state = init_state(spec, 0)
    with pytest.raises(ShapeError):
        forward(state, spec, np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        forward(state, spec, np.zeros(4))


def test_init_is_seeded():
    spec = preset("au", 5, hidden=7)
    a, b, c = init_state(spec, 3), init_state(spec, 3), init_state(spec, 4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_save_load_round_trip(tmp_path):
    spec = preset("tcn", 3, channels=4)
    state = init_state(spec, 2)
    state.step = 7
    save_network(tmp_path / "n.json", spec, state)
    spec2, state2 = load_network(tmp_path / "n.json")
    assert spec2 == spec and state2.step == 7
    assert all(state.params[k].tobytes() == state2.params[k].tobytes() for k in state.params)


# ---------------------------------------------------------------- losses

def test_class_weight_modes():
    p = ClassPriorTable([6, 3, 1], 10)
    np.testing.assert_allclose(class_weights(p), [1.0, 2.0, 6.0])
    np.testing.assert_allclose(class_weights(p, "paper_literal"), [0.6, 0.3, 0.1])
    np.testing.assert_allclose(pos_weights(ClassPriorTable([2, 5], 10, True)), [4.0, 1.0])
    with pytest.raises(DegenerateClassError):
        class_weights(ClassPriorTable([3, 0], 3))


def test_weighted_softmax_value():
    z = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    y = np.array([1, 2])
    w = np.array([1.0, 2.0, 3.0])
    ref = np.mean([-2.0 * math.log(math.exp(2) / (math.exp(1) + math.exp(2) + math.exp(0.5))),
                   -3.0 * math.log(1 / 3)])
    assert math.isclose(weighted_softmax(z, y, w)[0], ref, rel_tol=1e-12)


def test_weighted_ce_scales_violent_rows():
    z = np.array([[0.3, -0.2], [0.3, -0.2]])
    a = loss_weighted_ce(z[:1], [1])[0]
    b = loss_weighted_ce(z[:1], [1], violent_weight=1.0)[0]
    assert math.isclose(a, 1.15 * b, rel_tol=1e-12)
    assert math.isclose(loss_weighted_ce(z[:1], [0])[0], loss_weighted_ce(z[:1], [0], violent_weight=9)[0])


def test_focal_reduces_to_ce_at_gamma_zero():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(10, 8))
    y = rng.integers(0, 8, 10)
    ce, g = weighted_softmax(z, y, np.ones(8))
    fl, fg = loss_focal(z, y, 0.0)
    assert math.isclose(ce, fl, rel_tol=1e-12)
    np.testing.assert_allclose(g, fg, atol=1e-15)
    assert loss_focal(z, y, 2.0)[0] < ce


def test_weighted_binary_value():
    z = np.array([[0.0, 2.0]])
    y = np.array([[1, 0]])
    loss = loss_weighted_binary(z, y, [3.0, 5.0])[0]
    ref = (-3.0 * math.log(0.5) - math.log(1 - 1 / (1 + math.exp(-2)))) / 2
    assert math.isclose(loss, ref, rel_tol=1e-12)


def test_mse_ccc_needs_two_rows():
    with pytest.raises(BatchTooSmallError):
        loss_mse_ccc(np.zeros((1, 2)), np.zeros((1, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**31 - 1))
def test_ccc_gradient_matches_differences(n, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=n), rng.normal(size=n)
    _, g = ccc_with_grad(x, y)
    h = 1e-6
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        num = (ccc_with_grad(x + e, y)[0] - ccc_with_grad(x - e, y)[0]) / (2 * h)
        assert abs(num - g[i]) <= 1e-6 * max(1.0, abs(num))


@pytest.mark.parametrize("kind,head,out", [
    ("weighted_softmax", "softmax", 8), ("focal", "softmax", 8), ("weighted_ce", "softmax", 2),
    ("mse_ccc", "linear", 2), ("weighted_binary", "sigmoid", 12),
])
def test_grad_check_gelu(kind, head, out):
    rng = np.random.default_rng(0)
    spec = NetworkSpec(4, out, (5,), activation="gelu", head=head)
    x = rng.normal(size=(6, 4))
    if kind == "mse_ccc":
        y = rng.uniform(-1, 1, size=(6, 2))
    elif kind == "weighted_binary":
        y = rng.integers(0, 2, size=(6, 12))
    else:
        y = rng.integers(0, out, 6)
    loss = LossSpec(kind, weights=tuple(np.linspace(0.5, 2, 12 if kind == "weighted_binary" else out))
                    if kind in ("weighted_softmax", "weighted_binary") else None)
    assert grad_check(spec, loss, x, y, seed=1) < 1e-6


# ---------------------------------------------------------------- training

def _blobs(seed=0, n=600):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 8, n)
    centers = rng.normal(size=(8, 6)) * 3
    return centers[y] + rng.normal(size=(n, 6)), y


def test_training_learns_and_is_deterministic():
    x, y = _blobs()
    spec = preset("expr", 6, hidden=32)
    cfg = TrainConfig(epochs=20, seed=4, lr=1e-2)
    loss = LossSpec("weighted_softmax", weights=(1.0,) * 8)
    s1, h1 = train(spec, loss, x, y, cfg)
    s2, h2 = train(spec, loss, x, y, cfg)
    assert h1 == h2
    assert all(np.array_equal(s1.params[k], s2.params[k]) for k in s1.params)
    assert np.mean([h[2] for h in h1[-3:]]) < h1[0][2] / 2
    assert np.mean(np.argmax(predict(s1, spec, x), axis=1) == y) > 0.9


def test_training_divergence_is_reported():
    x, y = _blobs(n=64)
    with pytest.raises(DivergenceError):
        train(preset("expr", 6), LossSpec("weighted_softmax", weights=(1.0,) * 8), x * 1e200, y,
              TrainConfig(epochs=1))


def test_ccc_batches_stay_inside_videos():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(300, 4))
    y = np.clip(x[:, :2] * 0.3, -1, 1)
    groups = np.repeat(np.arange(3), 100)
    state, hist = train(preset("va", 4), LossSpec("mse_ccc"), x, y, TrainConfig(epochs=30, batch_size=64, lr=1e-2),
                        groups=groups)
    assert hist[-1][2] < hist[0][2]


def test_tcn_training_with_mask():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 16, 3))
    y = (x[..., 0] > 0).astype(int)
    valid = rng.random((8, 16)) > 0.2
    spec = NetworkSpec(3, 2, (), temporal_head=TcnSpec(num_layers=2, channels=4, dilations=(1, 2)))
    _, hist = train(spec, LossSpec("weighted_ce"), x, y, TrainConfig(epochs=20, batch_size=4, lr=1e-2), valid=valid)
    assert hist[-1][2] < hist[0][2]
