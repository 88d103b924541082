import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scusfl import tensor_core as tc
from scusfl.streams import stream

from _gradcheck import N_INSTANCES, TOL, check_layer, make_instance


@pytest.mark.parametrize("kind", tc.LAYER_KINDS)
def test_layer_gradients_match_finite_differences(kind):
    worst = 0.0
    for i in range(N_INSTANCES):
        layer, x, rng = make_instance(kind, i)
        worst = max(worst, check_layer(layer, x, rng))
    assert worst < TOL


@pytest.mark.parametrize("kind", tc.LAYER_KINDS)
def test_forward_backward_are_repeatable(kind):
    layer, x, rng = make_instance(kind, 0)
    y1, c1 = tc.forward(layer, x)
    y2, c2 = tc.forward(layer, x)
    g = rng.standard_normal(y1.shape)
    assert np.array_equal(y1, y2)
    (gx1, gp1), (gx2, gp2) = tc.backward(layer, c1, g), tc.backward(layer, c2, g)
    assert np.array_equal(gx1, gx2)
    assert all(np.array_equal(a, b) for a, b in zip(gp1, gp2))


def test_conv_matches_direct_loop(rng):
    layer = tc.conv2d(2, 3, 3, rng, stride=2, padding=1)
    x = rng.standard_normal((2, 2, 7, 6))
    y, _ = tc.forward(layer, x)
    w, b = layer.params
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(y)
    for n in range(2):
        for o in range(3):
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(y, ref, rtol=0, atol=1e-12)


def test_dense_shape_mismatch_raises(rng):
    layer = tc.dense(4, 3, rng)
    with pytest.raises(tc.ShapeError):
        tc.forward(layer, np.zeros((2, 5)))


def test_unbatched_input_rejected(rng):
    with pytest.raises(tc.ShapeError):
        tc.forward(tc.dense(4, 3, rng), np.zeros(4))


def test_avgpool_must_tile():
    with pytest.raises(tc.ShapeError):
        tc.forward(tc.avgpool(2), np.zeros((1, 1, 3, 4)))


def test_backward_rejects_foreign_and_stale_context(rng):
    a, b = tc.dense(3, 2, rng), tc.dense(3, 2, rng)
    x = rng.standard_normal((1, 3))
    _, ctx = tc.forward(a, x)
    with pytest.raises(tc.ContextError):
        tc.backward(b, ctx, np.ones((1, 2)))
    a.set_params([p + 1 for p in a.params])
    with pytest.raises(tc.ContextError):
        tc.backward(a, ctx, np.ones((1, 2)))


def test_backward_checks_upstream_shape(rng):
    layer = tc.dense(3, 2, rng)
    _, ctx = tc.forward(layer, np.ones((4, 3)))
    with pytest.raises(tc.ShapeError):
        tc.backward(layer, ctx, np.ones((4, 3)))


def test_non_finite_output_raises(rng):
    layer = tc.dense(2, 1, rng)
    with pytest.raises(FloatingPointError):
        tc.forward(layer, np.array([[np.inf, 1.0]]))


def test_glorot_bounds_and_determinism():
    a = tc.dense(30, 20, stream(5, "init", 0))
    b = tc.dense(30, 20, stream(5, "init", 0))
    bound = math.sqrt(6 / 50)
    assert np.abs(a.params[0]).max() <= bound
    assert np.array_equal(a.params[0], b.params[0])
    assert not np.array_equal(a.params[0], tc.dense(30, 20, stream(5, "init", 1)).params[0])


# -- softmax cross-entropy ----------------------------------------------------

@pytest.mark.parametrize("logits,label,loss,grad", [
    ([0.0, 0.0], 0, math.log(2), [-0.5, 0.5]),
    ([1.0, 2.0, 3.0], 2, math.log(math.e + math.e ** 2 + math.e ** 3) - 3, None),
])
def test_softmax_cross_entropy_examples(logits, label, loss, grad):
    got, g = tc.softmax_cross_entropy(np.array(logits), label)
    assert got == pytest.approx(loss, abs=1e-12)
    if grad is not None:
        np.testing.assert_allclose(g, grad, atol=1e-12)


def test_softmax_cross_entropy_known_value():
    got, _ = tc.softmax_cross_entropy(np.array([1.0, 2.0, 3.0]), 2)
    assert got == pytest.approx(0.4076, abs=1e-4)


def test_softmax_dominant_logit_is_stable():
    loss, g = tc.softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(g))


@pytest.mark.parametrize("label", [-1, 3])
def test_softmax_label_out_of_range(label):
    with pytest.raises(ValueError):
        tc.softmax_cross_entropy(np.zeros(3), label)


def test_softmax_batch_is_mean_of_rows(rng):
    z = rng.standard_normal((5, 4))
    y = np.array([0, 1, 2, 3, 0])
    loss, g = tc.softmax_cross_entropy(z, y)
    rows = [tc.softmax_cross_entropy(z[i], int(y[i])) for i in range(5)]
    assert loss == pytest.approx(np.mean([r[0] for r in rows]), abs=1e-14)
    np.testing.assert_allclose(g, np.stack([r[1] for r in rows]) / 5, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=2, max_size=10), st.data())
def test_softmax_never_nan_and_nonnegative(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    loss, g = tc.softmax_cross_entropy(np.array(logits), label)
    assert loss >= 0 and math.isfinite(loss)
    assert np.all(np.isfinite(g))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20, allow_nan=False), min_size=2, max_size=10), st.data())
def test_softmax_matches_direct_formula(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    z = np.array(logits)
    p = np.exp(z - z.max())
    p /= p.sum()
    loss, g = tc.softmax_cross_entropy(z, label)
    assert loss == pytest.approx(-math.log(p[label]), abs=1e-12)
    onehot = np.eye(len(z))[label]
    np.testing.assert_allclose(g, p - onehot, atol=1e-12)


# -- Adam ---------------------------------------------------------------------

def test_adam_zero_grads_leave_params():
    p = [np.array([1.0, -2.0])]
    st_ = tc.AdamState.for_params(p)
    tc.adam_step(p, [np.zeros(2)], st_)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    assert st_.t == 1


def test_adam_first_step_magnitude_is_lr():
    p = [np.array(1.0)]
    st_ = tc.AdamState.for_params(p, lr=0.1)
    tc.adam_step(p, [np.array(1.0)], st_)
    assert float(p[0]) == pytest.approx(0.9, abs=1e-6)


def test_adam_defaults():
    st_ = tc.AdamState.for_params([np.zeros(1)])
    assert (st_.lr, st_.beta1, st_.beta2, st_.eps) == (1e-4, 0.9, 0.999, 1e-8)


def test_adam_replicas_are_bitwise_identical(rng):
    base = [rng.standard_normal((3, 2)), rng.standard_normal(3)]
    a, b = [x.copy() for x in base], [x.copy() for x in base]
    sa, sb = tc.AdamState.for_params(a), tc.AdamState.for_params(b)
    for _ in range(5):
        grads = [rng.standard_normal((3, 2)), rng.standard_normal(3)]
        tc.adam_step(a, grads, sa)
        tc.adam_step(b, [g.copy() for g in grads], sb)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_adam_shape_mismatch():
    p = [np.zeros(3)]
    with pytest.raises(tc.ShapeError):
        tc.adam_step(p, [np.zeros(2)], tc.AdamState.for_params(p))


# -- finite differences and FLOPs ---------------------------------------------

def test_finite_diff_examples():
    assert tc.finite_diff_grad(lambda x: float(x ** 2), np.array(3.0)) == pytest.approx(6.0, abs=1e-8)
    np.testing.assert_array_equal(tc.finite_diff_grad(lambda x: 1.0, np.ones(4)), np.zeros(4))
    np.testing.assert_allclose(tc.finite_diff_grad(lambda x: float(x.sum()), np.arange(5.0)), np.ones(5), atol=1e-9)


def test_layer_flops(rng):
    assert tc.layer_flops(tc.dense(4, 3, rng), (4,)) == 24
    assert tc.layer_flops(tc.relu(), (7,)) == 0
    conv = tc.conv2d(3, 8, 3, rng, padding=1)
    assert tc.layer_flops(conv, (3, 32, 32)) == 2 * 9 * 3 * 8 * 32 * 32
