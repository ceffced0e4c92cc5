import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crowdflow import autodiff as ad
from crowdflow.autodiff import ShapeError, Value, check_gradients
from crowdflow.nn import make_rng


def tracked(x):
    return Value(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_array_equal(ad.softmax(Value([0.0, 0.0])).data, [0.5, 0.5])


def test_matmul_identity():
    A = make_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(ad.matmul(Value(np.eye(3)), Value(A)).data, A)


def test_sum_of_squares_gradient():
    x = tracked([1.0, 2.0])
    ad.vsum(x * x).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0], rtol=1e-12)
    # central differences, h = 1e-5
    num = ad.numerical_grad(lambda: ad.vsum(x * x), [x])[0]
    np.testing.assert_allclose(num, [2.0, 4.0], rtol=1e-8)


def test_constant_root_gives_zero_grads():
    x = tracked([1.0, -2.0])
    root = ad.vsum(x * 0.0)
    root.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_identity_root_has_unit_grad():
    x = tracked(3.0)
    x.backward()
    assert x.grad == 1.0


def test_backward_requires_scalar_root():
    x = tracked([1.0, 2.0])
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(Value(np.zeros((2, 3))), Value(np.zeros(4)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Value(np.zeros((2, 3))), Value(np.zeros((2, 3))))


def test_rank_limit():
    with pytest.raises(ShapeError):
        Value(np.zeros((1, 1, 1, 1, 1)))


def test_double_backward_doubles_leaf_grads():
    rng = make_rng(1)
    x = tracked(rng.normal(size=(3, 2)))
    w = tracked(rng.normal(size=(4, 2)))
    loss = ad.vsum(ad.tanh(ad.linear(x, w)))
    loss.backward()
    g1 = w.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(w.grad, 2 * g1)


def test_shared_node_visited_once():
    x = tracked(2.0)
    y = x * x
    z = y + y  # y feeds z twice
    z.backward()
    assert x.grad == pytest.approx(8.0)


def test_no_grad_records_nothing():
    x = tracked([1.0])
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert ad.grad_enabled()


def test_layer_norm_zero_mean_unit_variance():
    x = make_rng(2).normal(size=(4, 7)) * 3 + 1
    out = ad.layer_norm(Value(x), eps=0.0).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-12)


def test_masked_softmax_ignores_masked_entries():
    out = ad.masked_softmax(Value([[1.0, 5.0, 1.0], [0.0, 0.0, 0.0]]), np.array([[1, 0, 1], [0, 0, 0]], bool)).data
    np.testing.assert_allclose(out, [[0.5, 0.0, 0.5], [0.0, 0.0, 0.0]])


def test_safe_normalize_zero_vector():
    out = ad.safe_normalize(Value([[0.0, 0.0], [3.0, 4.0]])).data
    np.testing.assert_allclose(out, [[0.0, 0.0], [0.6, 0.8]])


def test_segment_mean_empty_bucket_is_zero():
    x = Value([[1.0], [3.0], [5.0]])
    out = ad.segment_mean(x, np.array([0, 0, 2]), 3).data
    np.testing.assert_allclose(out, [[2.0], [0.0], [5.0]])


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
@settings(max_examples=200, deadline=None)
def test_softmax_is_a_distribution(x):
    out = ad.softmax(Value(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


# gradient checks of every op against central differences

def _op_cases(rng):
    a = tracked(rng.normal(size=(3, 4)))
    b = tracked(rng.normal(size=(3, 4)))
    row = tracked(rng.normal(size=(4,)))
    pos = tracked(rng.uniform(0.5, 2.0, size=(3, 4)))
    w = tracked(rng.normal(size=(5, 4)))
    bias = tracked(rng.normal(size=(5,)))
    m = tracked(rng.normal(size=(4, 2)))
    mask = rng.random((3, 4)) < 0.6
    mask[:, 0] = True
    idx = np.array([2, 0, 2, 1])
    seg = np.array([0, 2, 2])
    return {
        "add": (lambda: ad.vsum(ad.add(a, row) * b), [a, row, b]),
        "sub": (lambda: ad.vsum(ad.sub(row, a) * b), [a, row, b]),
        "mul": (lambda: ad.vsum(ad.mul(a, b) * a), [a, b]),
        "div": (lambda: ad.vsum(ad.div(a, pos)), [a, pos]),
        "matmul": (lambda: ad.vsum(ad.tanh(ad.matmul(a, m))), [a, m]),
        "linear": (lambda: ad.vsum(ad.tanh(ad.linear(a, w, bias))), [a, w, bias]),
        "concat": (lambda: ad.vsum(ad.concat([a, b], axis=0) * ad.concat([b, a], axis=0)), [a, b]),
        "slice": (lambda: ad.vsum(a[:, 1:3] * b[:, 0:2]), [a, b]),
        "take": (lambda: ad.vsum(ad.take(a, idx) * ad.take(b, idx)), [a, b]),
        "segment_sum": (lambda: ad.vsum(ad.tanh(ad.segment_sum(a, seg, 3))), [a]),
        "segment_mean": (lambda: ad.vsum(ad.tanh(ad.segment_mean(a, seg, 3))), [a]),
        "mean": (lambda: ad.vsum(ad.tanh(ad.vmean(a, axis=0))), [a]),
        "sum": (lambda: ad.vsum(ad.tanh(ad.vsum(a, axis=1, keepdims=True)) * b), [a, b]),
        "reshape": (lambda: ad.vsum(ad.reshape(a, (4, 3)) * ad.reshape(b, (4, 3))), [a, b]),
        "relu": (lambda: ad.vsum(ad.relu(a) * b), [a, b]),
        "tanh": (lambda: ad.vsum(ad.tanh(a) * b), [a, b]),
        "sigmoid": (lambda: ad.vsum(ad.sigmoid(a) * b), [a, b]),
        "exp": (lambda: ad.vsum(ad.vexp(a) * b), [a, b]),
        "softmax": (lambda: ad.vsum(ad.softmax(a, axis=-1) * b), [a, b]),
        "masked_softmax": (lambda: ad.vsum(ad.masked_softmax(a, mask) * b), [a, b]),
        "layer_norm": (lambda: ad.vsum(ad.layer_norm(a) * b), [a, b]),
        "where": (lambda: ad.vsum(ad.where(mask, a, b) * a), [a, b]),
        "safe_normalize": (lambda: ad.vsum(ad.safe_normalize(a) * b), [a, b]),
    }


@pytest.mark.parametrize("name", list(_op_cases(make_rng(0)).keys()))
def test_op_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in range(20):
        rng = make_rng(seed, 11)
        f, params = _op_cases(rng)[name]
        worst = max(worst, check_gradients(f, params))
    assert worst < 1e-4


def test_relu_gradient_at_kink_free_points():
    x = tracked([-1.0, 2.0])
    ad.vsum(ad.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])
