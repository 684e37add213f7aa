import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hierenv import autodiff as ad
from hierenv.errors import ContractError, NumericError, ShapeError
from hierenv.params import ParamStore, finite_difference_check
from hierenv.rng import RngStreams

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def test_sigmoid_zero():
    assert ad.sigmoid([0.0]).data.tolist() == [0.5]


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax([1.0, 1.0, 1.0]).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_matmul_identity():
    m = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(ad.matmul(np.eye(3), m).data, m)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_add_shape_error():
    with pytest.raises(ShapeError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))


def test_log_domain_error():
    with pytest.raises(NumericError):
        ad.log([1.0, 0.0])


def test_exp_overflow_is_error():
    with pytest.raises(NumericError):
        ad.exp([1000.0])


def test_square_gradient():
    x = ad.tensor(3.0, requires_grad=True)
    ad.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_sigmoid_gradient_at_zero():
    x = ad.tensor(0.0, requires_grad=True)
    ad.backward(ad.sigmoid(x))
    assert x.grad == pytest.approx(0.25)


def test_backward_requires_scalar():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_gradient_accumulation_doubles():
    rng = np.random.default_rng(1)
    w = ad.tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = rng.normal(size=(4, 3))

    def f():
        return ad.mean(ad.sigmoid(ad.matmul(x, w)))

    ad.backward(f())
    single = w.grad.copy()
    w.grad = None
    ad.backward(f() + f())
    np.testing.assert_allclose(w.grad, 2 * single, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax(x, axis=1).data
    assert np.all(out > 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 5)), elements=finite))
def test_log_softmax_matches_log_of_softmax(x):
    np.testing.assert_allclose(ad.log_softmax(x).data, np.log(ad.softmax(x).data), atol=1e-10)


def test_logsumexp_mask_excludes_terms():
    x = np.array([[1.0, 2.0, 3.0]])
    mask = np.array([[True, False, True]])
    assert ad.logsumexp(x, axis=1, mask=mask).data[0] == pytest.approx(math.log(math.e + math.e**3))


def test_l2_normalize_unit_rows():
    x = np.random.default_rng(2).normal(size=(5, 4))
    out = ad.l2_normalize(x, axis=1).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_dropout_identity_when_not_training():
    x = ad.tensor(np.ones((3, 3)))
    assert ad.dropout(x, 0.5, np.random.default_rng(0), training=False) is x


def test_forward_op_dispatch():
    assert ad.forward_op("sigmoid", [0.0]).data.tolist() == [0.5]
    with pytest.raises(ContractError):
        ad.forward_op("nope", [0.0])


def _op_cases():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 2))
    pos = rng.uniform(0.5, 2.0, size=(4, 3))
    idx = np.array([0, 2, 2, 3])
    rows, cols = np.array([0, 1]), np.array([1, 2])
    return {
        "matmul": (a, lambda t: ad.matmul(t, b)),
        "add_broadcast": (a, lambda t: t + np.arange(3.0)),
        "sub": (a, lambda t: 1.0 - t),
        "mul": (a, lambda t: t * a),
        "div": (pos, lambda t: a / t),
        "abs": (a, ad.abs_),
        "concat": (a, lambda t: ad.concat([t, t * 2.0], axis=1)),
        "transpose": (a, ad.transpose),
        "sigmoid": (a, ad.sigmoid),
        "exp": (a, ad.exp),
        "log": (pos, ad.log),
        "softmax": (a, lambda t: ad.softmax(t, axis=1)),
        "log_softmax": (a, lambda t: ad.log_softmax(t, axis=0)),
        "logsumexp": (a, lambda t: ad.logsumexp(t, axis=1, mask=a > -0.5)),
        "mean": (a, lambda t: ad.mean(t, axis=0)),
        "max": (a, lambda t: ad.max_(t, axis=1)),
        "l2_normalize": (a, lambda t: ad.l2_normalize(t, axis=1)),
        "gather_rows": (a, lambda t: ad.gather_rows(t, idx)),
        "scatter_symmetric": (np.array([0.3, -0.7]), lambda t: ad.scatter_symmetric(t, rows, cols, 3)),
        "clip": (a, lambda t: ad.clip(t, -0.5, 0.5)),
        "relu": (a, ad.relu),
    }


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_op_gradients_match_finite_differences(name):
    values, fn = _op_cases()[name]
    params = ParamStore()
    x = params.add("x", values)
    weights = np.random.default_rng(4).normal(size=fn(ad.tensor(values)).shape)
    report = finite_difference_check(lambda: ad.sum_(fn(x) * weights), params, eps=1e-6)
    assert report["x"] < 1e-7


def test_dropout_gradient_with_frozen_stream():
    params = ParamStore()
    x = params.add("x", np.random.default_rng(5).normal(size=(3, 4)))
    streams = RngStreams(7)
    report = finite_difference_check(
        lambda: ad.sum_(ad.sigmoid(ad.dropout(x, 0.5, streams.get("dropout")))), params, 1e-5, streams=streams
    )
    assert report["x"] < 1e-8
