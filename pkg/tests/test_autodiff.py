import math

import numpy as np
import pytest

from latconf import autodiff as ad
from latconf.autodiff import Tensor, finite_difference_check


def param(rng, *shape, name="p"):
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


def check(params, loss_fn, tol=1e-6):
    report = finite_difference_check(params, loss_fn)
    assert report["max_rel_error"] < tol, report
    return report


def test_forward_values():
    assert ad.softmax(Tensor(np.zeros(2))).value.tolist() == [0.5, 0.5]
    assert ad.sigmoid(Tensor(np.zeros(1))).value[0] == 0.5
    assert ad.sigmoid(Tensor(np.array([-800.0, 800.0]))).value.tolist() == [0.0, 1.0]


def test_sigmoid_derivative_at_one():
    x = Tensor(np.array([1.0]), requires_grad=True)
    ad.sum_all(ad.sigmoid(x)).backward()
    eps = 1e-5
    s = lambda v: 1 / (1 + math.exp(-v))
    numeric = (s(1 + eps) - s(1 - eps)) / (2 * eps)
    assert abs(x.grad[0] - numeric) / abs(numeric) < 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_broadcasting_binary_ops(op):
    rng = np.random.default_rng(0)
    a, b = param(rng, 3, 4, name="a"), param(rng, 4, name="b")
    fn = getattr(ad, op)
    check({"a": a, "b": b}, lambda: ad.sum_all(ad.mul(fn(a, b), Tensor(np.arange(12.0).reshape(3, 4)))))


def test_unary_ops():
    rng = np.random.default_rng(1)
    x = param(rng, 5)
    w = Tensor(rng.normal(size=5))
    for f in (ad.sigmoid, ad.tanh, lambda t: ad.log(ad.add(ad.mul(t, t), 1.0)), lambda t: ad.scale(t, -2.5)):
        check({"x": x}, lambda: ad.sum_all(ad.mul(f(x), w)))


def test_clip_gradient_is_zero_outside():
    x = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
    ad.sum_all(ad.clip(x, -1.0, 1.0)).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_linear_algebra_ops():
    rng = np.random.default_rng(2)
    W, x, b = param(rng, 3, 4, name="W"), param(rng, 4, name="x"), param(rng, 3, name="b")
    X = param(rng, 5, 4, name="X")
    v = param(rng, 4, name="v")
    check({"W": W, "x": x}, lambda: ad.sum_all(ad.tanh(ad.matvec(W, x))))
    check({"W": W, "X": X, "b": b}, lambda: ad.sum_all(ad.tanh(ad.linear(X, W, b))))
    check({"X": X, "v": v}, lambda: ad.sum_all(ad.sigmoid(ad.project(X, v))))
    Y = Tensor(0.3 * rng.normal(size=(5, 4)), requires_grad=True)  # keep tanh out of saturation
    check({"Y": Y}, lambda: ad.sum_all(ad.tanh(ad.row_dot(Y, Y))))


def test_reshaping_ops():
    rng = np.random.default_rng(3)
    A, B = param(rng, 4, 3, name="A"), param(rng, 4, 2, name="B")
    w = Tensor(rng.normal(size=(6, 5)))
    check({"A": A, "B": B}, lambda: ad.sum_all(ad.tanh(ad.linear(ad.gather_rows(ad.concat([A, B], axis=1), [0, 2, 2, 3, 1, 0]), w))))
    check({"A": A}, lambda: ad.sum_all(ad.tanh(ad.slice_cols(A, 1, 3))))
    check({"A": A, "B": B}, lambda: ad.sum_all(ad.tanh(ad.concat([A, B, A], axis=1))))


def test_gather_multi():
    rng = np.random.default_rng(4)
    A, B = param(rng, 3, 2, name="A"), param(rng, 2, 2, name="B")
    out = ad.gather_multi([A, B], [1, 0, 0, 1], [1, 2, 2, 0])
    assert np.array_equal(out.value, np.stack([B.value[1], A.value[2], A.value[2], B.value[0]]))
    check({"A": A, "B": B}, lambda: ad.sum_all(ad.tanh(ad.gather_multi([A, B], [1, 0, 0, 1], [1, 2, 2, 0]))))


def test_softmax_family():
    rng = np.random.default_rng(5)
    s = param(rng, 7)
    V = param(rng, 7, 3, name="V")
    offsets = [0, 2, 3]
    w = Tensor(rng.normal(size=7))
    check({"s": s}, lambda: ad.sum_all(ad.mul(ad.softmax(s), w)))
    check({"s": s}, lambda: ad.sum_all(ad.mul(ad.segment_softmax(s, offsets), w)))
    check({"V": V, "s": s}, lambda: ad.sum_all(ad.tanh(ad.segment_sum(ad.mul(V, ad.column(ad.segment_softmax(s, offsets))), offsets))))
    seg = ad.segment_softmax(s, offsets).value
    sums = [seg[0:2].sum(), seg[2:3].sum(), seg[3:].sum()]
    assert np.allclose(sums, 1.0, atol=1e-12, rtol=0)


def test_softmax_shift_invariance():
    x = np.array([1.0, -3.0, 2.5])
    a = ad.softmax(Tensor(x)).value
    b = ad.softmax(Tensor(x + 1000.0)).value
    assert np.allclose(a, b, atol=1e-15, rtol=0)
    assert abs(a.sum() - 1.0) <= 1e-12


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ad.mul(x, x)
    ad.sum_all(ad.add(y, x)).backward()
    assert x.grad.tolist() == [7.0]


def test_shape_errors():
    with pytest.raises(ValueError, match="shape mismatch"):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ValueError, match="shape mismatch"):
        ad.matvec(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.tanh(x)
    assert not y.requires_grad


def test_finite_difference_check_examples():
    rng = np.random.default_rng(6)
    w = param(rng, 4, name="w")
    x = Tensor(rng.normal(size=4))
    report = finite_difference_check({"w": w}, lambda: ad.sum_all(ad.mul(w, x)))
    assert report["max_rel_error"] < 1e-9 and report["passed"]
    empty = finite_difference_check({}, lambda: ad.sum_all(Tensor(np.ones(1))))
    assert empty["per_param"] == {} and empty["passed"]


def test_finite_difference_check_detects_wrong_gradient():
    w = Tensor(np.array([0.3, -0.2]), requires_grad=True)

    def bad_square(a):
        out = ad._result(a.value ** 2, (a,), lambda g: a._accumulate(g * a.value))  # missing factor 2
        return out

    report = finite_difference_check({"w": w}, lambda: ad.sum_all(bad_square(w)))
    assert not report["passed"]


def test_zero_dim_values_stay_arrays():
    b = Tensor(np.zeros(()), requires_grad=True)
    b.value = b.value + np.float64(0.5)
    assert isinstance(b.value, np.ndarray) and b.value.shape == ()
    report = finite_difference_check({"b": b}, lambda: ad.sum_all(ad.sigmoid(ad.add(Tensor(np.ones(2)), b))))
    assert report["max_rel_error"] < 1e-6
