import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rhgn import numkernel as nk
from rhgn.exceptions import EmptySegment, NonDeterministicLoss, NonFiniteInput, ShapeMismatch
from rhgn.numkernel import Parameter, SegmentIndex, Tensor


def mp_gelu(x):
    mpmath.mp.dps = 40
    return float(x * (1 + mpmath.erf(x / mpmath.sqrt(2))) / 2)


# ---------------------------------------------------------------- gelu

def test_gelu_values():
    assert nk.gelu_scalar(0.0) == 0.0
    assert abs(nk.gelu_scalar(6.0) - 6.0) < 1e-7
    assert abs(nk.gelu_scalar(1.0) - 0.841345) < 1e-6
    for x in (-3.0, -0.5, 0.3, 1.0, 2.5):
        assert nk.gelu_scalar(x) == pytest.approx(mp_gelu(x), abs=1e-15)
    out = nk.gelu(Tensor(np.array([[0.0, 1.0, 6.0]]))).value
    np.testing.assert_allclose(out, [[0.0, mp_gelu(1.0), mp_gelu(6.0)]], atol=1e-15)


def test_gelu_rejects_nonfinite():
    with pytest.raises(NonFiniteInput):
        nk.gelu_scalar(float("nan"))
    with pytest.raises(NonFiniteInput):
        nk.gelu(Tensor(np.array([1.0, np.inf])))


@settings(max_examples=200)
@given(st.floats(-50, 50, allow_nan=False))
def test_gelu_reflection_identity(x):
    # x*Phi(x) - (-x)*Phi(-x) = x*(Phi(x) + Phi(-x)) = x
    assert nk.gelu_scalar(x) - nk.gelu_scalar(-x) == pytest.approx(x, abs=1e-12)
    assert nk.gelu_scalar(x) + nk.gelu_scalar(-x) == pytest.approx(x * math.erf(x / math.sqrt(2)), abs=1e-12)


@settings(max_examples=200)
@given(st.floats(0, 30), st.floats(0, 30))
def test_gelu_monotone_nonnegative(a, b):
    lo, hi = sorted((a, b))
    assert nk.gelu_scalar(lo) <= nk.gelu_scalar(hi)


# ---------------------------------------------------------------- segment softmax

def test_segment_softmax_examples():
    np.testing.assert_allclose(
        nk.segment_softmax_values(np.array([2.0, 2.0, 2.0]), np.zeros(3, int), 1), [1 / 3] * 3)
    np.testing.assert_allclose(nk.segment_softmax_values(np.array([17.3]), np.array([0]), 1), [1.0])
    np.testing.assert_allclose(
        nk.segment_softmax_values(np.array([0.0, math.log(3)]), np.array([0, 0]), 1), [0.25, 0.75])


def test_segment_softmax_empty_segment():
    with pytest.raises(EmptySegment):
        nk.segment_softmax_values(np.array([1.0]), np.array([0]), 2, require=np.array([1]))


def test_segment_softmax_stable_for_large_logits():
    out = nk.segment_softmax_values(np.array([1000.0, 1000.0, -1000.0]), np.array([0, 0, 1]), 2)
    np.testing.assert_allclose(out, [0.5, 0.5, 1.0])


@settings(max_examples=100, deadline=None)
@given(
    data=st.data(),
    n=st.integers(1, 30),
    k=st.integers(1, 6),
)
def test_segment_softmax_properties(data, n, k):
    seg = np.array(data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n)))
    logits = data.draw(arrays(np.float64, (n, 2), elements=st.floats(-30, 30)))
    shift = data.draw(st.floats(-100, 100))
    out = nk.segment_softmax_values(logits, seg, k)
    sums = np.zeros((k, 2))
    np.add.at(sums, seg, out)
    present = np.bincount(seg, minlength=k) > 0
    np.testing.assert_allclose(sums[present], 1.0, atol=1e-6)
    shifted = logits.copy()
    shifted[seg == seg[0]] += shift
    np.testing.assert_allclose(nk.segment_softmax_values(shifted, seg, k), out, atol=1e-9)


def test_segment_index_sum_and_max():
    seg = SegmentIndex([2, 0, 2, 2], 4)
    x = np.array([[1.0], [2.0], [3.0], [-4.0]])
    np.testing.assert_array_equal(seg.sum(x), [[2.0], [0.0], [0.0], [0.0]])
    np.testing.assert_array_equal(seg.max(x)[:, 0], [2.0, -np.inf, 3.0, -np.inf])
    with pytest.raises(ShapeMismatch):
        SegmentIndex([0, 5], 3)


# ---------------------------------------------------------------- shape checks

def test_shape_errors_are_eager():
    a = Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        nk.matmul(a, Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        nk.add(a, Tensor(np.ones((1, 3))))
    with pytest.raises(ShapeMismatch):
        nk.add_bias(a, Tensor(np.ones(2)))
    with pytest.raises(ShapeMismatch):
        nk.gather_rows(a, np.array([0, 2]))
    with pytest.raises(ShapeMismatch):
        nk.split_heads(a, 2)
    with pytest.raises(ShapeMismatch):
        nk.grouped_affine(a, [np.array([0])], [Tensor(np.ones((2, 2)))])
    with pytest.raises(ShapeMismatch):
        nk.head_weight(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2, 4))))
    with pytest.raises(ShapeMismatch):
        nk.segment_sum(a, np.array([0]), 1)


def test_nonfinite_output_raises():
    big = Tensor(np.array([[1e308]]))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteInput):
        nk.scale(big, 10.0)


# ---------------------------------------------------------------- grad_check

def test_grad_check_polynomial():
    w = Parameter(np.array([3.0]), "w")
    loss = lambda: nk.dot_last(w, w)  # noqa: E731
    assert nk.grad_check(loss, [w], eps=1e-5) < 1e-9
    assert w.grad[0] == pytest.approx(6.0)


def test_grad_check_constant():
    w = Parameter(np.array([1.5, -2.0]), "w")
    c = Tensor(np.array(4.0))
    assert nk.grad_check(lambda: c, [w]) == 0.0


def test_grad_check_detects_nondeterminism():
    w = Parameter(np.array([1.0]), "w")
    state = {"n": 0}

    def loss():
        state["n"] += 1
        return nk.scale(nk.dot_last(w, w), 1.0 + 1e-3 * state["n"])

    with pytest.raises(NonDeterministicLoss):
        nk.grad_check(loss, [w])


def test_grad_check_catches_wrong_backward():
    w = Parameter(np.array([0.7, -1.2]), "w")

    def wrong_square(x):
        return nk._out(x.value ** 2, (x,), lambda g: x._accumulate(g * x.value))

    loss = lambda: nk.dot_last(wrong_square(w), Tensor(np.ones(2)))  # noqa: E731
    assert nk.grad_check(loss, [w]) > 0.1


def _p(rng, *shape, name="p"):
    return Parameter(rng.normal(size=shape), name)


KERNEL_CASES = {
    "matmul": lambda r: (lambda a, b: nk.matmul(a, b), [_p(r, 3, 4), _p(r, 4, 2)]),
    "add": lambda r: (lambda a, b: nk.add(a, b), [_p(r, 3, 2), _p(r, 3, 2)]),
    "add_bias": lambda r: (lambda a, b: nk.add_bias(a, b), [_p(r, 3, 2), _p(r, 2)]),
    "gather": lambda r: (lambda a: nk.gather_rows(a, np.array([0, 2, 2, 1])), [_p(r, 3, 2)]),
    "assemble": lambda r: (lambda a, b: nk.assemble_rows([a, b], [np.array([0, 3]), np.array([1, 2, 4])], 5),
                           [_p(r, 2, 3), _p(r, 3, 3)]),
    "grouped_affine": lambda r: (
        lambda x, w1, w2, b1: nk.grouped_affine(x, [np.array([0, 3]), slice(1, 3)], [w1, w2], [b1, None]),
        [_p(r, 5, 3), _p(r, 3, 2), _p(r, 3, 2), _p(r, 2)]),
    "heads": lambda r: (lambda x: nk.concat_heads(nk.scale(nk.split_heads(x, 2), 1.5)), [_p(r, 3, 4)]),
    "dot_last": lambda r: (lambda a, b: nk.dot_last(a, b), [_p(r, 4, 2, 3), _p(r, 4, 2, 3)]),
    "head_weight": lambda r: (lambda a, m: nk.head_weight(a, m), [_p(r, 4, 2), _p(r, 4, 2, 3)]),
    "segment_softmax": lambda r: (lambda x: nk.segment_softmax(x, np.array([1, 0, 1, 1, 2]), 3), [_p(r, 5, 2)]),
    "segment_sum": lambda r: (lambda x: nk.segment_sum(x, np.array([1, 0, 1, 1]), 3), [_p(r, 4, 2, 2)]),
    "gelu": lambda r: (lambda x: nk.gelu(x), [_p(r, 3, 4)]),
    "mask_rows": lambda r: (lambda x: nk.mask_rows(x, np.array([True, False, True])), [_p(r, 3, 2)]),
    "row_softmax": lambda r: (lambda x: nk.row_softmax(x), [_p(r, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(KERNEL_CASES))
def test_kernel_backward_rules(name):
    rng = np.random.default_rng(0)
    fn, params = KERNEL_CASES[name](rng)
    probe = None

    def loss():
        nonlocal probe
        out = fn(*params)
        if probe is None:
            probe = rng.normal(size=out.shape)
        return nk.dot_last(nk.reshape(out, (out.value.size,)), Tensor(probe.reshape(-1)))

    assert nk.grad_check(loss, params, eps=1e-5) < 1e-4


def test_cross_entropy_backward():
    rng = np.random.default_rng(5)
    logits = _p(rng, 4, 3)
    loss = lambda: nk.cross_entropy(logits, np.array([0, 2, 2]), np.array([1, 0, 2]))  # noqa: E731
    assert nk.grad_check(loss, [logits]) < 1e-4


def test_shared_subexpression_accumulates():
    # x is used twice; both paths must reach x.grad
    x = Parameter(np.array([[1.0, 2.0]]), "x")
    y = nk.add(x, x)
    loss = nk.dot_last(nk.reshape(y, (2,)), Tensor(np.array([1.0, 1.0])))
    loss.backward()
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])


def test_backward_zeroes_leaf_grads():
    x = Parameter(np.array([1.0, 2.0]), "x")
    for _ in range(2):
        nk.dot_last(x, Tensor(np.array([3.0, 4.0]))).backward()
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])
