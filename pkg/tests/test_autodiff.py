import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from chunknmt import autodiff as ad
from chunknmt.autodiff import Tape, Tensor, backward, grad_check


def test_softmax_examples():
    np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0, 0, 0])).data, [0.25] * 4)
    assert ad.softmax(Tensor([3.7])).data.tolist() == [1.0]
    # oracle: direct exp/sum
    x = np.array([1.0, 2.0, 3.0])
    oracle = np.exp(x) / np.exp(x).sum()
    out = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(out, oracle, atol=1e-12)
    np.testing.assert_allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="non-finite logits"):
        ad.softmax(Tensor([0.0, np.inf]))
    with pytest.raises(FloatingPointError, match="non-finite logits"):
        ad.softmax(Tensor([np.nan]))


@given(hnp.arrays(np.float64, st.integers(1, 12),
                  elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_softmax_is_a_distribution(x):
    p = ad.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


def test_masked_softmax_zeroes_masked_positions():
    p = ad.softmax(Tensor([[1.0, 5.0, 2.0]]), mask=np.array([[True, False, True]])).data
    assert p[0, 1] == 0.0
    assert abs(p.sum() - 1) < 1e-12


def test_primitive_examples():
    np.testing.assert_array_equal(ad.concat([Tensor([1.0]), Tensor([2.0])]).data, [1.0, 2.0])
    np.testing.assert_array_equal(ad.tanh(Tensor(np.zeros(5))).data, np.zeros(5))
    ce = ad.cross_entropy(Tensor([0.25, 0.25, 0.25, 0.25]), 2).item()
    assert abs(ce - (-math.log(0.25))) < 1e-12
    assert abs(ce - 1.3862944) < 1e-7
    fused = ad.softmax_cross_entropy(Tensor(np.zeros((1, 4))), np.array([2])).data[0]
    assert abs(fused - ce) < 1e-12


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ValueError, match=r"\(3,\).*\(4,\)"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_backward_sum_and_dot():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape():
        backward(ad.sum(w))
    np.testing.assert_array_equal(w.grad, np.ones(3))

    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        backward(ad.dot(w, w))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_needs_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = w * 2.0
        with pytest.raises(ValueError, match="scalar"):
            backward(y)


def test_shared_subexpression_accumulates():
    x = Tensor(3.0, requires_grad=True)
    with Tape():
        backward(x + x)
    assert x.grad == 2.0
    # and a second backward accumulates on top (caller zeroes)
    with Tape():
        backward(x * x)
    assert x.grad == 2.0 + 6.0
    x.zero_grad()
    assert x.grad == 0.0


def test_tape_is_topologically_ordered():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        b = ad.tanh(a)
        c = b * a
        ad.sum(c + b)
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            if not p.is_leaf:
                assert position[id(p)] < position[id(node)]


def test_no_tape_means_no_recording():
    w = Tensor([1.0], requires_grad=True)
    y = ad.sum(w * 2.0)
    assert not y.requires_grad
    backward(y)
    assert w.grad.tolist() == [0.0]


def test_grad_check_sum_of_squares():
    assert grad_check(lambda w: ad.sum(w * w), np.array([3.0])) < 1e-9


RNG = np.random.default_rng(0)

PRIMITIVES = {
    "matmul": (lambda t: ad.sum(ad.tanh(t[0] @ t[1])), [(3, 4), (4, 2)]),
    "matvec": (lambda t: ad.sum(ad.tanh(ad.matvec(t[0], t[1]))), [(3, 4), (4,)]),
    "batched_matmul": (lambda t: ad.sum(ad.tanh(t[0] @ t[1])), [(2, 3, 4), (4, 2)]),
    "add_broadcast": (lambda t: ad.sum(ad.tanh(t[0] + t[1])), [(3, 4), (4,)]),
    "mul": (lambda t: ad.sum(t[0] * t[1] * t[0]), [(3, 4), (3, 4)]),
    "sub": (lambda t: ad.sum(ad.tanh(t[0] - t[1])), [(2, 2), (2, 2)]),
    "sigmoid": (lambda t: ad.sum(ad.sigmoid(t[0]) * t[0]), [(5,)]),
    "exp_log": (lambda t: ad.sum(ad.log(ad.exp(t[0]) + 1.0)), [(4,)]),
    "concat": (lambda t: ad.sum(ad.tanh(ad.concat([t[0], t[1]], axis=-1)) * 1.7), [(2, 3), (2, 1)]),
    "stack": (lambda t: ad.sum(ad.tanh(ad.stack([t[0], t[1]], axis=1))), [(2, 3), (2, 3)]),
    "slice": (lambda t: ad.sum(ad.slice_last(t[0], 1, 3) * ad.slice_last(t[0], 0, 2)), [(2, 4)]),
    "getitem_rows": (lambda t: ad.sum(ad.tanh(t[0][np.array([0, 2, 0])])), [(3, 2)]),
    "embedding": (lambda t: ad.sum(ad.tanh(ad.embedding(t[0], np.array([[1, 1], [0, 2]])))), [(3, 2)]),
    "reshape": (lambda t: ad.sum(ad.tanh(ad.reshape(t[0], (3, 2))) @ t[1]), [(2, 3), (2,)]),
    "where": (lambda t: ad.sum(ad.tanh(ad.where(np.array([[True], [False]]), t[0], t[1]))), [(2, 3), (2, 3)]),
    "scatter_rows": (lambda t: ad.sum(ad.tanh(ad.scatter_rows(t[0], [2, 0], 3) + 0.3)), [(2, 3)]),
    "softmax": (lambda t: ad.sum(ad.softmax(t[0]) * t[1]), [(2, 4), (2, 4)]),
    "masked_softmax": (lambda t: ad.sum(ad.softmax(t[0], mask=np.array([1, 0, 1, 1], bool)) * t[1]),
                       [(4,), (4,)]),
    "log_softmax": (lambda t: ad.sum(ad.log_softmax(t[0]) * t[1]), [(2, 4), (2, 4)]),
    "softmax_xent": (lambda t: ad.sum(ad.softmax_cross_entropy(t[0], np.array([1, 3]))), [(2, 4)]),
    "prob_xent": (lambda t: ad.sum(ad.cross_entropy(ad.softmax(t[0]), np.array([0, 2]))), [(2, 3)]),
    "maxout": (lambda t: ad.sum(ad.maxout(t[0], 2) * t[1]), [(2, 6), (2, 3)]),
    "mean": (lambda t: ad.mean(ad.tanh(t[0]), axis=0) @ t[1], [(3, 2), (2,)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    f, shapes = PRIMITIVES[name]
    point = [RNG.normal(size=s) for s in shapes]
    assert grad_check(f, point, h=1e-5) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_composite_gradients_at_random_points(seed):
    rng = np.random.default_rng(seed)
    W, U, v = rng.normal(size=(3, 4)), rng.normal(size=(4, 4)), rng.normal(size=4)

    def f(t):
        W, U, v = t
        h = ad.tanh(ad.tanh(W[0] @ U) @ U + W[1])
        return ad.sum(ad.softmax_cross_entropy(ad.reshape(h * v, (1, 4)), np.array([2])))

    assert grad_check(f, [W, U, v]) < 1e-4


def test_forward_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        x = Tensor(rng.normal(size=(3, 6)))
        with Tape():
            loss = ad.sum(ad.softmax_cross_entropy(ad.tanh(x @ w) @ w, np.array([0, 1, 2])))
            backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_float32_profile():
    ad.set_default_dtype(np.float32)
    try:
        assert Tensor([1, 2]).data.dtype == np.float32
    finally:
        ad.set_default_dtype(np.float64)
    assert Tensor([1, 2]).data.dtype == np.float64
