"""Tensor core: op semantics, gradients against finite differences, RNG."""

import math

import numpy as np
import pytest

from helpers import rel_err, random_stochastic_rows
from ratn.rng import RngStream
from ratn.tensor import (GraphCycleError, ShapeError, Tensor, backward,
                         clamp_min, concat, embedding, exp, finite_diff_grad,
                         layer_norm, log, matmul, no_grad, relu, reshape,
                         sigmoid, softmax_rows, transpose, tsum)
from ratn.attention import relax_weights


def test_matmul_identity():
    b = np.array([[1.5, -2.0], [0.25, 3.0]])
    out = matmul(Tensor(np.eye(2)), Tensor(b))
    assert np.array_equal(out.data, b)


def test_matmul_hand_case():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_matmul_gradient_matches_finite_differences():
    rng = RngStream(3, "test")
    b = Tensor(rng.normal((4, 3)))
    a = Tensor(rng.normal((2, 4)), requires_grad=True)

    def f(t):
        return matmul(t, b).sum()

    loss = f(a)
    backward(loss)
    assert rel_err(a.grad, finite_diff_grad(f, a)) < 1e-6


def test_batched_matmul_gradient():
    rng = RngStream(4, "test")
    b = Tensor(rng.normal((3, 2)))  # broadcast over the batch axis
    a = Tensor(rng.normal((5, 2, 3)), requires_grad=True)

    def f(t):
        return matmul(t, b).sum()

    backward(f(a))
    assert rel_err(a.grad, finite_diff_grad(f, a)) < 1e-6


def test_softmax_symmetric_row():
    out = softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    assert rel_err(out.data, [[1 / 3] * 3]) < 1e-15


def test_softmax_closed_form():
    out = softmax_rows(Tensor([[math.log(2.0), 0.0]]))
    assert rel_err(out.data, [[2 / 3, 1 / 3]]) < 1e-14


def test_softmax_shift_invariance():
    rng = RngStream(5, "test")
    x = rng.normal((6, 7))
    a = softmax_rows(Tensor(x)).data
    b = softmax_rows(Tensor(x + 13.75)).data
    assert np.abs(a - b).max() < 1e-12


def test_softmax_rows_on_simplex():
    rng = RngStream(6, "test")
    for _ in range(50):
        out = softmax_rows(Tensor(rng.normal((4, 9), 0.0, 3.0))).data
        assert out.min() >= 0.0
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12


def test_sigmoid_values_and_symmetry():
    assert sigmoid(Tensor([0.0])).data[0] == 0.5
    assert abs(sigmoid(Tensor([math.log(3.0)])).data[0] - 0.75) < 1e-15
    rng = RngStream(7, "test")
    x = rng.normal((100,), 0.0, 5.0)
    s = sigmoid(Tensor(x)).data + sigmoid(Tensor(-x)).data
    assert np.abs(s - 1.0).max() < 1e-12


def test_layer_norm_constant_vector_collapses_to_bias():
    gain = Tensor(np.ones(4))
    bias = Tensor(np.zeros(4))
    out = layer_norm(Tensor([[2.5, 2.5, 2.5, 2.5]]), gain, bias)
    assert np.abs(out.data).max() < 1e-6


def test_layer_norm_output_mean_is_bias_mean():
    rng = RngStream(8, "test")
    gain = Tensor(np.ones(6))
    bias = Tensor(rng.normal((6,)))
    out = layer_norm(Tensor(rng.normal((5, 6))), gain, bias)
    assert np.abs(out.data.mean(axis=-1) - bias.data.mean()).max() < 1e-10


def test_layer_norm_shape_error():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


def test_layer_norm_gradient():
    rng = RngStream(9, "test")
    gain = Tensor(rng.normal((5,)), requires_grad=True)
    bias = Tensor(rng.normal((5,)), requires_grad=True)
    x = Tensor(rng.normal((3, 5)), requires_grad=True)
    w = rng.normal((3, 5))

    def f(t):
        return (layer_norm(t, gain, bias) * w).sum()

    backward(f(x))
    assert rel_err(x.grad, finite_diff_grad(f, x)) < 1e-5


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_through_relaxed_softmax():
    rng = RngStream(10, "test")
    v = rng.normal((5, 2))
    x = Tensor(rng.normal((3, 5)), requires_grad=True)

    def f(t):
        return matmul(relax_weights(softmax_rows(t), 0.3, 5), v).sum()

    backward(f(x))
    assert rel_err(x.grad, finite_diff_grad(f, x)) < 1e-5


def test_repeated_backward_accumulates():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    once = x.grad.copy()
    backward(loss)
    assert np.array_equal(x.grad, 2.0 * once)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_backward_detects_cycle():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    y._parents = (y,)  # corrupt the graph on purpose
    with pytest.raises(GraphCycleError):
        backward(y.sum())


def test_finite_diff_on_sum_of_squares():
    grad = finite_diff_grad(lambda t: (t * t).sum(), Tensor([1.0, 2.0]))
    assert rel_err(grad, [2.0, 4.0]) < 1e-6


def test_finite_diff_on_constant_is_zero():
    grad = finite_diff_grad(lambda t: Tensor(7.0), Tensor(np.ones(4)))
    assert np.array_equal(grad, np.zeros(4))


def test_finite_diff_agrees_with_backward_through_softmax():
    rng = RngStream(11, "test")
    w = rng.normal((3, 4))
    x = Tensor(rng.normal((3, 4)), requires_grad=True)

    def f(t):
        return (softmax_rows(t) * w).sum()

    backward(f(x))
    assert rel_err(x.grad, finite_diff_grad(f, x)) < 1e-5


# Property sweep: every differentiable primitive against central differences,
# random inputs of magnitude <= 3, >= 100 cases in total across the table.
_CASES = [
    ("add", lambda t, c: (t + c["other"]).sum(), (3, 4)),
    ("mul", lambda t, c: (t * c["other"]).sum(), (3, 4)),
    ("div", lambda t, c: (t / c["positive"]).sum(), (3, 4)),
    ("rdiv", lambda t, c: (Tensor(c["positive"]) / (t * t + 1.0)).sum(), (3, 4)),
    ("neg", lambda t, c: (-t).sum(), (3, 4)),
    ("matmul", lambda t, c: matmul(t, Tensor(c["mat"])).sum(), (3, 4)),
    ("reshape", lambda t, c: (reshape(t, (4, 3)) * c["mat_t"]).sum(), (3, 4)),
    ("transpose", lambda t, c: (transpose(t, (1, 0)) * c["mat_t"]).sum(), (3, 4)),
    ("concat", lambda t, c: (concat([t, Tensor(c["other"])], axis=0)
                             * c["double"]).sum(), (3, 4)),
    ("take", lambda t, c: (t[1:, ::2] * 2.0).sum(), (3, 4)),
    ("sum_axis", lambda t, c: (tsum(t, axis=0) * c["row"]).sum(), (3, 4)),
    ("mean", lambda t, c: t.mean(axis=(0, 1)).sum(), (3, 4)),
    ("relu", lambda t, c: (relu(t) * c["other"]).sum(), (3, 4)),
    ("sigmoid", lambda t, c: (sigmoid(t) * c["other"]).sum(), (3, 4)),
    ("exp", lambda t, c: (exp(t) * c["other"]).sum(), (3, 4)),
    ("log", lambda t, c: (log(t * t + 0.5) * c["other"]).sum(), (3, 4)),
    ("clamp_min", lambda t, c: (clamp_min(t, 0.25) * c["other"]).sum(), (3, 4)),
    ("softmax", lambda t, c: (softmax_rows(t) * c["other"]).sum(), (3, 4)),
    ("embedding", lambda t, c: (embedding(t, c["idx"]) * c["emb_w"]).sum(), (5, 4)),
    ("layer_norm", lambda t, c: (layer_norm(t, Tensor(c["gain"]),
                                            Tensor(c["bias"])) * c["other"]).sum(),
     (3, 4)),
]


@pytest.mark.parametrize("name,fn,shape", _CASES, ids=[c[0] for c in _CASES])
def test_gradient_property_sweep(name, fn, shape):
    rng = RngStream(hash(name) % (2 ** 32), "sweep")
    for _ in range(6):
        ctx = {
            "other": rng.normal(shape, 0.0, 1.5),
            "positive": np.abs(rng.normal(shape)) + 0.5,
            "mat": rng.normal((shape[-1], 2)),
            "mat_t": rng.normal((shape[-1], shape[0])),
            "double": rng.normal((2 * shape[0], shape[1])),
            "row": rng.normal((shape[-1],)),
            "gain": rng.normal((shape[-1],)),
            "bias": rng.normal((shape[-1],)),
            "idx": np.array([0, 2, 2, 4]),
            "emb_w": rng.normal((4, shape[-1])),
        }
        x = Tensor(rng.normal(shape, 0.0, 1.5), requires_grad=True)
        backward(fn(x, ctx))
        fd = finite_diff_grad(lambda t: fn(t, ctx), x)
        assert rel_err(x.grad, fd) < 1e-5, name


def test_no_grad_disables_taping():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert y._vjp is None and not y.requires_grad


def test_rng_streams_are_reproducible_and_independent():
    a1 = RngStream(42, "dropout").normal((8,))
    a2 = RngStream(42, "dropout").normal((8,))
    b = RngStream(42, "fuzzy-gamma").normal((8,))
    c = RngStream(43, "dropout").normal((8,))
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, c)


def test_rng_child_streams_differ():
    base = RngStream(0, "data")
    assert not np.array_equal(base.child("train").normal((4,)),
                              base.child("dev").normal((4,)))


def test_finite_checks_mode():
    from ratn.tensor import set_finite_checks
    set_finite_checks(True)
    try:
        with pytest.raises(FloatingPointError):
            Tensor([np.nan, 1.0])
    finally:
        set_finite_checks(False)
