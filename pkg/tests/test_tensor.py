"""Tensor core: primitive forward/backward rules against the finite-difference oracle."""

import numpy as np
import pytest

import desklm.tensor as T
from desklm.errors import AutodiffError, NumericError, ShapeError
from desklm.tensor import Tensor, backward, concat, cross_entropy, embedding, grad_check, matmul, softmax


def t64(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad, dtype=np.float64)


# -- forward values ----------------------------------------------------------------


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    out = matmul(t64(np.eye(3)), t64(a))
    np.testing.assert_allclose(out.data, a, rtol=0, atol=0)


def test_square_derivative_at_3():
    x = t64([3.0], requires_grad=True)
    y = x.square().sum()
    backward(y)
    np.testing.assert_allclose(x.grad, [6.0])


def test_softmax_uniform():
    out = softmax(t64([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3])


def test_softmax_jacobian_matches_finite_differences():
    # Independent oracle: perturb each input, measure each output.
    rng = np.random.default_rng(1)
    x = rng.normal(size=4)
    eps = 1e-6
    fd = np.zeros((4, 4))
    for j in range(4):
        hi = x.copy()
        lo = x.copy()
        hi[j] += eps
        lo[j] -= eps
        fd[:, j] = (softmax(t64(hi)).data - softmax(t64(lo)).data) / (2 * eps)
    p = softmax(t64(x)).data
    analytic = np.diag(p) - np.outer(p, p)
    assert np.max(np.abs(analytic - fd)) < 1e-6


def test_masked_softmax_zeroes_excluded_entries():
    x = t64([[1.0, 2.0, 3.0]], requires_grad=True)
    mask = np.array([[True, True, False]])
    out = softmax(x, mask=mask)
    assert out.data[0, 2] == 0.0
    np.testing.assert_allclose(out.data[0, :2].sum(), 1.0)
    backward(out.sum())
    assert x.grad[0, 2] == 0.0


# -- backward contracts ------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = t64(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_mean_of_square():
    x = t64([1.0, 2.0], requires_grad=True)
    backward((x * x).mean())
    np.testing.assert_allclose(x.grad, [1.0, 2.0])


def test_backward_five_chained_primitives_vs_oracle():
    rng = np.random.default_rng(2)
    w = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=4))

    def f(x):
        return (matmul(x, w) + b).sigmoid().square().mean()

    x = t64(rng.normal(size=(2, 3)))
    assert grad_check(f, x) < 1e-5


def test_backward_rejects_non_scalar_root():
    x = t64([1.0, 2.0], requires_grad=True)
    with pytest.raises(AutodiffError):
        backward(x * 2.0)


def test_backward_twice_errors():
    x = t64([1.0], requires_grad=True)
    y = (x * x).sum()
    backward(y)
    with pytest.raises(AutodiffError):
        backward(y)


def test_backward_leaves_unreachable_grads_untouched():
    x = t64([1.0], requires_grad=True)
    z = t64([5.0], requires_grad=True)
    backward((x * 3.0).sum())
    assert z.grad is None


def test_gradient_accumulation_is_additive():
    rng = np.random.default_rng(3)
    data = rng.normal(size=5)

    xa = t64(data, requires_grad=True)
    backward((xa * xa).sum())
    grad_f = xa.grad.copy()
    xa.zero_grad()
    backward(xa.exp().sum())
    grad_g = xa.grad.copy()

    xb = t64(data, requires_grad=True)
    backward(((xb * xb) + xb.exp()).sum())
    np.testing.assert_array_equal(xb.grad, grad_f + grad_g)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        y = softmax(matmul(x, w)).mean()
        backward(y)
        return y.data.copy(), x.grad.copy(), w.grad.copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


# -- grad_check oracle --------------------------------------------------------------


def test_grad_check_exact_for_linear():
    rng = np.random.default_rng(4)
    x = t64(rng.normal(size=(3, 3)))
    assert grad_check(lambda t: t.sum(), x) < 1e-9


def test_grad_check_sigmoid_sum():
    rng = np.random.default_rng(5)
    x = t64(rng.uniform(-1, 1, size=8))
    assert grad_check(lambda t: t.sigmoid().sum(), x) < 1e-6


def test_grad_check_flags_wrong_backward_rule():
    def bad_square(x):
        data = x.data * x.data

        def rule(g):
            x._accum(g * 3.0 * x.data)  # deliberately wrong factor

        return Tensor._compose(data, (x,), rule, "bad_square")

    x = t64([0.5, 1.5, -0.7])
    assert grad_check(lambda t: bad_square(t).sum(), x) > 1e-2


def test_grad_check_rejects_non_scalar_f():
    x = t64([1.0, 2.0])
    with pytest.raises(AutodiffError):
        grad_check(lambda t: t * 2.0, x)


# -- per-primitive gradient sweep ----------------------------------------------------
#
# Inputs/constants are conditioned so no gradient entry sits near zero: a
# max-relative-error metric on float32 central differences is meaningless at
# degenerate points (FD rounding noise dominates any tolerance).

EMB_IDS = np.array([0, 2, 1, 2])
CE_TARGETS = np.array([1, 0, -1])


def _primitive_cases(rng):
    w = rng.normal(loc=2.0, size=(3, 4))
    wb = rng.normal(loc=2.0, size=(2, 4, 3))
    gain = rng.uniform(0.5, 1.5, size=3)
    other = rng.uniform(2.0, 4.0, size=(2, 3))
    sm_w = np.array([0.0, 4.0])
    u = lambda shape: rng.uniform(-1.0, 1.0, size=shape)
    return {
        "matmul_lhs": ((2, 3), u, lambda x, d: matmul(x, Tensor(w, dtype=d)).sum()),
        "matmul_rhs": ((3, 4), u, lambda x, d: matmul(Tensor(other, dtype=d), x).sum()),
        "matmul_batched": ((2, 4, 3), u, lambda x, d: matmul(Tensor(wb, dtype=d), x.transpose_last()).sum()),
        "add": ((2, 3), u, lambda x, d: (x + Tensor(other, dtype=d)).sum()),
        "add_bias": ((2, 3), u, lambda x, d: (x + Tensor(other[0], dtype=d)).square().sum()),
        "subtract": ((2, 3), u, lambda x, d: (x - Tensor(other, dtype=d)).square().sum()),
        "multiply": ((2, 3), u, lambda x, d: (x * Tensor(other, dtype=d)).sum()),
        "multiply_gain": ((2, 3), u, lambda x, d: (x * Tensor(gain, dtype=d)).sum()),
        "divide_scalar": ((2, 3), u, lambda x, d: ((x / 2.5) + 2.0).square().sum()),
        "exp": ((5,), u, lambda x, d: x.exp().sum()),
        "log": ((5,), u, lambda x, d: (x + 2.0).log().sum()),
        "sigmoid": ((5,), u, lambda x, d: x.sigmoid().sum()),
        "silu": ((3,), lambda s: rng.uniform(-0.5, 1.0, size=s),
                 lambda x, d: (x.silu() + 2.0).square().sum()),
        "square": ((2, 3), lambda s: rng.uniform(0.5, 1.5, size=s), lambda x, d: x.square().sum()),
        "mean_axis": ((2, 3), u, lambda x, d: (x.mean(axis=1) + 2.0).square().sum()),
        "sum_axis": ((2, 3), u, lambda x, d: (x.sum(axis=0) + 3.0).square().sum()),
        "concat": ((2, 3), u, lambda x, d: (concat([x, x * 2.0], axis=1) + 2.0).square().sum()),
        "slice": ((3, 4), u, lambda x, d: (x[1:, ::2] + 2.0).square().sum()),
        "reshape": ((2, 6), u, lambda x, d: (x.reshape(3, 4) + 2.0).square().sum()),
        "transpose_last": ((2, 3), u, lambda x, d: (x.transpose_last() + 2.0).square().sum()),
        "softmax": ((2, 2), u, lambda x, d: (softmax(x) * Tensor(sm_w, dtype=d)).sum()),
        "embedding": ((3, 2), u, lambda x, d: (embedding(x, EMB_IDS) + 2.0).square().sum()),
        "cross_entropy": ((3, 2), lambda s: rng.uniform(-0.5, 0.5, size=s),
                          lambda x, d: cross_entropy(x, CE_TARGETS, ignore_label=-1)),
    }


@pytest.mark.parametrize("name", sorted(_primitive_cases(np.random.default_rng(0))))
def test_primitive_gradients_widest_precision(name):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        shape, sample, f = _primitive_cases(rng)[name]
        x = Tensor(sample(shape), dtype=np.float64)
        worst = max(worst, grad_check(lambda t: f(t, np.float64), x))
    assert worst < 1e-5, f"{name}: max rel err {worst}"


@pytest.mark.parametrize("name", sorted(_primitive_cases(np.random.default_rng(0))))
def test_primitive_gradients_single_precision(name):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        shape, sample, f = _primitive_cases(rng)[name]
        x = Tensor(sample(shape).astype(np.float32), dtype=np.float32)
        worst = max(worst, grad_check(lambda t: f(t, np.float32), x))
    assert worst < 1e-3, f"{name}: max rel err {worst}"


# -- structured errors -----------------------------------------------------------------


def test_shape_error_names_primitive_and_shapes():
    a = t64(np.zeros((2, 3)))
    b = t64(np.zeros((4, 5)))
    with pytest.raises(ShapeError) as err:
        matmul(a, b)
    msg = str(err.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_elementwise_shape_mismatch_is_loud():
    with pytest.raises(ShapeError):
        t64(np.zeros((2, 3))) + t64(np.zeros((3, 2)))


def test_non_finite_result_raises():
    with pytest.raises(NumericError):
        t64([1000.0]).exp()
    with pytest.raises(NumericError):
        t64([-1.0]).log()
    with pytest.raises(NumericError):
        t64([1.0]) / 0.0


def test_tensor_rejects_non_finite_input():
    with pytest.raises(NumericError):
        Tensor([np.nan])


def test_fancy_indexing_rejected():
    x = t64(np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        x[np.array([0, 1])]


def test_dtype_mismatch_rejected():
    with pytest.raises(ShapeError):
        Tensor([1.0], dtype=np.float32) + Tensor([1.0], dtype=np.float64)


def test_no_grad_suppresses_recording():
    x = t64([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        y = (x * x).sum()
    assert y._parents == ()
    with pytest.raises(AutodiffError):
        backward(y)


def test_invariant_product_shape_equals_buffer():
    x = t64(np.zeros((2, 3, 4)))
    assert int(np.prod(x.shape)) == x.data.size
