import numpy as np
import numpy.testing as npt
import pytest

from kbnli import tensor as T
from kbnli.tensor import (
    ShapeError,
    Tensor,
    additive_mask,
    concat,
    cross_entropy,
    embedding,
    finite_diff_check,
    gelu,
    layer_norm,
    masked_max,
    masked_mean,
    masked_softmax,
    matmul,
    reduce_sum,
    take_position,
    tanh,
)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((3, 3))
    out = matmul(Tensor(np.eye(3)), Tensor(m))
    npt.assert_array_equal(out.data, m)


def test_matmul_hand_example():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    npt.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError) as exc:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 5)))
    err = finite_diff_check(lambda t: reduce_sum(matmul(t, b)), a)
    assert err < 1e-6


def test_matmul_associative_on_random_chains():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a, b, c = (rng.standard_normal((8, 8)) for _ in range(3))
        left = matmul(matmul(Tensor(a), Tensor(b)), Tensor(c)).data
        right = matmul(Tensor(a), matmul(Tensor(b), Tensor(c))).data
        npt.assert_allclose(left, right, rtol=1e-9)


def test_matmul_batched_gradient():
    rng = np.random.default_rng(2)
    a = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    err_a = finite_diff_check(lambda t: reduce_sum(matmul(t, w)), a)
    err_w = finite_diff_check(lambda t: reduce_sum(matmul(a, t)), w)
    assert err_a < 1e-6 and err_w < 1e-6


# -- masked softmax -----------------------------------------------------------

def test_softmax_uniform_on_equal_logits():
    out = masked_softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
    npt.assert_allclose(out.data, [0.25] * 4)


def test_softmax_single_survivor():
    mask = additive_mask(np.array([1.0, 0.0]))
    out = masked_softmax(Tensor([0.0, 0.0]), mask)
    npt.assert_array_equal(out.data, [1.0, 0.0])


def test_softmax_direct_evaluation():
    # e^x / sum e^x at [1,2,3], computed by hand
    out = masked_softmax(Tensor([1.0, 2.0, 3.0]))
    npt.assert_allclose(out.data, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_rows_sum_to_one_and_masked_entries_zero():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((3, 7)) * 5
        keep = (rng.random((3, 7)) > 0.3).astype(float)
        keep[:, 0] = 1.0  # at least one survivor per row
        p = masked_softmax(Tensor(logits), additive_mask(keep)).data
        npt.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert (p[keep == 0] == 0.0).all()


def test_softmax_all_masked_row_is_zero_not_nan():
    keep = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]])
    p = masked_softmax(Tensor(np.ones((2, 3))), additive_mask(keep)).data
    assert not np.isnan(p).any()
    npt.assert_array_equal(p[0], 0.0)
    npt.assert_allclose(p[1].sum(), 1.0)


def test_softmax_gradient():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    keep = np.array([[1, 1, 0, 1, 1], [1, 0, 1, 1, 0]], dtype=float)
    mask = additive_mask(keep)
    weights = rng.standard_normal((2, 5))  # fixed projection to a scalar

    def f(t):
        return reduce_sum(masked_softmax(t, mask) * Tensor(weights))

    assert finite_diff_check(f, x) < 1e-6


# -- gelu ---------------------------------------------------------------------

def test_gelu_values():
    out = gelu(Tensor([0.0, 1.0, -10.0]))
    assert out.data[0] == 0.0
    npt.assert_allclose(out.data[1], 0.84134, atol=1e-4)
    # exact-CDF tail evaluation: -10 * Phi(-10)
    npt.assert_allclose(out.data[2], -7.6199e-23, rtol=1e-3)


def test_gelu_gradient():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    assert finite_diff_check(lambda t: reduce_sum(gelu(t)), x) < 1e-6


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    npt.assert_allclose(out.data, 0.0, atol=1e-9)


def test_layer_norm_standardizes():
    out = layer_norm(
        Tensor([1.0, 2.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-12
    )
    npt.assert_allclose(out.data.mean(), 0.0, atol=1e-9)
    npt.assert_allclose(out.data.var(), 1.0, atol=1e-9)


def test_layer_norm_gradient():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    gain = Tensor(rng.standard_normal(6), requires_grad=True)
    shift = Tensor(rng.standard_normal(6), requires_grad=True)
    for t in (x, gain, shift):
        err = finite_diff_check(
            lambda _: reduce_sum(layer_norm(x, gain, shift)), t
        )
        assert err < 1e-5


# -- cross entropy ------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((4, 3))), np.array([0, 1, 2, 0]))
    npt.assert_allclose(loss.data, np.log(3.0), atol=1e-12)


def test_cross_entropy_confident_prediction():
    loss = cross_entropy(Tensor([[30.0, -30.0, -30.0]]), np.array([0]))
    assert loss.data < 1e-12


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    labels = np.array([0, 2, 1, 1])
    loss = cross_entropy(logits, labels)
    loss.backward()
    e = np.exp(logits.data - logits.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    p[np.arange(4), labels] -= 1.0
    npt.assert_allclose(logits.grad, p / 4.0, atol=1e-12)
    # and against the numeric oracle
    logits2 = Tensor(logits.data.copy(), requires_grad=True)
    assert finite_diff_check(lambda t: cross_entropy(t, labels), logits2) < 1e-6


# -- backward mechanics --------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    reduce_sum(x).backward()
    npt.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_elementwise_square():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    reduce_sum(x * x).backward()
    npt.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates_across_consumers():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x + x
    reduce_sum(y).backward()
    npt.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * x).backward()


# -- other kernels -------------------------------------------------------------

def test_embedding_gather_and_scatter():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    ids = np.array([[0, 2], [2, 1]])
    out = embedding(table, ids)
    npt.assert_array_equal(out.data[0, 1], table.data[2])
    reduce_sum(out).backward()
    expected = np.zeros((4, 3))
    expected[0] += 1
    expected[2] += 2  # row 2 used twice
    expected[1] += 1
    npt.assert_array_equal(table.grad, expected)


def test_embedding_rejects_out_of_range():
    with pytest.raises(ValueError):
        embedding(Tensor(np.zeros((4, 3))), np.array([4]))


def test_masked_pooling_ignores_padding():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 5, 3))
    keep = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=float)
    mx = masked_max(Tensor(x), keep).data
    mn = masked_mean(Tensor(x), keep).data
    npt.assert_allclose(mx[0], x[0, :3].max(axis=0))
    npt.assert_allclose(mn[0], x[0, :3].mean(axis=0))
    npt.assert_allclose(mx[1], x[1].max(axis=0))


def test_masked_pooling_gradients():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
    keep = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], dtype=float)
    w = rng.standard_normal((2, 3))
    for pool in (masked_max, masked_mean):
        x.grad = None
        err = finite_diff_check(
            lambda t: reduce_sum(pool(t, keep) * Tensor(w)), x
        )
        assert err < 1e-6


def test_take_position():
    x = Tensor(np.arange(24.0).reshape(2, 4, 3), requires_grad=True)
    out = take_position(x, 0)
    npt.assert_array_equal(out.data, x.data[:, 0, :])
    reduce_sum(out).backward()
    assert x.grad[:, 0, :].sum() == 6 and x.grad[:, 1:, :].sum() == 0


def test_concat_and_split_gradient():
    rng = np.random.default_rng(8)
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    w = rng.standard_normal((2, 8))
    for t in (a, b):
        t.grad = None
        err = finite_diff_check(
            lambda _: reduce_sum(concat([a, b], axis=-1) * Tensor(w)), t
        )
        assert err < 1e-6


# -- finite difference oracle ---------------------------------------------------

def test_finite_diff_self_test_linear():
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    assert finite_diff_check(lambda t: reduce_sum(t), x) < 1e-10


def test_finite_diff_self_test_gelu():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    assert finite_diff_check(lambda t: reduce_sum(gelu(t)), x) < 1e-6


def test_finite_diff_rejects_bad_h():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: reduce_sum(t), x, h=0.0)


# -- gradient property across ops, many seeds -----------------------------------

def _composite(t, keep, mask, w1, w2):
    h = tanh(matmul(t, w1))
    h = gelu(h)
    h = layer_norm(h, Tensor(np.ones(h.shape[-1])), Tensor(np.zeros(h.shape[-1])))
    att = masked_softmax(matmul(h, T.transpose_last(h)), mask)
    pooled = masked_mean(matmul(att, h), keep)
    return reduce_sum(pooled * w2)


def test_gradients_match_finite_differences_many_seeds():
    failures = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
        w1 = Tensor(rng.standard_normal((3, 6)))
        w2 = Tensor(rng.standard_normal((2, 6)))
        keep = np.ones((2, 4))
        keep[0, 3] = 0.0
        mask = additive_mask(np.broadcast_to(keep[:, None, :], (2, 4, 4)))
        err = finite_diff_check(
            lambda t: _composite(t, keep, mask, w1, w2), x, max_samples=12, seed=seed
        )
        if err >= 1e-5:
            failures.append((seed, err))
    assert not failures, failures
