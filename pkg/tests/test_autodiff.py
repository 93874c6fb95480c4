import numpy as np
import pytest

from src.xattn.autodiff import (
    Tape,
    Tensor,
    add,
    block_apply,
    block_scores,
    cross_entropy,
    grad_check,
    layer_norm,
    matmul,
    mixture_softmax,
    mul,
    row_softmax,
    sum_all,
    take_rows,
    transpose,
    zero_grad,
)
from src.xattn.errors import ContractError, ShapeError


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError) as err:
        matmul(a, b)
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


def test_ops_outside_tape_do_not_record():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = sum_all(matmul(x, x))
    assert not y.requires_grad
    assert x.grad is None


def test_matmul_gradient():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    b = Tensor(np.array([[5.0], [6.0]]), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(matmul(a, b))
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [[5.0, 6.0], [5.0, 6.0]])
    np.testing.assert_array_equal(b.grad, [[4.0], [6.0]])


def test_second_backward_on_same_tape_raises():
    x = Tensor(np.ones((1, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = add(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_leaf_grads_accumulate_until_zero_grad():
    x = Tensor(np.array([[2.0, 3.0]]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = sum_all(x)
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])
    zero_grad([x])
    np.testing.assert_array_equal(x.grad, [[0.0, 0.0]])


def test_unreached_leaf_gets_zero_grad():
    a = Tensor(np.ones((1, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 2)), requires_grad=True)
    with Tape() as tape:
        add(a, b)
        loss = sum_all(a)
    tape.backward(loss)
    np.testing.assert_array_equal(b.grad, np.zeros((1, 2)))


def test_take_rows_accumulates_repeated_indices():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(take_rows(table, [0, 0, 2]))
    tape.backward(loss)
    np.testing.assert_array_equal(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_take_rows_out_of_range():
    with pytest.raises(IndexError):
        take_rows(Tensor(np.ones((2, 2))), [2])


def test_row_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 6)) * 50)
    p = row_softmax(x).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_mixture_softmax_respects_masks():
    rng = np.random.default_rng(1)
    s = Tensor(rng.normal(size=(3, 3)))
    sc = Tensor(rng.normal(size=(3, 3)))
    m1 = np.array([[1, 0, 0], [1, 1, 0], [0, 0, 1]], dtype=float)
    m2 = np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0]], dtype=float)
    p = mixture_softmax(s, m1, sc, m2).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert p[0, 2] == 0.0 and p[1, 2] == 0.0
    assert p[2, 2] == 1.0


def test_mixture_softmax_all_masked_row():
    s = Tensor(np.zeros((2, 2)))
    with pytest.raises(ContractError):
        mixture_softmax(s, np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_mixture_softmax_large_scores_stay_finite():
    s = Tensor(np.array([[1000.0, -1000.0]]))
    sc = Tensor(np.array([[-1000.0, 1000.0]]))
    p = mixture_softmax(s, np.array([[1.0, 0.0]]), sc, np.array([[0.0, 1.0]])).data
    np.testing.assert_allclose(p, [[0.5, 0.5]], atol=1e-12)


def test_cross_entropy_value_and_bad_label():
    logits = Tensor(np.zeros((2, 2)))
    assert cross_entropy(logits, [0, 1]).item() == pytest.approx(np.log(2.0), abs=1e-12)
    with pytest.raises(IndexError):
        cross_entropy(logits, [0, 2])


def test_layer_norm_normalizes_rows():
    x = Tensor(np.random.default_rng(2).normal(size=(3, 8)) * 4 + 2)
    y = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.std(axis=1), 1.0, atol=1e-6)


def test_mul_gradient_is_other_operand():
    a = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    b = Tensor(np.array([[3.0, 4.0]]))
    with Tape() as tape:
        loss = sum_all(mul(a, b))
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, b.data)


def test_row_softmax_known_values():
    p = row_softmax(Tensor(np.array([[1.0, 2.0, 3.0]]))).data
    np.testing.assert_allclose(p, [[0.09003057, 0.24472847, 0.66524096]], atol=1e-8)


def test_row_softmax_large_equal_scores():
    with np.errstate(over="raise", invalid="raise"):
        p = row_softmax(Tensor(np.array([[1000.0, 1000.0]]))).data
    np.testing.assert_array_equal(p, [[0.5, 0.5]])


def test_row_softmax_entries_are_probabilities():
    x = Tensor(np.random.default_rng(9).normal(size=(50, 20)) * 200)
    p = row_softmax(x).data
    assert np.all(p >= 0.0) and np.all(p <= 1.0)


def test_cross_entropy_confident_logit():
    loss = cross_entropy(Tensor(np.array([[10.0, -10.0]])), [0]).item()
    assert loss == pytest.approx(2.06e-9, rel=1e-2)


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(12)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    assert np.abs(matmul(Tensor(a), Tensor(b)).data - expected).max() < 1e-12


def test_ops_are_bit_identical_across_runs():
    rng = np.random.default_rng(13)
    x, w = rng.normal(size=(6, 4)), rng.normal(size=(4, 4))
    m = (rng.random((6, 3)) < 0.7).astype(float)
    m[:, 0] = 1.0

    def run():
        xt, wt = Tensor(x.copy(), requires_grad=True), Tensor(w.copy(), requires_grad=True)
        with Tape() as tape:
            h = layer_norm(matmul(xt, wt), Tensor(np.ones(4)), Tensor(np.zeros(4)))
            p = mixture_softmax(block_scores(h, h, 2), m)
            out = block_apply(p, h, 2)
            loss = cross_entropy(out, [0, 1, 2, 3, 0, 1])
        tape.backward(loss)
        return out.data, loss.item(), wt.grad

    first, second = run(), run()
    np.testing.assert_array_equal(first[0], second[0])
    assert first[1] == second[1]
    np.testing.assert_array_equal(first[2], second[2])


def test_block_ops_match_per_block_matmul():
    rng = np.random.default_rng(14)
    q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
    scores = block_scores(Tensor(q), Tensor(k), 2).data
    assert scores.shape == (6, 3)
    for b in range(2):
        rows = slice(3 * b, 3 * b + 3)
        np.testing.assert_allclose(scores[rows], q[rows] @ k[rows].T, atol=1e-12)
    p = row_softmax(Tensor(scores)).data
    out = block_apply(Tensor(p), Tensor(v), 2).data
    for b in range(2):
        rows = slice(3 * b, 3 * b + 3)
        np.testing.assert_allclose(out[rows], p[rows] @ v[rows], atol=1e-12)
    # one block is plain attention
    np.testing.assert_allclose(
        block_scores(Tensor(q), Tensor(k)).data, matmul(Tensor(q), transpose(Tensor(k))).data, atol=1e-12
    )


def test_block_op_gradients():
    rng = np.random.default_rng(15)
    k, v = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 4)))
    w = Tensor(rng.normal(size=(6, 4)))

    def f(x):
        return sum_all(mul(block_apply(row_softmax(block_scores(x, k, 3)), v, 3), w))

    def g(x):
        return sum_all(mul(block_apply(row_softmax(block_scores(k, k, 3)), x, 3), w))

    assert grad_check(f, Tensor(rng.normal(size=(6, 4)))) < 1e-6
    assert grad_check(g, Tensor(rng.normal(size=(6, 4)))) < 1e-6


def test_block_ops_shape_errors():
    x = Tensor(np.ones((5, 2)))
    with pytest.raises(ShapeError):
        block_scores(x, x, 2)
    with pytest.raises(ShapeError):
        block_apply(Tensor(np.ones((4, 4))), Tensor(np.ones((4, 2))), 2)
