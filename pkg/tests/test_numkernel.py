import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from procc.numkernel import (
    OptimState,
    ParamStore,
    ShapeError,
    Tape,
    backward,
    conv1d_same,
    cross_entropy,
    finite_diff_check,
    matmul,
    optimizer_step,
    relu,
    resolve_kernel_size,
    softmax,
)
from procc.numkernel import autograd as ag


def test_matmul_identity_and_hand_product():
    m = np.array([[2.0, -1.0], [0.5, 3.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), m), m)
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17], [39]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_matmul_associative(rng):
    a, b, c = (rng.uniform(-1, 1, (5, 5)) for _ in range(3))
    np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-9, rtol=0)


def test_softmax_examples():
    np.testing.assert_allclose(softmax([[0.0, 0.0, 0.0]]), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(softmax([[np.log(2), 0.0]]), [[2 / 3, 1 / 3]], atol=1e-15)
    big = softmax([[1000.0, 0.0]])
    assert np.all(np.isfinite(big))
    assert big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300


def test_softmax_column_axis():
    x = np.array([[0.0, 1.0], [0.0, 1.0]])
    np.testing.assert_allclose(softmax(x, axis=0), 0.5)


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError):
        softmax([[np.nan, 1.0]])


@settings(max_examples=1000, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    assert np.all(np.abs(softmax(x).sum(axis=1) - 1) <= 1e-9)


def test_conv1d_examples():
    x = np.array([0.3, -1.2, 4.0, 2.5])
    np.testing.assert_array_equal(conv1d_same(x, [1.0]), x)
    np.testing.assert_array_equal(conv1d_same([1, 2, 3], [1, 1, 1]), [3, 6, 5])
    np.testing.assert_array_equal(conv1d_same([5.0], [1.0]), [5.0])


def test_conv1d_centered_delta_on_short_input():
    # a 3-tap centered delta on a length-1 input is longer than the input; the
    # delta's only nonzero tap is the center, so trimming to 1 tap is equivalent
    assert resolve_kernel_size(3, 1) == 1
    np.testing.assert_array_equal(conv1d_same([5.0], [1.0]), [5.0])


def test_conv1d_errors():
    with pytest.raises(ValueError):
        conv1d_same([], [1.0])
    with pytest.raises(ValueError):
        conv1d_same([1.0, 2.0, 3.0], [1.0, 1.0])


@given(arrays(np.float64, st.integers(3, 40), elements=st.floats(-1e3, 1e3)), st.integers(0, 5))
def test_conv1d_delta_kernel_is_identity(x, half):
    k = min(2 * half + 1, x.size if x.size % 2 else x.size - 1)
    kernel = np.zeros(k)
    kernel[k // 2] = 1.0
    np.testing.assert_array_equal(conv1d_same(x, kernel), x)


@pytest.mark.parametrize("k,d,expected", [(32, 64, 33), (64, 64, 63), (3, 64, 3), (1, 5, 1), (0, 5, 1)])
def test_kernel_size_rule(k, d, expected):
    assert resolve_kernel_size(k, d) == expected


def test_relu_examples():
    np.testing.assert_array_equal(relu([[-1, 0, 2]]), [[0, 0, 2]])
    np.testing.assert_array_equal(relu(-np.ones((2, 3))), np.zeros((2, 3)))
    pos = np.arange(1.0, 7.0).reshape(2, 3)
    np.testing.assert_array_equal(relu(pos), pos)


def test_cross_entropy_examples():
    assert cross_entropy(np.full((3, 4), 0.25), [0, 1, 3]) == pytest.approx(np.log(4), abs=1e-12)
    assert cross_entropy([[0.5, 0.25, 0.25]], [1]) == pytest.approx(-np.log(0.25), abs=1e-12)
    assert cross_entropy(np.full((2, 4), 0.25), [0, 1], mask=[False, False]) == 0.0


def test_cross_entropy_clamps_and_checks_labels():
    assert cross_entropy([[1.0, 0.0]], [1]) == pytest.approx(-np.log(1e-12))
    with pytest.raises(IndexError):
        cross_entropy([[0.5, 0.5]], [2])
    # out-of-range labels on unmasked rows are ignored
    assert cross_entropy([[0.5, 0.5], [0.5, 0.5]], [0, 9], mask=[True, False]) == pytest.approx(np.log(2))


# ---------------------------------------------------------------------------
# autograd


def _store(**arrays):
    p = ParamStore()
    for k, v in arrays.items():
        p.add(k, v)
    return p


def test_backward_of_sum_is_ones(rng):
    p = _store(W=rng.normal(size=(3, 4)), other=rng.normal(size=(2, 2)))
    tape = Tape(p)
    backward(ag.total(tape.param("W")))
    np.testing.assert_array_equal(p.grads["W"], np.ones((3, 4)))
    np.testing.assert_array_equal(p.grads["other"], np.zeros((2, 2)))


def test_backward_before_forward_errors():
    p = _store(W=np.ones((2, 2)))
    tape = Tape(p)
    with pytest.raises(RuntimeError):
        tape.backward(tape.constant(1.0))


def _softmax_ce_loss(x, labels):
    def loss(tape):
        logits = ag.matmul(tape.constant(x), tape.param("W"))
        return ag.nll(ag.log_softmax(logits), labels)

    return loss


def test_softmax_cross_entropy_gradient_matches_finite_differences(rng):
    x = rng.normal(size=(4, 5))
    p = _store(W=rng.normal(size=(5, 3)))
    assert finite_diff_check(p, "W", _softmax_ce_loss(x, [0, 2, 1, 2])) < 1e-4


def test_graph_loss_matches_numeric_cross_entropy(rng):
    x = rng.normal(size=(4, 5))
    p = _store(W=rng.normal(size=(5, 3)))
    labels = np.array([0, 2, 1, 2])
    graph = _softmax_ce_loss(x, labels)(Tape(p)).item()
    assert graph == pytest.approx(cross_entropy(softmax(x @ p.values["W"]), labels), abs=1e-12)


def _square(w):
    return w.tape.record(w.value ** 2, (w,), lambda g: (2 * w.value * g,))


def test_finite_diff_quadratic_is_exact(rng):
    p = _store(W=rng.normal(size=(3, 3)))
    for eps in (1e-4, 1e-5, 1e-6):
        assert finite_diff_check(p, "W", lambda tape: ag.total(_square(tape.param("W"))), epsilon=eps) < 1e-6


def test_finite_diff_zero_loss():
    p = _store(W=np.ones((2, 2)))
    assert finite_diff_check(p, "W", lambda tape: ag.scale(ag.total(tape.param("W")), 0.0)) == 0.0


@pytest.mark.parametrize("op", ["relu", "conv", "add_bias", "log_softmax", "matmul"])
def test_each_op_passes_gradient_check(op, rng):
    x = rng.normal(size=(4, 9))
    p = _store(A=rng.normal(size=(9, 9)), b=rng.normal(size=(1, 9)), k=rng.normal(size=(1, 5)))
    target = rng.normal(size=(4, 9))

    def loss(tape):
        h = ag.matmul(tape.constant(x), tape.param("A"))
        if op == "relu":
            h = ag.relu(h)
        elif op == "conv":
            h = ag.conv1d_rows(h, tape.param("k"))
        elif op == "add_bias":
            h = ag.add(h, tape.param("b"))
        elif op == "log_softmax":
            h = ag.log_softmax(h)
        return ag.total(ag.matmul(h, tape.constant(target.T)))

    name = {"conv": "k", "add_bias": "b"}.get(op, "A")
    assert finite_diff_check(p, name, loss) < 1e-4


def test_detach_blocks_gradient(rng):
    p = _store(A=rng.normal(size=(3, 3)), B=rng.normal(size=(3, 3)))
    tape = Tape(p)
    a = tape.param("A")
    loss = ag.total(ag.matmul(ag.detach(a), tape.param("B")))
    tape.backward(loss)
    assert not p.grads["A"].any()
    assert p.grads["B"].any()


# ---------------------------------------------------------------------------
# optimizer


def test_plain_descent_step():
    p = _store(w=[[1.0]])
    p.grads = {"w": np.array([[0.5]])}
    optimizer_step(p, OptimState(lr=0.1, mode="sgd"))
    assert p.values["w"][0, 0] == pytest.approx(0.95)


@pytest.mark.parametrize("mode", ["sgd", "adam"])
def test_zero_gradient_leaves_parameters(mode, rng):
    w = rng.normal(size=(3, 2))
    p = _store(w=w)
    p.zero_grad()
    optimizer_step(p, OptimState(lr=0.1, mode=mode))
    np.testing.assert_array_equal(p.values["w"], w)


@pytest.mark.parametrize("mode", ["sgd", "adam"])
def test_step_touches_only_scope(mode, rng):
    p = _store(**{"phi_o.w": rng.normal(size=(3, 3)), "phi_s.w": rng.normal(size=(3, 3))})
    before = p.values["phi_s.w"].tobytes()
    p.grads = {n: rng.normal(size=(3, 3)) for n in p.values}
    optimizer_step(p, OptimState(lr=0.1, mode=mode), scope=p.names("phi_o"))
    assert p.values["phi_s.w"].tobytes() == before
    assert p.values["phi_o.w"].tobytes() != before


def test_missing_gradient_for_scope_errors():
    p = _store(w=[[1.0]])
    with pytest.raises(KeyError):
        optimizer_step(p, OptimState(lr=0.1), scope=["w"])


def test_adam_first_step_moves_by_lr():
    p = _store(w=[[1.0, -2.0]])
    p.grads = {"w": np.array([[3.0, -0.01]])}
    optimizer_step(p, OptimState(lr=0.01))
    # bias-corrected first step has magnitude lr for any nonzero gradient
    np.testing.assert_allclose(p.values["w"], [[0.99, -1.99]], atol=1e-8)
