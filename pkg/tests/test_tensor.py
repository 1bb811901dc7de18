import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from awe import tensor as T
from awe.layers import GRUCell, Linear, gru_cell_step
from awe.tensor import Parameter


def test_linear_map_gradients():
    W = Parameter(np.eye(2), "W")
    x = Parameter(np.array([1.0, 2.0]), "x")
    T.backward(T.tsum(W @ x), [W, x])
    # d/dW_ij sum(Wx) = x_j ; d/dx_j = sum_i W_ij
    np.testing.assert_array_equal(W.grad, [[1, 2], [1, 2]])
    np.testing.assert_array_equal(x.grad, [1, 1])


def test_independent_parameter_gets_zero_grad():
    P = Parameter(np.ones(3), "P")
    Q = Parameter(np.arange(3.0), "Q")
    T.backward(T.tsum(Q * Q), [P, Q])
    np.testing.assert_array_equal(P.grad, 0)


def test_gradients_accumulate_linearly(rng):
    W = Parameter(rng.normal(size=(3, 2)), "W")
    x = rng.normal(size=2)
    loss_a = lambda: T.tsum(T.tanh(W @ x))
    loss_b = lambda: T.tsum(T.sigmoid(W @ x) * 3.0)
    T.backward(loss_a(), [W])
    T.backward(loss_b(), [W])
    separate = W.grad.copy()
    W.zero_grad()
    T.backward(loss_a() + loss_b(), [W])
    np.testing.assert_allclose(W.grad, separate, rtol=1e-12, atol=1e-15)


def test_unsupported_operation_is_named():
    t = Parameter(np.ones(2), "t")
    with pytest.raises(T.UnsupportedOperation, match="exp"):
        np.exp(t)
    with pytest.raises(T.UnsupportedOperation, match="pow"):
        t ** 3


def test_op_without_backward_is_reported():
    p = Parameter(np.ones(2), "p")
    node = T.Tensor(p.data * 2, parents=(p,), backward=None, op="mystery", requires_grad=True)
    with pytest.raises(T.UnsupportedOperation, match="mystery"):
        T.backward(T.tsum(node), [p])


def test_numpy_scalar_on_left_dispatches():
    p = Parameter(np.array([1.0, 2.0]), "p")
    out = np.float64(3.0) * p
    T.backward(T.tsum(out), [p])
    np.testing.assert_array_equal(p.grad, [3.0, 3.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_a_hard_error():
    p = Parameter(np.array([-1.0]), "p")
    with pytest.raises(T.NonFiniteError):
        T.sqrt(p)


def test_no_grad_records_nothing():
    p = Parameter(np.ones(2), "p")
    with T.no_grad():
        out = T.tsum(p * 2.0)
    assert not out.requires_grad and out._parents == ()


# ----------------------------------------------------------------- Adam

def test_adam_zero_grad_leaves_parameter():
    p = Parameter(np.array([0.7, -1.2]), "p")
    s = T.AdamState.for_param(p)
    T.adam_step([p], [s], 5e-4)
    np.testing.assert_array_equal(p.data, [0.7, -1.2])
    assert s.step_count == 1


def test_adam_first_step_is_lr_times_sign():
    p = Parameter(np.array([0.0]), "p")
    p.grad = np.array([0.3])
    T.adam_step([p], [T.AdamState.for_param(p)], 0.0005)
    assert p.data[0] == pytest.approx(-0.0005 * 0.3 / (0.3 + 1e-8), abs=1e-15)
    np.testing.assert_array_equal(p.grad, 0)  # grads zeroed after the step


def _scalar_adam(x, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    traj = []
    for t in range(1, steps + 1):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        traj.append(x)
    return traj


def test_adam_trajectory_matches_scalar_oracle():
    p = Parameter(np.array([1.0]), "x")
    s = T.AdamState.for_param(p)
    ours = []
    for _ in range(3):
        T.backward(T.tsum(p * p), [p])
        T.adam_step([p], [s], 0.1)
        ours.append(float(p.data[0]))
    np.testing.assert_allclose(ours, _scalar_adam(1.0, 3, 0.1), rtol=0, atol=1e-12)


def test_adam_state_invariants(rng):
    p = Parameter(rng.normal(size=(2, 3)), "p")
    s = T.AdamState.for_param(p)
    for k in range(4):
        p.grad = rng.normal(size=(2, 3))
        T.adam_step([p], [s], 1e-3)
        assert s.step_count == k + 1
        assert (s.v >= 0).all()


def test_adam_rejects_mismatched_state():
    p = Parameter(np.zeros(3), "p")
    q = Parameter(np.zeros(2), "q")
    with pytest.raises(ValueError):
        T.adam_step([p], [T.AdamState.for_param(q)], 1e-3)
    with pytest.raises(ValueError):
        T.adam_step([p], [T.AdamState.for_param(p)], 0.0)


# ----------------------------------------------------------------- grad_check

def test_grad_check_linear_layer(rng):
    lin = Linear(4, 3, rng, "lin", dtype=np.float64)
    x = rng.normal(size=(5, 4))
    report = T.grad_check(lambda: T.tsum(lin(x) * lin(x)), lin.parameters())
    assert set(report.errors) == {"lin.weight", "lin.bias"}
    assert report.passed(1e-8), str(report)


def test_grad_check_gru_cell(rng):
    cell = GRUCell(3, 4, rng, "cell", dtype=np.float64)
    for p in cell.parameters():
        p.data = rng.uniform(-0.5, 0.5, size=p.shape)
    x, h = rng.normal(size=3), rng.normal(size=4)
    report = T.grad_check(lambda: T.tsum(gru_cell_step(cell, x, h) * np.arange(1.0, 5.0)), cell.parameters())
    assert report.passed(1e-6), str(report)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6), st.sampled_from(["tanh", "sigmoid", "relu"]))
def test_elementwise_grads_match_differences(values, kind):
    x = np.array(values)
    # keep relu away from its kink
    if kind == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    p = Parameter(x, "p")
    fn = {"tanh": T.tanh, "sigmoid": T.sigmoid, "relu": T.relu}[kind]
    report = T.grad_check(lambda: T.tsum(fn(p) * np.linspace(1, 2, len(x))), [p])
    assert report.max_error < 1e-6


def test_structural_ops_grad_check(rng):
    a = Parameter(rng.normal(size=(3, 4)), "a")
    b = Parameter(rng.normal(size=(3, 2)), "b")
    idx = np.array([2, 0, 2])

    def closure():
        c = T.concat([a, b], axis=1)                  # (3, 6)
        s = T.stack([c[0], c[2]], axis=0)             # (2, 6)
        g = T.gather_rows(c, idx)                     # (3, 6)
        w = T.where(np.array([True, False, True, False, True, True]), s, 0.5 * s)
        n = T.sqrt(T.tsum(g * g, axis=1, keepdims=True))
        return T.tsum(w) + T.tsum(g / n) + T.tsum(c.reshape(2, 9)[1]) + T.tsum(c.T @ c)

    assert T.grad_check(closure, [a, b]).passed(1e-7)


def test_determinism(rng):
    cell = GRUCell(3, 2, np.random.default_rng(5), "c", dtype=np.float32)
    again = GRUCell(3, 2, np.random.default_rng(5), "c", dtype=np.float32)
    x, h = np.ones(3, np.float32), np.zeros(2, np.float32)
    assert gru_cell_step(cell, x, h).data.tobytes() == gru_cell_step(again, x, h).data.tobytes()
