import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from awe import tensor as T
from awe.layers import (BGRUStack, EmbeddingTable, GRUCell, PaddedBatch, bgru_forward, dropout, embedding_lookup,
                        gru_cell_step)
from awe.tensor import Parameter

GATES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


def _zero_cell(inp, hid):
    cell = GRUCell(inp, hid, np.random.default_rng(0), "c", dtype=np.float64)
    for g in GATES:
        getattr(cell, g).data[...] = 0
    return cell


# ----------------------------------------------------------------- cell

def test_zero_cell_from_zero_state():
    np.testing.assert_array_equal(gru_cell_step(_zero_cell(3, 2), np.ones(3), np.zeros(2)).data, 0)


def test_zero_cell_halves_previous_state():
    out = gru_cell_step(_zero_cell(3, 2), np.ones(3), np.array([1.0, -1.0])).data
    np.testing.assert_array_equal(out, [0.5, -0.5])


def test_scalar_cell_hand_value():
    cell = _zero_cell(1, 1)
    cell.W_h.data[...] = 1.0
    h = gru_cell_step(cell, np.array([1.0]), np.array([0.0])).data[0]
    assert h == pytest.approx(0.5 * math.tanh(1.0), abs=1e-15)
    assert h == pytest.approx(0.380797, abs=1e-6)


def test_cell_shape_mismatch():
    with pytest.raises(ValueError):
        gru_cell_step(_zero_cell(3, 2), np.ones(4), np.zeros(2))


# ----------------------------------------------------------------- stack

def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def _scalar_step(p, x, h):
    # pure-python GRU step for hidden size 1; x is a list
    dot = lambda w, v: sum(a * b for a, b in zip(w, v))
    z = _sigmoid(dot(p["W_z"][0], x) + p["U_z"][0][0] * h + p["b_z"][0])
    r = _sigmoid(dot(p["W_r"][0], x) + p["U_r"][0][0] * h + p["b_r"][0])
    ht = math.tanh(dot(p["W_h"][0], x) + p["U_h"][0][0] * r * h + p["b_h"][0])
    return (1 - z) * h + z * ht


def _unrolled(stack, frames):
    seq = [list(f) for f in frames]
    for fwd, bwd in stack.layers:
        pf = {g: getattr(fwd, g).data.tolist() for g in GATES}
        pb = {g: getattr(bwd, g).data.tolist() for g in GATES}
        hf, outs_f = 0.0, []
        for x in seq:
            hf = _scalar_step(pf, x, hf)
            outs_f.append(hf)
        hb, outs_b = 0.0, [None] * len(seq)
        for t in reversed(range(len(seq))):
            hb = _scalar_step(pb, seq[t], hb)
            outs_b[t] = hb
        seq = [[a, b] for a, b in zip(outs_f, outs_b)]
    return seq


def test_two_layer_scalar_stack_matches_unrolled_oracle():
    rng = np.random.default_rng(3)
    stack = BGRUStack(1, 1, 2, rng, "s", dtype=np.float64)
    for p in stack.parameters():
        p.data = rng.uniform(-1, 1, size=p.shape)
    frames = np.array([[0.3], [-1.2], [0.8]])
    outputs, final = bgru_forward(stack, PaddedBatch(frames[None], [3]))
    oracle = _unrolled(stack, frames)
    np.testing.assert_allclose(outputs.data[0], oracle, rtol=0, atol=1e-14)
    np.testing.assert_allclose(final.data[0], [oracle[-1][0], oracle[0][1]], rtol=0, atol=1e-14)


def test_length_one_final_is_one_step_each_way():
    rng = np.random.default_rng(4)
    stack = BGRUStack(3, 2, 1, rng, "s", dtype=np.float64)
    x = rng.normal(size=3)
    _, final = bgru_forward(stack, PaddedBatch(x[None, None], [1]))
    fwd, bwd = stack.layers[0]
    expect = np.concatenate([gru_cell_step(fwd, x, np.zeros(2)).data, gru_cell_step(bwd, x, np.zeros(2)).data])
    np.testing.assert_allclose(final.data[0], expect, atol=1e-14)


def test_scan_matches_composed_cell_steps(rng):
    stack = BGRUStack(3, 4, 1, rng, "s", dtype=np.float64)
    frames = rng.normal(size=(5, 3))
    outputs, _ = bgru_forward(stack, PaddedBatch(frames[None], [5]))
    fwd, bwd = stack.layers[0]
    h = np.zeros(4)
    for t in range(5):
        h = gru_cell_step(fwd, frames[t], h).data
        np.testing.assert_allclose(outputs.data[0, t, :4], h, atol=1e-13)
    h = np.zeros(4)
    for t in reversed(range(5)):
        h = gru_cell_step(bwd, frames[t], h).data
        np.testing.assert_allclose(outputs.data[0, t, 4:], h, atol=1e-13)


def test_reversal_duality(rng):
    stack = BGRUStack(2, 3, 1, rng, "s", dtype=np.float64)
    frames = rng.normal(size=(6, 2))
    out, _ = bgru_forward(stack, PaddedBatch(frames[None], [6]))
    # the backward direction is the backward cell run forward over the reversed sequence
    mirror = BGRUStack(2, 3, 1, rng, "m", dtype=np.float64)
    for g in GATES:
        getattr(mirror.layers[0][0], g).data = getattr(stack.layers[0][1], g).data.copy()
    rev, _ = bgru_forward(mirror, PaddedBatch(frames[::-1][None].copy(), [6]))
    np.testing.assert_allclose(out.data[0, :, 3:], rev.data[0, ::-1, :3], atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.integers(0, 3), st.integers(0, 10_000))
def test_padding_invariance(lengths, extra, seed):
    rng = np.random.default_rng(seed)
    stack = BGRUStack(2, 3, 2, rng, "s", dtype=np.float64)
    t_max = max(lengths)
    data = rng.normal(size=(len(lengths), t_max, 2))
    padded = np.concatenate([data, rng.normal(size=(len(lengths), extra, 2)) * 100], axis=1)
    for i, n in enumerate(lengths):
        data[i, n:] = 0.0
        padded[i, n:] = rng.normal(size=padded[i, n:].shape) * 100
    a_out, a_fin = bgru_forward(stack, PaddedBatch(data, lengths))
    b_out, b_fin = bgru_forward(stack, PaddedBatch(padded, lengths))
    assert a_fin.data.tobytes() == b_fin.data.tobytes()
    for i, n in enumerate(lengths):
        assert a_out.data[i, :n].tobytes() == b_out.data[i, :n].tobytes()

    # gradients with respect to padded input positions are exactly zero
    x = Parameter(padded, "x")
    _, fin = bgru_forward(stack, PaddedBatch(x, lengths))
    T.backward(T.tsum(fin * fin), [x])
    for i, n in enumerate(lengths):
        assert not x.grad[i, n:].any()


def test_zero_length_rejected():
    with pytest.raises(ValueError):
        PaddedBatch(np.zeros((2, 3, 1)), [0, 2])
    with pytest.raises(ValueError):
        PaddedBatch(np.zeros((1, 3, 1)), [4])


def test_layer_widths(rng):
    stack = BGRUStack(5, 4, 3, rng, "s")
    assert stack.layers[0][0].W_z.shape == (4, 5)
    for fwd, bwd in stack.layers[1:]:
        assert fwd.W_z.shape == (4, 8) and bwd.W_r.shape == (4, 8)


def test_stack_grad_check(rng):
    stack = BGRUStack(2, 3, 2, rng, "s", dtype=np.float64)
    batch = PaddedBatch(rng.normal(size=(3, 4, 2)), [4, 2, 1])
    weights = rng.normal(size=(3, 6))
    report = T.grad_check(lambda: T.tsum(bgru_forward(stack, batch)[1] * weights), stack.parameters())
    assert report.passed(1e-6), str(report)


def test_dropout_only_between_layers_in_training(rng):
    stack = BGRUStack(2, 3, 2, rng, "s", dropout_rate=0.5, dtype=np.float64)
    batch = PaddedBatch(rng.normal(size=(2, 4, 2)), [4, 3])
    e1 = bgru_forward(stack, batch, training=False)[1].data
    e2 = bgru_forward(stack, batch, training=False)[1].data
    t1 = bgru_forward(stack, batch, training=True, rng=np.random.default_rng(1))[1].data
    t2 = bgru_forward(stack, batch, training=True, rng=np.random.default_rng(1))[1].data
    assert e1.tobytes() == e2.tobytes()
    assert t1.tobytes() == t2.tobytes()
    assert not np.allclose(t1, e1)
    one = BGRUStack(2, 3, 1, np.random.default_rng(0), "o", dropout_rate=0.9, dtype=np.float64)
    a = bgru_forward(one, batch, training=True, rng=np.random.default_rng(2))[1].data
    assert a.tobytes() == bgru_forward(one, batch)[1].data.tobytes()  # single layer: no dropout site


# ----------------------------------------------------------------- dropout / embeddings

def test_dropout_eval_identity(rng):
    x = T.Tensor(rng.normal(size=(4, 5)))
    assert dropout(x, 0.4, training=False, rng=None).data.tobytes() == x.data.tobytes()


def test_dropout_expectation():
    x = T.Tensor(np.full(100_000, 2.0))
    out = dropout(x, 0.4, training=True, rng=np.random.default_rng(0)).data
    assert abs(out.mean() - 2.0) / 2.0 < 0.01
    assert set(np.unique(out)) <= {0.0, 2.0 / 0.6}


def test_dropout_rejects_rate_one():
    with pytest.raises(ValueError):
        dropout(T.Tensor(np.ones(3)), 1.0, training=True, rng=np.random.default_rng(0))


def test_dropout_mask_reproducible():
    x = T.Tensor(np.ones(50))
    a = dropout(x, 0.5, True, np.random.default_rng(9)).data
    b = dropout(x, 0.5, True, np.random.default_rng(9)).data
    assert a.tobytes() == b.tobytes()


def test_embedding_lookup(rng):
    table = EmbeddingTable(4, 3, rng, "e")
    rows = embedding_lookup(table, [2, 2]).data
    np.testing.assert_array_equal(rows[0], rows[1])
    with pytest.raises(IndexError):
        embedding_lookup(table, [4])


def test_embedding_gradient_accumulates_repeats(rng):
    table = EmbeddingTable(3, 2, rng, "e", dtype=np.float64)
    T.backward(T.tsum(embedding_lookup(table, [1, 1, 0])), [table.table])
    np.testing.assert_array_equal(table.table.grad, [[1, 1], [2, 2], [0, 0]])
