"""GRU cells, stacked bidirectional GRUs over padded batches, embeddings, linear maps, dropout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from awe import tensor as T
from awe.tensor import Parameter, Tensor


class Module:
    """Minimal container: subclasses list their Parameters and child Modules."""

    def parameters(self) -> list[Parameter]:
        out = []
        for value in vars(self).values():
            if isinstance(value, Parameter):
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        out.extend(item.parameters())
                    elif isinstance(item, Parameter):
                        out.append(item)
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)


# ----------------------------------------------------------------- linear / embedding / dropout

class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str,
                 bias: bool = True, dtype=np.float32):
        self.weight = Parameter(xavier_uniform(rng, out_dim, in_dim, dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype), f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(self, x)


def linear(params: Linear, x) -> Tensor:
    """``x @ W.T + b`` for x of shape (n, in) or (in,)."""
    x = T.as_tensor(x, params.weight.dtype)
    if x.shape[-1] != params.weight.shape[1]:
        raise ValueError(f"linear expects width {params.weight.shape[1]}, got {x.shape[-1]}")
    if x.ndim == 1:
        out = T.matmul(params.weight, x)
    else:
        out = T.matmul(x, T.transpose(params.weight))
    return out if params.bias is None else out + params.bias


class EmbeddingTable(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, name: str,
                 std: float = 0.1, dtype=np.float32):
        self.table = Parameter(rng.normal(0.0, std, size=(vocab_size, dim)).astype(dtype), f"{name}.table")

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def __call__(self, ids) -> Tensor:
        return embedding_lookup(self, ids)


def embedding_lookup(table: EmbeddingTable, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        bad = ids[(ids < 0) | (ids >= table.vocab_size)][0]
        raise IndexError(f"id {bad} out of range for embedding table of size {table.vocab_size}")
    return T.gather_rows(table.table, ids)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity in eval mode."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(1 - rate, dtype=x.dtype)
    return x * keep


# ----------------------------------------------------------------- GRU

class GRUCell(Module):
    """Gate parameters for one direction of one layer.

    Update convention: ``h_t = (1 - z) * h_prev + z * h_tilde``.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, name: str,
                 dtype=np.float32):
        self.input_size, self.hidden_size = input_size, hidden_size
        H, D = hidden_size, input_size
        self.W_z = Parameter(xavier_uniform(rng, H, D, dtype), f"{name}.W_z")
        self.W_r = Parameter(xavier_uniform(rng, H, D, dtype), f"{name}.W_r")
        self.W_h = Parameter(xavier_uniform(rng, H, D, dtype), f"{name}.W_h")
        self.U_z = Parameter(xavier_uniform(rng, H, H, dtype), f"{name}.U_z")
        self.U_r = Parameter(xavier_uniform(rng, H, H, dtype), f"{name}.U_r")
        self.U_h = Parameter(xavier_uniform(rng, H, H, dtype), f"{name}.U_h")
        self.b_z = Parameter(np.zeros(H, dtype=dtype), f"{name}.b_z")
        self.b_r = Parameter(np.zeros(H, dtype=dtype), f"{name}.b_r")
        self.b_h = Parameter(np.zeros(H, dtype=dtype), f"{name}.b_h")


def gru_cell_step(params: GRUCell, x_t, h_prev) -> Tensor:
    """One GRU step on single vectors, composed from primitive tape ops."""
    x_t = T.as_tensor(x_t, params.W_z.dtype)
    h_prev = T.as_tensor(h_prev, params.W_z.dtype)
    if x_t.shape != (params.input_size,) or h_prev.shape != (params.hidden_size,):
        raise ValueError(f"gru_cell_step expects x {(params.input_size,)} and h {(params.hidden_size,)}, "
                         f"got {x_t.shape} and {h_prev.shape}")
    z = T.sigmoid(params.W_z @ x_t + params.U_z @ h_prev + params.b_z)
    r = T.sigmoid(params.W_r @ x_t + params.U_r @ h_prev + params.b_r)
    h_tilde = T.tanh(params.W_h @ x_t + params.U_h @ (r * h_prev) + params.b_h)
    return (1.0 - z) * h_prev + z * h_tilde


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_scan(x: Tensor, mask: np.ndarray, W: Tensor, U: Tensor, b: Tensor, reverse: bool) -> Tensor:
    """Run one GRU direction over a padded batch as a single tape node.

    x: (B, T, D); mask: (B, T) bool, True at valid frames; W: (3H, D) rows
    ordered z, r, h; U: (3H, H); b: (3H,). Returns (B, T, H) with zeros at
    padded positions. Padded frames never touch the state, so the reverse
    direction effectively starts at each item's last valid frame.
    """
    B, Tn, _ = x.shape
    H = U.shape[1]
    xd, Wd, Ud, bd = x.data, W.data, U.data, b.data
    # projected one frame at a time: matmul shapes then do not depend on T_max,
    # so extra padding cannot change the rounding of valid frames
    xp = np.empty((B, Tn, 3 * H), dtype=np.result_type(xd, Wd))
    for t in range(Tn):
        xp[:, t] = xd[:, t] @ Wd.T + bd
    U_zr, U_h = Ud[: 2 * H], Ud[2 * H:]
    steps = range(Tn - 1, -1, -1) if reverse else range(Tn)

    h = np.zeros((B, H), dtype=xp.dtype)
    out = np.zeros((B, Tn, H), dtype=xp.dtype)
    # per-step caches, indexed by time
    h_prev_all = np.zeros((Tn, B, H), dtype=xp.dtype)
    z_all = np.zeros_like(h_prev_all)
    r_all = np.zeros_like(h_prev_all)
    rh_all = np.zeros_like(h_prev_all)
    hc_all = np.zeros_like(h_prev_all)
    for t in steps:
        m = mask[:, t:t + 1]
        zr = _sig(xp[:, t, : 2 * H] + h @ U_zr.T)
        z, r = zr[:, :H], zr[:, H:]
        rh = r * h
        hc = np.tanh(xp[:, t, 2 * H:] + rh @ U_h.T)
        h_prev_all[t], z_all[t], r_all[t], rh_all[t], hc_all[t] = h, z, r, rh, hc
        h = np.where(m, h + z * (hc - h), h)
        out[:, t] = np.where(m, h, 0)
    T._check("gru_scan", out)

    def bw(gout):
        dxp = np.zeros_like(xp)
        dh = np.zeros((B, H), dtype=xp.dtype)
        valid = mask.T[:, :, None]  # (T, B, 1)
        gout_t = np.where(valid, np.moveaxis(gout, 1, 0), 0)
        for t in reversed(list(steps)):
            m = valid[t]
            h_prev, z, r, hc = h_prev_all[t], z_all[t], r_all[t], hc_all[t]
            dtot = dh + gout_t[t]
            dhn = np.where(m, dtot, 0)
            dah = dhn * z * (1 - hc * hc)
            drh = dah @ U_h
            dazr = np.concatenate([dhn * (hc - h_prev) * z * (1 - z), drh * h_prev * r * (1 - r)], axis=1)
            dh = np.where(m, 0, dtot) + dhn * (1 - z) + drh * r + dazr @ U_zr
            dxp[:, t, : 2 * H] = dazr
            dxp[:, t, 2 * H:] = dah
        d_zr = dxp[:, :, : 2 * H].reshape(B * Tn, 2 * H)
        d_h = dxp[:, :, 2 * H:].reshape(B * Tn, H)
        dU_zr = d_zr.T @ np.moveaxis(h_prev_all, 0, 1).reshape(B * Tn, H)
        dU_h = d_h.T @ np.moveaxis(rh_all, 0, 1).reshape(B * Tn, H)
        flat = dxp.reshape(B * Tn, 3 * H)
        dx = (flat @ Wd).reshape(xd.shape)
        dW = flat.T @ xd.reshape(B * Tn, -1)
        db = flat.sum(axis=0)
        return dx, dW, np.concatenate([dU_zr, dU_h], axis=0), db

    return T._node("gru_scan", out, (x, W, U, b), bw)


@dataclass
class PaddedBatch:
    """(B, T_max, width) data plus per-item true lengths."""

    data: object  # Tensor or ndarray
    lengths: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.intp)
        shape = self.data.shape
        if len(shape) != 3 or shape[0] != len(self.lengths):
            raise ValueError(f"padded batch data shape {shape} does not match {len(self.lengths)} lengths")
        if len(self.lengths) and (self.lengths.min() < 1 or self.lengths.max() > shape[1]):
            raise ValueError(f"lengths must lie in [1, {shape[1]}], got {self.lengths.tolist()}")

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.data.shape[1])[None, :] < self.lengths[:, None]

    @classmethod
    def from_sequences(cls, seqs, dtype=np.float32, width: int | None = None) -> "PaddedBatch":
        lengths = [len(s) for s in seqs]
        if not seqs:
            raise ValueError("empty batch")
        width = width if width is not None else np.asarray(seqs[0]).shape[1]
        data = np.zeros((len(seqs), max(lengths), width), dtype=dtype)
        for i, s in enumerate(seqs):
            data[i, : len(s)] = s
        return cls(data, np.asarray(lengths))


class BGRUStack(Module):
    """Stacked bidirectional GRU; layer l>0 consumes both directions of layer l-1."""

    def __init__(self, input_size: int, hidden_size: int, num_layers: int, rng: np.random.Generator,
                 name: str, dropout_rate: float = 0.0, dtype=np.float32):
        if not 0 <= dropout_rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {dropout_rate}")
        self.input_size, self.hidden_size, self.num_layers = input_size, hidden_size, num_layers
        self.dropout_rate = dropout_rate
        self.layers: list[tuple[GRUCell, GRUCell]] = []
        width = input_size
        for i in range(num_layers):
            self.layers.append((GRUCell(width, hidden_size, rng, f"{name}.l{i}.fwd", dtype),
                                GRUCell(width, hidden_size, rng, f"{name}.l{i}.bwd", dtype)))
            width = 2 * hidden_size

    def parameters(self) -> list[Parameter]:
        return [p for pair in self.layers for cell in pair for p in cell.parameters()]

    @property
    def output_size(self) -> int:
        return 2 * self.hidden_size

    def __call__(self, batch: PaddedBatch, training: bool = False, rng=None):
        return bgru_forward(self, batch, training, rng)


def _direction(cell: GRUCell, x: Tensor, mask: np.ndarray, reverse: bool) -> Tensor:
    W = T.concat([cell.W_z, cell.W_r, cell.W_h], axis=0)
    U = T.concat([cell.U_z, cell.U_r, cell.U_h], axis=0)
    b = T.concat([cell.b_z, cell.b_r, cell.b_h], axis=0)
    return gru_scan(x, mask, W, U, b, reverse)


def bgru_forward(stack: BGRUStack, batch: PaddedBatch, training: bool = False, rng=None):
    """Returns (outputs (B, T_max, 2H), final (B, 2H)).

    ``final[i]`` is the forward state at the item's last frame concatenated
    with the backward state at its first frame.
    """
    lengths = batch.lengths
    if len(lengths) == 0 or lengths.min() < 1:
        raise ValueError("every sequence needs length >= 1")
    x = T.as_tensor(batch.data, stack.layers[0][0].W_z.dtype)
    if x.shape[2] != stack.input_size:
        raise ValueError(f"expected frame width {stack.input_size}, got {x.shape[2]}")
    mask = batch.mask
    for i, (fwd, bwd) in enumerate(stack.layers):
        if i > 0:
            x = dropout(x, stack.dropout_rate, training, rng)
        x = T.concat([_direction(fwd, x, mask, False), _direction(bwd, x, mask, True)], axis=2)
    rows = np.arange(len(lengths))
    H = stack.hidden_size
    last = x[rows, lengths - 1]
    first = x[:, 0, :]
    final = T.concat([last[:, :H], first[:, H:]], axis=1)
    return x, final
