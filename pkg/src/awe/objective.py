"""Cosine distance, RMS-over-K hard-negative mining and the two-term multi-view hinge loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from awe import tensor as T
from awe.tensor import Tensor

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.4
    k_negatives: int = 20

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.k_negatives < 1:
            raise ValueError("k_negatives must be >= 1")


class ZeroNormError(ValueError):
    pass


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < NORM_FLOOR or nv < NORM_FLOOR:
        raise ZeroNormError("cosine distance is undefined for a zero-norm vector")
    return float(1.0 - (u @ v) / (nu * nv))


def cosine_distance_matrix(a, b) -> np.ndarray:
    """Plain-array pairwise cosine distances, rows of ``a`` against rows of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if (na < NORM_FLOOR).any() or (nb < NORM_FLOOR).any():
        raise ZeroNormError("zero-norm embedding row")
    return 1.0 - (a / na) @ (b / nb).T


def _unit_rows(x: Tensor) -> Tensor:
    norm = T.sqrt(T.tsum(x * x, axis=1, keepdims=True))
    if (norm.data < NORM_FLOOR).any():
        raise ZeroNormError("zero-norm embedding row (dead parameters?)")
    return x / norm


def cosine_distances(f: Tensor, g: Tensor) -> Tensor:
    """D[i, j] = d(f_i, g_j) as a differentiable (B, B) tensor."""
    return 1.0 - T.matmul(_unit_rows(f), T.transpose(_unit_rows(g)))


def mine_rms_negative(anchor, candidates, k: int) -> float:
    """RMS of the min(k, n) smallest cosine distances from ``anchor`` to ``candidates``."""
    if len(candidates) == 0:
        raise ValueError("no negative candidates")
    d = np.array([cosine_distance(anchor, c) for c in candidates])
    sel = _k_smallest(d, k)
    return float(np.sqrt(np.mean(d[sel] ** 2)))


def _k_smallest(d: np.ndarray, k: int) -> np.ndarray:
    # stable sort: equal distances go to the lower index first
    return np.argsort(d, kind="stable")[: min(k, len(d))]


def _selection(dist: np.ndarray, labels: np.ndarray, k: int, axis: int):
    """Index arrays (rows, cols) and weights for each anchor's k hardest other-label entries.

    axis=1: anchor i scans row i (acoustic anchor vs written negatives);
    axis=0: anchor i scans column i (written anchor vs acoustic negatives).
    """
    B = len(labels)
    kk = min(k, B - 1)
    rows = np.zeros((B, kk), dtype=np.intp)
    cols = np.zeros((B, kk), dtype=np.intp)
    weight = np.zeros((B, kk))
    for i in range(B):
        cand = np.flatnonzero(labels != labels[i])
        if cand.size == 0:
            raise ValueError(f"row {i} has no negative in the batch")
        line = dist[i, cand] if axis == 1 else dist[cand, i]
        chosen = cand[_k_smallest(line, kk)]
        n = len(chosen)
        if axis == 1:
            rows[i, :n], cols[i, :n] = i, chosen
        else:
            rows[i, :n], cols[i, :n] = chosen, i
        rows[i, n:], cols[i, n:] = rows[i, 0], cols[i, 0]
        weight[i, :n] = 1.0 / n
    return rows, cols, weight


def multiview_terms(f: Tensor, g: Tensor, labels, cfg: LossConfig = LossConfig()) -> tuple[Tensor, Tensor]:
    """Per-row hinge terms (acoustic-anchor, written-anchor), each a (B,) tensor.

    Row i of ``g`` must embed the pronunciation of row i's word. Negatives
    are all other-label rows of the batch; selection is constant under
    backward.
    """
    labels = np.asarray(labels)
    if f.shape != g.shape or f.shape[0] != len(labels):
        raise ValueError(f"view shapes {f.shape}, {g.shape} do not match {len(labels)} labels")
    if len(labels) < 2 or len(np.unique(labels)) < 2:
        raise ValueError("multi-view loss needs a batch with at least two distinct labels")
    dist = cosine_distances(f, g)
    positive = dist[np.arange(len(labels)), np.arange(len(labels))]
    terms = []
    for axis in (1, 0):
        rows, cols, w = _selection(dist.data, labels, cfg.k_negatives, axis)
        sel = dist[rows, cols]
        rms = T.sqrt(T.tsum(sel * sel * w.astype(sel.dtype), axis=1))
        terms.append(T.relu(cfg.margin + positive - rms))
    return terms[0], terms[1]


def multiview_loss(f: Tensor, g: Tensor, labels, cfg: LossConfig = LossConfig()) -> Tensor:
    """Sum over the batch of both hinge terms."""
    t0, t1 = multiview_terms(f, g, labels, cfg)
    return T.tsum(t0) + T.tsum(t1)
