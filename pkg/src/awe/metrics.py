"""Word discrimination: pair construction, cosine scoring and average precision."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from awe.objective import NORM_FLOOR, ZeroNormError

_CHUNK = 512


@dataclass
class ScoredPairSet:
    distances: np.ndarray
    positive: np.ndarray
    weights: np.ndarray | None = None  # per-pair counts; only set for sampled estimates
    exact: bool = True

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        self.positive = np.asarray(self.positive, dtype=bool).reshape(-1)
        if self.distances.shape != self.positive.shape:
            raise ValueError("distances and labels differ in length")
        if not np.all(np.isfinite(self.distances)):
            raise ValueError("non-finite distance in pair set")

    @property
    def n_pairs(self) -> int:
        return len(self.distances)

    @property
    def n_pos(self) -> int:
        return int(self.positive.sum())

    @property
    def n_neg(self) -> int:
        return self.n_pairs - self.n_pos


class NoPositivePairs(ValueError):
    pass


def _curve(pairs: ScoredPairSet):
    if pairs.n_pos == 0:
        raise NoPositivePairs("average precision is undefined without positive pairs")
    order = np.argsort(pairs.distances, kind="stable")
    d = pairs.distances[order]
    pos = pairs.positive[order].astype(np.float64)
    w = np.ones_like(pos) if pairs.weights is None else np.asarray(pairs.weights, dtype=np.float64)[order]
    tp = np.cumsum(pos * w)
    retrieved = np.cumsum(w)
    # last index of each group of equal distances
    ends = np.flatnonzero(np.append(d[1:] != d[:-1], True))
    precision = tp[ends] / retrieved[ends]
    recall = tp[ends] / tp[-1]
    return d[ends], precision, recall


def average_precision(pairs: ScoredPairSet) -> float:
    """Area under the precision-recall curve swept over distinct distance thresholds.

    A pair is retrieved at threshold t when its distance is <= t, so tied
    distances enter together and the result does not depend on input order.
    """
    _, precision, recall = _curve(pairs)
    gains = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(gains * precision))


def precision_recall_curve(pairs: ScoredPairSet):
    """(thresholds, precision, recall) at every distinct distance."""
    return _curve(pairs)


def _num_threads() -> int:
    env = os.environ.get("AWE_NUM_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if (n < NORM_FLOOR).any():
        raise ZeroNormError("zero-norm embedding row")
    return x / n


def pairwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine distances of all rows of ``a`` against all rows of ``b``.

    Work is split into fixed row chunks (independent of the thread count),
    so the result is identical however many threads score it.
    """
    ua, ub = _unit(a), _unit(b)
    starts = list(range(0, len(ua), _CHUNK))
    out = np.empty((len(ua), len(ub)))

    def work(s):
        out[s:s + _CHUNK] = 1.0 - ua[s:s + _CHUNK] @ ub.T

    threads = min(_num_threads(), len(starts))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, starts))
    else:
        for s in starts:
            work(s)
    return out


def acoustic_pairs(embeddings: np.ndarray, labels) -> ScoredPairSet:
    labels = np.asarray(labels)
    if len(labels) < 2:
        raise NoPositivePairs("acoustic discrimination needs at least two segments")
    dist = pairwise_cosine(embeddings, embeddings)
    i, j = np.triu_indices(len(labels), k=1)
    return ScoredPairSet(dist[i, j], labels[i] == labels[j])


def crossview_pairs(embeddings: np.ndarray, labels, written: dict) -> ScoredPairSet:
    """Pairs of every segment with every word in ``written`` (word -> embedding)."""
    labels = np.asarray(labels)
    missing = sorted({str(w) for w in labels if w not in written})
    if missing:
        raise KeyError(f"no written embedding for evaluation word(s): {', '.join(missing[:5])}")
    words = list(written)
    w_emb = np.stack([np.asarray(written[w]) for w in words])
    dist = pairwise_cosine(embeddings, w_emb)
    pos = labels[:, None] == np.asarray(words, dtype=object)[None, :]
    return ScoredPairSet(dist.reshape(-1), pos.reshape(-1))


def acoustic_ap(embeddings: np.ndarray, labels) -> float:
    return average_precision(acoustic_pairs(embeddings, labels))


def crossview_ap(embeddings: np.ndarray, labels, written: dict) -> float:
    return average_precision(crossview_pairs(embeddings, labels, written))


def sampled_ap(pairs, max_pairs: int, seed: int = 0) -> tuple[float, bool]:
    """AP estimate keeping all positives and a uniform sample of negatives.

    ``pairs`` is a ScoredPairSet or an iterable of (distance, is_positive).
    At most ``max_pairs`` pairs are scored; sampled negatives are reweighted
    by (total negatives / sampled negatives). Returns (ap, exact).
    """
    if not isinstance(pairs, ScoredPairSet):
        items = list(pairs)
        pairs = ScoredPairSet([d for d, _ in items], [p for _, p in items])
    if pairs.n_pairs <= max_pairs:
        return average_precision(pairs), True
    neg = np.flatnonzero(~pairs.positive)
    keep = max(1, max_pairs - pairs.n_pos)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(neg, size=min(keep, len(neg)), replace=False))
    pos = np.flatnonzero(pairs.positive)
    idx = np.concatenate([pos, chosen])
    weights = np.concatenate([np.ones(len(pos)), np.full(len(chosen), len(neg) / len(chosen))])
    est = ScoredPairSet(pairs.distances[idx], pairs.positive[idx], weights, exact=False)
    return average_precision(est), False


@dataclass
class MetricRow:
    metric: str
    value: float
    n_pairs: int
    n_pos: int
    exact: bool


def score(pairs: ScoredPairSet, metric: str, max_pairs: int | None = None, seed: int = 0) -> MetricRow:
    if max_pairs is not None and pairs.n_pairs > max_pairs:
        value, exact = sampled_ap(pairs, max_pairs, seed)
    else:
        value, exact = average_precision(pairs), True
    return MetricRow(metric, value, pairs.n_pairs, pairs.n_pos, exact)


def write_report(path, rows: list[MetricRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value", "n_pairs", "n_pos", "exact"])
        for r in rows:
            w.writerow([r.metric, repr(float(r.value)), r.n_pairs, r.n_pos, str(r.exact).lower()])


def write_pr_curve(path, pairs: ScoredPairSet) -> None:
    thresholds, precision, recall = precision_recall_curve(pairs)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for row in zip(thresholds, precision, recall):
            w.writerow([repr(float(x)) for x in row])
