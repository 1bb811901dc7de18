"""Training-free reference embeddings computed directly from frames."""

from __future__ import annotations

import numpy as np

from awe.corpus import AcousticSegment


def downsample(frames: np.ndarray, n: int = 10) -> np.ndarray:
    """Linearly resample a T x D segment to n frames and flatten it (n*D vector)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or len(frames) == 0:
        raise ValueError("expected a non-empty T x D frame matrix")
    src = np.arange(len(frames))
    at = np.linspace(0, len(frames) - 1, n)
    cols = [np.interp(at, src, frames[:, d]) for d in range(frames.shape[1])]
    return np.stack(cols, axis=1).reshape(-1)


def downsample_embeddings(segments: list[AcousticSegment], n: int = 10) -> np.ndarray:
    return np.stack([downsample(s.frames, n) for s in segments])
