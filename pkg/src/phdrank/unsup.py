"""Training-free baselines: maximum and mean history similarity, random."""
from __future__ import annotations

import zlib

import numpy as np

from .vecmath import cosine_distance_matrix


def _elements(history) -> np.ndarray:
    G = np.asarray(getattr(history, "elements", history), dtype=np.float64)
    if G.ndim != 2 or G.shape[0] == 0:
        raise ValueError("similarity scorers need a non-empty history")
    return G


def similarity_matrix(S, history) -> np.ndarray:
    return 1.0 - cosine_distance_matrix(S, _elements(history))


def max_similarity(s, history):
    """Highest cosine similarity between ``s`` and any history element."""
    sims = similarity_matrix(np.atleast_2d(s), history).max(axis=1)
    return float(sims[0]) if np.ndim(s) == 1 else sims


def video_mmr(s, history):
    """Mean cosine similarity to the history (the relevance term of MMR only)."""
    sims = similarity_matrix(np.atleast_2d(s), history).mean(axis=1)
    return float(sims[0]) if np.ndim(s) == 1 else sims


def random_scorer(video, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(video.video_id.encode())])
    return rng.random(video.n_segments)
