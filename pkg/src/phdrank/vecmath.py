"""Cosine distances, mean aggregation and the k-nearest distance features."""
from __future__ import annotations

import numpy as np

DEFAULT_K = 20
MAX_DISTANCE = 2.0


class DomainError(ValueError):
    pass


def _norms(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1)
    if np.any(n == 0):
        raise DomainError("cosine distance undefined for a zero-norm vector")
    return n


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = 1.0 - float(a @ b) / float(_norms(a) * _norms(b))
    return min(max(d, 0.0), MAX_DISTANCE)


def cosine_distance_matrix(S, G) -> np.ndarray:
    """Pairwise cosine distances between rows of ``S`` (n, F) and ``G`` (m, F)."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    if S.shape[1] != G.shape[1]:
        raise DomainError(f"dimension mismatch: {S.shape[1]} vs {G.shape[1]}")
    sim = (S / _norms(S)[:, None]) @ (G / _norms(G)[:, None]).T
    return np.clip(1.0 - sim, 0.0, MAX_DISTANCE)


def aggregate_mean(vectors) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("aggregate_mean needs a non-empty list of equal-length vectors")
    return arr.mean(axis=0)


def distance_features(s, history, k: int = DEFAULT_K, pad_value: float = 0.0) -> np.ndarray:
    """``k`` smallest cosine distances from ``s`` to the history, ascending.

    Missing slots (history shorter than ``k``) hold ``pad_value``; zero by
    default, which reads as a perfect match. ``history`` is a ``UserHistory``
    or an (m, F) array.
    """
    return distance_feature_matrix(np.atleast_2d(s), history, k, pad_value)[0]


def distance_feature_matrix(S, history, k: int = DEFAULT_K, pad_value: float = 0.0) -> np.ndarray:
    G = getattr(history, "elements", history)
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] == 0:
        raise ValueError("distance features need a non-empty history")
    D = np.sort(cosine_distance_matrix(S, G), axis=1)[:, :k]
    if D.shape[1] < k:
        pad = np.full((D.shape[0], k - D.shape[1]), pad_value)
        D = np.hstack([D, pad])
    return D
