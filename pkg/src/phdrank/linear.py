"""Linear ranking SVM and the per-user residual ranker.

Training minimizes ``0.5*|w|^2 + C * sum(max(0, 1 - w.(x+ - x-)))`` over pair
difference vectors. The bias cancels in every pair and stays at 0.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import lsq_linear
from sklearn.exceptions import ConvergenceWarning
from sklearn.svm import LinearSVC

CHECKPOINT_MAGIC = b"PHDSVM01"


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, objective: float):
        super().__init__(message)
        self.objective = objective


@dataclass(eq=False)
class LinearModel:
    weights: np.ndarray
    bias: float = 0.0
    C: float = 1.0

    @property
    def dim(self) -> int:
        return int(self.weights.shape[0])


def rank_svm_objective(w, diffs, C: float) -> float:
    w = np.asarray(w, dtype=np.float64)
    hinge = np.maximum(0.0, 1.0 - np.asarray(diffs) @ w)
    return 0.5 * float(w @ w) + C * float(hinge.sum())


def _as_diffs(pairs) -> np.ndarray:
    if isinstance(pairs, tuple) and len(pairs) == 2 and np.ndim(pairs[0]) == 2:
        pos, neg = pairs
        diffs = np.asarray(pos, dtype=np.float64) - np.asarray(neg, dtype=np.float64)
    else:
        diffs = np.array([np.asarray(p, dtype=np.float64) - np.asarray(n, dtype=np.float64)
                          for p, n in pairs])
    if diffs.ndim != 2 or diffs.shape[0] == 0:
        raise ValueError("ranking SVM needs a non-empty list of pairs")
    if diffs.shape[1] == 0:
        raise ValueError("ranking SVM needs features of positive dimension")
    return diffs


def dual_certificate(w, diffs, C: float, target: float = 0.0) -> tuple[float, float, np.ndarray]:
    """Primal value at ``w`` and the best dual value found near it.

    Dual variables are read off the margins: C for violated pairs, 0 for
    pairs beyond the margin, and a bounded least-squares fit for pairs on
    it. Any feasible point gives a lower bound, so ``primal - dual`` bounds
    the suboptimality of ``w``.
    """
    diffs = np.asarray(diffs, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    margins = diffs @ w
    primal = rank_svm_objective(w, diffs, C)
    best, best_alpha = -np.inf, np.zeros(len(diffs))
    for delta in (1e-9, 1e-7, 1e-5, 1e-3, 1e-2):
        alpha = np.where(margins < 1.0 - delta, C, 0.0)
        free = np.abs(margins - 1.0) <= delta
        if free.any():
            rest = w - diffs[~free].T @ alpha[~free]
            alpha[free] = lsq_linear(diffs[free].T, rest, bounds=(0.0, C), method="bvls").x
        w_alpha = diffs.T @ alpha
        dual = float(alpha.sum()) - 0.5 * float(w_alpha @ w_alpha)
        if dual > best:
            best, best_alpha = dual, alpha
        if primal - best <= target:
            break
    return primal, best, best_alpha


def _liblinear(diffs, C, solver_tol, max_iter, seed) -> np.ndarray:
    # symmetric copies turn the all-positive pair set into a two-class problem;
    # each pair then enters twice, hence C / 2
    X = np.vstack([diffs, -diffs])
    y = np.concatenate([np.ones(len(diffs)), -np.ones(len(diffs))])
    svc = LinearSVC(loss="hinge", C=C / 2.0, fit_intercept=False, tol=solver_tol,
                    max_iter=max_iter, random_state=seed, dual=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        svc.fit(X, y)
    return svc.coef_.ravel().astype(np.float64)


def train_rank_svm(pairs, C: float = 1.0, tol: float = 1e-4, max_iter: int = 20000,
                   seed: int = 0) -> LinearModel:
    """Fit a linear ranking SVM (liblinear dual coordinate descent).

    ``pairs`` is either ``(X_pos, X_neg)`` arrays or a list of ``(x_pos, x_neg)``.
    The solver is tightened until the certified duality gap drops below
    ``tol * (1 + |primal|)``; the primal objective is then within that bound
    of the optimum.
    """
    if C <= 0:
        raise ValueError("C must be positive")
    X = _as_diffs(pairs)
    # pairs with identical features keep a constant hinge of 1 and do not move w
    active = X[np.einsum("ij,ij->i", X, X) > 0]
    if len(active) == 0:
        return LinearModel(np.zeros(X.shape[1]), 0.0, C)
    primal = np.inf
    for solver_tol, budget in ((1e-6, max_iter // 10), (1e-9, max_iter)):
        w = _liblinear(active, C, solver_tol, max(budget, 1), seed)
        primal, dual, _ = dual_certificate(w, active, C, tol * (1.0 + rank_svm_objective(w, active, C)))
        if primal - dual <= tol * (1.0 + abs(primal)):
            return LinearModel(w, 0.0, C)
    raise ConvergenceError(
        f"ranking SVM did not reach duality gap {tol:g} within {max_iter} iterations "
        f"(objective {rank_svm_objective(w, X, C):.6g})", rank_svm_objective(w, X, C)
    )


def svm_score(model: LinearModel, features) -> np.ndarray | float:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ValueError(f"feature dimension {x.shape[-1]} != model dimension {model.dim}")
    out = x @ model.weights + model.bias
    return float(out) if np.ndim(out) == 0 else out


def pair_accuracy(model: LinearModel, pairs) -> float:
    return float(np.mean(_as_diffs(pairs) @ model.weights > 0))


# ---------------------------------------------------------------------------
# residual personalization


@dataclass(eq=False)
class ResidualModel:
    """Per-user ranker over ``[s; standardized generic score]``."""

    linear: LinearModel
    score_mean: float
    score_std: float

    def score(self, segments, generic_scores) -> np.ndarray:
        z = (np.asarray(generic_scores, dtype=np.float64) - self.score_mean) / self.score_std
        X = np.hstack([np.atleast_2d(segments), z[:, None]])
        return svm_score(self.linear, X)


def standardization(scores) -> tuple[float, float]:
    scores = np.asarray(scores, dtype=np.float64)
    mu = float(scores.mean())
    sd = float(scores.std())
    return mu, (sd if sd > 1e-12 else 1.0)


def train_residual(pos_features, neg_features, pos_generic, neg_generic, C: float = 1.0,
                   all_generic=None, tol: float = 1e-4) -> ResidualModel | None:
    """Train one user's residual ranker; ``None`` when the user has no pairs.

    Generic scores are standardized with the mean and deviation of
    ``all_generic`` (default: the scores appearing in the pairs).
    """
    pos_features = np.atleast_2d(np.asarray(pos_features, dtype=np.float64))
    if pos_features.size == 0 or len(pos_generic) == 0:
        return None
    pool = np.concatenate([pos_generic, neg_generic]) if all_generic is None else all_generic
    mu, sd = standardization(pool)
    Xp = np.hstack([pos_features, ((np.asarray(pos_generic) - mu) / sd)[:, None]])
    Xn = np.hstack([np.atleast_2d(neg_features), ((np.asarray(neg_generic) - mu) / sd)[:, None]])
    return ResidualModel(train_rank_svm((Xp, Xn), C=C, tol=tol), mu, sd)


# ---------------------------------------------------------------------------
# checkpoint


def save_linear(model: LinearModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", model.dim))
        fh.write(np.ascontiguousarray(model.weights, dtype="<f8").tobytes())
        fh.write(struct.pack("<d", model.bias))


def load_linear(path) -> LinearModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a linear model checkpoint")
    (dim,) = struct.unpack_from("<I", raw, 8)
    w = np.frombuffer(raw, dtype="<f8", count=dim, offset=12).copy()
    (bias,) = struct.unpack_from("<d", raw, 12 + 8 * dim)
    return LinearModel(w, bias)
