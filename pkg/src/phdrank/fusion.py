"""Late fusion ``fnn + omega * svm`` with omega fit on validation pairs."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .linear import standardization, train_rank_svm

log = logging.getLogger(__name__)

DEFAULT_GRID = np.linspace(-5.0, 5.0, 2001)


@dataclass(frozen=True)
class FusionWeights:
    omega: float
    omega_standardized: float = 0.0
    fnn_scale: float = 1.0
    svm_scale: float = 1.0
    fallback: bool = False

    def to_dict(self) -> dict:
        return {"fusion_omega": self.omega, "omega_standardized": self.omega_standardized,
                "fnn_scale": self.fnn_scale, "svm_scale": self.svm_scale,
                "standardized": True, "grid_fallback": self.fallback}


def fuse(score_fnn, score_svm, w: FusionWeights):
    out = np.asarray(score_fnn, dtype=np.float64) + w.omega * np.asarray(score_svm, dtype=np.float64)
    return float(out) if np.ndim(out) == 0 else out


def fused_pair_accuracy(omega: float, fnn_pos, svm_pos, fnn_neg, svm_neg) -> float:
    d = (np.asarray(fnn_pos) - np.asarray(fnn_neg)) + omega * (np.asarray(svm_pos) - np.asarray(svm_neg))
    return float(np.mean(d > 0))


def learn_fusion_weight(fnn_pos, svm_pos, fnn_neg, svm_neg, C: float = 1.0,
                        fnn_segments=None, svm_segments=None, grid=DEFAULT_GRID) -> FusionWeights:
    """Fit omega with a two-feature ranking SVM on standardized component scores.

    Scales come from ``*_segments`` when given (all validation segment scores),
    else from the pooled pair scores. If the SVM puts a non-positive weight on
    the FNN score, omega is chosen by grid search on pair accuracy instead.
    """
    fp, sp, fn, sn = (np.asarray(a, dtype=np.float64) for a in (fnn_pos, svm_pos, fnn_neg, svm_neg))
    if len(fp) == 0:
        raise ValueError("fusion weight needs at least one validation pair")
    f_pool = np.concatenate([fp, fn]) if fnn_segments is None else np.asarray(fnn_segments)
    s_pool = np.concatenate([sp, sn]) if svm_segments is None else np.asarray(svm_segments)
    _, f_sd = standardization(f_pool)
    _, s_sd = standardization(s_pool)
    Xp = np.column_stack([fp / f_sd, sp / s_sd])
    Xn = np.column_stack([fn / f_sd, sn / s_sd])
    model = train_rank_svm((Xp, Xn), C=C)
    w1, w2 = model.weights
    fallback = False
    if w1 > 0:
        omega_z = float(w2 / w1)
    else:
        fallback = True
        dz_f = (fp - fn) / f_sd
        dz_s = (sp - sn) / s_sd
        acc = np.array([np.mean(dz_f + g * dz_s > 0) for g in grid])
        best = np.flatnonzero(acc == acc.max())
        omega_z = float(grid[best[np.argmin(np.abs(grid[best]))]])
        log.warning("fusion SVM weight on FNN is %.3g <= 0; grid search picked omega=%.3f", w1, omega_z)
    return FusionWeights(omega_z * f_sd / s_sd, omega_z, f_sd, s_sd, fallback)
