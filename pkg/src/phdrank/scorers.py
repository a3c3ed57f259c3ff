"""Adapters that turn trained models and baselines into per-video scorers.

A scorer exposes ``name``, ``uses_history`` and
``score_video(video, history) -> scores`` with one score per segment.
``score(segment_feature, history)`` scores a single segment.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import fnn as fnn_mod
from .dataset import UserHistory, VideoRecord, sample_pairs
from .fusion import FusionWeights, fuse
from .linear import LinearModel, ResidualModel, svm_score, train_residual
from .unsup import max_similarity, random_scorer, video_mmr
from .vecmath import DEFAULT_K, distance_feature_matrix


class Scorer(Protocol):
    name: str
    uses_history: bool

    def score_video(self, video: VideoRecord, history: UserHistory | None) -> np.ndarray: ...


class _Base:
    name = "scorer"
    uses_history = True

    def score_video(self, video, history):
        raise NotImplementedError

    def score_features(self, S, history) -> np.ndarray:
        raise NotImplementedError

    def score(self, segment, history=None) -> float:
        return float(self.score_features(np.atleast_2d(segment), history)[0])


class FeatureScorer(_Base):
    """Scorers that only look at segment features (everything but Random/Oracle)."""

    def score_video(self, video, history):
        return self.score_features(video.features, history)


@dataclass(eq=False)
class FnnScorer(FeatureScorer):
    model: fnn_mod.FnnModel
    name: str = "fnn"

    @property
    def uses_history(self) -> bool:
        return self.model.arch.uses_history

    def score_features(self, S, history):
        return fnn_mod.score_segments(self.model, S, history)


@dataclass(eq=False)
class SvmDScorer(FeatureScorer):
    model: LinearModel
    pad_value: float = 0.0
    name: str = "svm_d"
    uses_history = True

    @property
    def k(self) -> int:
        return self.model.dim

    def score_features(self, S, history):
        return svm_score(self.model, distance_feature_matrix(S, history, self.k, self.pad_value))


@dataclass(eq=False)
class HighlightSvmScorer(FeatureScorer):
    model: LinearModel
    name: str = "highlight_svm"
    uses_history = False

    def score_features(self, S, history=None):
        return svm_score(self.model, np.atleast_2d(S))


@dataclass(eq=False)
class FusedScorer(FeatureScorer):
    fnn: FnnScorer
    svm: SvmDScorer
    weights: FusionWeights
    name: str = "fused"
    uses_history = True

    def score_features(self, S, history):
        return fuse(self.fnn.score_features(S, history), self.svm.score_features(S, history), self.weights)


@dataclass(eq=False)
class ResidualScorer(FeatureScorer):
    """Per-user ranking SVM over ``[s; generic score]`` fit on the user's history videos.

    Users without any history pair fall back to the generic scores.
    """

    generic: FnnScorer
    C: float = 1.0
    pairs_per_video: int = 5
    seed: int = 0
    name: str = "residual"
    uses_history = True

    def fit_user(self, history: UserHistory | None) -> ResidualModel | None:
        if history is None or not history.videos:
            return None
        pos, neg, all_scores = [], [], []
        for video in history.videos:
            labels = video.labels()
            if labels.all() or not labels.any():
                continue
            g = self.generic.score_features(video.features, None)
            all_scores.append(g)
            for p in sample_pairs(video, self.pairs_per_video, self.seed, history.user_id):
                pos.append((video.features[p.positive], g[p.positive]))
                neg.append((video.features[p.negative], g[p.negative]))
        if not pos:
            return None
        return train_residual(
            np.array([x for x, _ in pos]), np.array([x for x, _ in neg]),
            np.array([s for _, s in pos]), np.array([s for _, s in neg]),
            C=self.C, all_generic=np.concatenate(all_scores),
        )

    def score_features(self, S, history):
        generic = self.generic.score_features(S, None)
        model = self.fit_user(history)
        if model is None:
            return generic
        return model.score(S, generic)


class MaxSimilarityScorer(FeatureScorer):
    name = "max_similarity"
    uses_history = True

    def score_features(self, S, history):
        return max_similarity(np.atleast_2d(S), history)


class VideoMmrScorer(FeatureScorer):
    name = "video_mmr"
    uses_history = True

    def score_features(self, S, history):
        return video_mmr(np.atleast_2d(S), history)


@dataclass(eq=False)
class RandomScorer(_Base):
    seed: int = 0
    name: str = "random"
    uses_history = False

    def score_video(self, video, history=None):
        return random_scorer(video, self.seed)


@dataclass(eq=False)
class OracleScorer(_Base):
    """Scores each segment with its GT label; an upper bound for sanity checks."""

    overlap_threshold: float = 0.5
    name: str = "oracle"
    uses_history = False

    def score_video(self, video, history=None):
        return video.labels(self.overlap_threshold).astype(np.float64)


@dataclass(eq=False)
class TransformedScorer(_Base):
    """Applies ``fn`` to another scorer's video scores."""

    inner: _Base
    fn: object
    name: str = "transformed"

    @property
    def uses_history(self) -> bool:
        return self.inner.uses_history

    def score_video(self, video, history):
        return self.fn(self.inner.score_video(video, history))


__all__ = [
    "DEFAULT_K", "FeatureScorer", "FnnScorer", "FusedScorer", "HighlightSvmScorer",
    "MaxSimilarityScorer", "OracleScorer", "RandomScorer", "ResidualScorer", "Scorer",
    "SvmDScorer", "TransformedScorer", "VideoMmrScorer",
]
