"""Per-video ranking metrics (AP, nMSD, Recall@n) and the evaluation loop."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, DatasetError, UserRecord, VideoRecord, full_history, overlap_durations

log = logging.getLogger(__name__)

METRIC_KEYS = ("mAP", "nMSD", "recall_at_5")
CSV_COLUMNS = ("user_id", "video_id", "scorer", "ap", "nmsd", "recall_at_5")
_COVER_TOL = 1e-12


class MetricError(ValueError):
    pass


class NoPositivesError(MetricError):
    pass


def rank_order(scores) -> np.ndarray:
    """Indices by descending score; equal scores keep ascending index order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


@dataclass(frozen=True, eq=False)
class RankedVideo:
    video: VideoRecord
    scores: np.ndarray
    ranking: np.ndarray

    @classmethod
    def from_scores(cls, video: VideoRecord, scores) -> "RankedVideo":
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (video.n_segments,):
            raise MetricError(
                f"video {video.video_id}: got {scores.shape} scores for {video.n_segments} segments"
            )
        if not np.all(np.isfinite(scores)):
            raise MetricError(f"video {video.video_id}: non-finite scores")
        return cls(video, scores, rank_order(scores))


def average_precision(labels, scores) -> float:
    labels = np.asarray(labels).astype(bool)
    if not labels.any():
        raise NoPositivesError("average precision undefined without positives")
    hits = labels[rank_order(scores)]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def nmsd(ranked: RankedVideo, alpha: float = 0.5, normalization: str = "video") -> float:
    """Fraction of the video watched, in ranked order, to see ``alpha`` of the GT.

    ``normalization="excess"`` uses ``(watched - alpha*gt) / (duration - alpha*gt)``
    instead of ``watched / duration``.
    """
    video = ranked.video
    gt_total = video.gt_duration
    if gt_total <= 0:
        raise MetricError(f"video {video.video_id}: empty ground truth")
    bounds = video.bounds[ranked.ranking]
    covered = np.cumsum(overlap_durations(bounds, video.gt_frames))
    need = alpha * gt_total
    idx = np.flatnonzero(covered >= need - _COVER_TOL * gt_total)
    if len(idx) == 0:
        raise MetricError(f"video {video.video_id}: segments cover only {covered[-1]:.3f}s of {gt_total:.3f}s GT")
    watched = float(np.sum(bounds[: idx[0] + 1, 1] - bounds[: idx[0] + 1, 0]))
    if normalization == "video":
        return watched / video.duration_s
    if normalization == "excess":
        return (watched - need) / (video.duration_s - need)
    raise ValueError(f"unknown normalization {normalization!r}")


def recall_at_n(ranked: RankedVideo, n: int = 5) -> float:
    video = ranked.video
    gt_total = video.gt_duration
    if gt_total <= 0:
        raise MetricError(f"video {video.video_id}: empty ground truth")
    top = video.bounds[ranked.ranking[:n]]
    return float(overlap_durations(top, video.gt_frames).sum() / gt_total)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    scorers: dict[str, dict] = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def merge(self, other: "EvalReport") -> "EvalReport":
        meta = {**self.metadata, **other.metadata}
        return EvalReport({**self.scorers, **other.scorers}, self.rows + other.rows, meta)

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "scorers": self.scorers, "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                if r["status"] == "ok":
                    writer.writerow([r[c] for c in CSV_COLUMNS])

    def __getitem__(self, scorer: str) -> dict:
        return self.scorers[scorer]


def aggregate(rows: list[dict]) -> dict:
    ok = [r for r in rows if r["status"] == "ok"]
    out = {
        "n_videos": len(ok),
        "n_failed": sum(r["status"] == "failed" for r in rows),
        "n_excluded_no_positive": sum(r["status"] == "no_positive" for r in rows),
    }
    for key, col in zip(METRIC_KEYS, ("ap", "nmsd", "recall_at_5")):
        out[key] = float(np.mean([r[col] for r in ok])) if ok else float("nan")
    return out


def video_metrics(video: VideoRecord, scores, overlap_threshold: float = 0.5,
                  alpha: float = 0.5, normalization: str = "video") -> dict:
    ranked = RankedVideo.from_scores(video, scores)
    return {
        "ap": average_precision(video.labels(overlap_threshold), ranked.scores),
        "nmsd": nmsd(ranked, alpha, normalization),
        "recall_at_5": recall_at_n(ranked, 5),
    }


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PHD_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(dataset: Dataset, scorer, split: str = "test", name: str | None = None,
             last_k_videos: int | None = None, overlap_threshold: float = 0.5,
             alpha: float = 0.5, normalization: str = "video") -> EvalReport:
    """Score every target video of ``split`` and average the per-video metrics.

    Each user is scored with their full history (or the last ``last_k_videos``
    history videos). Videos the scorer fails on are reported, not dropped.
    """
    name = name or getattr(scorer, "name", type(scorer).__name__)
    users = dataset.users_in(split)

    def run(user: UserRecord) -> dict:
        row = {"user_id": user.user_id, "video_id": user.target.video_id, "scorer": name,
               "ap": None, "nmsd": None, "recall_at_5": None, "status": "ok"}
        video = user.target
        if not video.labels(overlap_threshold).any():
            row["status"] = "no_positive"
            return row
        try:
            history = full_history(user, last_k_videos, overlap_threshold) if scorer.uses_history else None
            scores = scorer.score_video(video, history)
            row.update(video_metrics(video, scores, overlap_threshold, alpha, normalization))
        except (DatasetError, MetricError, ValueError, FloatingPointError) as exc:
            log.warning("scorer %s failed on %s: %s", name, video.video_id, exc)
            row["status"] = "failed"
            row["error"] = str(exc)
        return row

    n_threads = _threads()
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            rows = list(pool.map(run, users))
    else:
        rows = [run(u) for u in users]
    meta = {"split": split, "overlap_threshold": overlap_threshold, "nmsd_alpha": alpha,
            "nmsd_normalization": normalization}
    if last_k_videos is not None:
        meta["last_k_videos"] = last_k_videos
    return EvalReport({name: aggregate(rows)}, rows, meta)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
