"""Data model, manifest/feature-store I/O, segmentation, labeling and sampling.

A dataset is a set of users. Each user owns an ordered list of history videos
(the GIFs they made before) and one target video whose highlights are to be
predicted. Segment features live in a binary feature store, one file per video.
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
FEATURE_MAGIC = b"PHDFEAT1"
CHUNK_THRESHOLD_S = 15.0
CHUNK_LENGTH_S = 5.0
TEST_MIN_DURATION_S = 15.0
TEST_MAX_DURATION_S = 900.0
_EPS = 1e-9


class DatasetError(ValueError):
    pass


class ManifestError(DatasetError):
    pass


class FeatureStoreError(DatasetError):
    pass


class SamplingError(DatasetError):
    pass


def user_seed(seed: int, key: str) -> np.random.Generator:
    """Generator keyed on (seed, key); stable across processes and runs."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(key.encode())])


# ---------------------------------------------------------------------------
# intervals


def normalize_intervals(intervals) -> np.ndarray:
    """Sort and merge closed intervals into a disjoint union, shape (m, 2)."""
    arr = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
    if len(arr) == 0:
        return arr
    if np.any(arr[:, 1] < arr[:, 0]):
        raise DatasetError(f"interval with end before start: {arr.tolist()}")
    arr = arr[np.lexsort((arr[:, 1], arr[:, 0]))]
    merged = [arr[0].copy()]
    for s, e in arr[1:]:
        if s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append(np.array([s, e]))
    return np.vstack(merged)


def overlap_durations(bounds: np.ndarray, intervals: np.ndarray) -> np.ndarray:
    """Length of each [start, end] row of ``bounds`` covered by a disjoint interval union."""
    bounds = np.asarray(bounds, dtype=np.float64).reshape(-1, 2)
    intervals = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
    if len(intervals) == 0:
        return np.zeros(len(bounds))
    lo = np.maximum(bounds[:, None, 0], intervals[None, :, 0])
    hi = np.minimum(bounds[:, None, 1], intervals[None, :, 1])
    return np.clip(hi - lo, 0.0, None).sum(axis=1)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Segment:
    video_id: str
    index: int
    start_s: float
    end_s: float
    feature: np.ndarray


@dataclass(frozen=True, eq=False)
class VideoRecord:
    """One video: segment boundaries, segment features and the GT selection.

    ``bounds`` is (n, 2) seconds, ``features`` is (n, F); ``gt_frames`` is the
    normalized union of the user's GIF intervals for this video.
    """

    video_id: str
    duration_s: float
    bounds: np.ndarray
    features: np.ndarray
    gt_frames: np.ndarray
    split: str
    order: int = 0

    def __post_init__(self):
        if self.bounds.shape[0] != self.features.shape[0]:
            raise DatasetError(
                f"video {self.video_id}: {self.bounds.shape[0]} segments but "
                f"{self.features.shape[0]} feature rows"
            )
        if self.split not in SPLITS:
            raise DatasetError(f"video {self.video_id}: unknown split {self.split!r}")
        object.__setattr__(self, "gt_frames", normalize_intervals(self.gt_frames))

    @property
    def n_segments(self) -> int:
        return int(self.bounds.shape[0])

    @property
    def segments(self) -> list[Segment]:
        return [
            Segment(self.video_id, i, float(s), float(e), self.features[i])
            for i, (s, e) in enumerate(self.bounds)
        ]

    @property
    def gt_duration(self) -> float:
        return float(np.sum(self.gt_frames[:, 1] - self.gt_frames[:, 0])) if len(self.gt_frames) else 0.0

    def labels(self, overlap_threshold: float = 0.5) -> np.ndarray:
        # records are immutable, so labels are computed once per threshold
        cache = self.__dict__.setdefault("_labels", {})
        if overlap_threshold not in cache:
            cache[overlap_threshold] = label_segments(self, overlap_threshold)
            cache[overlap_threshold].flags.writeable = False
        return cache[overlap_threshold]


@dataclass(frozen=True, eq=False)
class UserHistory:
    """Selected history elements and their mean profile.

    ``videos`` keeps the source history videos for scorers that train on them
    (the per-user residual model); it is empty when unknown.
    """

    user_id: str
    elements: np.ndarray
    profile: np.ndarray
    videos: tuple[VideoRecord, ...] = ()

    @classmethod
    def from_elements(cls, user_id: str, elements, videos: Sequence[VideoRecord] = ()) -> "UserHistory":
        from .vecmath import aggregate_mean

        elements = np.asarray(elements, dtype=np.float64)
        return cls(user_id, elements, aggregate_mean(elements), tuple(videos))

    def __len__(self) -> int:
        return int(self.elements.shape[0])


@dataclass(frozen=True)
class TrainingPair:
    user_id: str
    video_id: str
    positive: int
    negative: int


@dataclass(frozen=True, eq=False)
class UserRecord:
    user_id: str
    split: str
    histories: tuple[VideoRecord, ...]
    target: VideoRecord


@dataclass(eq=False)
class Dataset:
    users: dict[str, UserRecord]
    feature_dim: int
    rejected: list[tuple[str, str]] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for u in self.users.values():
            counts[u.split] += 1
        return counts

    def users_in(self, split: str) -> list[UserRecord]:
        return [self.users[k] for k in sorted(self.users) if self.users[k].split == split]


# ---------------------------------------------------------------------------
# segmentation and labels


def chunk_segments(raw_shots, mode: str = "train", duration_s: float | None = None) -> list[tuple[float, float]]:
    """Turn raw shots into the segments that get ranked.

    train: shots up to 15 s pass through, longer ones are cut into 5 s chunks
    with a shorter remainder kept at the end. test: the span ``[0, duration_s]``
    (default: end of the last shot) is cut into consecutive 5 s windows.
    """
    shots = [(float(s), float(e)) for s, e in raw_shots]
    if mode == "test":
        if duration_s is None:
            if not shots:
                return []
            duration_s = shots[-1][1]
        return _windows(0.0, float(duration_s))
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    out: list[tuple[float, float]] = []
    for s, e in shots:
        if e - s > CHUNK_THRESHOLD_S:
            out.extend(_windows(s, e))
        else:
            out.append((s, e))
    return out


def _windows(start: float, end: float) -> list[tuple[float, float]]:
    out = []
    n = int(np.floor((end - start) / CHUNK_LENGTH_S + _EPS))
    for i in range(n):
        out.append((start + i * CHUNK_LENGTH_S, start + (i + 1) * CHUNK_LENGTH_S))
    tail = (start + n * CHUNK_LENGTH_S, end)
    if tail[1] - tail[0] > _EPS:
        out.append(tail)
    elif out:
        # absorb float drift so the chunks end exactly at ``end``
        out[-1] = (out[-1][0], end)
    return out


def label_segments(video: VideoRecord, overlap_threshold: float = 0.5) -> np.ndarray:
    """1 where at least ``overlap_threshold`` of the segment lies inside the GT union."""
    lengths = video.bounds[:, 1] - video.bounds[:, 0]
    frac = overlap_durations(video.bounds, video.gt_frames) / lengths
    labels = (frac >= overlap_threshold - _EPS).astype(np.int8)
    if not labels.any():
        log.debug("video %s has no positive segment at threshold %.2f", video.video_id, overlap_threshold)
    return labels


# ---------------------------------------------------------------------------
# pairs and histories


def sample_pairs(video: VideoRecord, n_pairs: int, rng_seed: int, user_id: str = "",
                 overlap_threshold: float = 0.5) -> list[TrainingPair]:
    labels = video.labels(overlap_threshold)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise SamplingError(
            f"video {video.video_id}: need positives and negatives, got {len(pos)}/{len(neg)}"
        )
    total = len(pos) * len(neg)
    m = min(int(n_pairs), total)
    rng = user_seed(rng_seed, video.video_id)
    flat = rng.choice(total, size=m, replace=False)
    return [TrainingPair(user_id, video.video_id, int(pos[f // len(neg)]), int(neg[f % len(neg)]))
            for f in flat]


def positive_features(video: VideoRecord, overlap_threshold: float = 0.5) -> np.ndarray:
    return video.features[video.labels(overlap_threshold) == 1]


def build_history(history_videos: Sequence[VideoRecord], max_videos: int | None = 20,
                  max_shots: int | None = 20, rng_seed: int = 0, user_id: str = "",
                  overlap_threshold: float = 0.5) -> UserHistory:
    """Pick history shots from the user's most recent videos.

    One positive shot of each of the last ``max_videos`` videos is taken first,
    the remaining ``max_shots`` slots are filled at random from the leftover
    positives. ``None`` disables a cap; with both caps off every positive of
    every video is used, in video order.
    """
    videos = list(history_videos)
    if max_videos is not None:
        videos = videos[-max_videos:] if max_videos > 0 else []
    pools = [positive_features(v, overlap_threshold) for v in videos]
    keep = [i for i, p in enumerate(pools) if len(p)]
    if not keep:
        raise DatasetError(f"user {user_id!r}: empty history")
    if max_shots is None:
        elements = np.vstack([pools[i] for i in keep])
        return UserHistory.from_elements(user_id, elements, videos)

    rng = user_seed(rng_seed, f"history:{user_id}")
    covered = keep[-max_shots:]
    chosen: list[np.ndarray] = []
    leftover: list[np.ndarray] = []
    for i in keep:
        pool = pools[i]
        order = rng.permutation(len(pool))
        if i in covered:
            chosen.append(pool[order[0]])
            leftover.extend(pool[j] for j in order[1:])
        else:
            leftover.extend(pool[j] for j in order)
    room = max_shots - len(chosen)
    if room > 0 and leftover:
        pick = rng.choice(len(leftover), size=min(room, len(leftover)), replace=False)
        chosen.extend(leftover[j] for j in np.sort(pick))
    return UserHistory.from_elements(user_id, np.vstack(chosen), videos)


def full_history(user: UserRecord, last_k_videos: int | None = None,
                 overlap_threshold: float = 0.5) -> UserHistory:
    """All positives of the user's history, optionally only the last k videos."""
    return build_history(user.histories, max_videos=last_k_videos, max_shots=None,
                         user_id=user.user_id, overlap_threshold=overlap_threshold)


# ---------------------------------------------------------------------------
# feature store


def write_features(path: Path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    n, f = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", n, f))
        fh.write(features.tobytes(order="C"))


def read_features(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise FeatureStoreError(f"{path}: bad magic {raw[:8]!r}")
    n, f = struct.unpack("<II", raw[8:16])
    body = raw[16:]
    if len(body) != 4 * n * f:
        raise FeatureStoreError(f"{path}: expected {n}x{f} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(n, f).astype(np.float64)


# ---------------------------------------------------------------------------
# manifest


_REQUIRED = ("user_id", "video_id", "duration_s", "role", "order", "split", "gif_intervals", "feature_ref")


def _parse_line(lineno: int, line: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise ManifestError(f"line {lineno}: record is not an object")
    missing = [k for k in _REQUIRED if k not in rec]
    if missing:
        raise ManifestError(f"line {lineno}: missing fields {missing}")
    if rec["role"] not in ("history", "target"):
        raise ManifestError(f"line {lineno}: role must be history|target, got {rec['role']!r}")
    if rec["split"] not in SPLITS:
        raise ManifestError(f"line {lineno}: unknown split {rec['split']!r}")
    rec["_line"] = lineno
    return rec


def segment_bounds(rec: dict) -> list[tuple[float, float]]:
    """Segmentation used for a manifest record.

    Val/test targets are always cut into fixed 5 s windows. Other videos use
    train-mode chunking of their shots, or fixed windows when no shots are given.
    """
    duration = float(rec["duration_s"])
    shots = rec.get("shots")
    if rec["role"] == "target" and rec["split"] in ("val", "test"):
        return chunk_segments([], "test", duration_s=duration)
    if shots:
        return chunk_segments(shots, "train")
    return chunk_segments([], "test", duration_s=duration)


def load_manifest(manifest_path, feature_store_path, feature_dim: int | None = None,
                  overlap_threshold: float = 0.5, min_history_videos: int = 1) -> Dataset:
    """Read a JSONL manifest plus its feature store into a ``Dataset``.

    Users whose target has no positive segment, whose test target falls outside
    15 s to 15 min, or with fewer than ``min_history_videos`` history videos are
    dropped and listed in ``Dataset.rejected``.
    """
    manifest_path = Path(manifest_path)
    store = Path(feature_store_path)
    by_user: dict[str, list[dict]] = {}
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = _parse_line(lineno, line)
            by_user.setdefault(str(rec["user_id"]), []).append(rec)

    users: dict[str, UserRecord] = {}
    rejected: list[tuple[str, str]] = []
    dim = feature_dim
    for user_id in sorted(by_user):
        recs = sorted(by_user[user_id], key=lambda r: int(r["order"]))
        targets = [r for r in recs if r["role"] == "target"]
        if len(targets) != 1:
            raise ManifestError(
                f"line {recs[0]['_line']}: user {user_id} has {len(targets)} target records"
            )
        target_rec = targets[0]
        videos = {}
        for rec in recs:
            video, dim = _load_video(rec, store, dim, split=target_rec["split"])
            videos[rec["video_id"]] = video
        target = videos[target_rec["video_id"]]
        histories = tuple(videos[r["video_id"]] for r in recs if r["role"] == "history")
        if target.video_id in {h.video_id for h in histories}:
            raise ManifestError(f"line {target_rec['_line']}: target video reused as history")

        reason = None
        if not target.labels(overlap_threshold).any():
            reason = "target has no positive segment"
        elif target.split == "test" and not (
            TEST_MIN_DURATION_S <= target.duration_s <= TEST_MAX_DURATION_S
        ):
            reason = f"test target duration {target.duration_s:.1f}s outside [15, 900]"
        elif len(histories) < min_history_videos:
            reason = f"only {len(histories)} history videos"
        if reason:
            log.warning("rejecting user %s: %s", user_id, reason)
            rejected.append((user_id, reason))
            continue
        users[user_id] = UserRecord(user_id, target.split, histories, target)

    if dim is None:
        raise ManifestError(f"{manifest_path}: manifest has no records")
    return Dataset(users=users, feature_dim=dim, rejected=rejected)


def _load_video(rec: dict, store: Path, dim: int | None, split: str) -> tuple[VideoRecord, int]:
    vid = str(rec["video_id"])
    path = store / rec["feature_ref"]
    if not path.is_file():
        raise FeatureStoreError(f"missing feature matrix for video_id {vid} ({path})")
    feats = read_features(path)
    if dim is None:
        dim = feats.shape[1]
    elif feats.shape[1] != dim:
        raise FeatureStoreError(
            f"video_id {vid}: feature dimension mismatch, expected {dim}, got {feats.shape[1]}"
        )
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms == 0):
        raise FeatureStoreError(f"video_id {vid}: zero-norm feature row {int(np.argmin(norms))}")
    duration = float(rec["duration_s"])
    bounds = np.asarray(segment_bounds(rec), dtype=np.float64).reshape(-1, 2)
    if len(bounds) != len(feats):
        raise FeatureStoreError(
            f"video_id {vid}: {len(bounds)} segments but {len(feats)} feature rows"
        )
    gt = normalize_intervals(rec["gif_intervals"])
    if len(gt) and (gt[0, 0] < -_EPS or gt[-1, 1] > duration + _EPS):
        raise ManifestError(f"line {rec['_line']}: gif interval outside [0, {duration}]")
    return VideoRecord(vid, duration, bounds, feats, gt, split, int(rec["order"])), dim


def write_dataset(dataset: Dataset, out_dir, manifest_rows: Iterable[dict] | None = None,
                  meta: dict | None = None) -> Path:
    """Write ``manifest.jsonl``, ``features/`` and ``meta.json`` under ``out_dir``.

    ``manifest_rows`` lets callers keep original shots; by default each record
    lists its segment bounds as shots.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rows = list(manifest_rows) if manifest_rows is not None else None
    if rows is None:
        rows = []
        for uid in sorted(dataset.users):
            user = dataset.users[uid]
            for role, video in [("history", v) for v in user.histories] + [("target", user.target)]:
                rows.append({
                    "user_id": uid,
                    "video_id": video.video_id,
                    "duration_s": video.duration_s,
                    "role": role,
                    "order": video.order,
                    "split": user.split,
                    "shots": video.bounds.tolist(),
                    "gif_intervals": video.gt_frames.tolist(),
                    "feature_ref": f"features/{video.video_id}.phdf",
                })
    videos = {}
    for user in dataset.users.values():
        for v in (*user.histories, user.target):
            videos[v.video_id] = v
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            write_features(out / row["feature_ref"], videos[row["video_id"]].features)
    meta = dict(meta or {})
    meta["feature_dim"] = dataset.feature_dim
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return out


def load_dir(data_dir, **kwargs) -> Dataset:
    """Load a dataset directory written by ``write_dataset``."""
    data_dir = Path(data_dir)
    meta_path = data_dir / "meta.json"
    if "feature_dim" not in kwargs and meta_path.is_file():
        kwargs["feature_dim"] = json.loads(meta_path.read_text()).get("feature_dim")
    return load_manifest(data_dir / "manifest.jsonl", data_dir, **kwargs)
