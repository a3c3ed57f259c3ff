"""Synthetic users, videos and GIF selections with controllable personalization.

Every topic has a unit prototype; a segment's feature is its topic prototype
plus isotropic Gaussian noise. A hidden "appeal" direction, orthogonal to all
prototypes, gives each segment a user-independent attractiveness. Each user
prefers one topic with weight ``user_consistency`` (the rest is spread
uniformly). GIF segments are drawn with probability proportional to
``exp(u / temperature)`` where
``u = generic_weight * appeal + (1 - generic_weight) * affinity``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .dataset import (
    TEST_MAX_DURATION_S, TEST_MIN_DURATION_S, Dataset, UserRecord, VideoRecord,
    chunk_segments, normalize_intervals, write_dataset,
)


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_train_users: int = 600
    n_val_users: int = 150
    n_test_users: int = 200
    n_topics: int = 8
    feature_dim: int = 64
    history_videos: tuple[int, int] = (4, 24)
    shots_per_video: tuple[int, int] = (6, 14)
    shot_length_s: tuple[float, float] = (3.0, 20.0)
    topics_per_video: int = 3
    gif_segments: tuple[int, int] = (1, 2)
    user_consistency: float = 0.9
    generic_weight: float = 0.3
    noise: float = 0.35
    temperature: float = 0.1
    appeal_sharpness: float = 2.0

    def __post_init__(self):
        for name in ("history_videos", "shots_per_video", "shot_length_s", "gif_segments"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_topics <= 0:
            raise SynthConfigError("n_topics must be >= 1")
        if self.feature_dim <= self.n_topics:
            raise SynthConfigError("feature_dim must exceed n_topics (prototypes plus appeal axis)")
        if not 0.0 <= self.user_consistency <= 1.0:
            raise SynthConfigError("user_consistency must be in [0, 1]")
        if not 0.0 <= self.generic_weight <= 1.0:
            raise SynthConfigError("generic_weight must be in [0, 1]")
        if self.noise < 0 or self.temperature <= 0:
            raise SynthConfigError("noise must be >= 0 and temperature > 0")
        if not 1 <= self.topics_per_video <= self.n_topics:
            raise SynthConfigError("topics_per_video must be in [1, n_topics]")
        if self.history_videos[0] < 1 or self.history_videos[0] > self.history_videos[1]:
            raise SynthConfigError("history_videos must be a range with minimum >= 1")
        if self.gif_segments[0] < 1 or self.gif_segments[0] > self.gif_segments[1]:
            raise SynthConfigError("gif_segments must be a range with minimum >= 1")
        if self.shots_per_video[0] < 1 or self.shots_per_video[0] > self.shots_per_video[1]:
            raise SynthConfigError("shots_per_video must be a range with minimum >= 1")
        if self.shot_length_s[0] <= 0 or self.shot_length_s[0] > self.shot_length_s[1]:
            raise SynthConfigError("shot_length_s must be a positive range")
        if min(self.n_train_users, self.n_val_users, self.n_test_users) < 0:
            raise SynthConfigError("user counts must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SynthConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class World:
    prototypes: np.ndarray  # (T, F) orthonormal rows
    appeal_axis: np.ndarray  # (F,) unit, orthogonal to every prototype


def make_world(config: SynthConfig, rng: np.random.Generator) -> World:
    q, _ = np.linalg.qr(rng.standard_normal((config.feature_dim, config.n_topics + 1)))
    return World(q[:, : config.n_topics].T.copy(), q[:, config.n_topics].copy())


def appeal(world: World, features: np.ndarray, noise: float, sharpness: float = 1.0) -> np.ndarray:
    z = sharpness * (features @ world.appeal_axis) / max(noise, 1e-12)
    return 1.0 / (1.0 + np.exp(-z))


def preference(config: SynthConfig, favourite: int) -> np.ndarray:
    T = config.n_topics
    pi = np.full(T, (1.0 - config.user_consistency) / T)
    pi[favourite] += config.user_consistency
    return pi


def _shots(config: SynthConfig, rng, test_target: bool) -> list[tuple[float, float]]:
    while True:
        n = int(rng.integers(config.shots_per_video[0], config.shots_per_video[1] + 1))
        lengths = np.round(rng.uniform(*config.shot_length_s, size=n), 2)
        ends = np.round(np.cumsum(lengths), 2)
        if not test_target or TEST_MIN_DURATION_S <= ends[-1] <= TEST_MAX_DURATION_S:
            break
    starts = np.concatenate([[0.0], ends[:-1]])
    return [(float(s), float(e)) for s, e in zip(starts, ends)]


def _video(config: SynthConfig, world: World, rng, pi: np.ndarray, video_id: str, split: str,
           order: int, eval_target: bool) -> tuple[VideoRecord, dict]:
    T = config.n_topics
    first = int(rng.choice(T, p=pi))
    others = [t for t in range(T) if t != first]
    extra = rng.choice(others, size=config.topics_per_video - 1, replace=False) if others else []
    topics = np.array([first, *extra], dtype=int)

    shots = _shots(config, rng, test_target=eval_target and split == "test")
    shot_topics = rng.choice(topics, size=len(shots))
    duration = shots[-1][1]
    if eval_target:
        bounds = chunk_segments([], "test", duration_s=duration)
    else:
        bounds = chunk_segments(shots, "train")
    bounds = np.asarray(bounds, dtype=np.float64)
    ends = np.array([e for _, e in shots])
    mids = 0.5 * (bounds[:, 0] + bounds[:, 1])
    seg_topics = shot_topics[np.minimum(np.searchsorted(ends, mids), len(shots) - 1)]

    n = len(bounds)
    feats = world.prototypes[seg_topics] + config.noise * rng.standard_normal((n, config.feature_dim))
    feats = feats.astype(np.float32).astype(np.float64)

    affinity = pi[seg_topics] / pi.max()
    u = config.generic_weight * appeal(world, feats, config.noise, config.appeal_sharpness) + (1 - config.generic_weight) * affinity
    logits = (u - u.max()) / config.temperature
    p = np.exp(logits)
    p /= p.sum()
    k = min(n, int(rng.integers(config.gif_segments[0], config.gif_segments[1] + 1)))
    picked = np.sort(rng.choice(n, size=k, replace=False, p=p))
    gt = normalize_intervals(bounds[picked])

    video = VideoRecord(video_id, duration, bounds, feats, gt, split, order)
    row = {
        "video_id": video_id,
        "duration_s": duration,
        "order": order,
        "split": split,
        "shots": [list(s) for s in shots],
        "gif_intervals": gt.tolist(),
        "feature_ref": f"features/{video_id}.phdf",
    }
    return video, row


def generate_synthetic(config: SynthConfig, seed: int = 0, out_dir=None) -> Dataset:
    """Build a dataset; when ``out_dir`` is given also write manifest + feature store."""
    rng = np.random.default_rng(seed)
    world = make_world(config, rng)
    users: dict[str, UserRecord] = {}
    rows: list[dict] = []
    favourites: dict[str, int] = {}
    plan = (["train"] * config.n_train_users + ["val"] * config.n_val_users
            + ["test"] * config.n_test_users)
    for idx, split in enumerate(plan):
        uid = f"u{idx:05d}"
        fav = int(rng.integers(config.n_topics))
        favourites[uid] = fav
        pi = preference(config, fav)
        n_hist = int(rng.integers(config.history_videos[0], config.history_videos[1] + 1))
        histories = []
        for j in range(n_hist + 1):
            is_target = j == n_hist
            video, row = _video(config, world, rng, pi, f"{uid}_v{j:02d}", split, j,
                                eval_target=is_target and split in ("val", "test"))
            row = {"user_id": uid, "role": "target" if is_target else "history", **row}
            rows.append(row)
            if is_target:
                target = video
            else:
                histories.append(video)
        users[uid] = UserRecord(uid, split, tuple(histories), target)
    dataset = Dataset(users=users, feature_dim=config.feature_dim,
                      info={"favourite_topic": favourites, "seed": seed})
    if out_dir is not None:
        write_dataset(dataset, out_dir, manifest_rows=rows,
                      meta={"config": config.to_dict(), "seed": seed})
    return dataset
