"""Pair construction, RMSProp training of the FNN rankers, SVM fitting and sweeps."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import fnn as F
from .dataset import Dataset, UserHistory, build_history, full_history, sample_pairs
from .linear import LinearModel, train_rank_svm
from .metrics import evaluate
from .scorers import FnnScorer
from .vecmath import DEFAULT_K, distance_feature_matrix

log = logging.getLogger(__name__)

PAIRS_PER_VIDEO = 5
HISTORY_MAX_VIDEOS = 20
HISTORY_MAX_SHOTS = 20


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 16
    lr_halving_period: int = 4
    batch_size: int = 64
    seed: int = 0
    loss_margin: float = 1.0
    rho: float = 0.9
    eps: float = 1e-8
    pairs_per_video: int = PAIRS_PER_VIDEO

    def __post_init__(self):
        for name in ("learning_rate", "epochs", "lr_halving_period", "batch_size", "loss_margin"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < self.lr_halving_period:
            raise ValueError("epochs must be at least lr_halving_period")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``: halved every ``lr_halving_period`` epochs."""
    return config.learning_rate * 0.5 ** ((epoch - 1) // config.lr_halving_period)


# ---------------------------------------------------------------------------
# optimizer


def rmsprop_step(params: dict, grads: dict, state: dict, lr: float, weight_decay: float = 0.0,
                 rho: float = 0.9, eps: float = 1e-8) -> None:
    """In-place RMSProp update with decoupled weight decay.

    ``state[name] <- rho*state + (1-rho)*g^2``;
    ``param <- param - lr*g/(sqrt(state)+eps) - lr*weight_decay*param``.
    """
    for name, g in grads.items():
        p = params[name]
        s = state.get(name)
        if s is None:
            s = np.zeros_like(p)
        s = rho * s + (1.0 - rho) * g * g
        new = p - lr * g / (np.sqrt(s) + eps) - lr * weight_decay * p
        if not np.all(np.isfinite(new)):
            raise FloatingPointError(f"non-finite update for {name}")
        state[name] = s
        params[name] = new


# ---------------------------------------------------------------------------
# pairs


@dataclass(eq=False)
class PairSet:
    """Assembled training pairs: segment features plus the user history of each pair."""

    pos: np.ndarray
    neg: np.ndarray
    profiles: np.ndarray
    distances_pos: np.ndarray
    distances_neg: np.ndarray

    def __len__(self) -> int:
        return len(self.pos)

    def inputs(self, arch: F.FnnArchitecture) -> tuple[np.ndarray, np.ndarray]:
        if arch.variant == "generic":
            return self.pos, self.neg
        if arch.variant == "phd_ca":
            return np.hstack([self.pos, self.profiles]), np.hstack([self.neg, self.profiles])
        return (np.hstack([self.pos, self.profiles, self.distances_pos]),
                np.hstack([self.neg, self.profiles, self.distances_neg]))


def training_history(user, seed: int) -> UserHistory:
    return build_history(user.histories, HISTORY_MAX_VIDEOS, HISTORY_MAX_SHOTS, seed, user.user_id)


def build_pairs(dataset: Dataset, split: str, seed: int = 0, pairs_per_video: int | None = PAIRS_PER_VIDEO,
                k: int = DEFAULT_K, pad_value: float = 0.0, history: str = "auto") -> PairSet:
    """Sample pairs from every target video of ``split``.

    ``history="auto"`` uses the capped random history for train users and the
    full history elsewhere. ``pairs_per_video=None`` takes every pos/neg pair.
    """
    pos, neg, prof, dpos, dneg = [], [], [], [], []
    for user in dataset.users_in(split):
        capped = history == "capped" or (history == "auto" and split == "train")
        try:
            hist = training_history(user, seed) if capped else full_history(user)
        except ValueError:
            log.warning("skipping user %s: no usable history", user.user_id)
            continue
        video = user.target
        if pairs_per_video is None:
            labels = video.labels()
            P, N = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
            idx = [(p, n) for p in P for n in N]
        else:
            try:
                idx = [(p.positive, p.negative)
                       for p in sample_pairs(video, pairs_per_video, seed, user.user_id)]
            except ValueError:
                continue
        if not idx:
            continue
        D = distance_feature_matrix(video.features, hist, k, pad_value)
        for p, n in idx:
            pos.append(video.features[p])
            neg.append(video.features[n])
            prof.append(hist.profile)
            dpos.append(D[p])
            dneg.append(D[n])
    if not pos:
        raise ValueError(f"no training pairs in split {split!r}")
    return PairSet(np.array(pos), np.array(neg), np.array(prof), np.array(dpos), np.array(dneg))


# ---------------------------------------------------------------------------
# FNN training


@dataclass(eq=False)
class TrainResult:
    final: F.FnnModel
    best: F.FnnModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def default_architecture(dataset: Dataset, variant: str, **overrides) -> F.FnnArchitecture:
    return F.FnnArchitecture(feature_dim=dataset.feature_dim, variant=variant, **overrides)


def _eval_loss(model, X, margin):
    s = F.forward_batch(model, np.vstack(X))
    B = len(X[0])
    return float(np.mean(F.pairwise_loss(s[:B], s[B:], margin)))


def train_on_pairs(arch: F.FnnArchitecture, train_pairs: PairSet, val_pairs: PairSet | None,
                   config: TrainConfig) -> TrainResult:
    model = F.init_fnn(arch, config.seed)
    Xp, Xn = train_pairs.inputs(arch)
    Xv = val_pairs.inputs(arch) if val_pairs is not None else None
    rng = np.random.default_rng([config.seed, 7])
    state: dict = {}
    best, best_loss, best_epoch = model.copy(), np.inf, 0
    history: list[dict] = []
    n = len(Xp)
    step = 0
    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(config, epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads, cache = F.gradients(model, (Xp[idx], Xn[idx]), dropout_seed=[config.seed, step],
                                             margin=config.loss_margin, return_cache=True)
            F.update_running_stats(model, cache)
            rmsprop_step(model.params, grads, state, lr, config.weight_decay, config.rho, config.eps)
            losses.append(loss * len(idx))
            step += 1
        entry = {"epoch": epoch, "lr": lr, "train_loss": float(np.sum(losses) / n)}
        if Xv is not None:
            v = _eval_loss(model, Xv, config.loss_margin)
            if not np.isfinite(v):
                raise TrainingDivergedError(f"validation loss is {v} at epoch {epoch} (lr={lr:g})")
            entry["val_loss"] = v
            if v < best_loss:
                best, best_loss, best_epoch = model.copy(), v, epoch
        log.info("epoch %d lr=%.2e train=%.4f val=%s", epoch, lr, entry["train_loss"], entry.get("val_loss"))
        history.append(entry)
    if Xv is None:
        best, best_epoch = model.copy(), config.epochs
    return TrainResult(model, best, history, best_epoch)


def train_fnn(dataset: Dataset, variant: str = "phd_ca", config: TrainConfig = TrainConfig(),
              arch: F.FnnArchitecture | None = None, train_pairs: PairSet | None = None,
              val_pairs: PairSet | None = None) -> TrainResult:
    """Train one FNN ranker on the train split, tracking validation pair loss."""
    arch = arch or default_architecture(dataset, variant)
    if arch.variant != variant:
        arch = replace(arch, variant=variant)
    if train_pairs is None:
        train_pairs = build_pairs(dataset, "train", config.seed, config.pairs_per_video,
                                  arch.distance_k, arch.distance_pad)
    if val_pairs is None and dataset.users_in("val"):
        val_pairs = build_pairs(dataset, "val", config.seed, config.pairs_per_video,
                                arch.distance_k, arch.distance_pad)
    return train_on_pairs(arch, train_pairs, val_pairs, config)


def pair_accuracy_fnn(model: F.FnnModel, pairs: PairSet) -> float:
    Xp, Xn = pairs.inputs(model.arch)
    return float(np.mean(F.forward_batch(model, Xp) > F.forward_batch(model, Xn)))


# ---------------------------------------------------------------------------
# linear models


def train_svm_d(dataset: Dataset, C: float = 1.0, k: int = DEFAULT_K, pad_value: float = 0.0,
                seed: int = 0, pairs: PairSet | None = None) -> LinearModel:
    pairs = pairs or build_pairs(dataset, "train", seed, PAIRS_PER_VIDEO, k, pad_value)
    return train_rank_svm((pairs.distances_pos, pairs.distances_neg), C=C, seed=seed)


def train_highlight_svm(dataset: Dataset, C: float = 1.0, seed: int = 0,
                        pairs: PairSet | None = None) -> LinearModel:
    pairs = pairs or build_pairs(dataset, "train", seed)
    return train_rank_svm((pairs.pos, pairs.neg), C=C, seed=seed)


# ---------------------------------------------------------------------------
# hyperparameter search


def _nonincreasing_layouts(sizes, layers) -> list[tuple[int, ...]]:
    out = []
    for n in layers:
        for combo in itertools.product(sorted(sizes, reverse=True), repeat=n):
            if all(b <= a for a, b in zip(combo, combo[1:])):
                out.append(combo)
    return out


@dataclass(frozen=True)
class SweepSpace:
    hidden_layer_counts: tuple[int, ...] = (1, 2, 3)
    hidden_sizes: tuple[int, ...] = (64, 128, 256, 512)
    activations: tuple[str, ...] = ("relu", "selu")
    batch_norm: tuple[bool, ...] = (False, True)
    dropout_input: tuple[float, float] = (0.5, 0.8)
    dropout_hidden: tuple[float, float] = (0.1, 0.5)
    learning_rate: tuple[float, float] = (1e-4, 1e-2)
    weight_decay: tuple[float, float] = (1e-3, 2.0)
    variant: str = "phd_ca"
    epochs: int = 16
    batch_size: int = 64
    budget: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden_layer_counts", "hidden_sizes", "activations", "batch_norm",
                     "dropout_input", "dropout_hidden", "learning_rate", "weight_decay"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.budget < 1:
            raise ValueError("sweep budget must be at least 1")
        if any(h > F.MAX_HIDDEN for h in self.hidden_sizes):
            raise ValueError(f"hidden sizes above {F.MAX_HIDDEN}")
        if any(not 1 <= n <= 3 for n in self.hidden_layer_counts):
            raise ValueError("hidden layer counts must be within 1..3")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpace":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown sweep space keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SweepSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def grid(self) -> list[tuple]:
        layouts = _nonincreasing_layouts(self.hidden_sizes, self.hidden_layer_counts)
        return list(itertools.product(layouts, self.activations, self.batch_norm))


def trial_seed(master_seed: int, trial_index: int) -> int:
    return int(np.random.SeedSequence([master_seed, trial_index]).generate_state(1)[0])


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_trials(space: SweepSpace, feature_dim: int) -> list[tuple[F.FnnArchitecture, TrainConfig]]:
    """Discrete axes walk a seeded permutation of the grid; continuous axes are drawn at random."""
    grid = space.grid()
    order = np.random.default_rng(space.seed).permutation(len(grid))
    out = []
    for i in range(space.budget):
        seed = trial_seed(space.seed, i)
        rng = np.random.default_rng(seed)
        layout, act, bn = grid[order[i % len(grid)]]
        arch = F.FnnArchitecture(
            feature_dim=feature_dim, variant=space.variant, hidden_sizes=layout, activation=act,
            batch_norm=bn, dropout_input=float(rng.uniform(*space.dropout_input)),
            dropout_hidden=float(rng.uniform(*space.dropout_hidden)),
        )
        cfg = TrainConfig(learning_rate=_log_uniform(rng, *space.learning_rate),
                          weight_decay=_log_uniform(rng, *space.weight_decay),
                          epochs=space.epochs, batch_size=space.batch_size, seed=seed)
        out.append((arch, cfg))
    return out


@dataclass(eq=False)
class SearchResult:
    best_arch: F.FnnArchitecture
    best_config: TrainConfig
    best_model: F.FnnModel
    trials: list[dict]

    def to_dict(self) -> dict:
        arch = asdict(self.best_arch)
        arch["hidden_sizes"] = list(arch["hidden_sizes"])
        return {"best_architecture": arch, "best_config": asdict(self.best_config), "trials": self.trials}


def hyperparameter_search(space: SweepSpace, dataset: Dataset) -> SearchResult:
    """Train every sampled trial and keep the one with the highest validation mAP."""
    if not dataset.users_in("val"):
        raise ValueError("hyperparameter search needs a validation split")
    trials = []
    best = None
    tp = build_pairs(dataset, "train", space.seed)
    vp = build_pairs(dataset, "val", space.seed)
    for i, (arch, cfg) in enumerate(sample_trials(space, dataset.feature_dim)):
        result = train_on_pairs(arch, tp, vp, cfg)
        report = evaluate(dataset, FnnScorer(result.final, "trial"), "val")
        val_map = report["trial"]["mAP"]
        rec = {"trial": i, "seed": cfg.seed, "hidden_sizes": list(arch.hidden_sizes),
               "activation": arch.activation, "batch_norm": arch.batch_norm,
               "dropout_input": arch.dropout_input, "dropout_hidden": arch.dropout_hidden,
               "learning_rate": cfg.learning_rate, "weight_decay": cfg.weight_decay,
               "val_mAP": val_map, "val_loss": result.log[-1].get("val_loss")}
        log.info("trial %d: %s", i, rec)
        trials.append(rec)
        if best is None or val_map > best[0]:
            best = (val_map, arch, cfg, result.final)
    _, arch, cfg, model = best
    return SearchResult(arch, cfg, model, trials)
