"""End-to-end experiment: train all rankers, fit fusion, evaluate, ablate history size."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import fnn as F
from .dataset import Dataset, full_history
from .fusion import FusionWeights, learn_fusion_weight
from .metrics import EvalReport, config_hash, evaluate
from .scorers import (
    FnnScorer, FusedScorer, HighlightSvmScorer, MaxSimilarityScorer, RandomScorer,
    ResidualScorer, SvmDScorer, VideoMmrScorer,
)
from .train import TrainConfig, build_pairs, train_on_pairs, train_rank_svm

log = logging.getLogger(__name__)

ABLATION_COLUMNS = ("scorer", "k", "applicable", "mAP", "nMSD", "recall_at_5", "n_videos")


@dataclass(frozen=True)
class PipelineConfig:
    """Defaults are tuned for the synthetic generator; the larger (512, 64)
    network overfits at a few thousand training videos."""

    train: TrainConfig = TrainConfig(learning_rate=1e-3, weight_decay=1e-2)
    hidden_sizes: tuple[int, ...] = (128,)
    activation: str = "relu"
    dropout_input: float = 0.2
    dropout_hidden: float = 0.0
    batch_norm: bool = False
    distance_k: int = 20
    distance_pad: float = 0.0
    svm_C: float = 1.0
    fusion_C: float = 1.0
    checkpoint: str = "final"  # or "best" (lowest validation pair loss)
    include_early_fusion: bool = False
    include_residual: bool = True
    random_seed: int = 0

    def arch(self, feature_dim: int, variant: str) -> F.FnnArchitecture:
        return F.FnnArchitecture(
            feature_dim=feature_dim, variant=variant, hidden_sizes=self.hidden_sizes,
            activation=self.activation, dropout_input=self.dropout_input,
            dropout_hidden=self.dropout_hidden, batch_norm=self.batch_norm,
            distance_k=self.distance_k, distance_pad=self.distance_pad,
        )

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        if self.checkpoint not in ("final", "best"):
            raise ValueError(f"checkpoint must be 'final' or 'best', got {self.checkpoint!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pipeline config keys {sorted(unknown)}")
        d = dict(d)
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass(eq=False)
class PipelineResult:
    scorers: dict
    fusion: FusionWeights
    reports: dict[str, EvalReport]
    train_logs: dict[str, list] = field(default_factory=dict)

    def summary(self, split: str = "test") -> dict[str, dict]:
        return self.reports[split].scorers


def component_scores(fnn_scorer: FnnScorer, svm_scorer: SvmDScorer, dataset: Dataset, split: str = "val"):
    """Both component scores for every pos/neg pair (and every segment) of a split."""
    fp, sp, fn, sn, f_all, s_all = [], [], [], [], [], []
    for user in dataset.users_in(split):
        hist = full_history(user)
        video = user.target
        f = fnn_scorer.score_features(video.features, hist)
        s = svm_scorer.score_features(video.features, hist)
        labels = video.labels()
        P, N = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
        if len(P) == 0 or len(N) == 0:
            continue
        pi, ni = np.repeat(P, len(N)), np.tile(N, len(P))
        fp.append(f[pi]), sp.append(s[pi]), fn.append(f[ni]), sn.append(s[ni])
        f_all.append(f), s_all.append(s)
    cat = np.concatenate
    return cat(fp), cat(sp), cat(fn), cat(sn), cat(f_all), cat(s_all)


def fit_fusion(fnn_scorer: FnnScorer, svm_scorer: SvmDScorer, dataset: Dataset, C: float = 1.0,
               split: str = "val") -> FusionWeights:
    fp, sp, fn, sn, f_all, s_all = component_scores(fnn_scorer, svm_scorer, dataset, split)
    return learn_fusion_weight(fp, sp, fn, sn, C=C, fnn_segments=f_all, svm_segments=s_all)


def train_all(dataset: Dataset, config: PipelineConfig = PipelineConfig()) -> tuple[dict, FusionWeights, dict]:
    seed = config.train.seed
    tp = build_pairs(dataset, "train", seed, config.train.pairs_per_video, config.distance_k, config.distance_pad)
    vp = build_pairs(dataset, "val", seed, config.train.pairs_per_video, config.distance_k, config.distance_pad)
    variants = ["generic", "phd_ca"] + (["phd_ca_ed"] if config.include_early_fusion else [])
    scorers: dict = {}
    logs: dict = {}
    for variant in variants:
        res = train_on_pairs(config.arch(dataset.feature_dim, variant), tp, vp, config.train)
        model = res.best if config.checkpoint == "best" else res.final
        scorers[variant] = FnnScorer(model, variant)
        logs[variant] = res.log
    svm_d = train_rank_svm((tp.distances_pos, tp.distances_neg), C=config.svm_C, seed=seed)
    scorers["svm_d"] = SvmDScorer(svm_d, config.distance_pad)
    scorers["highlight_svm"] = HighlightSvmScorer(train_rank_svm((tp.pos, tp.neg), C=config.svm_C, seed=seed))
    weights = fit_fusion(scorers["phd_ca"], scorers["svm_d"], dataset, config.fusion_C)
    scorers["fused"] = FusedScorer(scorers["phd_ca"], scorers["svm_d"], weights)
    scorers["random"] = RandomScorer(config.random_seed)
    scorers["max_similarity"] = MaxSimilarityScorer()
    scorers["video_mmr"] = VideoMmrScorer()
    if config.include_residual:
        scorers["residual"] = ResidualScorer(scorers["generic"], C=config.svm_C, seed=seed)
    return scorers, weights, logs


def evaluate_all(dataset: Dataset, scorers: dict, split: str = "test", metadata: dict | None = None,
                 last_k_videos: int | None = None) -> EvalReport:
    report = EvalReport()
    for name in sorted(scorers):
        report = report.merge(evaluate(dataset, scorers[name], split, name=name, last_k_videos=last_k_videos))
    report.metadata.update(metadata or {})
    return report


def run_pipeline(dataset: Dataset, config: PipelineConfig = PipelineConfig(),
                 splits=("val", "test")) -> PipelineResult:
    scorers, weights, logs = train_all(dataset, config)
    meta = {"config_hash": config_hash(config.to_dict()), "seed": config.train.seed, **weights.to_dict()}
    reports = {s: evaluate_all(dataset, scorers, s, meta) for s in splits}
    return PipelineResult(scorers, weights, reports, logs)


def history_ablation(dataset: Dataset, scorers: dict, k_values=(0, 1, 2, 4, 8, 20),
                     split: str = "test") -> list[dict]:
    """Re-evaluate with each test user's history cut to their last k videos.

    Scorers that need a history are marked not applicable at k=0. Users with
    fewer than k history videos contribute everything they have.
    """
    rows = []
    for k in k_values:
        for name in sorted(scorers):
            sc = scorers[name]
            row = {"scorer": name, "k": k}
            if sc.uses_history and k == 0:
                row.update(applicable=False, mAP=None, nMSD=None, recall_at_5=None, n_videos=0)
            else:
                agg = evaluate(dataset, sc, split, name=name, last_k_videos=k if sc.uses_history else None)[name]
                row.update(applicable=True, mAP=agg["mAP"], nMSD=agg["nMSD"],
                           recall_at_5=agg["recall_at_5"], n_videos=agg["n_videos"])
            rows.append(row)
    return rows


def write_ablation_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({c: ("NA" if r[c] is None else r[c]) for c in ABLATION_COLUMNS})
