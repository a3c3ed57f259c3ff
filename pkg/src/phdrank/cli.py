"""Command line harness: ``phdrank {gen-synth,train,fuse,eval,sweep,ablate}``.

Configs are JSON files. Failures exit nonzero and print one JSON error record
on stderr. Reports never contain absolute paths or timestamps, so equal inputs
give byte-identical outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import fnn as F
from .dataset import load_dir
from .experiments import (
    PipelineConfig, evaluate_all, fit_fusion, history_ablation, write_ablation_csv,
)
from .fusion import FusionWeights
from .linear import CHECKPOINT_MAGIC as SVM_MAGIC
from .linear import load_linear, save_linear, train_rank_svm
from .metrics import config_hash
from .scorers import (
    FnnScorer, FusedScorer, HighlightSvmScorer, MaxSimilarityScorer, OracleScorer,
    RandomScorer, ResidualScorer, SvmDScorer, VideoMmrScorer,
)
from .synth import SynthConfig, generate_synthetic
from .train import SweepSpace, build_pairs, hyperparameter_search, train_on_pairs

log = logging.getLogger("phdrank")

MODELS = ("phd-ca", "generic", "phd-ca-ed", "svm-d", "highlight-svm", "residual")
RESIDUAL_FILES = ("generic.phdfnn", "residual.json")


class CliError(Exception):
    """Bad invocation or inputs; reported as a JSON record."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def file_sha256(path) -> str:
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.is_file()) if path.is_dir() else [path]
    h = hashlib.sha256()
    for p in files:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _pipeline_config(path, seed: int | None = None) -> PipelineConfig:
    cfg = PipelineConfig.from_dict(_read_json(path)) if path else PipelineConfig()
    if seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=seed))
    return cfg


def _ref(path, relative_to) -> str:
    """Path of ``path`` as seen from the directory of ``relative_to``."""
    return os.path.relpath(Path(path).resolve(), Path(relative_to).resolve().parent)


# ---------------------------------------------------------------------------
# checkpoints and scorer specs


def _magic(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(8)


def load_fnn_scorer(path) -> FnnScorer:
    model = F.load_fnn(path)
    return FnnScorer(model, model.arch.variant)


def load_residual(path, C: float | None = None) -> ResidualScorer:
    path = Path(path)
    if not path.is_dir():
        raise CliError(f"residual checkpoint must be a directory holding {RESIDUAL_FILES}: {path}")
    meta = json.loads((path / "residual.json").read_text())
    generic = load_fnn_scorer(path / "generic.phdfnn")
    return ResidualScorer(generic, C=meta["C"], pairs_per_video=meta["pairs_per_video"], seed=meta["seed"])


def load_fused(report_path) -> FusedScorer:
    report = json.loads(Path(report_path).read_text())
    meta = report["metadata"]
    base = Path(report_path).parent
    fnn = load_fnn_scorer(base / meta["checkpoints"]["fnn"]["path"])
    svm = SvmDScorer(load_linear(base / meta["checkpoints"]["svm"]["path"]), meta.get("distance_pad", 0.0))
    f = meta["fusion"]
    weights = FusionWeights(f["fusion_omega"], f["omega_standardized"], f["fnn_scale"], f["svm_scale"],
                            f["grid_fallback"])
    return FusedScorer(fnn, svm, weights)


def parse_scorer(spec: str):
    """Build a scorer from ``kind[:argument]``.

    Kinds: ``random[:seed]``, ``max-similarity``, ``video-mmr``, ``oracle``,
    ``fnn:<ckpt>``, ``svm-d:<ckpt>``, ``highlight-svm:<ckpt>``,
    ``residual:<dir>`` and ``fused:<fuse report>``.
    """
    kind, _, arg = spec.partition(":")
    if kind == "random":
        return RandomScorer(int(arg) if arg else 0)
    if kind == "max-similarity":
        return MaxSimilarityScorer()
    if kind == "video-mmr":
        return VideoMmrScorer()
    if kind == "oracle":
        return OracleScorer()
    if not arg:
        raise CliError(f"scorer {kind!r} needs a checkpoint path ({kind}:<path>)")
    if not Path(arg).exists():
        raise CliError(f"checkpoint not found: {arg}")
    if kind in ("fnn", "phd-ca", "generic", "phd-ca-ed"):
        return load_fnn_scorer(arg)
    if kind == "svm-d":
        return SvmDScorer(load_linear(arg))
    if kind == "highlight-svm":
        return HighlightSvmScorer(load_linear(arg))
    if kind == "residual":
        return load_residual(arg)
    if kind == "fused":
        return load_fused(arg)
    raise CliError(f"unknown scorer kind {kind!r}")


def _scorers(specs) -> dict:
    out = {}
    for spec in specs:
        scorer = parse_scorer(spec)
        if scorer.name in out:
            raise CliError(f"two scorers named {scorer.name!r}")
        out[scorer.name] = scorer
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> dict:
    config = SynthConfig.from_dict(_read_json(args.config)) if args.config else SynthConfig()
    ds = generate_synthetic(config, seed=args.seed, out_dir=args.out)
    return {"out": str(args.out), "users": ds.split_counts, "feature_dim": ds.feature_dim,
            "config_hash": config_hash(config.to_dict())}


def _train_fnn(ds, cfg: PipelineConfig, variant: str):
    seed = cfg.train.seed
    tp = build_pairs(ds, "train", seed, cfg.train.pairs_per_video, cfg.distance_k, cfg.distance_pad)
    vp = (build_pairs(ds, "val", seed, cfg.train.pairs_per_video, cfg.distance_k, cfg.distance_pad)
          if ds.users_in("val") else None)
    res = train_on_pairs(cfg.arch(ds.feature_dim, variant), tp, vp, cfg.train)
    return (res.best if cfg.checkpoint == "best" else res.final), res


def cmd_train(args) -> dict:
    ds = load_dir(args.data)
    cfg = _pipeline_config(args.config, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    info = {"model": args.model, "config_hash": config_hash(cfg.to_dict())}
    if args.model in ("phd-ca", "generic", "phd-ca-ed"):
        model, res = _train_fnn(ds, cfg, args.model.replace("-", "_"))
        F.save_fnn(model, out)
        info.update(train_log=res.log, best_epoch=res.best_epoch)
    elif args.model in ("svm-d", "highlight-svm"):
        tp = build_pairs(ds, "train", cfg.train.seed, cfg.train.pairs_per_video, cfg.distance_k, cfg.distance_pad)
        pairs = (tp.distances_pos, tp.distances_neg) if args.model == "svm-d" else (tp.pos, tp.neg)
        save_linear(train_rank_svm(pairs, C=cfg.svm_C, seed=cfg.train.seed), out)
    else:
        out.mkdir(parents=True, exist_ok=True)
        if args.generic:
            generic = F.load_fnn(args.generic)
            if generic.arch.variant != "generic":
                raise CliError(f"--generic checkpoint has variant {generic.arch.variant!r}")
        else:
            generic, _ = _train_fnn(ds, cfg, "generic")
        F.save_fnn(generic, out / "generic.phdfnn")
        _write_json(out / "residual.json", {"C": cfg.svm_C, "pairs_per_video": cfg.train.pairs_per_video,
                                            "seed": cfg.train.seed})
    info["sha256"] = file_sha256(out)
    return info


def cmd_fuse(args) -> dict:
    ds = load_dir(args.data)
    cfg = _pipeline_config(args.config)
    fnn = parse_scorer(f"fnn:{args.fnn}")
    if _magic(args.svm) != SVM_MAGIC:
        raise CliError(f"{args.svm} is not a linear model checkpoint")
    svm = SvmDScorer(load_linear(args.svm), cfg.distance_pad)
    if not fnn.uses_history:
        log.warning("fusing a history-free FNN (%s) with SVM-D", fnn.name)
    weights = fit_fusion(fnn, svm, ds, cfg.fusion_C, split=args.fit_split)
    fused = FusedScorer(fnn, svm, weights)
    meta = {
        "fusion": weights.to_dict(),
        "fit_split": args.fit_split,
        "distance_pad": cfg.distance_pad,
        "checkpoints": {
            "fnn": {"path": _ref(args.fnn, args.out), "sha256": file_sha256(args.fnn)},
            "svm": {"path": _ref(args.svm, args.out), "sha256": file_sha256(args.svm)},
        },
    }
    report = evaluate_all(ds, {"fused": fused, fnn.name: fnn, "svm_d": svm}, args.split, meta)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.write_json(args.out)
    return {"fusion_omega": weights.omega, "report": str(args.out), "scorers": report.scorers}


def cmd_eval(args) -> dict:
    ds = load_dir(args.data)
    scorers = _scorers(args.scorer)
    report = evaluate_all(ds, scorers, args.split, {"scorer_specs": sorted(s.partition(":")[0] for s in args.scorer)},
                          last_k_videos=args.last_k)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    report.write_json(args.report)
    if args.csv:
        report.write_csv(args.csv)
    return {"report": str(args.report), "scorers": report.scorers}


def cmd_sweep(args) -> dict:
    raw = _read_json(args.space) if args.space else {}
    if args.budget is not None:
        raw["budget"] = args.budget
    space = SweepSpace.from_dict(raw)
    ds = load_dir(args.data)
    result = hyperparameter_search(space, ds)
    out = result.to_dict()
    if args.out:
        _write_json(args.out, out)
    if args.save_model:
        F.save_fnn(result.best_model, args.save_model)
    return out


def cmd_ablate(args) -> dict:
    ds = load_dir(args.data)
    try:
        ks = [int(k) for k in args.k.split(",") if k.strip()]
    except ValueError:
        raise CliError(f"--k must be a comma separated list of integers, got {args.k!r}") from None
    if not ks or min(ks) < 0:
        raise CliError("--k needs non-negative integers")
    rows = history_ablation(ds, _scorers(args.scorer), ks, args.split)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(rows, args.out)
    return {"out": str(args.out), "rows": len(rows)}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phdrank", description="Personalized highlight ranking experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    g.add_argument("--config", help="SynthConfig JSON (defaults when omitted)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True)
    t.add_argument("--model", required=True, choices=MODELS)
    t.add_argument("--config", help="PipelineConfig JSON")
    t.add_argument("--seed", type=int, help="override train.seed")
    t.add_argument("--generic", help="residual only: reuse this generic FNN checkpoint")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="learn the late-fusion weight and evaluate the fused model")
    f.add_argument("--fnn", required=True)
    f.add_argument("--svm", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--config", help="PipelineConfig JSON (fusion_C, distance_pad)")
    f.add_argument("--fit-split", default="val", choices=("train", "val"))
    f.add_argument("--split", default="test", choices=("val", "test"))
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="evaluate scorers")
    e.add_argument("--data", required=True)
    e.add_argument("--scorer", required=True, action="append", help="scorer, e.g. random:3 or fnn:model.phdfnn; repeatable")
    e.add_argument("--split", default="test", choices=("val", "test"))
    e.add_argument("--last-k", type=int, help="restrict histories to the last k videos")
    e.add_argument("--report", required=True)
    e.add_argument("--csv", help="also write per-video rows as CSV")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="hyperparameter search")
    s.add_argument("--space", help="SweepSpace JSON")
    s.add_argument("--budget", type=int)
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="write the search log JSON here")
    s.add_argument("--save-model", help="save the winning FNN here")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="history-size ablation")
    a.add_argument("--data", required=True)
    a.add_argument("--scorer", required=True, action="append", help="scorer, e.g. random:3 or fnn:model.phdfnn; repeatable")
    a.add_argument("--k", default="0,1,2,4,8,20")
    a.add_argument("--split", default="test", choices=("val", "test"))
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        _report_error(exc, argv, code=2)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # every failure becomes a machine-readable record
        _report_error(exc, argv, code=1)
        return 1
    sys.stdout.write(json.dumps(result, sort_keys=True, default=str) + "\n")
    return 0


def _report_error(exc: BaseException, argv, code: int) -> None:
    record = {"error": type(exc).__name__, "message": str(exc),
              "command": argv[0] if argv else None, "exit_code": code}
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")


if __name__ == "__main__":
    sys.exit(main())
