"""History-size ablation on synthetic data: mAP / nMSD / R@5 against k, written as CSV.

    python scripts/history_ablation.py --seed 0 --out runs/ablation_seed0.csv
"""
import argparse
import logging
from dataclasses import replace

from phdrank.experiments import PipelineConfig, history_ablation, train_all, write_ablation_csv
from phdrank.synth import SynthConfig, generate_synthetic
from phdrank.train import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--kappa", type=float, default=0.9)
    ap.add_argument("--gamma", type=float, default=0.3)
    ap.add_argument("--k", default="0,1,2,4,8,20")
    ap.add_argument("--scorers", default="fused,phd_ca,svm_d,generic,max_similarity,video_mmr,random")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    synth = SynthConfig(n_train_users=500, n_val_users=100, n_test_users=1000,
                        user_consistency=args.kappa, generic_weight=args.gamma)
    ds = generate_synthetic(synth, seed=args.seed)
    cfg = replace(PipelineConfig(include_residual=False),
                  train=TrainConfig(learning_rate=1e-3, weight_decay=1e-2, seed=args.seed))
    scorers, _, _ = train_all(ds, cfg)
    chosen = {name: scorers[name] for name in args.scorers.split(",")}
    rows = history_ablation(ds, chosen, [int(k) for k in args.k.split(",")])
    write_ablation_csv(rows, args.out)
    for r in rows:
        value = "n/a" if r["mAP"] is None else f"{100 * r['mAP']:.2f}"
        print(f"{r['scorer']:>15s}  k={r['k']:<3d} mAP={value}")


if __name__ == "__main__":
    main()
