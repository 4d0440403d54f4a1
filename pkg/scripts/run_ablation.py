#!/usr/bin/env python3
"""Run the strategy ablation and print a per-run table plus the seed-paired
summary. All knobs of AblationConfig are exposed as flags; results land in
--out as ablation.json together with per-run logs and checkpoints."""

import argparse
import json

from seenet.ablation import AblationConfig, run_ablation


def main() -> None:
    defaults = AblationConfig()
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="ablation_out")
    ap.add_argument("--train-samples", type=int, default=defaults.train_samples)
    ap.add_argument("--eval-samples", type=int, default=defaults.eval_samples)
    ap.add_argument("--classes", type=int, default=defaults.num_classes)
    ap.add_argument("--side", type=int, default=defaults.side)
    ap.add_argument("--iters", type=int, default=defaults.iters)
    ap.add_argument("--batch", type=int, default=defaults.batch_size)
    ap.add_argument("--seeds", type=lambda s: tuple(int(v) for v in s.split(",")),
                    default=defaults.seeds)
    ap.add_argument("--strategies", type=lambda s: tuple(s.split(",")),
                    default=defaults.strategies)
    ap.add_argument("--data-seed", type=int, default=defaults.data_seed)
    args = ap.parse_args()

    cfg = AblationConfig(
        num_classes=args.classes,
        side=args.side,
        train_samples=args.train_samples,
        eval_samples=args.eval_samples,
        data_seed=args.data_seed,
        iters=args.iters,
        batch_size=args.batch,
        seeds=args.seeds,
        strategies=args.strategies,
    )
    results = run_ablation(cfg, out_dir=args.out, log=print)

    print("\nstrategy   seed   attn IoU   bg leakage   final loss")
    for r in results["runs"]:
        print(f"{r['strategy']:<10} {r['seed']:<6} {r['mean_iou']:<10.4f} "
              f"{r['mean_leakage']:<12.4f} {r['final_loss']:.4f}")
    print("\nsummary:")
    print(json.dumps(results["summary"], indent=1))


if __name__ == "__main__":
    main()
