"""Command-line entry point.

Subcommands cover the whole pipeline: ``gen-data`` writes a synthetic
dataset, ``train`` fits the three-branch attention network (with the
strategy ablation switch), ``attend`` exports fused attention maps,
``proxy-gt`` combines them with saliency into proxy segmentation labels,
``eval`` scores label maps by mIoU, and ``gradcheck`` runs the
finite-difference self-test. All commands with --seed are bit-reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import DataIOError, SeenetError
from .gradcheck import TOLERANCE, gradient_check_suite
from .masks import STRATEGIES
from .metrics import ConfusionMatrix, confusion_accumulate, miou
from .model import ModelConfig, SeeNet, infer_attention_maps, load_checkpoint
from .pngio import read_indexed, write_gray, write_indexed
from .proxy import generate_proxy_gt, load_saliency
from .synth import MAX_CLASSES, SynthDataset, gen_dataset
from .tensor import load_tensor, save_tensor
from .train import TrainConfig, train


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seenet",
        description="Self-erasing attention: data, training, inference, proxy labels, eval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--classes", type=int, default=6, help="number of classes (2..%d)" % MAX_CLASSES)
    p.add_argument("--side", type=int, default=64, help="square image side in pixels (>= 32)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--saliency-noise", type=float, default=0.05, help="noise amplitude in [0, 0.5]")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data, validate=validate_gen_data)

    p = sub.add_parser("train", help="train the three-branch attention network")
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True, help="output directory (log + checkpoint)")
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-drop-at", type=int, default=1800,
                   help="iteration after which lr is divided by 10")
    p.add_argument("--weight-decay", type=float, default=2e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--warmup", type=int, default=500,
                   help="iterations with erasing disabled while the base attention forms")
    p.add_argument("--delta-h", type=float, default=0.7,
                   help="attention-zone threshold as a fraction of the map maximum")
    p.add_argument("--delta-l", type=float, default=0.05,
                   help="background-zone threshold as a fraction of the map maximum")
    p.add_argument("--strategy", choices=STRATEGIES, default="seenet",
                   help="acol: erase-only; zeroing: erase + zeroed background; "
                        "seenet: erase + reversed background + background branch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric-every", type=int, default=0,
                   help="log attention quality every N iterations (0 = off)")
    p.add_argument("--backbone-channels", type=_csv_ints, default=(16, 32, 64, 64))
    p.add_argument("--backbone-strides", type=_csv_ints, default=(1, 2, 2, 1))
    p.add_argument("--branch-channels", type=int, default=64)
    p.add_argument("--branch-depth", type=int, default=3)
    p.set_defaults(func=cmd_train, validate=validate_train)

    p = sub.add_parser("attend", help="export fused attention maps for a dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint from train")
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--side", type=int, default=224, help="inference input side")
    p.add_argument("--limit", type=int, default=0, help="only the first N samples (0 = all)")
    p.set_defaults(func=cmd_attend, validate=validate_attend)

    p = sub.add_parser("proxy-gt", help="build proxy labels from saliency + attention")
    p.add_argument("--saliency", required=True, help="directory of saliency maps (png/setn)")
    p.add_argument("--attention", required=True,
                   help="directory of per-class attention tensors ({id}_cls{c}.setn)")
    p.add_argument("--labels", required=True,
                   help="JSON label manifest: {id: [class ids]} or a dataset manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--w", type=float, default=1.0, help="attention weight in the harmonic mean")
    p.add_argument("--dump-q", action="store_true",
                   help="also write the per-class probability stack per image")
    p.set_defaults(func=cmd_proxy_gt, validate=validate_proxy_gt)

    p = sub.add_parser("eval", help="mIoU of predicted label maps against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted label PNGs")
    p.add_argument("--gt", required=True, help="directory of ground-truth label PNGs")
    p.add_argument("--classes", type=int, required=True, help="number of object classes M")
    p.add_argument("--ignore", type=int, default=255, help="ignored ground-truth label")
    p.add_argument("--out", default=None, help="write the JSON report here as well")
    p.set_defaults(func=cmd_eval, validate=validate_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--out", default=None, help="write the JSON report here as well")
    p.set_defaults(func=cmd_gradcheck, validate=validate_gradcheck)
    return parser


# ---------------------------------------------------------------------------
# per-command flag validation (argument errors exit with status 2)
# ---------------------------------------------------------------------------

def validate_gen_data(args, parser):
    if args.n < 1:
        parser.error("--n must be >= 1")
    if not 2 <= args.classes <= MAX_CLASSES:
        parser.error(f"--classes must lie in 2..{MAX_CLASSES}")
    if args.side < 32:
        parser.error("--side must be >= 32")
    if not 0.0 <= args.saliency_noise <= 0.5:
        parser.error("--saliency-noise must lie in [0, 0.5]")


def validate_train(args, parser):
    if args.iters < 1:
        parser.error("--iters must be >= 1")
    if args.batch < 1:
        parser.error("--batch must be >= 1")
    if args.lr < 0:
        parser.error("--lr must be >= 0")
    if args.weight_decay < 0:
        parser.error("--weight-decay must be >= 0")
    if not 0.0 <= args.momentum < 1.0:
        parser.error("--momentum must lie in [0, 1)")
    if args.warmup < 0:
        parser.error("--warmup must be >= 0")
    if args.lr_drop_at < 0:
        parser.error("--lr-drop-at must be >= 0")
    if not 0.0 <= args.delta_l < args.delta_h <= 1.0:
        parser.error("--delta-l and --delta-h must satisfy 0 <= delta-l < delta-h <= 1")
    if len(args.backbone_channels) != len(args.backbone_strides):
        parser.error("--backbone-channels and --backbone-strides must have equal length")
    if args.branch_channels < 1 or args.branch_depth < 1:
        parser.error("--branch-channels and --branch-depth must be >= 1")
    if args.metric_every < 0:
        parser.error("--metric-every must be >= 0")


def validate_attend(args, parser):
    if args.side < 1:
        parser.error("--side must be >= 1")
    if args.limit < 0:
        parser.error("--limit must be >= 0")


def validate_proxy_gt(args, parser):
    if args.w <= 0:
        parser.error("--w must be > 0")


def validate_eval(args, parser):
    if args.classes < 1:
        parser.error("--classes must be >= 1")
    if not 0 <= args.ignore <= 255:
        parser.error("--ignore must lie in 0..255")


def validate_gradcheck(args, parser):
    if args.rounds < 1:
        parser.error("--rounds must be >= 1")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    manifest = gen_dataset(
        n=args.n,
        num_classes=args.classes,
        image_side=args.side,
        seed=args.seed,
        out_dir=args.out,
        saliency_noise=args.saliency_noise,
    )
    print(json.dumps({"command": "gen-data", "samples": len(manifest["samples"]),
                      "out": args.out}))
    return 0


def cmd_train(args) -> int:
    dataset = SynthDataset.load(args.data)
    model_cfg = ModelConfig(
        num_classes=dataset.num_classes,
        backbone_channels=args.backbone_channels,
        backbone_strides=args.backbone_strides,
        branch_channels=args.branch_channels,
        branch_depth=args.branch_depth,
        threshold_high=args.delta_h,
        threshold_low=args.delta_l,
        strategy=args.strategy,
    )
    model = SeeNet(model_cfg, seed=args.seed)
    cfg = TrainConfig(
        iters=args.iters,
        batch_size=args.batch,
        lr=args.lr,
        lr_drop_at=args.lr_drop_at,
        weight_decay=args.weight_decay,
        momentum=args.momentum,
        warmup_iters=args.warmup,
        seed=args.seed,
        metric_every=args.metric_every,
    )
    records = train(model, dataset, cfg, out_dir=args.out)
    losses = [r["loss"] for r in records if "loss" in r]
    print(json.dumps({
        "command": "train",
        "iters": args.iters,
        "strategy": args.strategy,
        "first_loss": losses[0],
        "final_loss": losses[-1],
        "checkpoint": os.path.join(args.out, "checkpoint.bin"),
    }))
    return 0


def cmd_attend(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    dataset = SynthDataset.load(args.data)
    os.makedirs(args.out, exist_ok=True)
    count = len(dataset) if args.limit == 0 else min(args.limit, len(dataset))
    labels_index = {}
    for i in range(count):
        sid = dataset.ids[i]
        labels = dataset.label_sets[i]
        final, per_class = infer_attention_maps(
            model, dataset.images[i], labels, input_side=args.side
        )
        write_gray(os.path.join(args.out, f"{sid}.png"), final.values)
        save_tensor(os.path.join(args.out, f"{sid}.setn"), final.values)
        for c, amap in per_class.items():
            save_tensor(os.path.join(args.out, f"{sid}_cls{c}.setn"), amap)
        labels_index[sid] = list(labels)
    with open(os.path.join(args.out, "labels.json"), "w") as fh:
        json.dump(labels_index, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(json.dumps({"command": "attend", "images": count, "out": args.out}))
    return 0


def _read_labels_file(path) -> dict[str, list[int]]:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataIOError(f"cannot read labels file {path}: {exc}") from exc
    if isinstance(data, dict) and "samples" in data:
        return {s["id"]: list(s["labels"]) for s in data["samples"]}
    if not isinstance(data, dict):
        raise DataIOError(f"labels file {path} must map image ids to class lists")
    return {str(k): [int(c) for c in v] for k, v in data.items()}


def cmd_proxy_gt(args) -> int:
    labels_by_id = _read_labels_file(args.labels)
    os.makedirs(args.out, exist_ok=True)
    produced = 0
    for sid in sorted(labels_by_id):
        labels = labels_by_id[sid]
        sal_path = os.path.join(args.saliency, f"{sid}.png")
        if not os.path.exists(sal_path):
            sal_path = os.path.join(args.saliency, f"{sid}.setn")
        saliency = load_saliency(sal_path)
        attention = {}
        for c in labels:
            attention[c] = load_tensor(os.path.join(args.attention, f"{sid}_cls{c}.setn"))
        if args.dump_q:
            proxy, q = generate_proxy_gt(saliency, attention, labels, w=args.w, return_q=True)
            save_tensor(os.path.join(args.out, f"{sid}_q.setn"), q)
        else:
            proxy = generate_proxy_gt(saliency, attention, labels, w=args.w)
        write_indexed(os.path.join(args.out, f"{sid}.png"), proxy.values)
        with open(os.path.join(args.out, f"{sid}.u8"), "wb") as fh:
            fh.write(proxy.values.tobytes())
        produced += 1
    print(json.dumps({"command": "proxy-gt", "images": produced, "out": args.out}))
    return 0


def cmd_eval(args) -> int:
    pred_ids = {f[:-4] for f in os.listdir(args.pred) if f.endswith(".png")}
    gt_ids = {f[:-4] for f in os.listdir(args.gt) if f.endswith(".png")}
    common = sorted(pred_ids & gt_ids)
    if not common:
        raise DataIOError(
            f"no matching PNG stems between {args.pred} and {args.gt}"
        )
    cm = ConfusionMatrix.create(args.classes)
    for sid in common:
        pred = read_indexed(os.path.join(args.pred, f"{sid}.png"))
        gt = read_indexed(os.path.join(args.gt, f"{sid}.png"))
        confusion_accumulate(pred, gt, cm, ignore_label=args.ignore)
    per_class, mean = miou(cm)
    report = {
        "per_class_iou": per_class,
        "miou": mean,
        "pixels": cm.total_pixels,
        "images": len(common),
    }
    text = json.dumps(report, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    report = gradient_check_suite(rounds=args.rounds, seed=args.seed)
    report["tolerance"] = TOLERANCE
    report["ok"] = bool(report["max"] <= TOLERANCE)
    text = json.dumps(report, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0 if report["ok"] else 1


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.validate(args, parser)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except SeenetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
