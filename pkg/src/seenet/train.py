"""Training loop: batched SGD with a single step-decay of the learning rate.

One iteration draws a batch, runs the three-branch forward, sums the branch
losses, and applies one optimizer step. The erased/background masks are
forced to ones/zeros for the first ``warmup_iters`` iterations so both
branches train on raw features while the base attention becomes meaningful.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TrainingDiverged
from .metrics import attention_localization_score, background_leakage
from .model import SeeNet, infer_attention, label_vector, save_checkpoint, total_loss
from .tensor import SGD, save_tensor


@dataclass
class TrainConfig:
    iters: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    lr_drop_at: int = 1800
    lr_drop_factor: float = 0.1
    weight_decay: float = 2e-4
    momentum: float = 0.9
    warmup_iters: int = 500
    seed: int = 0
    metric_every: int = 0     # 0 disables periodic attention metrics
    metric_samples: int = 16
    tau: float = 0.5

    def validate(self) -> None:
        if self.iters < 1:
            raise ConfigError(f"iters must be >= 1, got {self.iters}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.warmup_iters < 0 or self.lr_drop_at < 0:
            raise ConfigError("warmup_iters and lr_drop_at must be >= 0")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")


def _dump_batch(out_dir, ids, images) -> str:
    path = os.path.join(out_dir, "diverged")
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "batch.json"), "w") as fh:
        json.dump({"ids": list(ids)}, fh)
    for sid, img in zip(ids, images):
        save_tensor(os.path.join(path, f"{sid}.setn"), img)
    return path


def train(model: SeeNet, dataset, config: TrainConfig, out_dir=None) -> list[dict]:
    """Run the configured number of iterations; returns the log records
    (one JSON-able dict per iteration, plus periodic metric records).

    With ``out_dir`` set, also writes ``train_log.jsonl`` and a final
    ``checkpoint.bin``. Aborts with TrainingDiverged on a non-finite loss,
    dumping the offending batch for inspection.
    """
    config.validate()
    if len(dataset) == 0:
        raise ConfigError("train: empty dataset")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    opt = SGD(
        model.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    n = len(dataset)
    targets = [label_vector(ls, model.config.num_classes) for ls in dataset.label_sets]

    order = rng.permutation(n)
    cursor = 0
    records: list[dict] = []
    for it in range(1, config.iters + 1):
        idx = []
        for _ in range(config.batch_size):
            if cursor == len(order):
                order = rng.permutation(n)
                cursor = 0
            idx.append(int(order[cursor]))
            cursor += 1

        images = np.stack([dataset.images[i] for i in idx])
        target = np.stack([targets[i] for i in idx])
        label_sets = [dataset.label_sets[i] for i in idx]

        opt.lr = config.lr * (config.lr_drop_factor if it > config.lr_drop_at else 1.0)
        out = model.forward_train(images, label_sets, warmup=it <= config.warmup_iters)
        loss = total_loss(out, target)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            ids = [dataset.ids[i] for i in idx]
            where = _dump_batch(out_dir, ids, images) if out_dir else "(no out_dir)"
            raise TrainingDiverged(
                f"non-finite loss {loss_val} at iteration {it}; "
                f"batch ids {ids}; dump at {where}"
            )
        loss.backward()
        opt.step()
        records.append({"iter": it, "loss": loss_val, "lr": opt.lr})

        if config.metric_every and it % config.metric_every == 0:
            records.append({"iter": it, **_attention_metrics(model, dataset, config)})

    if out_dir is not None:
        with open(os.path.join(out_dir, "train_log.jsonl"), "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        save_checkpoint(
            os.path.join(out_dir, "checkpoint.bin"), model,
            iteration=config.iters, seed=config.seed,
        )
    return records


def _attention_metrics(model: SeeNet, dataset, config: TrainConfig) -> dict:
    k = min(config.metric_samples, len(dataset))
    ious, leaks = [], []
    for i in range(k):
        final = infer_attention(
            model, dataset.images[i], dataset.label_sets[i], input_side=dataset.side
        )
        gt_fg = dataset.gt[i] > 0
        if gt_fg.any():
            _, _, iou = attention_localization_score(final, gt_fg, config.tau)
            ious.append(iou)
        leaks.append(background_leakage(final, ~gt_fg, config.tau))
    return {
        "attn_iou": float(np.mean(ious)) if ious else 0.0,
        "bg_leakage": float(np.mean(leaks)) if leaks else 0.0,
    }
