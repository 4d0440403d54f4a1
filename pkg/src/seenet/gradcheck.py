"""Finite-difference verification suite for every differentiable operation.

All checks run in float64 so the central-difference oracle is sharper than
the float32 training path. Each round draws fresh random inputs; the suite
reports the worst relative error seen per operation.
"""

from __future__ import annotations

import numpy as np

from .model import ModelConfig, SeeNet, label_vector, total_loss
from .tensor import (
    Tensor,
    bce_multilabel_loss,
    c_relu,
    conv2d,
    finite_diff_check,
    global_avg_pool,
    tsum,
)

TOLERANCE = 1e-3


def _t(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def check_conv2d(rng, coords: int = 12) -> float:
    x = _t(rng, (2, 5, 5))
    w = _t(rng, (3, 2, 3, 3), scale=0.5)
    b = _t(rng, (3,), scale=0.1)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    worst = 0.0
    worst = max(worst, finite_diff_check(
        lambda t: tsum(conv2d(t, w, b, stride, pad)), x, max_coords=coords, rng=rng))
    worst = max(worst, finite_diff_check(
        lambda t: tsum(conv2d(x, t, b, stride, pad)), w, max_coords=coords, rng=rng))
    worst = max(worst, finite_diff_check(lambda t: tsum(conv2d(x, w, t, stride, pad)), b))
    return worst


def check_global_avg_pool(rng) -> float:
    x = _t(rng, (3, 4, 5))
    return finite_diff_check(lambda t: tsum(global_avg_pool(t)), x)


def check_bce(rng) -> float:
    z = _t(rng, (6,), scale=2.0)
    target = (rng.random(6) < 0.5).astype(np.float64)
    return finite_diff_check(lambda t: bce_multilabel_loss(t, target), z)


def check_c_relu(rng, coords: int = 16) -> float:
    worst = 0.0
    for mask_value in (-1, 0, 1):
        x = _t(rng, (2, 4, 4))
        mask = np.full((4, 4), mask_value, dtype=np.int8)
        worst = max(worst, finite_diff_check(
            lambda t: tsum(c_relu(t, mask)), x, max_coords=coords, rng=rng))
    x = _t(rng, (2, 4, 4))
    mixed = rng.integers(-1, 2, size=(4, 4)).astype(np.int8)
    return max(worst, finite_diff_check(
        lambda t: tsum(c_relu(t, mixed)), x, max_coords=coords, rng=rng))


def check_composition(rng, coords: int = 20) -> float:
    """conv2d -> c_relu -> global_avg_pool -> bce, checked through the input."""
    x = _t(rng, (2, 6, 6))
    w = _t(rng, (3, 2, 3, 3), scale=0.5)
    b = _t(rng, (3,), scale=0.1)
    mask = rng.integers(-1, 2, size=(6, 6)).astype(np.int8)
    target = (rng.random(3) < 0.5).astype(np.float64)

    def f(t):
        return bce_multilabel_loss(global_avg_pool(c_relu(conv2d(t, w, b, 1, 1), mask)), target)

    worst = finite_diff_check(f, x, max_coords=coords, rng=rng)
    return max(
        worst,
        finite_diff_check(
            lambda t: bce_multilabel_loss(
                global_avg_pool(c_relu(conv2d(x, t, b, 1, 1), mask)), target
            ),
            w,
            max_coords=coords,
            rng=rng,
        ),
    )


def _tiny_model(rng) -> tuple[SeeNet, np.ndarray, list[int], np.ndarray]:
    config = ModelConfig(
        num_classes=2,
        backbone_channels=(4, 6),
        backbone_strides=(1, 2),
        branch_channels=6,
        branch_depth=2,
    )
    model = SeeNet(config, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
    image = rng.random((3, 9, 9))
    labels = [1] if rng.random() < 0.5 else [1, 2]
    target = label_vector(labels, config.num_classes)
    return model, image, labels, target


def check_three_branch_loss(rng, coords_per_param: int = 3, params_per_round: int = 5) -> float:
    """Full training loss checked against finite differences through the
    model parameters: a random parameter subset each round, a random
    coordinate subset of each. Across many rounds this covers every tensor."""
    model, image, labels, target = _tiny_model(rng)

    def f(_):
        return total_loss(model.forward_train(image, labels), target)

    params = model.parameters()
    picks = rng.choice(len(params), size=min(params_per_round, len(params)), replace=False)
    worst = 0.0
    for i in picks:
        worst = max(worst, finite_diff_check(f, params[i], max_coords=coords_per_param, rng=rng))
    return worst


def gradient_check_suite(rounds: int = 100, seed: int = 0) -> dict[str, float]:
    """Run every check ``rounds`` times; returns the worst relative error
    per operation. All values should sit well below TOLERANCE (1e-3)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    checks = {
        "conv2d": check_conv2d,
        "global_avg_pool": check_global_avg_pool,
        "bce_multilabel_loss": check_bce,
        "c_relu": check_c_relu,
        "composition": check_composition,
        "three_branch_loss": check_three_branch_loss,
    }
    report = {name: 0.0 for name in checks}
    for _ in range(rounds):
        for name, fn in checks.items():
            report[name] = max(report[name], fn(rng))
    report["max"] = max(report.values())
    return report
