import math

import numpy as np
import pytest

from seenet import (
    BranchOutputs,
    ModelConfig,
    SeeNet,
    Tensor,
    bce_multilabel_loss,
    compute_attention,
    infer_attention,
    infer_attention_maps,
    label_vector,
    load_checkpoint,
    save_checkpoint,
    total_loss,
)
from seenet.errors import ConfigError, ContractError
from seenet.imageops import hflip
from seenet.model import attention_score_maps

from conftest import tiny_config


# ---------------------------------------------------------------------------
# compute_attention
# ---------------------------------------------------------------------------

def test_compute_attention_single_channel(rng):
    maps = rng.standard_normal((4, 5, 5)).astype(np.float32)
    out = compute_attention(maps, [2])
    np.testing.assert_array_equal(out.values, np.maximum(maps[2], 0))


def test_compute_attention_disjoint_union():
    maps = np.zeros((2, 2, 4), dtype=np.float32)
    maps[0, :, :2] = 3.0
    maps[1, :, 2:] = 5.0
    out = compute_attention(maps, [0, 1])
    assert (out.values[:, :2] == 3.0).all() and (out.values[:, 2:] == 5.0).all()


def test_compute_attention_matches_pixel_loop(rng):
    maps = rng.standard_normal((5, 6, 6)).astype(np.float32)
    chans = [0, 3, 4]
    got = compute_attention(maps, chans).values
    want = np.zeros((6, 6), dtype=np.float32)
    for i in range(6):
        for j in range(6):
            want[i, j] = max(max(maps[c, i, j], 0.0) for c in chans)
    np.testing.assert_array_equal(got, want)


def test_compute_attention_errors(rng):
    maps = rng.standard_normal((3, 4, 4))
    with pytest.raises(ContractError, match="empty"):
        compute_attention(maps, [])
    with pytest.raises(ContractError, match="range"):
        compute_attention(maps, [3])


def test_label_vector():
    np.testing.assert_array_equal(label_vector([1, 3], 4), [1, 0, 1, 0])
    with pytest.raises(ContractError):
        label_vector([0], 4)
    with pytest.raises(ContractError):
        label_vector([5], 4)


# ---------------------------------------------------------------------------
# forward invariants
# ---------------------------------------------------------------------------

def test_forward_smoke_invariants(tiny_model, rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    out = tiny_model.forward_train(img, [1, 2])
    for logits in (out.logits_base, out.logits_erased, out.logits_background):
        assert np.isfinite(logits.data).all()
    zones = [(out.ternary == v).sum() for v in (-1, 0, 1)]
    assert sum(zones) == out.ternary.size


def test_forward_erasing_invariants(tiny_model, rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    out = tiny_model.forward_train(img, [1])
    erased = out.erased_input.data
    # attention zone is erased
    assert (erased[:, out.ternary == 0] == 0).all()
    # background zone is sign-reversed, so never positive
    assert (erased[:, out.ternary == -1] <= 0).all()
    # background branch sees nothing outside its background zone
    bg_in = out.background_input.data
    assert (bg_in[:, out.background_mask == 0] == 0).all()


def test_forward_all_zero_attention_path(rng):
    # zero the base-branch class conv so the attention map is identically 0:
    # the whole image becomes background (erase mask -1, bg mask 1)
    model = SeeNet(tiny_config(), seed=3)
    model._params["base_cls_w"].data[:] = 0
    model._params["base_cls_b"].data[:] = -1.0
    img = rng.random((3, 16, 16)).astype(np.float32)
    out = model.forward_train(img, [1])
    assert (out.attn_base == 0).all()
    assert (out.ternary == -1).all()
    assert (out.background_mask == 1).all()
    feats_relu = np.maximum(model.backbone_forward(Tensor(img)).data, 0)
    np.testing.assert_array_equal(out.erased_input.data, -feats_relu)
    np.testing.assert_array_equal(out.background_input.data, feats_relu)


def test_forward_warmup_masks(tiny_model, rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    out = tiny_model.forward_train(img, [1], warmup=True)
    assert (out.erase_mask == 1).all()
    assert (out.background_mask == 0).all()
    assert (out.background_input.data == 0).all()


def test_forward_batch_matches_single(tiny_model, rng):
    imgs = rng.random((3, 3, 16, 16)).astype(np.float32)
    labels = [[1], [2, 3], [1, 3]]
    batch = tiny_model.forward_train(imgs, labels)
    for i in range(3):
        single = tiny_model.forward_train(imgs[i], labels[i])
        np.testing.assert_allclose(
            batch.logits_base.data[i], single.logits_base.data, atol=2e-5
        )
        np.testing.assert_array_equal(batch.ternary[i], single.ternary)


def test_strategies_differ_only_in_mask_postprocessing(rng):
    # same weights, same input: the base branch and the ternary zones are
    # identical across strategies; only the branch masks change, exactly as
    # the documented transforms prescribe
    from seenet.masks import apply_strategy
    from dataclasses import replace

    img = rng.random((3, 16, 16)).astype(np.float32)
    outs = {}
    for strategy in ("seenet", "zeroing", "acol"):
        model = SeeNet(replace(tiny_config(), strategy=strategy), seed=4)
        outs[strategy] = model.forward_train(img, [1, 2])
    ref = outs["seenet"]
    for strategy, out in outs.items():
        np.testing.assert_array_equal(out.logits_base.data, ref.logits_base.data)
        np.testing.assert_array_equal(out.ternary, ref.ternary)
        np.testing.assert_array_equal(out.erase_mask, apply_strategy(ref.ternary, strategy))
    np.testing.assert_array_equal(outs["zeroing"].background_mask, ref.background_mask)
    assert (outs["acol"].background_mask == 0).all()


def test_forward_determinism(rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    m1 = SeeNet(tiny_config(), seed=11)
    m2 = SeeNet(tiny_config(), seed=11)
    for (n1, p1), (n2, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    o1 = m1.forward_train(img, [1, 2])
    o2 = m2.forward_train(img, [1, 2])
    assert o1.logits_base.data.tobytes() == o2.logits_base.data.tobytes()
    assert o1.logits_erased.data.tobytes() == o2.logits_erased.data.tobytes()
    assert o1.ternary.tobytes() == o2.ternary.tobytes()


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _zeroed_model() -> SeeNet:
    model = SeeNet(tiny_config(num_classes=2), seed=0)
    for _, p in model.named_parameters():
        p.data[:] = 0
    return model


def test_total_loss_at_zero_logits(rng):
    # every branch outputs zero logits, so each mean BCE term is ln 2
    model = _zeroed_model()
    img = rng.random((3, 16, 16)).astype(np.float32)
    out = model.forward_train(img, [1])
    loss = total_loss(out, label_vector([1], 2))
    assert abs(float(loss.data) - 3 * math.log(2)) < 1e-6


def test_total_loss_confident_logits():
    t = np.array([1.0, 0.0], dtype=np.float32)
    big = Tensor(np.array([30.0, -30.0], dtype=np.float32))
    anti = Tensor(np.array([-30.0, -30.0], dtype=np.float32))
    out = BranchOutputs(
        logits_base=big, logits_erased=big, logits_background=anti,
        attn_base=np.zeros((2, 2)), attn_erased=np.zeros((2, 2)),
        ternary=np.zeros((2, 2), dtype=np.int8),
        background_mask=np.zeros((2, 2), dtype=np.int8),
        erase_mask=np.zeros((2, 2), dtype=np.int8),
        erased_input=big, background_input=big,
        maps_base=big, maps_erased=big,
    )
    assert float(total_loss(out, t).data) < 1e-8


def test_total_loss_decomposition(tiny_model, rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    target = label_vector([1, 3], 3)
    out = tiny_model.forward_train(img, [1, 3])
    combined = float(total_loss(out, target).data)
    parts = (
        float(bce_multilabel_loss(out.logits_base, target).data)
        + float(bce_multilabel_loss(out.logits_erased, target).data)
        + float(bce_multilabel_loss(out.logits_background, np.zeros_like(target)).data)
    )
    assert combined == pytest.approx(parts, abs=1e-7)


def test_stop_gradient_through_masks(rng):
    # scaling the attention map before thresholding must not change any
    # parameter gradient: thresholds are max-relative and masks carry no grad
    img = rng.random((3, 16, 16)).astype(np.float32)
    target = label_vector([2], 3)
    grads = {}
    for scale in (1.0, 0.5, 2.0):
        model = SeeNet(tiny_config(), seed=5)
        out = model.forward_train(img, [2], attention_scale=scale)
        total_loss(out, target).backward()
        grads[scale] = [p.grad.copy() for p in model.parameters()]
    for scale in (0.5, 2.0):
        for g_ref, g in zip(grads[1.0], grads[scale]):
            np.testing.assert_array_equal(g_ref, g)


def test_backbone_gradient_accumulates_across_branches(rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    target = label_vector([1], 3)
    zeros = np.zeros_like(target)

    def backbone_grads(which):
        model = SeeNet(tiny_config(), seed=9)
        out = model.forward_train(img, [1])
        losses = {
            "base": lambda: bce_multilabel_loss(out.logits_base, target),
            "erased": lambda: bce_multilabel_loss(out.logits_erased, target),
            "background": lambda: bce_multilabel_loss(out.logits_background, zeros),
        }
        if which == "all":
            total_loss(out, target).backward()
        else:
            losses[which]().backward()
        return {
            n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for n, p in model.named_parameters()
            if n.startswith("backbone")
        }

    combined = backbone_grads("all")
    partial = [backbone_grads(b) for b in ("base", "erased", "background")]
    for name in combined:
        summed = sum(p[name] for p in partial)
        np.testing.assert_allclose(combined[name], summed, atol=1e-5)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def test_infer_output_range(tiny_model, rng):
    img = rng.random((3, 20, 20)).astype(np.float32)
    out = infer_attention(tiny_model, img, [1, 2], input_side=16)
    assert out.values.shape == (20, 20)
    assert out.values.min() >= 0.0 and out.values.max() <= 1.0


def test_infer_symmetric_image_gives_symmetric_attention(rng):
    # stride-1 model with horizontally symmetrized kernels is flip
    # equivariant, so a symmetric input must give a symmetric final map
    cfg = tiny_config(backbone_channels=(4, 4), backbone_strides=(1, 1))
    model = SeeNet(cfg, seed=2)
    for name, p in model.named_parameters():
        if name.endswith("_w"):
            p.data = ((p.data + p.data[..., ::-1]) / 2).astype(np.float32)
    half = rng.random((3, 12, 6)).astype(np.float32)
    img = np.concatenate([half, half[..., ::-1]], axis=2)
    out = infer_attention(model, img, [1], input_side=12)
    np.testing.assert_allclose(out.values, out.values[:, ::-1], atol=1e-5)


def test_infer_equals_recomputed_constituents(tiny_model, rng):
    # the fused map must equal what the constituent forward passes give
    from seenet.masks import flip_fuse, fuse_attention, normalize_map
    from seenet.imageops import resize_bilinear

    img = rng.random((3, 16, 16)).astype(np.float32)
    labels = [1, 3]
    side = 16
    got = infer_attention(tiny_model, img, labels, input_side=side)

    def fused(image):
        maps_a, maps_b = attention_score_maps(tiny_model, image, labels)
        return fuse_attention(
            normalize_map(compute_attention(maps_a, [0, 2])),
            normalize_map(compute_attention(maps_b, [0, 2])),
        )

    up = fused(img)
    down = fused(hflip(img))
    want = flip_fuse(up, type(up)(hflip(down.values), normalized=True)).values
    want = np.clip(resize_bilinear(want, 16, 16), 0, 1)
    np.testing.assert_allclose(got.values, want, atol=1e-6)


def test_infer_per_class_maps(tiny_model, rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    final, per_class = infer_attention_maps(tiny_model, img, [1, 3], input_side=16)
    assert sorted(per_class) == [1, 3]
    for amap in per_class.values():
        assert amap.shape == (16, 16)
        assert amap.min() >= 0 and amap.max() <= 1.0


def test_infer_errors(tiny_model):
    with pytest.raises(ContractError, match="zero-area"):
        infer_attention(tiny_model, np.zeros((3, 0, 4), dtype=np.float32), [1])
    with pytest.raises(ContractError, match="label"):
        infer_attention(tiny_model, np.zeros((3, 8, 8), dtype=np.float32), [])


# ---------------------------------------------------------------------------
# config validation and checkpoints
# ---------------------------------------------------------------------------

def test_model_config_validation():
    with pytest.raises(ConfigError):
        SeeNet(tiny_config(num_classes=0))
    with pytest.raises(ConfigError):
        SeeNet(tiny_config(backbone_strides=(1,)))
    with pytest.raises(ConfigError):
        SeeNet(tiny_config(strategy="bogus"))
    with pytest.raises(ConfigError):
        SeeNet(tiny_config(threshold_high=0.05, threshold_low=0.7))


def test_checkpoint_roundtrip(tmp_path, tiny_model, rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    path = tmp_path / "model.bin"
    save_checkpoint(path, tiny_model, iteration=42, seed=7)
    restored, header = load_checkpoint(path)
    assert header["iteration"] == 42 and header["seed"] == 7
    assert restored.config == tiny_model.config
    for (n1, p1), (n2, p2) in zip(
        tiny_model.named_parameters(), restored.named_parameters()
    ):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    a = infer_attention(tiny_model, img, [1], input_side=16)
    b = infer_attention(restored, img, [1], input_side=16)
    np.testing.assert_array_equal(a.values, b.values)
