"""Three-branch self-erasing attention network.

A shared convolutional backbone feeds three classifier branches. The base
branch produces an initial attention map; its ternary zone mask drives a
conditioned rectifier in front of the erased branch (attention erased,
background reversed), while the background branch sees only the background
zone and is trained toward the all-zero label vector. Masks are rebuilt from
the current base attention on every forward pass and never carry gradients.

At test time the background branch is dropped: the final attention map is
the pointwise max of the normalized base and erased maps, fused again with
the map of the horizontally flipped input.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import masks as mk
from .errors import ConfigError, ContractError, DataIOError
from .imageops import hflip, resize_bilinear
from .tensor import (
    SGD,
    Tensor,
    add,
    bce_multilabel_loss,
    c_relu,
    conv2d,
    global_avg_pool,
    read_tensor,
    relu,
    write_tensor,
)

BRANCH_NAMES = ("base", "erased", "background")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and masking hyperparameters.

    The defaults are a desk-scale stand-in for a large pretrained backbone:
    four 3x3 conv blocks with two stride-2 downsamplings, then per-branch
    heads of ``branch_depth`` 3x3 convs, an ``num_classes``-channel 1x1 conv,
    and global average pooling into the logits.
    """

    num_classes: int
    in_channels: int = 3
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)
    backbone_strides: tuple[int, ...] = (1, 2, 2, 1)
    branch_channels: int = 64
    branch_depth: int = 3
    threshold_high: float = 0.7
    threshold_low: float = 0.05
    strategy: str = "seenet"

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise ConfigError("backbone_channels and backbone_strides lengths differ")
        if not self.backbone_channels:
            raise ConfigError("backbone must have at least one block")
        if self.branch_depth < 1:
            raise ConfigError("branch_depth must be >= 1")
        if self.strategy not in mk.STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not (0.0 <= self.threshold_low < self.threshold_high <= 1.0):
            raise ConfigError(
                "thresholds must satisfy 0 <= low < high <= 1, got "
                f"low={self.threshold_low}, high={self.threshold_high}"
            )


@dataclass
class BranchOutputs:
    """Everything one training forward produces.

    Attention maps and masks are plain arrays ([H,W] for a single sample,
    [N,H,W] for a batch); logits are graph tensors. ``erased_input`` and
    ``background_input`` are the actual rectifier outputs feeding the two
    masked branches, kept so invariants can be asserted on live values.
    """

    logits_base: Tensor
    logits_erased: Tensor
    logits_background: Tensor
    attn_base: np.ndarray
    attn_erased: np.ndarray
    ternary: np.ndarray
    background_mask: np.ndarray
    erase_mask: np.ndarray
    erased_input: Tensor
    background_input: Tensor
    maps_base: Tensor
    maps_erased: Tensor


def label_vector(labels, num_classes: int) -> np.ndarray:
    """Multi-hot target for a label set of class ids drawn from 1..M."""
    vec = np.zeros(num_classes, dtype=np.float32)
    for c in labels:
        if not 1 <= c <= num_classes:
            raise ContractError(f"class id {c} outside 1..{num_classes}")
        vec[c - 1] = 1.0
    return vec


def compute_attention(class_maps, channels) -> mk.AttentionMap:
    """Reduce per-class score maps to one attention map: pointwise max of
    the rectified maps of the given channels (0-based, one per class in the
    image). Returned un-normalized."""
    maps = class_maps.data if isinstance(class_maps, Tensor) else np.asarray(class_maps)
    if maps.ndim != 3:
        raise ContractError(f"compute_attention: expected [M,H,W] maps, got {maps.shape}")
    chans = sorted(set(int(c) for c in channels))
    if not chans:
        raise ContractError("compute_attention: empty channel set")
    if chans[0] < 0 or chans[-1] >= maps.shape[0]:
        raise ContractError(
            f"compute_attention: channel out of range 0..{maps.shape[0] - 1}: {chans}"
        )
    sel = np.maximum(maps[chans], 0)
    return mk.AttentionMap(sel.max(axis=0))


class SeeNet:
    """Shared backbone plus the base / erased / background branches."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        self._params: dict[str, Tensor] = {}
        self.backbone: list[tuple[Tensor, Tensor, int]] = []
        c_prev = config.in_channels
        for i, (c, s) in enumerate(zip(config.backbone_channels, config.backbone_strides)):
            w, b = self._conv_init(rng, f"backbone{i}", c, c_prev, 3)
            self.backbone.append((w, b, s))
            c_prev = c
        self.branches: dict[str, list[tuple[Tensor, Tensor, int, int]]] = {}
        for name in BRANCH_NAMES:
            layers = []
            cin = c_prev
            for i in range(config.branch_depth):
                w, b = self._conv_init(rng, f"{name}{i}", config.branch_channels, cin, 3)
                layers.append((w, b, 1, 1))
                cin = config.branch_channels
            w, b = self._conv_init(rng, f"{name}_cls", config.num_classes, cin, 1)
            layers.append((w, b, 1, 0))
            self.branches[name] = layers

    def _conv_init(self, rng, name: str, c_out: int, c_in: int, k: int):
        std = np.sqrt(2.0 / (c_in * k * k))
        w = Tensor(
            rng.standard_normal((c_out, c_in, k, k)) * std,
            requires_grad=True,
            dtype=self.dtype,
        )
        b = Tensor(np.zeros(c_out), requires_grad=True, dtype=self.dtype)
        self._params[f"{name}_w"] = w
        self._params[f"{name}_b"] = b
        return w, b

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    # -- forward pieces ----------------------------------------------------

    def backbone_forward(self, x: Tensor) -> Tensor:
        h = x
        for w, b, stride in self.backbone:
            h = relu(conv2d(h, w, b, stride=stride, pad=1))
        return h

    def branch_forward(self, name: str, feats: Tensor) -> tuple[Tensor, Tensor]:
        """Run one branch head; returns (logits, per-class score maps)."""
        h = feats
        layers = self.branches[name]
        for w, b, stride, pad in layers[:-1]:
            h = relu(conv2d(h, w, b, stride=stride, pad=pad))
        w, b, stride, pad = layers[-1]
        maps = conv2d(h, w, b, stride=stride, pad=pad)
        return global_avg_pool(maps), maps

    def forward_train(self, image, labels, warmup: bool = False,
                      attention_scale: float = 1.0) -> BranchOutputs:
        """Full three-branch training forward.

        ``image`` is [3,H,W] (with ``labels`` a collection of class ids in
        1..M) or a batch [N,3,H,W] (with ``labels`` a sequence of such
        collections). During warmup the erased branch sees raw features
        (mask of ones) and the background branch sees nothing (mask of
        zeros). ``attention_scale`` multiplies the base attention before
        thresholding; it exists to verify that masks, being built from
        max-relative cuts with gradients stopped, are insensitive to it.
        """
        cfg = self.config
        x = image if isinstance(image, Tensor) else Tensor(image, dtype=self.dtype)
        batched = x.data.ndim == 4
        if not batched and x.data.ndim != 3:
            raise ContractError(f"forward_train: image must be 3-D or 4-D, got {x.shape}")
        label_sets = list(labels) if batched else [labels]
        if batched and len(label_sets) != x.data.shape[0]:
            raise ContractError(
                f"forward_train: {len(label_sets)} label sets for batch of {x.data.shape[0]}"
            )

        feats = self.backbone_forward(x)
        logits_base, maps_base = self.branch_forward("base", feats)

        per_map = maps_base.data if batched else maps_base.data[None]
        attn = np.empty((per_map.shape[0],) + per_map.shape[2:], dtype=np.float32)
        for i, lset in enumerate(label_sets):
            chans = [c - 1 for c in lset]
            attn[i] = compute_attention(per_map[i], chans).values
        if attention_scale != 1.0:
            attn = attn * np.float32(attention_scale)

        ternary = mk._ternary_values(attn, cfg.threshold_high, cfg.threshold_low)
        if warmup:
            erase = np.ones_like(ternary)
            bg = np.zeros_like(ternary)
        else:
            erase = mk.apply_strategy(ternary, cfg.strategy)
            if cfg.strategy == "acol":
                # erase-only baseline: the background branch is switched off
                bg = np.zeros_like(ternary)
            else:
                bg = mk._background_values(attn, cfg.threshold_high, cfg.threshold_low)

        if not batched:
            attn, ternary, erase, bg = attn[0], ternary[0], erase[0], bg[0]

        erased_input = c_relu(feats, erase)
        logits_erased, maps_erased = self.branch_forward("erased", erased_input)
        background_input = c_relu(feats, bg)
        logits_background, _ = self.branch_forward("background", background_input)

        per_map_b = maps_erased.data if batched else maps_erased.data[None]
        attn_b = np.empty_like(attn if batched else attn[None])
        for i, lset in enumerate(label_sets):
            chans = [c - 1 for c in lset]
            attn_b[i] = compute_attention(per_map_b[i], chans).values
        if not batched:
            attn_b = attn_b[0]

        return BranchOutputs(
            logits_base=logits_base,
            logits_erased=logits_erased,
            logits_background=logits_background,
            attn_base=attn,
            attn_erased=attn_b,
            ternary=ternary,
            background_mask=bg,
            erase_mask=erase,
            erased_input=erased_input,
            background_input=background_input,
            maps_base=maps_base,
            maps_erased=maps_erased,
        )


def total_loss(out: BranchOutputs, target) -> Tensor:
    """Sum of the three branch losses: base and erased branches against the
    image labels, background branch against the all-zero vector."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    zeros = np.zeros_like(t)
    loss = add(
        bce_multilabel_loss(out.logits_base, t),
        bce_multilabel_loss(out.logits_erased, t),
    )
    return add(loss, bce_multilabel_loss(out.logits_background, zeros))


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def attention_score_maps(model: SeeNet, image, labels) -> tuple[np.ndarray, np.ndarray]:
    """Single-image forward through the base and erased branches only
    (the background branch plays no part at test time). Returns the
    per-class score maps of both branches as arrays [M,h,w]."""
    cfg = model.config
    x = image if isinstance(image, Tensor) else Tensor(image, dtype=model.dtype)
    if x.data.ndim != 3:
        raise ContractError(f"attention_score_maps: expected [3,H,W] image, got {x.shape}")
    feats = model.backbone_forward(x)
    _, maps_base = model.branch_forward("base", feats)
    chans = [c - 1 for c in labels]
    attn = compute_attention(maps_base.data, chans).values
    ternary = mk._ternary_values(attn, cfg.threshold_high, cfg.threshold_low)
    erase = mk.apply_strategy(ternary, cfg.strategy)
    _, maps_erased = model.branch_forward("erased", c_relu(feats, erase))
    return maps_base.data, maps_erased.data


def _fused_maps(model: SeeNet, image, labels):
    maps_a, maps_b = attention_score_maps(model, image, labels)
    chans = [c - 1 for c in labels]
    fused = mk.fuse_attention(
        mk.normalize_map(compute_attention(maps_a, chans)),
        mk.normalize_map(compute_attention(maps_b, chans)),
    ).values
    per_class = {}
    for c in labels:
        per_class[int(c)] = mk.fuse_attention(
            mk.normalize_map(np.maximum(maps_a[c - 1], 0)),
            mk.normalize_map(np.maximum(maps_b[c - 1], 0)),
        ).values
    return fused, per_class


def infer_attention_maps(model: SeeNet, image, labels, input_side: int = 224):
    """Test-time attention for one image.

    The image is resized to ``input_side`` squared, run upright and
    horizontally flipped, and the fused maps of both orientations are merged
    by pointwise max, then resized back to the original resolution. Returns
    (final AttentionMap, {class id: [H,W] per-class map}); all values lie in
    [0, 1].
    """
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    if img.ndim != 3:
        raise ContractError(f"infer_attention: expected [3,H,W] image, got {img.shape}")
    h, w = img.shape[1:]
    if h < 1 or w < 1:
        raise ContractError("infer_attention: zero-area image")
    labels = sorted(set(int(c) for c in labels))
    if not labels:
        raise ContractError("infer_attention: empty label set")
    if input_side < 1:
        raise ContractError(f"infer_attention: input_side must be >= 1, got {input_side}")

    resized = resize_bilinear(img, input_side, input_side)
    fused, per_class = _fused_maps(model, resized, labels)
    fused_f, per_class_f = _fused_maps(model, hflip(resized), labels)

    final = mk.flip_fuse(
        mk.AttentionMap(fused, normalized=True),
        mk.AttentionMap(hflip(fused_f), normalized=True),
    ).values
    final = np.clip(resize_bilinear(final, h, w), 0.0, 1.0)
    out_class = {}
    for c in labels:
        merged = np.maximum(per_class[c], hflip(per_class_f[c]))
        out_class[c] = np.clip(resize_bilinear(merged, h, w), 0.0, 1.0)
    return mk.AttentionMap(final), out_class


def infer_attention(model: SeeNet, image, labels, input_side: int = 224) -> mk.AttentionMap:
    return infer_attention_maps(model, image, labels, input_side)[0]


# ---------------------------------------------------------------------------
# checkpoints: u32 header length, JSON header, then parameter tensors
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: SeeNet, iteration: int = 0, seed: int = 0) -> None:
    names = [n for n, _ in model.named_parameters()]
    header = {
        "format": 1,
        "config": asdict(model.config),
        "iteration": int(iteration),
        "seed": int(seed),
        "params": names,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for _, p in model.named_parameters():
                write_tensor(fh, p.data)
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[SeeNet, dict]:
    try:
        with open(path, "rb") as fh:
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            cfg_dict = dict(header["config"])
            cfg_dict["backbone_channels"] = tuple(cfg_dict["backbone_channels"])
            cfg_dict["backbone_strides"] = tuple(cfg_dict["backbone_strides"])
            config = ModelConfig(**cfg_dict)
            model = SeeNet(config, seed=header.get("seed", 0))
            params = dict(model.named_parameters())
            if header["params"] != list(params):
                raise DataIOError(f"checkpoint {path}: parameter list mismatch")
            for name in header["params"]:
                data = read_tensor(fh)
                if data.shape != params[name].data.shape:
                    raise DataIOError(
                        f"checkpoint {path}: shape mismatch for {name}: "
                        f"{data.shape} vs {params[name].data.shape}"
                    )
                params[name].data = data
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataIOError(f"malformed checkpoint {path}: {exc}") from exc
    return model, header
