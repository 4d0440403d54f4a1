"""Deterministic synthetic dataset: colored shapes on textured backgrounds.

Each class is a distinct shape/color combination. Images carry 1-3 objects
drawn painter-style (later objects occlude earlier ones), object sizes mix
small shapes with occasional large ones covering close to half the image,
and every object is surrounded by a speckled halo in its own color. The halo
is background in the ground truth and in the saliency oracle, so attention
that drifts onto this class-correlated clutter is measurable.

Generation is reproducible: per-sample generators derive from (seed, index),
so samples can be produced in any order or in parallel.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from .errors import ConfigError, ContractError, DataIOError
from .imageops import gaussian_blur, resize_bilinear
from .pngio import write_gray, write_indexed, write_rgb

SHAPES = ("disc", "square", "triangle", "diamond")

COLORS = np.array(
    [
        [0.90, 0.15, 0.15],  # red
        [0.15, 0.80, 0.20],  # green
        [0.20, 0.35, 0.90],  # blue
        [0.95, 0.85, 0.10],  # yellow
        [0.85, 0.20, 0.80],  # magenta
    ],
    dtype=np.float32,
)

MAX_CLASSES = len(SHAPES) * len(COLORS)


@dataclass
class SaliencyMap:
    """Class-agnostic object prominence in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ContractError(f"saliency map must be 2-D, got {self.values.shape}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ContractError("saliency values must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray      # [3,H,W] float32 in [0,1]
    labels: tuple[int, ...]  # class ids present, each covering >= 1% of pixels
    gt_mask: np.ndarray    # [H,W] uint8, 0 = background
    saliency: SaliencyMap


def class_style(class_id: int) -> tuple[str, np.ndarray]:
    # shapes and colors cycle at coprime rates, so consecutive class ids get
    # distinct colors (color repeats only every len(COLORS) classes)
    shape = SHAPES[(class_id - 1) % len(SHAPES)]
    color = COLORS[(class_id - 1) % len(COLORS)]
    return shape, color


def _shape_mask(shape: str, cy: float, cx: float, area: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.ogrid[:h, :w]
    dy = yy - cy
    dx = xx - cx
    if shape == "disc":
        r = np.sqrt(area / np.pi)
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        half = np.sqrt(area) / 2.0
        return np.maximum(np.abs(dy), np.abs(dx)) <= half
    if shape == "diamond":
        half = np.sqrt(area / 2.0)
        return np.abs(dy) + np.abs(dx) <= half
    if shape == "triangle":
        half = np.sqrt(area / 2.0)
        return (dy >= -half) & (dy <= half) & (np.abs(dx) <= (dy + half) / 2.0)
    raise ConfigError(f"unknown shape {shape!r}")


def _value_noise(rng, h: int, w: int, cells: int, lo: float, hi: float) -> np.ndarray:
    coarse = rng.uniform(lo, hi, size=(3, cells, cells)).astype(np.float32)
    return resize_bilinear(coarse, h, w)


def _background(rng, side: int) -> np.ndarray:
    base = _value_noise(rng, side, side, max(2, side // 8), 0.15, 0.55)
    fine = rng.uniform(-0.05, 0.05, size=(3, side, side)).astype(np.float32)
    return np.clip(base + fine, 0.0, 1.0)


def synthetic_saliency(sample: SampleRecord, noise: float,
                       rng: np.random.Generator | None = None,
                       sigma: float | None = None) -> SaliencyMap:
    """Saliency oracle: the object-union mask, Gaussian-blurred with
    sigma = side/64 (overridable) and perturbed by seeded uniform noise of
    the given amplitude, clamped to [0, 1]."""
    if not 0.0 <= noise <= 0.5:
        raise ConfigError(f"saliency noise must lie in [0, 0.5], got {noise}")
    gt = sample.gt_mask
    side = gt.shape[0]
    if sigma is None:
        sigma = side / 64.0
    values = gaussian_blur((gt > 0).astype(np.float32), sigma)
    if noise > 0:
        if rng is None:
            rng = np.random.default_rng(np.random.SeedSequence([int(sample.id), 104729]))
        values = values + rng.uniform(-noise, noise, size=values.shape).astype(np.float32)
    return SaliencyMap(np.clip(values, 0.0, 1.0))


def make_sample(index: int, seed: int, num_classes: int, side: int,
                saliency_noise: float = 0.0) -> SampleRecord:
    """Generate one sample; fully determined by (seed, index)."""
    if not 2 <= num_classes <= MAX_CLASSES:
        raise ConfigError(f"num_classes must lie in 2..{MAX_CLASSES}, got {num_classes}")
    if side < 32:
        raise ConfigError(f"image_side must be >= 32, got {side}")
    min_pixels = 0.01 * side * side
    for attempt in range(200):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index, attempt]))
        image = _background(rng, side)
        gt = np.zeros((side, side), dtype=np.uint8)

        n_obj = int(rng.integers(1, 4))
        classes = rng.choice(num_classes, size=n_obj, replace=False) + 1
        specs = []
        for k, cls in enumerate(classes):
            large = k == 0 and rng.random() < 0.3
            if large:
                frac = rng.uniform(0.42, 0.62)
                cy = rng.uniform(0.40, 0.60) * side
                cx = rng.uniform(0.40, 0.60) * side
            else:
                frac = rng.uniform(0.03, 0.18)
                cy = rng.uniform(0.15, 0.85) * side
                cx = rng.uniform(0.15, 0.85) * side
            shape, color = class_style(int(cls))
            mask = _shape_mask(shape, cy, cx, frac * side * side, side, side)
            shading = 0.82 + 0.3 * rng.random((side, side)).astype(np.float32)
            image = np.where(mask, np.clip(color[:, None, None] * shading, 0, 1), image)
            gt[mask] = cls
            specs.append((int(cls), mask, color))

        if any((gt == cls).sum() < min_pixels for cls, _, _ in specs):
            continue

        # Class-correlated background clutter, the failure mode that pure
        # erasing is prone to mine. Two kinds, neither labeled in gt nor
        # visible to the saliency oracle:
        # speckles of the object color in a halo ring around the object,
        union = gt > 0
        ring_width = max(2, side // 12)
        for cls, mask, color in specs:
            ring = maximum_filter(mask, size=2 * ring_width + 1) & ~union
            speckle = (rng.random((side, side)) < 0.45) & ring
            image = np.where(speckle, 0.3 * image + 0.7 * color[:, None, None], image)
        # and small blended "echo" copies of the shape scattered in the far
        # background (kept clear of the objects so they sit in regions the
        # initial attention scores low)
        near_objects = maximum_filter(union, size=2 * (side // 6) + 1)
        for cls, mask, color in specs:
            shape, _ = class_style(cls)
            for _ in range(int(rng.integers(3, 7))):
                frac = rng.uniform(0.008, 0.025)
                ey = rng.uniform(0.08, 0.92) * side
                ex = rng.uniform(0.08, 0.92) * side
                echo = _shape_mask(shape, ey, ex, frac * side * side, side, side)
                echo &= ~near_objects
                blend = rng.uniform(0.6, 0.85)
                image = np.where(echo, blend * color[:, None, None] + (1 - blend) * image,
                                 image)

        labels = tuple(sorted(int(c) for c in np.unique(gt) if c != 0))
        record = SampleRecord(
            id=f"{index:06d}",
            image=image.astype(np.float32),
            labels=labels,
            gt_mask=gt,
            saliency=SaliencyMap(np.zeros((side, side), dtype=np.float32)),
        )
        record.saliency = synthetic_saliency(record, saliency_noise, rng=rng)
        return record
    raise ContractError(f"could not draw a valid sample for index {index} after 200 tries")


def iter_samples(n: int, num_classes: int, side: int, seed: int,
                 saliency_noise: float = 0.0):
    for index in range(n):
        yield make_sample(index, seed, num_classes, side, saliency_noise)


def gen_dataset(n: int, num_classes: int, image_side: int, seed: int, out_dir,
                saliency_noise: float = 0.05) -> dict:
    """Write n samples (image, indexed gt, saliency PNGs) plus a manifest
    JSON; returns the manifest. Regenerating with the same arguments yields
    byte-identical trees."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    out_dir = os.fspath(out_dir)
    try:
        for sub in ("images", "gt", "saliency"):
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create output directory {out_dir}: {exc}") from exc

    samples = []
    for rec in iter_samples(n, num_classes, image_side, seed, saliency_noise):
        paths = {
            "image": f"images/{rec.id}.png",
            "gt": f"gt/{rec.id}.png",
            "saliency": f"saliency/{rec.id}.png",
        }
        write_rgb(os.path.join(out_dir, paths["image"]), rec.image)
        write_indexed(os.path.join(out_dir, paths["gt"]), rec.gt_mask)
        write_gray(os.path.join(out_dir, paths["saliency"]), rec.saliency.values)
        samples.append({"id": rec.id, "labels": list(rec.labels), **paths})

    manifest = {
        "num_classes": num_classes,
        "seed": seed,
        "image_side": image_side,
        "saliency_noise": saliency_noise,
        "samples": samples,
    }
    try:
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise DataIOError(f"cannot write manifest in {out_dir}: {exc}") from exc
    return manifest


class SynthDataset:
    """In-memory view of a generated dataset directory."""

    def __init__(self, ids, images, label_sets, gt, saliency, num_classes, side):
        self.ids = ids
        self.images = images
        self.label_sets = label_sets
        self.gt = gt
        self.saliency = saliency
        self.num_classes = num_classes
        self.side = side

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def load(cls, manifest_path) -> "SynthDataset":
        from .pngio import read_gray, read_indexed, read_rgb

        manifest_path = os.fspath(manifest_path)
        try:
            with open(manifest_path) as fh:
                manifest = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataIOError(f"cannot read manifest {manifest_path}: {exc}") from exc
        root = os.path.dirname(manifest_path)
        ids, images, label_sets, gts, sals = [], [], [], [], []
        for s in manifest["samples"]:
            ids.append(s["id"])
            images.append(read_rgb(os.path.join(root, s["image"])))
            label_sets.append(tuple(s["labels"]))
            gts.append(read_indexed(os.path.join(root, s["gt"])))
            sals.append(read_gray(os.path.join(root, s["saliency"])).astype(np.float32) / 255.0)
        return cls(
            ids=ids,
            images=images,
            label_sets=label_sets,
            gt=gts,
            saliency=sals,
            num_classes=manifest["num_classes"],
            side=manifest["image_side"],
        )

    @classmethod
    def from_samples(cls, records: list[SampleRecord], num_classes: int) -> "SynthDataset":
        side = records[0].gt_mask.shape[0] if records else 0
        return cls(
            ids=[r.id for r in records],
            images=[r.image for r in records],
            label_sets=[r.labels for r in records],
            gt=[r.gt_mask for r in records],
            saliency=[r.saliency.values for r in records],
            num_classes=num_classes,
            side=side,
        )
