"""Proxy ground-truth generation from saliency and per-class attention.

For every pixel the background probability is 1 - D (D the normalized
saliency), each image-level class scores the harmonic mean of its attention
value and D, and the pixel label is the argmax. Ties between background and
a class resolve to the class; ties among classes resolve to the smallest
class id. The resulting label maps can supervise a segmentation network in
place of manual pixel annotations.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, ContractError, DataIOError
from .masks import AttentionMap, normalize_map
from .synth import SaliencyMap
from .tensor import load_tensor


@dataclass
class ProxyLabelMap:
    """Per-pixel class ids: 0 is background, everything else must come from
    the image's label set."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ContractError(f"proxy label map must be 2-D, got {self.values.shape}")
        if self.values.size and self.values.min() < 0:
            raise ContractError("proxy labels must be non-negative")
        self.values = self.values.astype(np.uint8, copy=False)

    @property
    def shape(self):
        return self.values.shape


def harmonic_mean(a: float, d: float, w: float = 1.0) -> float:
    """Weighted harmonic mean (w + 1) / (w/a + 1/d) of two values in [0, 1].

    Returns 0 when either argument is 0 (the continuous limit), so an
    attention-free or saliency-free pixel never wins against background.
    """
    if w <= 0:
        raise ConfigError(f"harmonic mean weight must be positive, got {w}")
    for name, v in (("a", a), ("d", d)):
        if not 0.0 <= v <= 1.0:
            raise ContractError(f"harmonic_mean: {name}={v} outside [0, 1]")
    if a == 0.0 or d == 0.0:
        return 0.0
    return (w + 1.0) / (w / a + 1.0 / d)


def _harmonic_array(a: np.ndarray, d: np.ndarray, w: float) -> np.ndarray:
    out = np.zeros(a.shape, dtype=np.float64)
    nz = (a > 0) & (d > 0)
    out[nz] = (w + 1.0) / (w / a[nz] + 1.0 / d[nz])
    return out


def generate_proxy_gt(saliency: SaliencyMap, attention: Mapping[int, AttentionMap],
                      labels, w: float = 1.0,
                      return_q: bool = False):
    """Combine saliency and per-class attention into a proxy label map.

    ``attention`` maps each class id in ``labels`` to its normalized
    attention map; all maps must share the saliency shape. With
    ``return_q`` the per-class probability stack Q is returned as well,
    ordered [background, then labels ascending].
    """
    if w <= 0:
        raise ConfigError(f"harmonic mean weight must be positive, got {w}")
    d = saliency.values if isinstance(saliency, SaliencyMap) else SaliencyMap(saliency).values
    label_list = sorted(set(int(c) for c in labels))
    if not label_list:
        raise ContractError("generate_proxy_gt: empty label set")
    if any(c < 1 for c in label_list):
        raise ContractError(f"generate_proxy_gt: class ids must be >= 1, got {label_list}")

    d64 = d.astype(np.float64)
    best = np.full(d.shape, -np.inf, dtype=np.float64)
    out = np.zeros(d.shape, dtype=np.uint8)
    q_rows = [1.0 - d64] if return_q else None
    for c in label_list:
        if c not in attention:
            raise ContractError(f"generate_proxy_gt: missing attention map for class {c}")
        amap = attention[c]
        a = amap.values if isinstance(amap, AttentionMap) else np.asarray(amap)
        if a.shape != d.shape:
            raise ContractError(
                f"generate_proxy_gt: attention shape {a.shape} for class {c} "
                f"!= saliency shape {d.shape}"
            )
        if a.size and (a.min() < 0 or a.max() > 1):
            raise ContractError(f"generate_proxy_gt: attention for class {c} not in [0, 1]")
        q = _harmonic_array(a.astype(np.float64), d64, w)
        if return_q:
            q_rows.append(q)
        better = q > best  # strict: among equal class scores the smallest id wins
        best[better] = q[better]
        out[better] = c
    # background wins only strictly, so class-vs-background ties go to the class
    bg = 1.0 - d64
    out[bg > best] = 0

    result = ProxyLabelMap(out)
    if return_q:
        return result, np.stack(q_rows).astype(np.float32)
    return result


def load_saliency(source) -> SaliencyMap:
    """Load a saliency map from a grayscale PNG (scaled by 1/255), a binary
    tensor file (max-normalized), or an array (max-normalized)."""
    if isinstance(source, (str, os.PathLike)):
        path = os.fspath(source)
        if path.endswith(".setn"):
            values = load_tensor(path)
            if values.ndim != 2:
                raise DataIOError(f"{path}: saliency tensor must be 2-D, got {values.shape}")
            return SaliencyMap(normalize_map(values).values)
        from .pngio import read_gray

        return SaliencyMap(read_gray(path).astype(np.float32) / 255.0)
    values = np.asarray(source, dtype=np.float32)
    if values.ndim != 2:
        raise ContractError(f"saliency array must be 2-D, got {values.shape}")
    return SaliencyMap(normalize_map(values).values)
