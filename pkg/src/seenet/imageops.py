"""Small deterministic image utilities (resize, blur, flips)."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import ContractError


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an [H,W] or [C,H,W] float array.

    Uses half-pixel-centre sampling with edge clamping, so the sample grid
    is mirror symmetric and resizing commutes with horizontal flips.
    """
    if out_h < 1 or out_w < 1:
        raise ContractError(f"resize_bilinear: target size {out_h}x{out_w} is empty")
    arr = np.asarray(arr)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3:
        raise ContractError(f"resize_bilinear: expected [H,W] or [C,H,W], got {arr.shape}")
    _, h, w = arr.shape
    if h < 1 or w < 1:
        raise ContractError("resize_bilinear: empty source image")
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    coords = np.stack(np.meshgrid(ys, xs, indexing="ij"))
    out = np.stack(
        [map_coordinates(ch, coords, order=1, mode="nearest") for ch in arr]
    ).astype(arr.dtype, copy=False)
    return out[0] if squeeze else out


def gaussian_blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ContractError(f"gaussian_blur: sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.asarray(arr).copy()
    return gaussian_filter(np.asarray(arr, dtype=np.float32), sigma, mode="nearest")


def hflip(arr: np.ndarray) -> np.ndarray:
    """Horizontal flip along the last (width) axis."""
    return np.ascontiguousarray(arr[..., ::-1])
