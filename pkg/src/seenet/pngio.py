"""PNG reading/writing helpers (RGB images, grayscale maps, indexed labels)."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import DataIOError


def default_palette(num_entries: int = 256) -> list[int]:
    """Standard bit-interleaved label palette (index = class id)."""
    palette = []
    for i in range(num_entries):
        r = g = b = 0
        cid = i
        for shift in range(8):
            r |= ((cid >> 0) & 1) << (7 - shift)
            g |= ((cid >> 1) & 1) << (7 - shift)
            b |= ((cid >> 2) & 1) << (7 - shift)
            cid >>= 3
        palette.extend((r, g, b))
    return palette


def write_rgb(path, image01: np.ndarray) -> None:
    """Write a [3,H,W] float array in [0,1] as an RGB PNG."""
    arr = np.clip(np.asarray(image01), 0.0, 1.0)
    u8 = np.round(255.0 * arr).astype(np.uint8).transpose(1, 2, 0)
    try:
        Image.fromarray(u8, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise DataIOError(f"cannot write PNG {path}: {exc}") from exc


def read_rgb(path) -> np.ndarray:
    """Read an RGB PNG as a [3,H,W] float32 array in [0,1]."""
    img = _open(path)
    if img.mode != "RGB":
        img = img.convert("RGB")
    return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1)


def write_gray(path, values01: np.ndarray) -> None:
    """Write an [H,W] float array in [0,1] as an 8-bit grayscale PNG
    (pixel = round(255 * value))."""
    arr = np.clip(np.asarray(values01), 0.0, 1.0)
    u8 = np.round(255.0 * arr).astype(np.uint8)
    try:
        Image.fromarray(u8, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise DataIOError(f"cannot write PNG {path}: {exc}") from exc


def read_gray(path) -> np.ndarray:
    """Read a grayscale PNG as [H,W] uint8 values (no scaling)."""
    img = _open(path)
    if img.mode != "L":
        raise DataIOError(f"{path}: expected single-channel grayscale, got mode {img.mode}")
    return np.asarray(img, dtype=np.uint8)


def write_indexed(path, labels: np.ndarray, palette: list[int] | None = None) -> None:
    """Write an [H,W] label map as an indexed 8-bit PNG (palette index = label)."""
    arr = np.asarray(labels, dtype=np.uint8)
    img = Image.fromarray(arr, mode="P")
    img.putpalette(palette if palette is not None else default_palette())
    try:
        img.save(path, format="PNG")
    except OSError as exc:
        raise DataIOError(f"cannot write PNG {path}: {exc}") from exc


def read_indexed(path) -> np.ndarray:
    """Read an indexed (or plain grayscale) label PNG as [H,W] uint8 labels."""
    img = _open(path)
    if img.mode not in ("P", "L"):
        raise DataIOError(f"{path}: expected indexed or grayscale label PNG, got {img.mode}")
    return np.asarray(img, dtype=np.uint8)


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except (OSError, ValueError) as exc:
        raise DataIOError(f"cannot read image {path}: {exc}") from exc
