"""Attention-map thresholding, per-branch mask construction, and fusion.

An attention map is split into three spatial zones by two thresholds
relative to its maximum: the attention zone (already-detected regions,
code 0), the background zone (low response, code -1), and the potential
zone in between (code +1). The zone codes are exactly the multipliers the
mask-conditioned rectifier applies, so the erased branch consumes the
ternary mask verbatim: detected attention is erased, background is
sign-reversed, and the potential zone passes through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

STRATEGIES = ("acol", "zeroing", "seenet")

DEFAULT_HIGH = 0.7
DEFAULT_LOW = 0.05


@dataclass
class AttentionMap:
    """Single-channel map of non-negative attention values.

    ``normalized`` marks maps scaled so the maximum is exactly 1 (all-zero
    maps may also carry the flag).
    """

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ContractError(f"attention map must be 2-D, got shape {self.values.shape}")
        if self.values.size and self.values.min() < 0:
            raise ContractError("attention map contains negative values")
        if self.normalized and self.values.size:
            mx = self.values.max()
            if mx != 0 and mx != 1:
                raise ContractError(f"normalized attention map has max {mx!r}, expected 1")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class TernaryMask:
    """Zone map over {-1, 0, +1}: background, attention, potential."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ContractError(f"ternary mask must be 2-D, got shape {self.values.shape}")
        if not np.isin(self.values, (-1, 0, 1)).all():
            raise ContractError("ternary mask values must lie in {-1, 0, +1}")
        self.values = self.values.astype(np.int8, copy=False)

    @property
    def shape(self):
        return self.values.shape

    def attention_zone(self) -> np.ndarray:
        return self.values == 0

    def potential_zone(self) -> np.ndarray:
        return self.values == 1

    def background_zone(self) -> np.ndarray:
        return self.values == -1


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, AttentionMap) else np.asarray(m)


def normalize_map(m) -> AttentionMap:
    """Scale a non-negative map so its maximum is 1; an all-zero map stays
    all-zero (and is still flagged normalized). Idempotent."""
    v = _values(m)
    if v.size and v.min() < 0:
        raise ContractError("normalize_map: negative input value")
    mx = v.max() if v.size else 0.0
    if mx == 0:
        return AttentionMap(np.zeros_like(v), normalized=True)
    return AttentionMap(v / mx, normalized=True)


def _check_thresholds(k_h: float, k_l: float) -> None:
    if not (0.0 <= k_l < k_h <= 1.0):
        raise ConfigError(
            f"thresholds must satisfy 0 <= low < high <= 1, got low={k_l}, high={k_h}"
        )


def ternary_mask(m, k_h: float = DEFAULT_HIGH, k_l: float = DEFAULT_LOW) -> TernaryMask:
    """Partition an attention map into the three zones.

    With thresholds d_h = k_h * max and d_l = k_l * max: values >= d_h form
    the attention zone (0), values < d_l the background zone (-1), and the
    rest the potential zone (+1). Both cuts are relative to the maximum, so
    the partition is invariant to positive rescaling. An all-zero map is
    defined as entirely background: it carries no object evidence.
    """
    _check_thresholds(k_h, k_l)
    v = _values(m)
    return TernaryMask(_ternary_values(v, k_h, k_l))


def _ternary_values(v: np.ndarray, k_h: float, k_l: float) -> np.ndarray:
    """Zone codes for a stack of maps ([H,W] or [N,H,W]); max taken per map."""
    mx = v.max(axis=(-2, -1), keepdims=True)
    out = np.ones(v.shape, dtype=np.int8)
    out[v >= k_h * mx] = 0
    out[v < k_l * mx] = -1
    out[np.broadcast_to(mx == 0, v.shape)] = -1
    return out


def apply_strategy(ternary_values: np.ndarray, strategy: str) -> np.ndarray:
    """Post-process ternary zone codes into the mask the erased branch sees.

    seenet  keeps the full {-1, 0, +1} mask (erase + reverse),
    zeroing turns background reversal off (-1 -> 0, plain erasing of both),
    acol    keeps background visible (-1 -> +1, erase-only).
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    t = np.asarray(ternary_values, dtype=np.int8)
    if strategy == "seenet":
        return t.copy()
    if strategy == "zeroing":
        return np.where(t == -1, np.int8(0), t)
    return np.where(t == -1, np.int8(1), t)


def erase_branch_mask(t: TernaryMask, strategy: str = "seenet") -> np.ndarray:
    """Mask consumed by the erased branch's rectifier. For the full
    mechanism this is the ternary mask verbatim."""
    return apply_strategy(t.values, strategy)


def background_branch_mask(m, k_h: float = DEFAULT_HIGH, k_l: float = DEFAULT_LOW) -> np.ndarray:
    """Binary mask keeping only the background zone of the background
    branch: 1 where the map falls below the midpoint factor
    (k_h + k_l)/2 of its maximum, 0 elsewhere. An all-zero map is all
    background (mask of ones)."""
    _check_thresholds(k_h, k_l)
    v = _values(m)
    return _background_values(v, k_h, k_l)


def _background_values(v: np.ndarray, k_h: float, k_l: float) -> np.ndarray:
    mx = v.max(axis=(-2, -1), keepdims=True)
    factor = (k_h + k_l) / 2.0
    out = (v < factor * mx).astype(np.int8)
    out[np.broadcast_to(mx == 0, v.shape)] = 1
    return out


def _check_fusable(a: AttentionMap, b: AttentionMap, op: str) -> None:
    if not (isinstance(a, AttentionMap) and isinstance(b, AttentionMap)):
        raise ContractError(f"{op}: expected AttentionMap inputs")
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if not (a.normalized and b.normalized):
        raise ContractError(f"{op}: both maps must be normalized")


def fuse_attention(a: AttentionMap, b: AttentionMap) -> AttentionMap:
    """Pointwise maximum of two normalized attention maps."""
    _check_fusable(a, b, "fuse_attention")
    return AttentionMap(np.maximum(a.values, b.values), normalized=True)


def flip_fuse(fused: AttentionMap, flipped_fused: AttentionMap) -> AttentionMap:
    """Merge the fused map with its horizontally-flipped-input counterpart
    (already flipped back to the original orientation): pointwise max."""
    _check_fusable(fused, flipped_fused, "flip_fuse")
    return AttentionMap(np.maximum(fused.values, flipped_fused.values), normalized=True)
