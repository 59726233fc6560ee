"""SpecAugment for arbitrary T x D matrices, including the 595-wide joint input.

Every function takes an explicit ``numpy.random.Generator``; callers own one
stream per utterance so that results do not depend on batching order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

BASE_FEATURE_DIM = 83


@dataclass(frozen=True)
class SpecAugPolicy:
    enabled: bool = True
    n_freq_masks: int = 2
    max_freq_width: int = 27
    scale_freq_width: bool = True
    n_time_masks: int = 2
    max_time_width: float = 0.05
    time_warp: bool = False
    time_warp_window: int = 5

    def __post_init__(self):
        if min(self.n_freq_masks, self.max_freq_width, self.n_time_masks,
               self.max_time_width, self.time_warp_window) < 0:
            raise ValueError("SpecAugment counts and widths must be >= 0")

    def freq_width(self, dim: int) -> int:
        """Max frequency-mask width for a matrix of width ``dim``.

        With ``scale_freq_width`` the width is stated for 83-dim features and
        grows proportionally for wider (joint) inputs.
        """
        if self.scale_freq_width and dim != BASE_FEATURE_DIM:
            return int(round(self.max_freq_width * dim / BASE_FEATURE_DIM))
        return int(self.max_freq_width)

    def time_width(self, frames: int) -> int:
        # values below 1 are a ratio of the utterance length
        if 0 < self.max_time_width < 1:
            return int(np.floor(self.max_time_width * frames))
        return int(self.max_time_width)

    def to_dict(self) -> dict:
        return asdict(self)


def draw_masks(size: int, n_masks: int, max_width: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """(start, width) pairs: width ~ U{0..max_width}, start ~ U{0..size-width}."""
    out = []
    for _ in range(n_masks):
        w = int(rng.integers(0, min(max_width, size) + 1))
        start = int(rng.integers(0, size - w + 1))
        out.append((start, w))
    return out


def apply_freq_masks(x: np.ndarray, masks) -> np.ndarray:
    y = np.array(x, copy=True)
    for start, w in masks:
        y[:, start:start + w] = 0.0
    return y


def apply_time_masks(x: np.ndarray, masks) -> np.ndarray:
    y = np.array(x, copy=True)
    for start, w in masks:
        y[start:start + w, :] = 0.0
    return y


def freq_mask(x: np.ndarray, policy: SpecAugPolicy, rng: np.random.Generator) -> np.ndarray:
    masks = draw_masks(x.shape[1], policy.n_freq_masks, policy.freq_width(x.shape[1]), rng)
    return apply_freq_masks(x, masks)


def time_mask(x: np.ndarray, policy: SpecAugPolicy, rng: np.random.Generator) -> np.ndarray:
    masks = draw_masks(x.shape[0], policy.n_time_masks, policy.time_width(x.shape[0]), rng)
    return apply_time_masks(x, masks)


def warp_time(x: np.ndarray, center: int, delta: int) -> np.ndarray:
    """Move row ``center`` to ``center + delta``, linearly resampling both sides."""
    if delta == 0:
        return np.array(x, copy=True)
    t = x.shape[0]
    new_c = center + delta
    j = np.arange(t, dtype=np.float64)
    src = np.where(j < new_c,
                   j * center / new_c,
                   center + (j - new_c) * (t - 1 - center) / (t - 1 - new_c))
    lo = np.clip(np.floor(src).astype(int), 0, t - 1)
    hi = np.minimum(lo + 1, t - 1)
    frac = (src - lo)[:, None]
    return x[lo] * (1.0 - frac) + x[hi] * frac


def time_warp(x: np.ndarray, policy: SpecAugPolicy, rng: np.random.Generator) -> np.ndarray:
    w = int(policy.time_warp_window)
    if w == 0:
        return np.array(x, copy=True)
    t = x.shape[0]
    if t <= 2 * w:
        raise ValueError(f"time warp needs T > 2W (T={t}, W={w})")
    center = int(rng.integers(w, t - w))
    delta = int(rng.integers(-w, w + 1))
    # keep the moved point strictly inside the sequence
    delta = int(np.clip(delta, 1 - center, t - 2 - center))
    return warp_time(x, center, delta)


def spec_augment(x: np.ndarray, policy: SpecAugPolicy, rng: np.random.Generator) -> np.ndarray:
    """Warp (if enabled), then frequency masks, then time masks."""
    if not policy.enabled:
        return np.array(x, copy=True)
    y = x
    if policy.time_warp and policy.time_warp_window > 0 and x.shape[0] > 2 * policy.time_warp_window:
        y = time_warp(y, policy, rng)
    y = freq_mask(y, policy, rng)
    return time_mask(y, policy, rng)
