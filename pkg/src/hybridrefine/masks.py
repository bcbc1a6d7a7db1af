"""Refinement masks: opacity confidence, Laplacian blur detection with Otsu
thresholding, multi-scale max-pool pyramids and block tiling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
from scipy import ndimage

from .core import ImageFrame, InvalidArgument, luminance
from .quality import laplacian

OTSU_LEVELS = 256
# 100 on the 0-255 intensity scale, the usual variance-of-Laplacian blur cut
DEFAULT_SHARP_FLOOR = 100.0 / 255.0**2
DEFAULT_PYRAMID = (8, 16, 32, 64)


def laplacian_blur_map(frame: Union[ImageFrame, np.ndarray], window: int = 7) -> np.ndarray:
    """Local variance of the Laplacian response over ``window x window``."""
    if window < 3 or window % 2 == 0:
        raise InvalidArgument(f"window must be odd and >= 3, got {window}")
    rgb = frame.rgb if isinstance(frame, ImageFrame) else np.asarray(frame, dtype=np.float64)
    gray = luminance(rgb) if rgb.ndim == 3 else rgb
    lap = laplacian(gray)
    mean = ndimage.uniform_filter(lap, size=window, mode="nearest")
    mean_sq = ndimage.uniform_filter(lap * lap, size=window, mode="nearest")
    return np.maximum(mean_sq - mean * mean, 0.0)


def quantize_levels(values: np.ndarray, levels: int = OTSU_LEVELS) -> np.ndarray:
    """Histogram level of each value; level ``i`` is centred on ``i/(levels-1)``."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * (levels - 1)), 0, levels - 1).astype(np.int64)


def otsu_threshold(values: np.ndarray, levels: int = OTSU_LEVELS) -> float:
    """Otsu threshold over a ``levels``-bin histogram of values in [0, 1].

    Returns the centre of the last level of the lower class. Among equally
    good splits the lowest wins. A constant input returns that constant.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise InvalidArgument("otsu_threshold needs a non-empty grid")
    if np.all(v == v[0]):
        return float(v[0])
    q = quantize_levels(v, levels)
    counts = np.bincount(q, minlength=levels).astype(np.float64)
    centers = np.arange(levels) / (levels - 1)
    n = counts.sum()
    n0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(counts * centers)[:-1]
    n1 = n - n0
    s_total = float((counts * centers).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = s0 / n0
        mu1 = (s_total - s0) / n1
        between = (n0 / n) * (n1 / n) * (mu0 - mu1) ** 2
    between = np.where((n0 > 0) & (n1 > 0), between, -1.0)
    return float(centers[int(np.argmax(between))])


def blur_mask(blur_map: np.ndarray, sharp_floor: float = DEFAULT_SHARP_FLOOR) -> np.ndarray:
    """Binary mask of blurry pixels (True = blurry).

    The map is box-smoothed (5x5), min-max normalised, inverted and split by
    Otsu. Pixels whose smoothed Laplacian variance reaches ``sharp_floor``
    are never flagged, so a uniformly sharp frame yields an empty mask.
    """
    smooth = ndimage.uniform_filter(np.asarray(blur_map, dtype=np.float64), size=5, mode="nearest")
    lo, hi = float(smooth.min()), float(smooth.max())
    if hi > lo:
        norm = (smooth - lo) / (hi - lo)
    else:
        norm = np.zeros_like(smooth)
    inverted = 1.0 - norm
    thr = otsu_threshold(inverted)
    levels = quantize_levels(inverted) / (OTSU_LEVELS - 1)
    mask = levels > thr
    if sharp_floor is not None:
        mask &= smooth < sharp_floor
    return mask


def opacity_mask(opacity: np.ndarray, tau_o: float = 0.5) -> np.ndarray:
    """True where opacity is strictly below ``tau_o``."""
    if not 0.0 <= tau_o <= 1.0:
        raise InvalidArgument(f"tau_o must be in [0, 1], got {tau_o}")
    return np.asarray(opacity, dtype=np.float64) < tau_o


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping ``factor x factor`` max-pool of a binary grid."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    if factor < 1 or h % factor or w % factor:
        raise InvalidArgument(f"factor {factor} does not divide mask dims {h}x{w}")
    return m.reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3))


@dataclass
class RefinementMask:
    """Per-frame refinement masks plus max-pooled levels keyed by factor."""

    pixel: np.ndarray  # (N, H, W) bool
    levels: dict[int, np.ndarray] = field(default_factory=dict)

    def at(self, factor: int) -> np.ndarray:
        if factor == 1:
            return self.pixel
        if factor not in self.levels:
            self.levels[factor] = np.stack([downsample_mask(m, factor) for m in self.pixel])
        return self.levels[factor]

    @classmethod
    def full(cls, n: int, height: int, width: int, factors: Sequence[int] = DEFAULT_PYRAMID) -> "RefinementMask":
        return build_pyramid(np.ones((n, height, width), dtype=bool), factors)


def build_pyramid(pixel: np.ndarray, factors: Sequence[int] = DEFAULT_PYRAMID) -> RefinementMask:
    pixel = np.asarray(pixel, dtype=bool)
    h, w = pixel.shape[1:]
    levels = {}
    for f in factors:
        if h % f == 0 and w % f == 0:
            levels[f] = np.stack([downsample_mask(m, f) for m in pixel])
    return RefinementMask(pixel, levels)


def combine_masks(
    blur: Sequence[np.ndarray], opac: Sequence[np.ndarray], factors: Sequence[int] = DEFAULT_PYRAMID
) -> RefinementMask:
    """Per-frame OR of blur and opacity masks, with its max-pool pyramid."""
    if len(blur) != len(opac):
        raise InvalidArgument(f"frame count mismatch: {len(blur)} blur vs {len(opac)} opacity masks")
    frames = []
    for b, o in zip(blur, opac):
        b = np.asarray(b, dtype=bool)
        o = np.asarray(o, dtype=bool)
        if b.shape != o.shape:
            raise InvalidArgument(f"mask shape mismatch {b.shape} vs {o.shape}")
        frames.append(b | o)
    if not frames:
        raise InvalidArgument("no masks to combine")
    return build_pyramid(np.stack(frames), factors)


# --------------------------------------------------------------------------
# Block tiling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockSet:
    """Active ``b x b`` tiles as (frame, block_row, block_col), frame-major."""

    block_size: int
    halo: int
    grid_shape: tuple[int, int]
    active: tuple[tuple[int, int, int], ...]

    @property
    def blocks_per_frame(self) -> int:
        return blocks_per_frame(self.grid_shape, self.block_size)

    def bounds(self, row: int, col: int) -> tuple[int, int, int, int]:
        """Pixel extent (r0, r1, c0, c1) of a tile; edge tiles may be smaller."""
        b = self.block_size
        h, w = self.grid_shape
        return row * b, min((row + 1) * b, h), col * b, min((col + 1) * b, w)

    def count(self, frame: int | None = None) -> int:
        if frame is None:
            return len(self.active)
        return sum(1 for f, _, _ in self.active if f == frame)

    def coverage(self, frame: int) -> np.ndarray:
        """Boolean grid marking pixels inside active tiles of ``frame``."""
        out = np.zeros(self.grid_shape, dtype=bool)
        for f, r, c in self.active:
            if f == frame:
                r0, r1, c0, c1 = self.bounds(r, c)
                out[r0:r1, c0:c1] = True
        return out

    def to_json(self) -> dict:
        return {
            "block_size": self.block_size,
            "halo": self.halo,
            "grid_shape": list(self.grid_shape),
            "active": [list(t) for t in self.active],
        }

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


def blocks_per_frame(grid_shape: tuple[int, int], b: int) -> int:
    h, w = grid_shape
    return (-(-h // b)) * (-(-w // b))


def tile_blocks(mask: np.ndarray, b: int = 4, halo: int = 1, frames: Iterable[int] | None = None) -> BlockSet:
    """Tile a latent-scale mask (HxW or NxHxW) into ``b x b`` blocks.

    A block is active iff any mask pixel inside it is set. ``frames`` relabels
    the leading axis (e.g. original frame indices of an active subset).
    """
    if b < 1 or halo < 0:
        raise InvalidArgument(f"need b >= 1 and halo >= 0, got b={b}, halo={halo}")
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 2:
        m = m[None]
    n, h, w = m.shape
    labels = list(frames) if frames is not None else list(range(n))
    if len(labels) != n:
        raise InvalidArgument("frame labels do not match mask count")
    gh, gw = -(-h // b), -(-w // b)
    padded = np.zeros((n, gh * b, gw * b), dtype=bool)
    padded[:, :h, :w] = m
    any_set = padded.reshape(n, gh, b, gw, b).any(axis=(2, 4))
    active = tuple((labels[i], int(r), int(c)) for i, r, c in zip(*np.nonzero(any_set)))
    return BlockSet(b, halo, (h, w), active)
