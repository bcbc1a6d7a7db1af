"""Fast-initialisation backends. The toy regressor blends the two input views
and injects disocclusion-like artifacts with a matching low-opacity map."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .core import ImageFrame, InvalidArgument


def shift_frame(rgb: np.ndarray, s: float) -> np.ndarray:
    """``out[:, x] = rgb[:, x + round(s)]`` with edge replication."""
    w = rgb.shape[1]
    cols = np.clip(np.arange(w) + int(round(s)), 0, w - 1)
    return rgb[:, cols]


@dataclass
class ArtifactParams:
    """Difficulty knobs for the toy regressor.

    Artifact count, artifact area and blur all scale with
    ``w = min(t, 1 - t) / 0.5``, i.e. with distance from the nearer input.
    """

    disparity: float = 0.0
    count_range: tuple[int, int] = (1, 3)
    area_range: tuple[float, float] = (0.04, 0.16)
    blur_scale: float = 0.5
    noise_blur: float = 1.5

    def to_json(self) -> dict:
        d = asdict(self)
        d["count_range"] = list(self.count_range)
        d["area_range"] = list(self.area_range)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ArtifactParams":
        obj = dict(obj)
        if "count_range" in obj:
            obj["count_range"] = tuple(obj["count_range"])
        if "area_range" in obj:
            obj["area_range"] = tuple(obj["area_range"])
        return cls(**obj)


@dataclass
class RegressionResult:
    frames: list[ImageFrame]
    # ground-truth artifact regions, only known for synthetic regressors
    artifact_masks: Optional[list[np.ndarray]] = None


class RegressionBackend(Protocol):
    name: str

    def regress(
        self,
        inputs: Sequence[ImageFrame],
        targets: Sequence[float],
        seed: int = 0,
        params: Optional[ArtifactParams] = None,
    ) -> RegressionResult:
        ...


def _ellipse_mask(h: int, w: int, rng: np.random.Generator, area: float) -> np.ndarray:
    aspect = rng.uniform(0.5, 2.0)
    rb = np.sqrt(area / (np.pi * aspect))
    ra = aspect * rb
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / ra) ** 2 + (v / rb) ** 2 <= 1.0


def toy_regress(
    inputs: Sequence[ImageFrame],
    targets: Sequence[float],
    params: Optional[ArtifactParams] = None,
    seed: int = 0,
) -> RegressionResult:
    if len(inputs) != 2:
        raise InvalidArgument(f"need exactly two input frames, got {len(inputs)}")
    i0, i1 = inputs
    if i0.rgb.shape != i1.rgb.shape:
        raise InvalidArgument(f"input dims differ: {i0.rgb.shape} vs {i1.rgb.shape}")
    p = params or ArtifactParams()
    h, w = i0.height, i0.width
    frames, truth = [], []
    for idx, t in enumerate(targets):
        if not 0.0 <= t <= 1.0:
            raise InvalidArgument(f"target position {t} outside [0, 1]")
        rng = np.random.default_rng([int(seed), 7919, idx])
        near = min(t, 1.0 - t) / 0.5
        rgb = (1.0 - t) * shift_frame(i0.rgb, t * p.disparity) + t * shift_frame(i1.rgb, -(1.0 - t) * p.disparity)

        region = np.zeros((h, w), dtype=bool)
        n_art = int(round(near * rng.integers(p.count_range[0], p.count_range[1] + 1)))
        frac = near * rng.uniform(*p.area_range)
        if n_art > 0 and frac > 0:
            for _ in range(n_art):
                region |= _ellipse_mask(h, w, rng, frac * h * w / n_art)
            fill = ndimage.gaussian_filter(rng.uniform(0.0, 1.0, (h, w, 3)), (p.noise_blur, p.noise_blur, 0))
            rgb = np.where(region[..., None], fill, rgb)

        sigma = p.blur_scale * near
        if sigma > 0:
            rgb = ndimage.gaussian_filter(rgb, (sigma, sigma, 0), mode="nearest")

        opacity = np.where(region, rng.uniform(0.0, 0.4, (h, w)), rng.uniform(0.8, 1.0, (h, w)))
        frames.append(ImageFrame(np.clip(rgb, 0.0, 1.0), opacity))
        truth.append(region)
    return RegressionResult(frames, truth)


@dataclass
class ToyRegressor:
    params: ArtifactParams = field(default_factory=ArtifactParams)
    name: str = "toy"

    def regress(
        self,
        inputs: Sequence[ImageFrame],
        targets: Sequence[float],
        seed: int = 0,
        params: Optional[ArtifactParams] = None,
    ) -> RegressionResult:
        return toy_regress(inputs, targets, params or self.params, seed)
