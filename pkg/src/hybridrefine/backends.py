"""Reference denoiser backends.

``OracleBackend`` always predicts a fixed clean latent. ``SmoothingBackend``
is a small seeded network: two 3x3 conv layers per frame, one temporal
mixing layer (each frame blended 0.8/0.2 with the all-frame mean) and a
linear head added to a shrinkage anchor. The anchor is the posterior mean
of the clean latent under a prior centred on the backend's own conditional
estimate (the nearer input view warped to the target), with uncertainty
only along the direction of the coarse regression residual.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import ImageFrame, LatentCodec, NoiseSchedule, default_codec
from .diffusion import LatentCache
from .masks import BlockSet
from .regression import shift_frame
from .sparse import conv3x3, conv3x3_blocks, conv3x3_dense_restricted

SELF_WEIGHT = 0.8


@dataclass
class SceneConditioning:
    """What a denoiser may look at for one scene."""

    inputs: Sequence[ImageFrame]
    positions: Sequence[float]
    coarse: Sequence[ImageFrame]
    disparity: float = 0.0


class OracleBackend:
    """Predicts ``target`` regardless of input; DDIM then lands on it exactly."""

    name = "oracle"
    temporal_layers = 0

    def __init__(self, target: Optional[np.ndarray] = None, codec: Optional[LatentCodec] = None):
        self.target = target
        self.codec = codec or default_codec()

    def prepare(self, scene: SceneConditioning) -> np.ndarray:
        if self.target is not None:
            return self.target
        return self.codec.encode(list(scene.coarse))

    def predict_x0(self, z, u, schedule, ctx, active=None, blocks=None, cache=None):
        target = np.asarray(ctx, dtype=np.float64)
        if active is None:
            return target.copy(), LatentCache(u)
        return target[np.flatnonzero(active)].copy(), None


@dataclass
class SmoothingContext:
    cond: np.ndarray  # (2, h, w, C) clean latents of the input views
    prior: np.ndarray  # (N, h, w, C)
    direction: np.ndarray  # (N, h, w, C) unit residual direction (zeros if none)


class SmoothingBackend:
    name = "smoothing"
    temporal_layers = 1

    def __init__(
        self,
        seed: int = 1234,
        hidden: int = 32,
        head_scale: float = 0.004,
        prior_spread: float = 0.05,
        sparse: bool = True,
        codec: Optional[LatentCodec] = None,
    ):
        self.codec = codec or default_codec()
        self.hidden = hidden
        self.head_scale = head_scale
        self.prior_spread = prior_spread
        self.sparse = sparse
        c = self.codec.channels
        rng = np.random.default_rng(seed)
        self.w1 = rng.standard_normal((3, 3, c, hidden)) / np.sqrt(9 * c)
        self.b1 = 0.1 * rng.standard_normal(hidden)
        self.time1 = rng.standard_normal(hidden)
        self.w2 = rng.standard_normal((3, 3, hidden, hidden)) / np.sqrt(9 * hidden)
        self.b2 = 0.1 * rng.standard_normal(hidden)
        self.head = rng.standard_normal((hidden, c)) / np.sqrt(hidden)

    # -- conditioning -------------------------------------------------------

    def prepare(self, scene: SceneConditioning) -> SmoothingContext:
        i0, i1 = scene.inputs
        warped = []
        for t in scene.positions:
            if t <= 0.5:
                warped.append(shift_frame(i0.rgb, t * scene.disparity))
            else:
                warped.append(shift_frame(i1.rgb, -(1.0 - t) * scene.disparity))
        prior = self.codec.encode(np.stack(warped))
        coarse = self.codec.encode(list(scene.coarse))
        resid = coarse - prior
        norms = np.sqrt(np.sum(resid**2, axis=(1, 2, 3), keepdims=True))
        direction = np.divide(resid, norms, out=np.zeros_like(resid), where=norms > 0)
        cond = self.codec.encode([i0, i1])
        return SmoothingContext(cond, prior, direction)

    # -- network pieces -----------------------------------------------------

    def _bias1(self, u: int, schedule: NoiseSchedule) -> np.ndarray:
        return self.b1 + schedule[u] * self.time1

    def _anchor(self, x_in: np.ndarray, prior: np.ndarray, direction: np.ndarray, a: float) -> np.ndarray:
        s2 = self.prior_spread**2
        gain = a * s2 / (a * s2 + 1.0 - a)
        coef = np.sum((x_in - prior) * direction, axis=(1, 2, 3), keepdims=True)
        return prior + gain * coef * direction

    def _inputs(self, z: np.ndarray, u: int, schedule: NoiseSchedule) -> np.ndarray:
        return z / np.sqrt(schedule[u])

    def features(self, x: np.ndarray, u: int, schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
        h1 = np.tanh(conv3x3(x, self.w1, self._bias1(u, schedule)))
        h2 = np.tanh(conv3x3(h1, self.w2, self.b2))
        return h1, h2

    @staticmethod
    def temporal_mix(h2_all: np.ndarray, rows: np.ndarray) -> np.ndarray:
        mean = h2_all.mean(axis=0, keepdims=True)
        return SELF_WEIGHT * h2_all[rows] + (1.0 - SELF_WEIGHT) * mean

    # -- prediction ---------------------------------------------------------

    def predict_x0(
        self,
        z: np.ndarray,
        u: int,
        schedule: NoiseSchedule,
        ctx: SmoothingContext,
        active: Optional[np.ndarray] = None,
        blocks: Optional[BlockSet] = None,
        cache: Optional[LatentCache] = None,
    ):
        n_cond = ctx.cond.shape[0]
        a = schedule[u]
        if active is None:
            x_in = self._inputs(z, u, schedule)
            frames = np.concatenate([ctx.cond, x_in])
            h1, h2 = self.features(frames, u, schedule)
            rows = np.arange(n_cond, frames.shape[0])
            mixed = self.temporal_mix(h2, rows)
            x0 = self._anchor(x_in, ctx.prior, ctx.direction, a) + self.head_scale * (mixed @ self.head)
            return x0, LatentCache(u, spatial=[h1, h2], temporal=[h2])

        idx = np.flatnonzero(active)
        rows = idx + n_cond
        x_in = self._inputs(z[idx], u, schedule)
        h1_all, h2_all = cache.spatial
        bias1 = self._bias1(u, schedule)
        if blocks is None:
            h1 = np.tanh(conv3x3(x_in, self.w1, bias1))
            h2 = np.tanh(conv3x3(h1, self.w2, self.b2))
        else:
            frame_rows = {int(f): k for k, f in enumerate(idx)}
            conv = conv3x3_blocks if self.sparse else conv3x3_dense_restricted
            h1 = conv(x_in, self.w1, bias1, blocks, h1_all[rows], frame_rows, post=np.tanh)
            h2 = conv(h1, self.w2, self.b2, blocks, h2_all[rows], frame_rows, post=np.tanh)
        contrib = cache.temporal[0].copy()
        contrib[rows] = h2
        mixed = self.temporal_mix(contrib, rows)
        x0 = self._anchor(x_in, ctx.prior[idx], ctx.direction[idx], a) + self.head_scale * (mixed @ self.head)
        return x0, None


def make_backend(name: str, **kwargs):
    if name == "smoothing":
        return SmoothingBackend(**kwargs)
    if name == "oracle":
        return OracleBackend(**kwargs)
    raise ValueError(f"unknown diffusion backend {name!r}")
