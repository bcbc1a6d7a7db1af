"""Deterministic DDIM denoising with full steps, frame/block-selective
partial steps, a temporal latent cache and per-frame noise substreams."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Protocol, Sequence

import numpy as np

from .core import InvalidArgument, NoiseSchedule
from .masks import BlockSet, tile_blocks


class StaleCacheError(RuntimeError):
    """A partial step was given a cache that is not from the latest full step."""


class NoiseSource:
    """Standard-normal draws keyed by (seed, frame, step).

    Each key gets its own substream, so changing when one frame activates
    never shifts another frame's noise.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def eps(self, frame: int, step: int, shape: Sequence[int]) -> np.ndarray:
        rng = np.random.default_rng([self.seed, int(frame), int(step)])
        return rng.standard_normal(tuple(shape))

    def batch(self, frames: Sequence[int], step: int, shape: Sequence[int]) -> np.ndarray:
        return np.stack([self.eps(f, step, shape) for f in frames]) if len(frames) else np.empty((0, *shape))


def _check_step(schedule: NoiseSchedule, u: int, upper: int) -> None:
    if not 0 <= u <= upper:
        raise InvalidArgument(f"step {u} outside [0, {upper}]")


def add_noise(z0: np.ndarray, u: int, schedule: NoiseSchedule, eps: np.ndarray) -> np.ndarray:
    """``sqrt(abar[u]) * z0 + sqrt(1 - abar[u]) * eps``."""
    _check_step(schedule, u, schedule.total_steps)
    a = schedule[u]
    if a == 1.0:
        return np.array(z0, dtype=np.float64, copy=True)
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps


def resample_inactive(
    z0: np.ndarray, frames: Sequence[int], u_next: int, schedule: NoiseSchedule, noise: NoiseSource
) -> np.ndarray:
    """Re-noise clean latents of ``frames`` straight to step ``u_next``."""
    _check_step(schedule, u_next, schedule.total_steps)
    eps = noise.batch(list(frames), u_next, z0.shape[1:])
    return add_noise(z0, u_next, schedule, eps)


@dataclass
class LatentCache:
    """Per-frame layer outputs recorded at a full step.

    ``spatial`` holds one array per spatial layer and ``temporal`` the
    per-frame contributions consumed by each temporal-mixing layer; both
    cover every frame the backend sees (conditioning inputs and targets).
    """

    step_of_record: int
    spatial: list[np.ndarray] = field(default_factory=list)
    temporal: list[np.ndarray] = field(default_factory=list)
    valid: bool = True

    def invalidate(self) -> None:
        self.valid = False


class DenoiserBackend(Protocol):
    name: str
    temporal_layers: int

    def prepare(self, scene: Any) -> Any:
        """Per-scene conditioning state handed back to :meth:`predict_x0`."""

    def predict_x0(
        self,
        z: np.ndarray,
        u: int,
        schedule: NoiseSchedule,
        ctx: Any,
        active: Optional[np.ndarray] = None,
        blocks: Optional[BlockSet] = None,
        cache: Optional[LatentCache] = None,
    ) -> tuple[np.ndarray, Optional[LatentCache]]:
        """Clean-latent estimate.

        With ``active is None`` this is a dense pass over all frames and
        returns a fresh cache. Otherwise only the listed target frames are
        computed (only inside ``blocks`` when given), inactive frames' layer
        outputs come from ``cache``, and the estimate covers active frames.
        """


def ddim_update(z: np.ndarray, x0: np.ndarray, u: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM move from step ``u`` to ``u + 1``."""
    a, a_next = schedule[u], schedule[u + 1]
    eps_hat = (z - np.sqrt(a) * x0) / np.sqrt(1.0 - a)
    return np.sqrt(a_next) * x0 + np.sqrt(1.0 - a_next) * eps_hat


def ddim_full_step(
    z: np.ndarray, u: int, backend: DenoiserBackend, ctx: Any, schedule: NoiseSchedule
) -> tuple[np.ndarray, LatentCache]:
    """Dense step over every frame; records a fresh cache at step ``u``."""
    _check_step(schedule, u, schedule.total_steps - 1)
    x0, cache = backend.predict_x0(z, u, schedule, ctx)
    if cache is None:
        cache = LatentCache(u)
    cache.step_of_record = u
    return ddim_update(z, x0, u, schedule), cache


def ddim_partial_step(
    z: np.ndarray,
    u: int,
    active: np.ndarray,
    cache: LatentCache,
    backend: DenoiserBackend,
    ctx: Any,
    schedule: NoiseSchedule,
    mask: Optional[np.ndarray] = None,
    clean: Optional[np.ndarray] = None,
    noise: Optional[NoiseSource] = None,
    block_size: int = 4,
    halo: int = 1,
    last_full_step: Optional[int] = None,
) -> np.ndarray:
    """Step only the active frames; returns their latents at ``u + 1``.

    ``active`` is a boolean vector over target frames. Without ``mask`` the
    active frames are computed densely and fully updated. With a latent-scale
    ``mask`` (N, h, w) spatial layers run on the active tiles only, masked
    latent pixels take the DDIM update and unmasked ones are re-noised from
    ``clean`` to ``u + 1``.
    """
    _check_step(schedule, u, schedule.total_steps - 1)
    active = np.asarray(active, dtype=bool)
    idx = np.flatnonzero(active)
    if idx.size == 0:
        raise InvalidArgument("partial step needs at least one active frame")
    if cache is None or not cache.valid or cache.step_of_record > u:
        raise StaleCacheError(f"no valid cache recorded at or before step {u}")
    if last_full_step is not None and cache.step_of_record != last_full_step:
        raise StaleCacheError(
            f"cache from step {cache.step_of_record} but last full step was {last_full_step}"
        )

    blocks = None
    if mask is not None:
        blocks = tile_blocks(np.asarray(mask)[idx], block_size, halo, frames=idx)
    x0, _ = backend.predict_x0(z, u, schedule, ctx, active=active, blocks=blocks, cache=cache)
    stepped = ddim_update(z[idx], x0, u, schedule)
    if mask is None:
        return stepped
    if clean is None or noise is None:
        raise InvalidArgument("masked partial step needs clean latents and a noise source")
    resampled = resample_inactive(clean[idx], idx, u + 1, schedule, noise)
    m = np.asarray(mask, dtype=bool)[idx][..., None]
    return np.where(m, stepped, resampled)
