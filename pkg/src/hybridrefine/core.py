"""Basic value types: image frames, the noise schedule, the latent codec and
the binary tensor file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image

CODEC_FACTOR = 8
CODEC_SEED = 0xC0DEC
TENSOR_MAGIC = b"SPTX"

LUMA = np.array([0.299, 0.587, 0.114])


class InvalidArgument(ValueError):
    """Raised when an operation receives an argument outside its domain."""


class ConfigurationError(RuntimeError):
    """Raised for missing or inconsistent configuration (calibration, logics)."""


@dataclass(frozen=True, eq=False)
class ImageFrame:
    """An RGB frame in [0, 1] with an optional per-pixel opacity map."""

    rgb: np.ndarray
    opacity: Optional[np.ndarray] = None

    def __post_init__(self):
        rgb = np.array(self.rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise InvalidArgument(f"rgb must be HxWx3, got {rgb.shape}")
        h, w = rgb.shape[:2]
        if h % CODEC_FACTOR or w % CODEC_FACTOR or h == 0 or w == 0:
            raise InvalidArgument(f"frame dims {h}x{w} must be positive multiples of {CODEC_FACTOR}")
        if not np.all(np.isfinite(rgb)) or rgb.min() < 0.0 or rgb.max() > 1.0:
            raise InvalidArgument("rgb values must be finite and within [0, 1]")
        rgb.setflags(write=False)
        object.__setattr__(self, "rgb", rgb)
        if self.opacity is not None:
            op = np.array(self.opacity, dtype=np.float64)
            if op.shape != (h, w):
                raise InvalidArgument(f"opacity shape {op.shape} does not match frame {h}x{w}")
            if not np.all(np.isfinite(op)) or op.min() < 0.0 or op.max() > 1.0:
                raise InvalidArgument("opacity values must be within [0, 1]")
            op.setflags(write=False)
            object.__setattr__(self, "opacity", op)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def luminance(self) -> np.ndarray:
        return self.rgb @ LUMA


def luminance(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) @ LUMA


# --------------------------------------------------------------------------
# Noise schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Cumulative signal retention ``abar[0..S]``.

    Index ``u`` counts denoising progress: ``u = 0`` is the noisiest state and
    ``u = S`` is clean (``abar[S] == 1``).
    """

    abar: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        abar = np.asarray(self.abar, dtype=np.float64)
        if abar.ndim != 1 or abar.size < 3:
            raise InvalidArgument("schedule needs at least 3 entries")
        if not np.all(np.isfinite(abar)):
            raise InvalidArgument("schedule entries must be finite")
        if abar[0] <= 0.0 or abar[-1] != 1.0 or np.any(np.diff(abar) <= 0):
            raise InvalidArgument("abar must be strictly increasing from >0 to exactly 1")
        abar.setflags(write=False)
        object.__setattr__(self, "abar", abar)

    @property
    def total_steps(self) -> int:
        return self.abar.size - 1

    def __getitem__(self, u: int) -> float:
        return float(self.abar[u])


def build_schedule(S: int, kind: str = "cosine") -> NoiseSchedule:
    if S < 2:
        raise InvalidArgument(f"S must be >= 2, got {S}")
    u = np.arange(S + 1, dtype=np.float64)
    if kind == "cosine":
        abar = np.cos(0.5 * np.pi * (1.0 - u / S) * 0.98) ** 2
        abar = abar / abar[-1]
    elif kind == "linear":
        abar = 0.01 + (1.0 - 0.01) * u / S
    else:
        raise InvalidArgument(f"unknown schedule kind {kind!r}")
    abar[-1] = 1.0
    return NoiseSchedule(abar, kind)


# --------------------------------------------------------------------------
# Latent codec
# --------------------------------------------------------------------------


@lru_cache(maxsize=4)
def _mixing_matrix(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    q.setflags(write=False)
    return q


class LatentCodec:
    """Space-to-depth by ``factor`` followed by a fixed orthogonal channel mix.

    The map is linear and orthogonal, so ``decode(encode(x)) == x`` up to
    round-off and Euclidean norms are preserved.
    """

    def __init__(self, factor: int = CODEC_FACTOR, seed: int = CODEC_SEED):
        self.factor = factor
        self.channels = factor * factor * 3
        self.mix = _mixing_matrix(self.channels, seed)

    def encode(self, batch: Union[np.ndarray, Sequence[ImageFrame]]) -> np.ndarray:
        """(N, H, W, 3) pixels -> (N, H/f, W/f, 3 f^2) latent."""
        x = _as_pixel_batch(batch)
        n, h, w, _ = x.shape
        f = self.factor
        if h % f or w % f:
            raise InvalidArgument(f"frame dims {h}x{w} are not multiples of {f}")
        blocks = x.reshape(n, h // f, f, w // f, f, 3).transpose(0, 1, 3, 2, 4, 5)
        return blocks.reshape(n, h // f, w // f, self.channels) @ self.mix

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """Exact inverse of :meth:`encode`; no clamping."""
        z = np.asarray(latent, dtype=np.float64)
        if z.ndim != 4 or z.shape[-1] != self.channels:
            raise InvalidArgument(f"latent must be (N, h, w, {self.channels}), got {z.shape}")
        n, lh, lw, _ = z.shape
        f = self.factor
        blocks = (z @ self.mix.T).reshape(n, lh, lw, f, f, 3).transpose(0, 1, 3, 2, 4, 5)
        return blocks.reshape(n, lh * f, lw * f, 3)

    def decode_frames(self, latent: np.ndarray) -> list[ImageFrame]:
        """Decode and clamp to [0, 1] for emission."""
        return [ImageFrame(np.clip(px, 0.0, 1.0)) for px in self.decode(latent)]


def _as_pixel_batch(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
    else:
        frames = list(batch)
        if not frames:
            raise InvalidArgument("empty frame batch")
        x = np.stack([f.rgb if isinstance(f, ImageFrame) else np.asarray(f, float) for f in frames])
    if x.ndim != 4 or x.shape[-1] != 3:
        raise InvalidArgument(f"pixel batch must be (N, H, W, 3), got {x.shape}")
    return x


_DEFAULT_CODEC: Optional[LatentCodec] = None


def default_codec() -> LatentCodec:
    global _DEFAULT_CODEC
    if _DEFAULT_CODEC is None:
        _DEFAULT_CODEC = LatentCodec()
    return _DEFAULT_CODEC


def encode(batch) -> np.ndarray:
    return default_codec().encode(batch)


def decode(latent: np.ndarray) -> np.ndarray:
    return default_codec().decode(latent)


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def write_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    """Write ``array`` as SPTX: magic, u8 rank, u32 LE dims, f32 LE payload."""
    a = np.ascontiguousarray(array, dtype="<f4")
    if a.ndim > 255:
        raise InvalidArgument("rank too large for SPTX")
    header = TENSOR_MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes(order="C"))


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise InvalidArgument(f"{path}: bad magic {data[:4]!r}")
    rank = data[4]
    dims = struct.unpack_from(f"<{rank}I", data, 5)
    offset = 5 + 4 * rank
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(data) - offset != expected:
        raise InvalidArgument(f"{path}: payload is {len(data) - offset} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(dims).copy()


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: Union[str, Path], frame: ImageFrame, opacity_path: Union[str, Path, None] = None) -> None:
    Image.fromarray(to_uint8(frame.rgb), mode="RGB").save(path)
    if frame.opacity is not None and opacity_path is not None:
        Image.fromarray(to_uint8(frame.opacity), mode="L").save(opacity_path)


def save_gray_png(path: Union[str, Path], grid: np.ndarray) -> None:
    Image.fromarray(to_uint8(np.asarray(grid, dtype=np.float64)), mode="L").save(path)


def save_mask_png(path: Union[str, Path], mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool), mode="1").save(path)


def load_gray_png(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def load_png(path: Union[str, Path], opacity_path: Union[str, Path, None] = None) -> ImageFrame:
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    opacity = load_gray_png(opacity_path) if opacity_path is not None else None
    return ImageFrame(rgb, opacity)


def quantize(values: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG round-trips are lossless."""
    return to_uint8(values).astype(np.float64) / 255.0


def stack_rgb(frames: Iterable[ImageFrame]) -> np.ndarray:
    return np.stack([f.rgb for f in frames])
