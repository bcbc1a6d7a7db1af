"""Procedural two-view scenes with analytic in-between ground truth.

Each scene is a textured background seen through a window that pans by
``disparity`` pixels between the two inputs, plus a few striped shapes that
translate independently. Rendering at position ``t`` gives the ground truth
for any target; ``t = 0`` and ``t = 1`` are the inputs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

from .core import ImageFrame, InvalidArgument, load_png, quantize, save_png
from .pipeline import SceneRequest
from .regression import ArtifactParams

log = logging.getLogger(__name__)

STYLES = ("indoor", "landscape", "outdoor")
DEFAULT_DIMS = (64, 64)
DEFAULT_TARGETS = 8
MAX_PAN = 8


@dataclass
class Shape:
    kind: str  # "rect" or "disc"
    center: tuple[float, float]
    size: tuple[float, float]
    velocity: tuple[float, float]
    color: tuple[float, float, float]
    stripe_period: int
    stripe_axis: int


@dataclass
class SceneRecipe:
    scene_id: str
    style: str
    height: int
    width: int
    disparity: int
    background: np.ndarray  # (H, W + MAX_PAN, 3)
    shapes: list[Shape]

    def render(self, t: float) -> np.ndarray:
        off = int(round(t * self.disparity))
        img = self.background[:, off : off + self.width].copy()
        yy, xx = np.mgrid[0 : self.height, 0 : self.width] + 0.5
        for s in self.shapes:
            cy = s.center[0] + t * s.velocity[0]
            cx = s.center[1] + t * s.velocity[1]
            if s.kind == "rect":
                inside = (np.abs(yy - cy) <= s.size[0] / 2) & (np.abs(xx - cx) <= s.size[1] / 2)
            else:
                inside = ((yy - cy) / (s.size[0] / 2)) ** 2 + ((xx - cx) / (s.size[1] / 2)) ** 2 <= 1.0
            coord = (yy - cy) if s.stripe_axis == 0 else (xx - cx)
            stripe = (np.floor(coord / s.stripe_period) % 2)[..., None]
            color = np.asarray(s.color)
            fill = np.where(stripe > 0, color, 0.35 * color)
            img = np.where(inside[..., None], fill, img)
        return quantize(np.clip(img, 0.0, 1.0))


@dataclass
class CorpusScene:
    request: SceneRequest
    truth: list[ImageFrame]
    style: str


def _background(style: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    if style == "indoor":
        base = np.array([0.62, 0.48, 0.36]) + rng.uniform(-0.08, 0.08, 3)
        grad = 0.25 * xx[..., None] * np.array([1.0, 0.8, 0.6])
        fine_amp, weave_amp = 0.15, 0.3
    elif style == "landscape":
        sky = np.array([0.45, 0.62, 0.85]) + rng.uniform(-0.06, 0.06, 3)
        ground = np.array([0.30, 0.50, 0.22]) + rng.uniform(-0.06, 0.06, 3)
        horizon = rng.uniform(0.35, 0.6)
        blend = np.clip((yy - horizon) * 8.0, 0.0, 1.0)[..., None]
        base = (1 - blend) * sky + blend * ground
        grad = 0.0
        fine_amp, weave_amp = 0.12, 0.24
    else:
        base = np.array([0.5, 0.5, 0.5]) + rng.uniform(-0.1, 0.1, 3)
        grad = 0.3 * (yy[..., None] - 0.5)
        fine_amp, weave_amp = 0.18, 0.36
    coarse = ndimage.gaussian_filter(rng.standard_normal((h, w)), 4.0, mode="wrap")
    coarse /= np.abs(coarse).max() + 1e-12
    # mostly luminance grain with a little chroma
    grain = rng.standard_normal((h, w, 1)) + 0.3 * rng.standard_normal((h, w, 3))
    grain /= grain.std() + 1e-12
    # pixel-scale weave whose strength varies smoothly across the frame
    iy, ix = np.mgrid[0:h, 0:w]
    strength = ndimage.gaussian_filter(rng.uniform(0.0, 1.0, (h, w)), 6.0, mode="wrap")
    strength = (strength - strength.min()) / (np.ptp(strength) + 1e-12)
    weave = np.where((iy + ix) % 2 == 0, 1.0, -1.0) * (0.3 + 0.7 * strength)
    img = base + grad + 0.4 * coarse[..., None] + fine_amp * grain + weave_amp * weave[..., None]
    return np.clip(img, 0.0, 1.0)


def make_scene_recipe(scene_id: str, style: str, height: int, width: int, rng: np.random.Generator) -> SceneRecipe:
    disparity = int(rng.integers(2, MAX_PAN + 1))
    bg = _background(style, height, width + MAX_PAN, rng)
    shapes = []
    for _ in range(int(rng.integers(2, 7))):
        size = (rng.uniform(0.12, 0.3) * height, rng.uniform(0.12, 0.3) * width)
        shapes.append(
            Shape(
                kind=str(rng.choice(["rect", "disc"])),
                center=(rng.uniform(0.15, 0.85) * height, rng.uniform(0.15, 0.85) * width),
                size=size,
                velocity=(rng.uniform(-0.1, 0.1) * height, rng.uniform(-0.2, 0.2) * width),
                color=tuple(rng.uniform(0.2, 1.0, 3)),
                stripe_period=int(rng.integers(1, 4)),
                stripe_axis=int(rng.integers(0, 2)),
            )
        )
    return SceneRecipe(scene_id, style, height, width, disparity, bg, shapes)


def target_positions(n: int) -> tuple[float, ...]:
    return tuple((i + 1) / (n + 1) for i in range(n))


def gen_corpus(
    count: int,
    dims: tuple[int, int] = DEFAULT_DIMS,
    seed: int = 0,
    n_targets: int = DEFAULT_TARGETS,
    alpha: float = 0.95,
    mode: str = "fine",
    artifacts: ArtifactParams | None = None,
) -> list[CorpusScene]:
    """Deterministic corpus of ``count`` scenes; styles rotate through ``STYLES``."""
    if count < 1:
        raise InvalidArgument(f"count must be >= 1, got {count}")
    h, w = dims
    if h < 8 or w < 8 or h % 8 or w % 8:
        raise InvalidArgument(f"dims must be positive multiples of 8, got {dims}")
    base = artifacts or ArtifactParams()
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        style = STYLES[i % len(STYLES)]
        recipe = make_scene_recipe(f"scene_{i:04d}", style, h, w, rng)
        ts = target_positions(n_targets)
        inputs = (ImageFrame(recipe.render(0.0)), ImageFrame(recipe.render(1.0)))
        truth = [ImageFrame(recipe.render(t)) for t in ts]
        params = ArtifactParams.from_json({**base.to_json(), "disparity": float(recipe.disparity)})
        req = SceneRequest(recipe.scene_id, inputs, ts, alpha=alpha, mode=mode, seed=int(seed) * 100003 + i, artifacts=params)
        out.append(CorpusScene(req, truth, style))
    return out


# --------------------------------------------------------------------------
# On-disk layout: <dir>/<scene_id>/{scene.json, input_0.png, input_1.png, gt_XX.png}
# --------------------------------------------------------------------------


def scene_to_json(req: SceneRequest, style: str = "") -> dict:
    return {
        "scene_id": req.scene_id,
        "inputs": ["input_0.png", "input_1.png"],
        "targets": list(req.targets),
        "alpha": req.alpha,
        "mode": req.mode,
        "seed": req.seed,
        "style": style,
        "artifacts": req.artifacts.to_json(),
    }


def save_scene(root: Union[str, Path], scene: CorpusScene) -> Path:
    d = Path(root) / scene.request.scene_id
    d.mkdir(parents=True, exist_ok=True)
    req = scene.request
    save_png(d / "input_0.png", req.inputs[0])
    save_png(d / "input_1.png", req.inputs[1])
    for j, f in enumerate(scene.truth):
        save_png(d / f"gt_{j:02d}.png", f)
    (d / "scene.json").write_text(json.dumps(scene_to_json(req, scene.style), indent=2))
    return d


def save_corpus(root: Union[str, Path], scenes: Sequence[CorpusScene]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        save_scene(root, s)
    index = {"scenes": [s.request.scene_id for s in scenes]}
    (root / "corpus.json").write_text(json.dumps(index, indent=2))


def load_scene(path: Union[str, Path]) -> CorpusScene:
    """Load a scene from its ``scene.json`` (or the directory holding it)."""
    p = Path(path)
    if p.is_dir():
        p = p / "scene.json"
    obj = json.loads(p.read_text())
    d = p.parent
    try:
        inputs = tuple(load_png(d / name) for name in obj["inputs"])
        req = SceneRequest(
            obj["scene_id"],
            inputs,
            tuple(obj["targets"]),
            alpha=float(obj.get("alpha", 0.95)),
            mode=obj.get("mode", "fine"),
            seed=int(obj.get("seed", 0)),
            artifacts=ArtifactParams.from_json(obj.get("artifacts", {})),
        )
    except KeyError as exc:
        raise InvalidArgument(f"{p}: missing key {exc}") from None
    truth = [load_png(g) for g in sorted(d.glob("gt_*.png"))]
    return CorpusScene(req, truth, obj.get("style", ""))


def load_corpus(root: Union[str, Path]) -> list[CorpusScene]:
    root = Path(root)
    index = root / "corpus.json"
    if index.exists():
        ids = json.loads(index.read_text())["scenes"]
    else:
        ids = sorted(p.parent.name for p in root.glob("*/scene.json"))
    if not ids:
        raise InvalidArgument(f"no scenes under {root}")
    return [load_scene(root / sid) for sid in ids]
