"""Hybrid regression-then-refine inference for one scene.

Regression gives coarse frames and opacity; each frame's regression quality
relative to an interpolated reference picks its starting step ``k``; frames
are noised to ``k_min`` and denoised together, with frames whose ``k`` has
not been reached kept on their resampled clean trajectory. Coarse mode makes
every frame start at ``k_min`` with a full pass each step, fine mode uses
per-frame ``k`` with a temporal cache refreshed every ``T`` steps, selective
mode additionally restricts partial steps to masked blocks.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from .backends import SceneConditioning, make_backend
from .cluster import ClusterModel, embed_scene
from .core import (
    ConfigurationError,
    ImageFrame,
    InvalidArgument,
    NoiseSchedule,
    build_schedule,
    default_codec,
)
from .diffusion import (
    DenoiserBackend,
    NoiseSource,
    add_noise,
    ddim_full_step,
    ddim_partial_step,
    resample_inactive,
)
from .masks import (
    DEFAULT_SHARP_FLOOR,
    RefinementMask,
    blocks_per_frame,
    blur_mask,
    combine_masks,
    laplacian_blur_map,
    opacity_mask,
    tile_blocks,
)
from .quality import DEFAULT_GRID, DEFAULT_K_MAX, DEFAULT_METRIC, interpolate_reference, quality_ratio
from .regression import ArtifactParams, RegressionBackend, ToyRegressor

log = logging.getLogger(__name__)

MODES = ("coarse", "fine", "selective")
N_INPUTS = 2


@dataclass
class SceneRequest:
    scene_id: str
    inputs: tuple[ImageFrame, ImageFrame]
    targets: tuple[float, ...]
    alpha: float = 0.95
    mode: str = "fine"
    seed: int = 0
    artifacts: ArtifactParams = field(default_factory=ArtifactParams)

    def __post_init__(self):
        self.targets = tuple(float(t) for t in self.targets)
        if len(self.inputs) != N_INPUTS:
            raise InvalidArgument(f"need two input frames, got {len(self.inputs)}")
        if not self.targets:
            raise InvalidArgument("no target positions")
        if any(not 0.0 < t < 1.0 for t in self.targets):
            raise InvalidArgument(f"target positions must lie in (0, 1): {self.targets}")
        if list(self.targets) != sorted(self.targets):
            raise InvalidArgument("target positions must be sorted")
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidArgument(f"alpha must be in (0, 1], got {self.alpha}")
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}, got {self.mode!r}")

    def with_(self, **changes) -> "SceneRequest":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return SceneRequest(**d)


@dataclass
class RunConfig:
    S: int = 50
    T: int = 5
    tau_o: float = 0.5
    gamma: float = 0.5
    grid: tuple[int, ...] = DEFAULT_GRID
    k_max: int = DEFAULT_K_MAX
    block_size: int = 4
    halo: int = 1
    blur_detection: bool = True
    blur_window: int = 7
    sharp_floor: float = DEFAULT_SHARP_FLOOR
    schedule: str = "cosine"
    diffusion_backend: str = "smoothing"
    regression_backend: str = "toy"

    def __post_init__(self):
        self.grid = tuple(int(k) for k in self.grid)
        if self.S < 2:
            raise InvalidArgument(f"S must be >= 2, got {self.S}")
        if not 1 <= self.T <= self.S:
            raise InvalidArgument(f"T must be in [1, S], got {self.T}")
        if any(not 1 <= k <= self.S - 1 for k in self.grid):
            raise InvalidArgument(f"grid must lie in [1, S-1], got {self.grid}")
        if not 0 <= self.k_max <= self.S - 1:
            raise InvalidArgument(f"k_max must be in [0, S-1], got {self.k_max}")

    def build_schedule(self) -> NoiseSchedule:
        return build_schedule(self.S, self.schedule)

    def to_json(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class Models:
    """Backends plus the k-logic routing table keyed by alpha."""

    regression: RegressionBackend
    diffusion: DenoiserBackend
    routing: dict[float, ClusterModel] = field(default_factory=dict)
    metric: Any = DEFAULT_METRIC

    def router(self, alpha: float) -> ClusterModel:
        for a, model in self.routing.items():
            if abs(a - alpha) < 1e-9:
                return model
        raise ConfigurationError(f"no calibrated k-logic for alpha={alpha}")


def default_models(cfg: RunConfig, routing: Optional[dict[float, ClusterModel]] = None) -> Models:
    if cfg.regression_backend != "toy":
        raise ConfigurationError(f"unknown regression backend {cfg.regression_backend!r}")
    try:
        diffusion = make_backend(cfg.diffusion_backend)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    return Models(ToyRegressor(), diffusion, dict(routing or {}))


# --------------------------------------------------------------------------
# Cost accounting
# --------------------------------------------------------------------------


@dataclass
class CostReport:
    step_units_executed: float
    baseline_units: float
    wall_time: float = 0.0
    k: tuple[int, ...] = ()

    @property
    def speedup(self) -> float:
        if self.step_units_executed == 0:
            return float("inf")
        return self.baseline_units / self.step_units_executed

    def merge(self, other: "CostReport") -> "CostReport":
        return CostReport(
            self.step_units_executed + other.step_units_executed,
            self.baseline_units + other.baseline_units,
            self.wall_time + other.wall_time,
            self.k + other.k,
        )


def account_cost(trace: Sequence[dict]) -> CostReport:
    """Bill a step trace in frame-step units.

    Full steps bill every frame (inputs included). Partial steps bill the
    active target frames, or in selective mode the active blocks divided by
    blocks per frame. The trace must open with a ``start`` event, cover every
    step from ``k_min`` to ``S - 1`` once in order, and close with ``end``.
    """
    if not trace or trace[0].get("event") != "start" or trace[-1].get("event") != "end":
        raise InvalidArgument("trace must begin with a start event and finish with an end event")
    head = trace[0]
    try:
        n_total = int(head["frames"]) + int(head["cond_frames"])
        S = int(head["S"])
        bpf = int(head["blocks_per_frame"])
        ks = tuple(int(k) for k in head["k"])
    except KeyError as exc:
        raise InvalidArgument(f"start event missing {exc}") from None
    steps = [e for e in trace[1:-1] if e.get("event") == "step"]
    first = int(head.get("first_step", min(ks) if ks else S))
    if [e["step"] for e in steps] != list(range(first, S)):
        raise InvalidArgument(f"trace steps are not contiguous from {first} to {S - 1}")
    executed = 0.0
    for e in steps:
        if e["kind"] == "full":
            executed += n_total
        elif e["kind"] == "partial":
            if e.get("active_blocks") is None:
                executed += len(e["active"])
            else:
                executed += e["active_blocks"] / bpf
        else:
            raise InvalidArgument(f"unknown step kind {e['kind']!r}")
    return CostReport(executed, float(n_total * S), float(trace[-1].get("wall_time", 0.0)), ks)


def write_trace(path: Union[str, Path], trace: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for e in trace:
            fh.write(json.dumps(e) + "\n")


def read_trace(path: Union[str, Path]) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# Denoising loop
# --------------------------------------------------------------------------


def denoise(
    z0: np.ndarray,
    ks: Sequence[int],
    mode: str,
    backend: DenoiserBackend,
    ctx: Any,
    schedule: NoiseSchedule,
    noise: NoiseSource,
    T: int = 5,
    mask: Optional[np.ndarray] = None,
    block_size: int = 4,
    halo: int = 1,
) -> tuple[np.ndarray, list[dict]]:
    """Run the refinement loop from clean regression latents ``z0``.

    ``mask`` is a latent-scale (N, h, w) refinement mask, used in selective
    mode only. Returns the final latents and the step events of the trace.
    """
    if mode not in MODES:
        raise InvalidArgument(f"unknown mode {mode!r}")
    S = schedule.total_steps
    ks = np.asarray(ks, dtype=np.int64)
    if ks.shape != (z0.shape[0],):
        raise InvalidArgument(f"need one k per frame, got {ks.shape} for {z0.shape[0]} frames")
    if ks.min() < 0 or ks.max() > S - 1:
        raise InvalidArgument(f"k values must lie in [0, {S - 1}]")
    if mode == "coarse":
        ks = np.full_like(ks, ks.min())
    selective = mode == "selective" and mask is not None
    k_min = int(ks.min())
    frames = np.arange(len(ks))

    z = add_noise(z0, k_min, schedule, noise.batch(frames, k_min, z0.shape[1:]))
    events: list[dict] = []
    cache = None
    last_full = None
    for u in range(k_min, S):
        active = ks <= u
        act_idx = np.flatnonzero(active)
        idle_idx = np.flatnonzero(~active)
        full = mode == "coarse" or u == k_min or u % T == 0
        if full:
            z_next, cache = ddim_full_step(z, u, backend, ctx, schedule)
            last_full = u
            if selective:
                # unmasked pixels of active frames stay on the resampled trajectory
                res = resample_inactive(z0[act_idx], act_idx, u + 1, schedule, noise)
                m = mask[act_idx][..., None]
                z_next[act_idx] = np.where(m, z_next[act_idx], res)
            n_blocks = None
        else:
            z_next = z.copy()
            z_next[act_idx] = ddim_partial_step(
                z,
                u,
                active,
                cache,
                backend,
                ctx,
                schedule,
                mask=mask if selective else None,
                clean=z0,
                noise=noise,
                block_size=block_size,
                halo=halo,
                last_full_step=last_full,
            )
            n_blocks = tile_blocks(mask[act_idx], block_size, halo).count() if selective else None
        if idle_idx.size:
            z_next[idle_idx] = resample_inactive(z0[idle_idx], idle_idx, u + 1, schedule, noise)
        events.append(
            {
                "event": "step",
                "step": u,
                "kind": "full" if full else "partial",
                "active": act_idx.tolist(),
                "active_blocks": n_blocks,
            }
        )
        z = z_next
    return z, events


# --------------------------------------------------------------------------
# Scene planning and execution
# --------------------------------------------------------------------------


@dataclass
class ScenePlan:
    """Everything decided before denoising starts."""

    coarse: list[ImageFrame]
    artifact_masks: Optional[list[np.ndarray]]
    cluster: int
    q_inputs: tuple[float, float]
    q_reg: list[float]
    q_star: list[float]
    ratios: list[float]
    k: list[int]
    mask: Optional[RefinementMask]
    z0: np.ndarray
    ctx: Any


@dataclass
class SceneResult:
    frames: list[ImageFrame]
    cost: CostReport
    trace: list[dict]
    plan: ScenePlan
    latents: np.ndarray


def build_masks(coarse: Sequence[ImageFrame], cfg: RunConfig) -> RefinementMask:
    opac = []
    blur = []
    for f in coarse:
        op = f.opacity if f.opacity is not None else np.ones((f.height, f.width))
        opac.append(opacity_mask(op, cfg.tau_o))
        if cfg.blur_detection:
            blur.append(blur_mask(laplacian_blur_map(f, cfg.blur_window), cfg.sharp_floor))
        else:
            blur.append(np.zeros((f.height, f.width), dtype=bool))
    return combine_masks(blur, opac)


def regress(req: SceneRequest, models: Models):
    try:
        return models.regression.regress(req.inputs, req.targets, seed=req.seed, params=req.artifacts)
    except Exception as exc:
        raise RuntimeError(f"scene {req.scene_id}: regression backend failed: {exc}") from exc


def score_scene(req: SceneRequest, coarse: Sequence[ImageFrame], metric, gamma: float):
    q0, q1 = metric(req.inputs[0]), metric(req.inputs[1])
    q_reg = [float(metric(f)) for f in coarse]
    q_star = [interpolate_reference(q0, q1, t, gamma) for t in req.targets]
    ratios = [quality_ratio(a, b) for a, b in zip(q_reg, q_star)]
    return (q0, q1), q_reg, q_star, ratios


def plan_scene(
    req: SceneRequest,
    cfg: RunConfig,
    models: Models,
    ks: Optional[Sequence[int]] = None,
    reg=None,
) -> ScenePlan:
    """Regression, routing, scoring, k selection and masks for one scene.

    ``ks`` overrides the k-logic (used by calibration and baselines).
    """
    reg = reg if reg is not None else regress(req, models)
    coarse = reg.frames
    q_in, q_reg, q_star, ratios = score_scene(req, coarse, models.metric, cfg.gamma)
    cluster = -1
    if ks is None:
        router = models.router(req.alpha)
        cluster, logic = router.route(embed_scene(req.inputs))
        ks = [min(logic.select(r), cfg.k_max) for r in ratios]
    ks = [int(k) for k in ks]
    if req.mode == "coarse":
        ks = [min(ks)] * len(ks)
    mask = build_masks(coarse, cfg) if req.mode == "selective" else None
    codec = getattr(models.diffusion, "codec", None) or default_codec()
    z0 = codec.encode(list(coarse))
    cond = SceneConditioning(req.inputs, req.targets, coarse, req.artifacts.disparity)
    try:
        ctx = models.diffusion.prepare(cond)
    except Exception as exc:
        raise RuntimeError(f"scene {req.scene_id}: diffusion backend failed: {exc}") from exc
    return ScenePlan(coarse, reg.artifact_masks, cluster, q_in, q_reg, q_star, ratios, ks, mask, z0, ctx)


def execute_plan(
    req: SceneRequest,
    cfg: RunConfig,
    models: Models,
    plan: ScenePlan,
    mode: Optional[str] = None,
    ks: Optional[Sequence[int]] = None,
) -> SceneResult:
    mode = mode or req.mode
    ks = list(ks if ks is not None else plan.k)
    schedule = cfg.build_schedule()
    latent_mask = None
    if mode == "selective":
        rm = plan.mask if plan.mask is not None else build_masks(plan.coarse, cfg)
        latent_mask = rm.at(default_codec().factor)
    lat_h, lat_w = plan.z0.shape[1:3]
    bpf = blocks_per_frame((lat_h, lat_w), cfg.block_size)
    start = time.perf_counter()
    head = {
        "event": "start",
        "scene_id": req.scene_id,
        "mode": mode,
        "S": cfg.S,
        "T": cfg.T,
        "frames": len(ks),
        "cond_frames": N_INPUTS,
        "blocks_per_frame": bpf,
        "k": [min(ks)] * len(ks) if mode == "coarse" else ks,
    }
    try:
        z, events = denoise(
            plan.z0,
            ks,
            mode,
            models.diffusion,
            plan.ctx,
            schedule,
            NoiseSource(req.seed),
            T=cfg.T,
            mask=latent_mask,
            block_size=cfg.block_size,
            halo=cfg.halo,
        )
    except (InvalidArgument, ConfigurationError):
        raise
    except Exception as exc:
        raise RuntimeError(f"scene {req.scene_id}: denoising failed: {exc}") from exc
    wall = time.perf_counter() - start
    trace = [head, *events, {"event": "end", "wall_time": wall}]
    codec = getattr(models.diffusion, "codec", None) or default_codec()
    frames = codec.decode_frames(z)
    return SceneResult(frames, account_cost(trace), trace, plan, z)


def run_scene(req: SceneRequest, cfg: RunConfig, models: Models) -> tuple[list[ImageFrame], CostReport]:
    result = run_scene_full(req, cfg, models)
    return result.frames, result.cost


def run_scene_full(req: SceneRequest, cfg: RunConfig, models: Models) -> SceneResult:
    plan = plan_scene(req, cfg, models)
    log.debug("scene %s cluster=%d k=%s", req.scene_id, plan.cluster, plan.k)
    return execute_plan(req, cfg, models, plan)


def run_full_diffusion(req: SceneRequest, cfg: RunConfig, models: Models, plan: Optional[ScenePlan] = None) -> SceneResult:
    """Baseline: every frame denoised from step 0 with a full pass at each step."""
    plan = plan or plan_scene(req, cfg, models, ks=[0] * len(req.targets))
    return execute_plan(req, cfg, models, plan, mode="coarse", ks=[0] * len(req.targets))


def regression_only(req: SceneRequest, models: Models) -> list[ImageFrame]:
    return list(regress(req, models).frames)
