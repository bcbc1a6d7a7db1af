"""Offline sweep of refinement start steps and k-logic fitting.

For every scene the full-diffusion output is the quality reference; each
grid step ``k`` is then run for all target frames and the per-frame ratio
of proxy scores is recorded against the frame's regression quality ratio.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cluster import ClusterModel, embed_scene, fit_clusters
from .core import InvalidArgument
from .pipeline import Models, RunConfig, SceneRequest, execute_plan, plan_scene, run_full_diffusion
from .quality import CalibrationRecord, KLogic, fit_klogic

log = logging.getLogger(__name__)


def sweep_scene(
    req: SceneRequest, cfg: RunConfig, models: Models, grid: Optional[Sequence[int]] = None
) -> list[CalibrationRecord]:
    """Quality factors Q(k)/Q_full for every target frame and grid step."""
    grid = tuple(grid if grid is not None else cfg.grid)
    if any(not 1 <= k <= cfg.S - 1 for k in grid):
        raise InvalidArgument(f"grid must lie in [1, {cfg.S - 1}], got {grid}")
    req = req.with_(mode="fine")
    n = len(req.targets)
    plan = plan_scene(req, cfg, models, ks=[0] * n)
    q_full = [models.metric(f) for f in run_full_diffusion(req, cfg, models, plan).frames]
    records = [CalibrationRecord(req.scene_id, i, plan.ratios[i]) for i in range(n)]
    for k in grid:
        out = execute_plan(req, cfg, models, plan, mode="fine", ks=[k] * n)
        for i, f in enumerate(out.frames):
            records[i].factors[k] = models.metric(f) / q_full[i]
    return records


def sweep(
    scenes: Sequence[SceneRequest], cfg: RunConfig, models: Models, grid: Optional[Sequence[int]] = None
) -> list[CalibrationRecord]:
    if not scenes:
        raise InvalidArgument("calibration needs at least one scene")
    records: list[CalibrationRecord] = []
    for i, req in enumerate(scenes):
        records.extend(sweep_scene(req, cfg, models, grid))
        log.debug("swept %d/%d scenes", i + 1, len(scenes))
    return records


def calibrate_klogic(
    scenes: Sequence[SceneRequest],
    alpha: float,
    cfg: RunConfig,
    models: Models,
    grid: Optional[Sequence[int]] = None,
    records: Optional[Sequence[CalibrationRecord]] = None,
) -> tuple[KLogic, list[CalibrationRecord]]:
    """Single k-logic fitted over every scene's sweep."""
    grid = tuple(grid if grid is not None else cfg.grid)
    records = list(records) if records is not None else sweep(scenes, cfg, models, grid)
    return fit_klogic(records, alpha, grid=grid, k_max=cfg.k_max), records


@dataclass
class Calibration:
    """Per-alpha cluster routing tables plus the sweep they came from."""

    routing: dict[float, ClusterModel]
    records: list[CalibrationRecord]
    clusters: dict[str, int]


def calibrate_clusters(
    scenes: Sequence[SceneRequest],
    alphas: Sequence[float],
    cfg: RunConfig,
    models: Models,
    K: int = 3,
    seed: int = 0,
    grid: Optional[Sequence[int]] = None,
    records: Optional[Sequence[CalibrationRecord]] = None,
) -> Calibration:
    """Cluster scenes by embedding and fit one k-logic per (cluster, alpha)."""
    if not scenes:
        raise InvalidArgument("calibration needs at least one scene")
    grid = tuple(grid if grid is not None else cfg.grid)
    embeddings = [embed_scene(r.inputs) for r in scenes]
    K = min(K, len({tuple(e) for e in embeddings}))
    base = fit_clusters(embeddings, K, seed)
    membership = {r.scene_id: base.assign(e) for r, e in zip(scenes, embeddings)}
    records = list(records) if records is not None else sweep(scenes, cfg, models, grid)
    routing = {}
    for alpha in alphas:
        logics = {}
        for c in range(base.k):
            recs = [r for r in records if membership[r.scene_id] == c]
            if not recs:
                # every centroid owns at least one scene after k-means, but stay safe
                recs = records
            logics[c] = fit_klogic(recs, alpha, grid=grid, k_max=cfg.k_max)
        routing[float(alpha)] = ClusterModel(base.centroids.copy(), logics)
    return Calibration(routing, records, membership)


def replay_factors(
    scenes: Sequence[SceneRequest], cfg: RunConfig, models: Models, alpha: float
) -> list[tuple[str, int, int, float]]:
    """Run each scene with its calibrated k and report (scene, frame, k, Q/Q_full)."""
    rows = []
    for req in scenes:
        req = req.with_(alpha=alpha, mode="fine")
        plan = plan_scene(req, cfg, models)
        q_full = [models.metric(f) for f in run_full_diffusion(req, cfg, models, plan).frames]
        out = execute_plan(req, cfg, models, plan)
        for i, f in enumerate(out.frames):
            rows.append((req.scene_id, i, plan.k[i], models.metric(f) / q_full[i]))
    return rows


def monotone(logic: KLogic) -> bool:
    steps = [logic.fallback_k, *logic.steps]
    return all(a <= b for a, b in zip(steps, steps[1:])) and bool(np.all(np.diff(logic.thresholds) > 0))
