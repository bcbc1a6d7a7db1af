"""Benchmark runner: every (scene, config) pair plus the two baselines.

Rows carry per-scene quality factor (mean over frames of Q / Q_full), unit
speedup and wall time. Aggregates are the mean and nearest-rank P95 of the
per-scene executed units and wall time.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import ConfigurationError
from .pipeline import MODES, Models, RunConfig, SceneRequest, execute_plan, plan_scene, regress, run_full_diffusion

log = logging.getLogger(__name__)

CSV_COLUMNS = ("scene_id", "mode", "alpha", "quality_factor", "unit_speedup", "wall_ms", "k_csv")
BASELINE_DIFFUSION = "diffusion"
BASELINE_REGRESSION = "regression"
DEFAULT_ALPHAS = (0.98, 0.95, 0.90)


def nearest_rank(values: Sequence[float], q: float = 0.95) -> float:
    """Nearest-rank percentile: the ``ceil(q n)``-th smallest value."""
    if not values:
        raise ValueError("nearest_rank of an empty sequence")
    xs = sorted(values)
    return float(xs[max(math.ceil(q * len(xs)), 1) - 1])


@dataclass
class BenchRow:
    scene_id: str
    mode: str
    alpha: Optional[float]
    quality_factor: float
    unit_speedup: float
    wall_ms: float
    k: tuple[int, ...]
    units: float = 0.0

    def csv_row(self) -> list:
        return [
            self.scene_id,
            self.mode,
            "" if self.alpha is None else repr(self.alpha),
            repr(self.quality_factor),
            repr(self.unit_speedup),
            f"{self.wall_ms:.3f}",
            ";".join(str(k) for k in self.k),
        ]


@dataclass
class BenchmarkReport:
    rows: list[BenchRow] = field(default_factory=list)
    S: int = 50

    def groups(self) -> dict[tuple[str, Optional[float]], list[BenchRow]]:
        out: dict[tuple[str, Optional[float]], list[BenchRow]] = {}
        for r in self.rows:
            out.setdefault((r.mode, r.alpha), []).append(r)
        return out

    def aggregates(self) -> dict[str, dict]:
        agg = {}
        for (mode, alpha), rows in self.groups().items():
            units = [r.units for r in rows]
            walls = [r.wall_ms for r in rows]
            speed = [r.unit_speedup for r in rows]
            agg[f"{mode}@{alpha}"] = {
                "mode": mode,
                "alpha": alpha,
                "scenes": len(rows),
                "mean_quality_factor": float(np.mean([r.quality_factor for r in rows])),
                "mean_speedup": float(np.mean(speed)),
                "mean_units": float(np.mean(units)),
                "p95_units": nearest_rank(units),
                "mean_wall_ms": float(np.mean(walls)),
                "p95_wall_ms": nearest_rank(walls),
            }
        return agg

    def step_histogram(self) -> dict[str, list[float]]:
        """Mean executed steps (S - k) per target frame index, per config."""
        out = {}
        for (mode, alpha), rows in self.groups().items():
            ks = [r.k for r in rows if r.k]
            if not ks:
                continue
            n = min(len(k) for k in ks)
            steps = self.S - np.array([k[:n] for k in ks], dtype=float)
            out[f"{mode}@{alpha}"] = steps.mean(axis=0).tolist()
        return out

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow(r.csv_row())

    def to_json(self) -> dict:
        return {
            "S": self.S,
            "aggregates": self.aggregates(),
            "step_histogram": self.step_histogram(),
            "rows": [{**asdict(r), "k": list(r.k)} for r in self.rows],
        }

    def write_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def read_csv_rows(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass(frozen=True)
class BenchConfig:
    mode: str
    alpha: Optional[float] = None

    @classmethod
    def parse(cls, obj) -> "BenchConfig":
        if isinstance(obj, dict):
            mode, alpha = obj["mode"], obj.get("alpha")
        else:
            mode, alpha = obj
        if mode not in (*MODES, BASELINE_DIFFUSION, BASELINE_REGRESSION):
            raise ConfigurationError(f"unknown benchmark mode {mode!r}")
        if mode in MODES and alpha is None:
            raise ConfigurationError(f"mode {mode} needs an alpha")
        return cls(mode, None if alpha is None else float(alpha))


def run_benchmark(
    scenes: Sequence[SceneRequest],
    configs: Sequence,
    cfg: RunConfig,
    models: Models,
    include_baselines: bool = True,
) -> BenchmarkReport:
    """Run every (scene, config) pair; quality factors are relative to full diffusion."""
    configs = [c if isinstance(c, BenchConfig) else BenchConfig.parse(c) for c in configs]
    needed = sorted({c.alpha for c in configs if c.mode in MODES})
    missing = []
    for a in needed:
        try:
            models.router(a)
        except ConfigurationError:
            missing.append(a)
    if missing:
        raise ConfigurationError(f"missing calibration for alpha values: {missing}")
    if include_baselines:
        for base in (BASELINE_DIFFUSION, BASELINE_REGRESSION):
            if not any(c.mode == base for c in configs):
                configs.append(BenchConfig(base))

    report = BenchmarkReport(S=cfg.S)
    for req in scenes:
        n = len(req.targets)
        base_plan = plan_scene(req.with_(mode="fine"), cfg, models, ks=[0] * n)
        full = run_full_diffusion(req, cfg, models, base_plan)
        q_full = [models.metric(f) for f in full.frames]

        for c in configs:
            start = time.perf_counter()
            if c.mode == BASELINE_DIFFUSION:
                frames, cost = full.frames, full.cost
                wall = full.cost.wall_time
                row_k = tuple([0] * n)
            elif c.mode == BASELINE_REGRESSION:
                frames = regress(req, models).frames
                wall = time.perf_counter() - start
                cost = None
                row_k = tuple([cfg.S] * n)
            else:
                r = req.with_(mode=c.mode, alpha=c.alpha)
                plan = plan_scene(r, cfg, models)
                res = execute_plan(r, cfg, models, plan)
                frames, cost = res.frames, res.cost
                wall = time.perf_counter() - start
                row_k = cost.k
            qf = float(np.mean([models.metric(f) / q for f, q in zip(frames, q_full)]))
            if cost is None:
                units, speed = 0.0, float("inf")
            else:
                units, speed = cost.step_units_executed, cost.speedup
            report.rows.append(BenchRow(req.scene_id, c.mode, c.alpha, qf, speed, wall * 1e3, row_k, units))
        log.debug("benchmarked %s", req.scene_id)
    return report


def load_bench_configs(path: Union[str, Path]) -> tuple[list[BenchConfig], dict[str, str]]:
    """Configs JSON: {"configs": [{"mode":..,"alpha":..},..], "calibration": {"0.9": "path.json"}}."""
    obj = json.loads(Path(path).read_text())
    try:
        configs = [BenchConfig.parse(c) for c in obj["configs"]]
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"{path}: malformed configs ({exc})") from None
    calib = {str(k): str(v) for k, v in obj.get("calibration", {}).items()}
    return configs, calib
