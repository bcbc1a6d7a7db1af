"""Command-line entry point.

Exit status: 0 on success, 2 for configuration or input errors, 1 for
runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .bench import load_bench_configs, run_benchmark
from .calibration import calibrate_clusters
from .cluster import ClusterModel
from .core import ConfigurationError, InvalidArgument, load_gray_png, load_png, save_mask_png, save_png
from .corpus import gen_corpus, load_corpus, load_scene, save_corpus
from .masks import blur_mask, laplacian_blur_map, opacity_mask
from .pipeline import MODES, RunConfig, default_models, run_scene_full, write_trace
from .quality import write_records_csv

log = logging.getLogger("hybridrefine")


def _run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.from_json(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigurationError(f"cannot read run config {path}: {exc}") from None


def cmd_gen(args) -> int:
    scenes = gen_corpus(args.scenes, dims=(args.height, args.width), seed=args.seed, n_targets=args.targets)
    save_corpus(args.out, scenes)
    log.info("wrote %d scenes to %s", len(scenes), args.out)
    return 0


def cmd_calibrate(args) -> int:
    cfg = _run_config(args.config)
    models = default_models(cfg)
    scenes = [s.request for s in load_corpus(args.corpus)]
    cal = calibrate_clusters(scenes, [args.alpha], cfg, models, K=args.clusters, seed=args.seed)
    model = cal.routing[float(args.alpha)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    records = Path(args.records) if args.records else out.with_suffix(".records.csv")
    write_records_csv(records, cal.records)
    for c, logic in sorted(model.logics.items()):
        log.info("cluster %d: fallback=%d thresholds=%s steps=%s", c, logic.fallback_k, logic.thresholds, logic.steps)
    return 0


def cmd_infer(args) -> int:
    cfg = _run_config(args.config)
    scene = load_scene(args.scene)
    req = scene.request.with_(mode=args.mode)
    if args.seed is not None:
        req = req.with_(seed=args.seed)
    if args.alpha is not None:
        req = req.with_(alpha=args.alpha)
    router = ClusterModel.load(args.klogic)
    # the supplied k-logic governs this run whatever alpha the scene file names
    models = default_models(cfg, {req.alpha: router})
    result = run_scene_full(req, cfg, models)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(result.frames):
        save_png(out / f"target_{i:02d}.png", f)
    write_trace(out / "trace.jsonl", result.trace)
    cost = result.cost
    summary = {
        "scene_id": req.scene_id,
        "mode": req.mode,
        "alpha": req.alpha,
        "cluster": result.plan.cluster,
        "k": list(cost.k),
        "ratios": result.plan.ratios,
        "step_units_executed": cost.step_units_executed,
        "baseline_units": cost.baseline_units,
        "speedup": cost.speedup,
        "wall_time": cost.wall_time,
    }
    (out / "cost.json").write_text(json.dumps(summary, indent=2))
    log.info("%s: k=%s speedup=%.3f", req.scene_id, list(cost.k), cost.speedup)
    return 0


def cmd_bench(args) -> int:
    cfg = _run_config(args.config)
    configs, calib = load_bench_configs(args.configs)
    base = Path(args.configs).parent
    routing = {}
    for alpha, path in calib.items():
        p = Path(path)
        p = p if p.is_absolute() else base / p
        try:
            routing[float(alpha)] = ClusterModel.load(p)
        except OSError as exc:
            raise ConfigurationError(f"cannot read calibration for alpha={alpha}: {exc}") from None
    models = default_models(cfg, routing)
    scenes = [s.request for s in load_corpus(args.corpus)]
    report = run_benchmark(scenes, configs, cfg, models)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.report)
    json_path = Path(args.json) if args.json else Path(args.report).with_suffix(".json")
    report.write_json(json_path)
    for key, agg in report.aggregates().items():
        log.info("%s: mean speedup %.3f, P95 units %.1f", key, agg["mean_speedup"], agg["p95_units"])
    return 0


def cmd_mask(args) -> int:
    frame = load_png(args.frame)
    if args.opacity:
        opacity = load_gray_png(args.opacity)
    else:
        opacity = np.ones((frame.height, frame.width))
    mask = opacity_mask(opacity, args.tau)
    if not args.no_blur:
        mask |= blur_mask(laplacian_blur_map(frame, args.window))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_mask_png(args.out, mask)
    log.info("mask covers %.2f%% of pixels", 100.0 * mask.mean())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridrefine", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scene corpus")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--targets", type=int, default=8)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("calibrate", help="sweep start steps and fit per-cluster k-logic")
    c.add_argument("--corpus", required=True)
    c.add_argument("--alpha", type=float, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--records", help="calibration records CSV (default: next to --out)")
    c.add_argument("--clusters", type=int, default=3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--config", help="RunConfig JSON")
    c.set_defaults(func=cmd_calibrate)

    i = sub.add_parser("infer", help="run one scene")
    i.add_argument("--scene", required=True)
    i.add_argument("--klogic", required=True)
    i.add_argument("--mode", choices=MODES, default="fine")
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int)
    i.add_argument("--alpha", type=float)
    i.add_argument("--config", help="RunConfig JSON")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="benchmark a corpus")
    b.add_argument("--corpus", required=True)
    b.add_argument("--configs", required=True)
    b.add_argument("--report", required=True)
    b.add_argument("--json", help="JSON report path (default: report with .json suffix)")
    b.add_argument("--config", help="RunConfig JSON")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("mask", help="refinement mask for one frame")
    m.add_argument("--frame", required=True)
    m.add_argument("--opacity")
    m.add_argument("--tau", type=float, default=0.5)
    m.add_argument("--window", type=int, default=7)
    m.add_argument("--no-blur", action="store_true")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mask)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, InvalidArgument, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.error("runtime failure: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
