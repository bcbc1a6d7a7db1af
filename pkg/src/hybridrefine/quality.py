"""No-reference quality scoring, reference interpolation, quality ratios and
the k-logic lookup table that maps a ratio to a starting denoising step."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .core import ImageFrame, InvalidArgument, luminance

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

DEFAULT_GRID = (5, 10, 15, 20, 25, 30, 35, 40, 45)
DEFAULT_K_MAX = 40


def laplacian(gray: np.ndarray) -> np.ndarray:
    """3x3 Laplacian with edge replication."""
    return ndimage.convolve(np.asarray(gray, dtype=np.float64), LAPLACIAN, mode="nearest")


@dataclass(frozen=True)
class SharpnessContrastProxy:
    """``100 * sigmoid(a*log(1 + E_lap) + b*C - d)`` on luminance.

    ``E_lap`` is the mean squared Laplacian response and ``C`` the luminance
    standard deviation. Stands in for a learned no-reference metric.
    """

    a: float = 1.0
    b: float = 4.0
    d: float = 3.0

    def __call__(self, frame: Union[ImageFrame, np.ndarray]) -> float:
        rgb = frame.rgb if isinstance(frame, ImageFrame) else np.asarray(frame, dtype=np.float64)
        gray = luminance(rgb)
        e_lap = float(np.mean(laplacian(gray) ** 2))
        contrast = float(np.std(gray))
        logit = self.a * math.log1p(e_lap) + self.b * contrast - self.d
        return 100.0 / (1.0 + math.exp(-logit))


QualityMetric = Callable[[ImageFrame], float]

DEFAULT_METRIC = SharpnessContrastProxy()


def score_image(frame: Union[ImageFrame, np.ndarray], metric: Optional[QualityMetric] = None) -> float:
    return float((metric or DEFAULT_METRIC)(frame))


def interpolate_reference(c0: float, c1: float, t: float, gamma: float = 0.5) -> float:
    """Power interpolation of the two input-view scores at position ``t``.

    Rises as ``t**gamma`` when the second view scores at least as high as
    the first, otherwise falls as ``1 - (1 - t)**gamma``; both branches hit
    ``c0`` at ``t = 0`` and ``c1`` at ``t = 1``.
    """
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"t must be in [0, 1], got {t}")
    if not 0.0 < gamma <= 1.0:
        raise InvalidArgument(f"gamma must be in (0, 1], got {gamma}")
    if c1 >= c0:
        f = t**gamma
    else:
        f = 1.0 - (1.0 - t) ** gamma
    return c0 + (c1 - c0) * f


def quality_ratio(q_reg: float, q_star: float) -> float:
    if q_star == 0:
        raise InvalidArgument("reference quality must be non-zero")
    return q_reg / q_star


# --------------------------------------------------------------------------
# k-logic
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KLogic:
    """Monotone step function from quality ratio to starting step.

    ``select`` returns ``steps[i]`` for the largest ``i`` with
    ``thresholds[i] <= r`` (left-closed), or ``fallback_k`` when ``r`` lies
    below every threshold.
    """

    thresholds: tuple[float, ...]
    steps: tuple[int, ...]
    k_max: int = DEFAULT_K_MAX
    fallback_k: int = 0
    alpha: Optional[float] = None

    def __post_init__(self):
        th = tuple(float(x) for x in self.thresholds)
        st = tuple(int(x) for x in self.steps)
        object.__setattr__(self, "thresholds", th)
        object.__setattr__(self, "steps", st)
        if len(th) != len(st):
            raise InvalidArgument("thresholds and steps differ in length")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise InvalidArgument("thresholds must be strictly ascending")
        if any(b < a for a, b in zip(st, st[1:])):
            raise InvalidArgument("steps must be non-decreasing")
        if any(k > self.k_max or k < 0 for k in st) or not 0 <= self.fallback_k <= self.k_max:
            raise InvalidArgument("steps must lie in [0, k_max]")
        if st and self.fallback_k > st[0]:
            raise InvalidArgument("fallback_k must not exceed the first step")

    def select(self, r: float) -> int:
        i = int(np.searchsorted(self.thresholds, r, side="right")) - 1
        return self.fallback_k if i < 0 else self.steps[i]

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "k_max": self.k_max,
            "thresholds": list(self.thresholds),
            "steps": list(self.steps),
            "fallback_k": self.fallback_k,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "KLogic":
        return cls(
            thresholds=tuple(obj["thresholds"]),
            steps=tuple(obj["steps"]),
            k_max=int(obj.get("k_max", DEFAULT_K_MAX)),
            fallback_k=int(obj.get("fallback_k", 0)),
            alpha=obj.get("alpha"),
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "KLogic":
        return cls.from_json(json.loads(Path(path).read_text()))


def select_k(logic: KLogic, r: float) -> int:
    return logic.select(r)


@dataclass
class CalibrationRecord:
    """Sweep outcome for one target frame: its ratio and Q(k)/Q_full per k."""

    scene_id: str
    frame_index: int
    ratio: float
    factors: dict[int, float] = field(default_factory=dict)


def write_records_csv(path: Union[str, Path], records: Iterable[CalibrationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "frame", "ratio", "k", "quality_factor"])
        for rec in records:
            for k in sorted(rec.factors):
                w.writerow([rec.scene_id, rec.frame_index, repr(rec.ratio), k, repr(rec.factors[k])])


def read_records_csv(path: Union[str, Path]) -> list[CalibrationRecord]:
    out: dict[tuple[str, int], CalibrationRecord] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["scene_id"], int(row["frame"]))
            rec = out.setdefault(key, CalibrationRecord(key[0], key[1], float(row["ratio"])))
            rec.factors[int(row["k"])] = float(row["quality_factor"])
    return list(out.values())


def decile_bins(ratios: np.ndarray, n_bins: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Quantile edges and the bin index of each ratio (bins are [e_j, e_j+1))."""
    edges = np.quantile(ratios, np.linspace(0.0, 1.0, n_bins + 1))
    idx = np.searchsorted(edges[1:-1], ratios, side="right")
    return edges, idx


def fit_klogic(
    records: Sequence[CalibrationRecord],
    alpha: float,
    grid: Sequence[int] = DEFAULT_GRID,
    k_max: int = DEFAULT_K_MAX,
    n_bins: int = 10,
) -> KLogic:
    """Aggregate sweep records into a monotone k-logic.

    Each ratio decile picks the largest grid step whose mean quality factor
    over the bin reaches ``alpha`` (0 if none does). Empty bins copy their
    lower neighbour. A running minimum from the top bin downward makes the
    table monotone, then steps are clamped to ``k_max``.
    """
    if not records:
        raise InvalidArgument("no calibration records")
    if not 0.0 < alpha <= 1.0:
        raise InvalidArgument(f"alpha must be in (0, 1], got {alpha}")
    grid = sorted(int(k) for k in grid)
    ratios = np.array([r.ratio for r in records])
    factors = np.array([[r.factors[k] for k in grid] for r in records])
    edges, idx = decile_bins(ratios, n_bins)

    # feasible[j]: steps whose bin-mean factor reaches alpha (0 always is)
    feasible: list[Optional[set[int]]] = []
    for j in range(n_bins):
        members = idx == j
        if not members.any():
            feasible.append(None)
            continue
        means = factors[members].mean(axis=0)
        feasible.append({0} | {k for k, m in zip(grid, means) if m >= alpha})
    for j in range(n_bins):
        if feasible[j] is None:
            feasible[j] = feasible[j - 1] if j > 0 else {0}

    def best_below(j: int, cap: int) -> int:
        return max(k for k in feasible[j] if k <= cap)

    ks = [best_below(j, k_max) for j in range(n_bins)]
    # lowering a step can land on an infeasible one when factors are not
    # monotone in k, so alternate running-min and re-selection until stable
    while True:
        capped = list(ks)
        for j in range(n_bins - 2, -1, -1):
            capped[j] = min(capped[j], capped[j + 1])
        capped = [best_below(j, c) for j, c in enumerate(capped)]
        if capped == ks:
            break
        ks = capped

    # bin 0 is the fallback; collapse repeated edges and repeated steps
    fallback = ks[0]
    thresholds: list[float] = []
    steps: list[int] = []
    for j in range(1, n_bins):
        edge = float(edges[j])
        if thresholds and edge <= thresholds[-1]:
            thresholds.pop()
            steps.pop()
        prev = steps[-1] if steps else fallback
        if ks[j] != prev:
            thresholds.append(edge)
            steps.append(ks[j])
    return KLogic(tuple(thresholds), tuple(steps), k_max=k_max, fallback_k=fallback, alpha=alpha)
