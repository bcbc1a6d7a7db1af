"""Scene embeddings and k-means routing to per-cluster k-logic tables."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import ConfigurationError, ImageFrame, InvalidArgument, luminance
from .quality import KLogic

log = logging.getLogger(__name__)

GRID = 4
HIST_BINS = 16
EMBED_DIM = GRID * GRID * 3 + HIST_BINS


def embed_frame(frame: ImageFrame) -> np.ndarray:
    """4x4 grid of mean RGB (48 dims) followed by a 16-bin luminance histogram."""
    rgb = frame.rgb
    h, w = rgb.shape[:2]
    rows = np.array_split(np.arange(h), GRID)
    cols = np.array_split(np.arange(w), GRID)
    cells = [rgb[r[0] : r[-1] + 1, c[0] : c[-1] + 1].mean(axis=(0, 1)) for r in rows for c in cols]
    lum = luminance(rgb).ravel()
    bins = np.minimum((lum * HIST_BINS).astype(np.int64), HIST_BINS - 1)
    hist = np.bincount(bins, minlength=HIST_BINS) / lum.size
    return np.concatenate([np.concatenate(cells), hist])


def embed_scene(inputs: Sequence[ImageFrame]) -> np.ndarray:
    if len(inputs) != 2:
        raise InvalidArgument(f"need two input frames, got {len(inputs)}")
    return 0.5 * (embed_frame(inputs[0]) + embed_frame(inputs[1]))


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, i.e. the lowest index on ties
    return np.argmin(_sq_dists(points, centroids), axis=1)


def _objective(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a chosen centre; take the first unchosen distinct one
            idx = next(i for i in range(n) if i not in chosen)
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen].copy()


@dataclass
class KMeansFit:
    centroids: np.ndarray
    labels: np.ndarray
    objective_history: list[float]
    iterations: int


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansFit:
    """Lloyd's algorithm with k-means++ seeding and farthest-point repair."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgument(f"points must be 2-D, got shape {x.shape}")
    if k < 1:
        raise InvalidArgument(f"K must be >= 1, got {k}")
    if len(np.unique(x, axis=0)) < k:
        raise InvalidArgument(f"need at least {k} distinct points, got {len(np.unique(x, axis=0))}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    labels = _assign(x, centroids)
    history = [_objective(x, centroids, labels)]
    it = 0
    for it in range(1, max_iter + 1):
        new = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                d = _sq_dists(x, new).min(axis=1)
                new[j] = x[int(np.argmax(d))]
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        labels = _assign(x, centroids)
        history.append(_objective(x, centroids, labels))
        if shift < tol:
            break
    return KMeansFit(centroids, labels, history, it)


@dataclass
class ClusterModel:
    """Centroids plus one k-logic per cluster."""

    centroids: np.ndarray
    logics: dict[int, KLogic] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.centroids)

    def assign(self, e: np.ndarray) -> int:
        return int(_assign(np.asarray(e, dtype=np.float64)[None], self.centroids)[0])

    def logic_for(self, cluster: int) -> KLogic:
        if cluster not in self.logics:
            raise ConfigurationError(f"no k-logic calibrated for cluster {cluster}")
        return self.logics[cluster]

    def route(self, e: np.ndarray) -> tuple[int, KLogic]:
        c = self.assign(e)
        return c, self.logic_for(c)

    @property
    def alpha(self) -> Optional[float]:
        alphas = {lg.alpha for lg in self.logics.values()}
        return alphas.pop() if len(alphas) == 1 else None

    def to_json(self) -> dict:
        return {
            "centroids": self.centroids.tolist(),
            "logics": {str(c): lg.to_json() for c, lg in sorted(self.logics.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClusterModel":
        # a bare k-logic file routes every scene to it
        if "thresholds" in obj:
            return cls.single(KLogic.from_json(obj))
        logics = {int(c): KLogic.from_json(v) for c, v in obj.get("logics", {}).items()}
        return cls(np.asarray(obj["centroids"], dtype=np.float64), logics)

    @classmethod
    def single(cls, logic: KLogic) -> "ClusterModel":
        return cls(np.zeros((1, EMBED_DIM)), {0: logic})

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ClusterModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def fit_clusters(embeddings: Sequence[np.ndarray], K: int = 3, seed: int = 0) -> ClusterModel:
    x = np.asarray(list(embeddings), dtype=np.float64)
    if len(x) < K:
        raise InvalidArgument(f"need at least {K} embeddings, got {len(x)}")
    fit = kmeans(x, K, seed=seed)
    log.debug("k-means converged after %d iterations", fit.iterations)
    return ClusterModel(fit.centroids)


def assign_cluster(model: ClusterModel, e: np.ndarray) -> int:
    return model.assign(e)
