"""Scene prototypes, the external memory they form, and clustering for
multi-prototype memories."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np

from .embedding import EmbeddingNet, SingleSceneSample
from .numcore import ShapeError

ClusterMethod = Literal["mean", "kmeans", "agglomerative"]


class InsufficientDataError(ValueError):
    """A scene has fewer samples than requested prototypes."""


def compute_prototype(embeddings) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] == 0:
        raise ValueError("compute_prototype: need a non-empty list of vectors")
    return e.sum(axis=0) / e.shape[0]


@dataclass
class LabelMergeMap:
    """Maps each memory scene to the single-scene classes whose samples build
    its prototype. A source class may feed several targets, e.g. a ``beach``
    class reused for ``sea``, and several sources may feed one target."""

    targets: dict[str, list[str]]

    def __post_init__(self):
        for t, srcs in self.targets.items():
            if not srcs:
                raise ValueError(f"merge target {t!r} has no source class")

    @classmethod
    def identity(cls, names: Sequence[str]) -> "LabelMergeMap":
        return cls({n: [n] for n in names})

    @classmethod
    def parse(cls, text: str, base: Sequence[str] | None = None) -> "LabelMergeMap":
        """Parse ``"residential:denseRes+mediumRes; sea:beach"``.

        If ``base`` is given, classes not mentioned as a target map to
        themselves, except those that were merged into another target.
        """
        targets: dict[str, list[str]] = {}
        for part in text.split(";"):
            part = part.strip()
            if not part:
                continue
            if ":" not in part:
                raise ValueError(f"bad merge entry {part!r}")
            t, srcs = part.split(":", 1)
            targets[t.strip()] = [s.strip() for s in srcs.split("+") if s.strip()]
        if base is not None:
            merged = {s for t, ss in targets.items() for s in ss if s != t}
            full = {}
            for n in base:
                if n in targets:
                    full[n] = targets.pop(n)
                elif n not in merged:
                    full[n] = [n]
            full.update(targets)
            targets = full
        return cls(targets)

    @property
    def scene_names(self) -> list[str]:
        return list(self.targets)

    def format(self) -> str:
        return "; ".join(f"{t}:{'+'.join(s)}" for t, s in self.targets.items())


@dataclass
class PrototypeMemory:
    matrix: np.ndarray  # (S*k) x D
    scene_names: list[str]
    prototypes_per_scene: int = 1
    row_to_scene: np.ndarray = field(default=None)  # type: ignore[assignment]
    method: str = "mean"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        s, k = len(self.scene_names), self.prototypes_per_scene
        if self.row_to_scene is None:
            self.row_to_scene = np.repeat(np.arange(s), k)
        self.row_to_scene = np.asarray(self.row_to_scene, dtype=int)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != s * k:
            raise ShapeError(f"memory has shape {self.matrix.shape}, expected {s * k} rows")
        if self.row_to_scene.shape != (s * k,) or np.any(np.bincount(self.row_to_scene, minlength=s) != k):
            raise ValueError("row_to_scene must give each scene exactly k rows")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("memory rows must be finite")
        self.matrix.setflags(write=False)

    @property
    def num_scenes(self) -> int:
        return len(self.scene_names)

    @property
    def num_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class ClusterResult:
    centers: np.ndarray
    assignments: np.ndarray
    sse_history: list[float] = field(default_factory=list)


def _sse(points, centers, assign) -> float:
    d = points - centers[assign]
    return float((d * d).sum())


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    idx = [int(rng.integers(n))]
    d2 = ((points - points[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a chosen center
            rest = np.setdiff1d(np.arange(n), idx)
            nxt = int(rest[rng.integers(rest.size)])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[idx].copy()


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-10) -> ClusterResult:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters keep their previous center, which keeps the objective
    non-increasing.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"kmeans: need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    assign = np.zeros(n, dtype=int)
    history = []
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        history.append(_sse(x, centers, assign))
        new = centers.copy()
        for j in range(k):
            members = x[assign == j]
            if members.shape[0]:
                new[j] = members.sum(axis=0) / members.shape[0]
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        history.append(_sse(x, centers, assign))
        if shift < tol:
            break
    return ClusterResult(centers, assign, history)


def agglomerative(points, k: int) -> ClusterResult:
    """Bottom-up Ward clustering down to ``k`` clusters.

    Merge cost of clusters A and B is the SSE increase
    ``|A||B| / (|A|+|B|) * ||mean_A - mean_B||^2``. Ties go to the pair with
    the lowest (i, j) cluster indices, where a merged cluster takes the lower
    index of its two parts.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"agglomerative: need 1 <= k <= n, got k={k}, n={n}")
    sizes = np.ones(n)
    means = x.copy()
    alive = np.ones(n, dtype=bool)
    labels = np.arange(n)
    diff = means[:, None, :] - means[None, :, :]
    cost = 0.5 * (diff * diff).sum(axis=2)
    cost[np.tril_indices(n)] = np.inf
    for _ in range(n - k):
        flat = int(np.argmin(cost))  # row-major: lowest i, then lowest j
        i, j = divmod(flat, n)
        ni, nj = sizes[i], sizes[j]
        means[i] = (ni * means[i] + nj * means[j]) / (ni + nj)
        sizes[i] = ni + nj
        alive[j] = False
        labels[labels == j] = i
        cost[j, :] = np.inf
        cost[:, j] = np.inf
        others = np.flatnonzero(alive)
        others = others[others != i]
        d = ((means[others] - means[i]) ** 2).sum(axis=1)
        c = sizes[others] * sizes[i] / (sizes[others] + sizes[i]) * d
        lo = others < i
        cost[others[lo], i] = c[lo]
        cost[i, others[~lo]] = c[~lo]
    roots = np.flatnonzero(alive)
    assign = np.searchsorted(roots, labels)
    centers = np.stack([x[assign == c].sum(axis=0) / np.sum(assign == c) for c in range(k)])
    return ClusterResult(centers, assign, [_sse(x, centers, assign)])


def build_memory(
    net: EmbeddingNet | None,
    samples: Sequence[SingleSceneSample],
    class_names: Sequence[str],
    merge: LabelMergeMap | Mapping[str, Sequence[str]] | None = None,
    k: int = 1,
    method: ClusterMethod = "mean",
    seed: int = 0,
) -> PrototypeMemory:
    """Embed single-scene samples and stack per-scene prototypes into a memory.

    ``class_names[i]`` names ``scene_index == i``. ``net=None`` uses the raw
    features as embeddings. Rows appear in merge-target order, k consecutive
    rows per scene.
    """
    if method == "mean" and k != 1:
        raise ValueError("method='mean' requires k=1")
    if method not in ("mean", "kmeans", "agglomerative"):
        raise ValueError(f"unknown clustering method {method!r}")
    if merge is None:
        merge = LabelMergeMap.identity(class_names)
    elif not isinstance(merge, LabelMergeMap):
        merge = LabelMergeMap({t: list(s) for t, s in merge.items()})
    index = {name: i for i, name in enumerate(class_names)}
    for srcs in merge.targets.values():
        for s in srcs:
            if s not in index:
                raise ValueError(f"merge map names unknown class {s!r}")

    x = np.stack([s.features for s in samples]).astype(np.float64)
    y = np.array([s.scene_index for s in samples], dtype=int)
    emb = x if net is None else net(x)

    rows = []
    for scene, srcs in merge.targets.items():
        mask = np.isin(y, [index[s] for s in srcs])
        e = emb[mask]
        if e.shape[0] < k:
            raise InsufficientDataError(f"scene {scene!r} has {e.shape[0]} samples, needs >= {k}")
        if method == "mean":
            rows.append(compute_prototype(e)[None, :])
        elif method == "kmeans":
            rows.append(kmeans(e, k, seed=seed).centers)
        else:
            rows.append(agglomerative(e, k).centers)
    return PrototypeMemory(np.vstack(rows), merge.scene_names, k, method=method)
