"""Per-POI K-Means over standardized downlink profiles, with the relative-size cluster filter."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .dataset import PoiCategory, TrafficDataset
from .preprocess import Scaler


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterModel:
    poi: PoiCategory
    k: int
    centroids: np.ndarray
    assignments: dict[str, int]
    retained: frozenset[int]
    inertia: float
    inertia_trace: tuple[float, ...] = field(default=(), compare=False)
    n_iter: int = field(default=0, compare=False)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(list(self.assignments.values()), minlength=self.k)

    @property
    def modeled_cells(self) -> list[str]:
        return sorted(c for c, a in self.assignments.items() if a in self.retained)

    @property
    def unmodeled_cells(self) -> list[str]:
        return sorted(c for c, a in self.assignments.items() if a not in self.retained)

    def members(self, cluster: int) -> list[str]:
        return sorted(c for c, a in self.assignments.items() if a == cluster)

    def cluster_inertia(self, profiles: dict[str, np.ndarray]) -> np.ndarray:
        out = np.zeros(self.k)
        for cid, a in self.assignments.items():
            out[a] += float(np.sum((profiles[cid] - self.centroids[a]) ** 2))
        return out

    def to_dict(self) -> dict:
        return {
            "poi": {"id": self.poi.id, "name": self.poi.name},
            "k": self.k,
            "centroids": self.centroids.tolist(),
            "assignments": dict(sorted(self.assignments.items())),
            "retained": sorted(self.retained),
            "inertia": self.inertia,
            "inertia_trace": list(self.inertia_trace),
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterModel":
        return cls(
            poi=PoiCategory(data["poi"]["id"], data["poi"]["name"]),
            k=data["k"],
            centroids=np.asarray(data["centroids"], dtype=np.float64),
            assignments={c: int(a) for c, a in data["assignments"].items()},
            retained=frozenset(data["retained"]),
            inertia=float(data["inertia"]),
            inertia_trace=tuple(data.get("inertia_trace", ())),
            n_iter=data.get("n_iter", 0),
        )


def squared_distances(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: indices of the initial centers, one draw per center."""
    n = len(X)
    chosen = [int(rng.integers(n))]
    closest = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            cumulative = np.cumsum(closest)
            idx = int(np.searchsorted(cumulative, rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        closest = np.minimum(closest, ((X - X[idx]) ** 2).sum(axis=1))
    return np.asarray(chosen, dtype=np.int64)


def lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int = 300, tol: float = 1e-6):
    """Run Lloyd iterations from the given centroids.

    Returns ``(centroids, labels, inertia_trace)``; the final centroids are the
    ones the final labels were assigned against, so labels are always
    nearest-centroid and the last trace entry is their exact inertia.
    """
    centroids = np.array(centroids, dtype=np.float64)
    k = len(centroids)
    d2 = squared_distances(X, centroids)
    labels = d2.argmin(axis=1)
    trace = [float(d2[np.arange(len(X)), labels].sum())]
    for _ in range(max_iter):
        point_d2 = d2[np.arange(len(X)), labels]
        new = np.empty_like(centroids)
        counts = np.bincount(labels, minlength=k)
        used: set[int] = set()
        for c in range(k):
            if counts[c]:
                new[c] = X[labels == c].mean(axis=0)
            else:
                # empty cluster: move it onto the worst-fitted point not already taken
                order = np.argsort(-point_d2, kind="stable")
                pick = next(int(i) for i in order if int(i) not in used)
                used.add(pick)
                new[c] = X[pick]
        centroids = new
        d2 = squared_distances(X, centroids)
        labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(X)), labels].sum())
        previous = trace[-1]
        trace.append(inertia)
        if previous <= 0 or (previous - inertia) < tol * previous:
            break
    return centroids, labels, trace


def fit_kmeans(
    profiles: dict[str, np.ndarray],
    k: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    poi: PoiCategory | None = None,
    ratio: float = 0.2,
) -> ClusterModel:
    """K-Means (Euclidean, k-means++ init) over equal-length profiles keyed by cell_id.

    ``k`` is reduced to the number of profiles when there are fewer of them.
    """
    if not profiles:
        raise ClusteringError("no profiles to cluster")
    if k < 1:
        raise ClusteringError("k must be >= 1")
    cell_ids = sorted(profiles)
    X = np.asarray([profiles[c] for c in cell_ids], dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ClusteringError("profiles must be equal-length, non-empty series")
    k = min(k, len(X))
    rng = np.random.default_rng(seed)
    init = X[kmeans_plusplus(X, k, rng)]
    centroids, labels, trace = lloyd(X, init, max_iter=max_iter, tol=tol)
    assignments = {c: int(a) for c, a in zip(cell_ids, labels)}
    sizes = np.bincount(labels, minlength=k)
    return ClusterModel(
        poi=poi or PoiCategory(0, "unlabelled"),
        k=k,
        centroids=centroids,
        assignments=assignments,
        retained=frozenset(_retained(sizes, ratio)),
        inertia=trace[-1],
        inertia_trace=tuple(trace),
        n_iter=len(trace) - 1,
    )


def _retained(sizes, ratio: float) -> set[int]:
    if not 0 < ratio <= 1:
        raise ClusteringError("ratio must be in (0, 1]")
    sizes = [int(s) for s in sizes]
    largest = max(sizes)
    # exact rational comparison so e.g. 7 >= 0.2 * 35 holds
    r = Fraction(str(ratio))
    return {c for c, s in enumerate(sizes) if s * r.denominator >= r.numerator * largest}


def filter_clusters(model: ClusterModel, ratio: float = 0.2) -> set[int]:
    """Clusters holding at least ``ratio`` times as many cells as the largest one."""
    if not model.assignments:
        raise ClusteringError("model has no assignments")
    return _retained(model.sizes, ratio)


def profile(dataset: TrafficDataset, scaler: Scaler, cell_id: str) -> np.ndarray:
    cell = dataset.cell(cell_id)
    return scaler.transform(cell_id, cell.values[: dataset.train_weeks])[:, 0]


def poi_seed(seed: int, poi: PoiCategory) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(poi.id,)).generate_state(1)[0])


def cluster_pipeline(
    dataset: TrafficDataset,
    scaler: Scaler,
    k: int = 50,
    ratio: float = 0.2,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> dict[PoiCategory, ClusterModel]:
    """One K-Means model per POI, clustering training-week downlink shapes only."""
    models = {}
    for poi, cells in dataset.by_poi().items():
        profiles = {c.cell_id: scaler.transform(c.cell_id, c.values[: dataset.train_weeks])[:, 0] for c in cells}
        models[poi] = fit_kmeans(profiles, k, poi_seed(seed, poi), max_iter, tol, poi=poi, ratio=ratio)
    return models


def write_cluster_report(
    models: dict[PoiCategory, ClusterModel],
    path: str | Path,
    dataset: TrafficDataset,
    scaler: Scaler,
) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["poi", "cluster", "size", "retained", "inertia_share"])
        for poi, model in sorted(models.items()):
            profiles = {c: profile(dataset, scaler, c) for c in model.assignments}
            per_cluster = model.cluster_inertia(profiles)
            total = per_cluster.sum()
            for c, size in enumerate(model.sizes):
                share = per_cluster[c] / total if total > 0 else 0.0
                writer.writerow([poi.name, c, int(size), int(c in model.retained), f"{share:.6f}"])
