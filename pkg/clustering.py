# -*- coding: utf-8 -*-
"""
Clustering Module for ClusterSlot
K-means grouping of purchase orders, per-cluster pick sets, centers and
covariances, silhouette scoring and cluster-separation geometry
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from orders import Order
from warehouse_state import Coord, WarehouseState, node_positions, stop_positions

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DEFAULT_K = 3
MAX_LLOYD_ITERATIONS = 100
FEATURE_MODES = ("centroid", "lines")

Stop = Tuple[int, int]


class ClusteringError(ValueError):
    """Raised when a clustering or silhouette computation is undefined"""


@dataclass
class KMeansResult:
    """Outcome of a seeded Lloyd run"""
    labels: np.ndarray
    centroids: np.ndarray
    iterations: int
    inertia_history: List[float] = field(default_factory=list)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else 0.0


@dataclass(frozen=True)
class PickSets:
    """S_pick, its projection S_stop and the picking frequency at each stop"""
    s_pick: FrozenSet[Coord]
    s_stop: FrozenSet[Stop]
    stop_frequency: Mapping[Stop, int]

    @classmethod
    def from_nodes(cls, nodes) -> "PickSets":
        s_pick = frozenset(Coord(*map(int, node)) for node in nodes)
        frequency: Dict[Stop, int] = {}
        for node in sorted(s_pick):
            frequency[node.stop] = frequency.get(node.stop, 0) + 1
        return cls(s_pick, frozenset(frequency), frequency)

    @property
    def stop_count(self) -> int:
        return len(self.s_stop)


@dataclass
class ClusterModel:
    """Assignment of purchase orders to clusters 1..K with per-cluster statistics"""
    K: int
    assignment: Dict[int, int]
    pick_sets: Dict[int, PickSets]
    centers: Dict[int, Optional[Tuple[float, float]]]
    covariances: Dict[int, Optional[np.ndarray]]
    node_labels: Dict[Coord, int]
    article_labels: Dict[int, int]

    def nonempty_clusters(self) -> List[int]:
        return [label for label in range(1, self.K + 1) if self.pick_sets[label].s_pick]

    def center_of_article(self, article: int) -> Tuple[float, float]:
        return self.centers[self.article_labels[article]]

    def all_pick_nodes(self) -> FrozenSet[Coord]:
        return frozenset(self.node_labels)

    def stop_labels(self) -> Dict[Stop, int]:
        """Each stop goes to the cluster picking most nodes there, ties to the smaller label"""
        labels: Dict[Stop, int] = {}
        best: Dict[Stop, int] = {}
        for label in range(1, self.K + 1):
            for stop, frequency in self.pick_sets[label].stop_frequency.items():
                if frequency > best.get(stop, 0):
                    best[stop] = frequency
                    labels[stop] = label
        return dict(sorted(labels.items()))

    def to_frames(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """(stops, centers) tables for CSV export"""
        stop_rows = []
        for label in range(1, self.K + 1):
            for (i, j), frequency in sorted(self.pick_sets[label].stop_frequency.items()):
                stop_rows.append({"i": i, "j": j, "frequency": frequency, "cluster_id": label})
        center_rows = []
        for label in range(1, self.K + 1):
            center = self.centers[label]
            cov = self.covariances[label]
            if center is None:
                continue
            eigenvalues = np.linalg.eigvalsh(cov)
            center_rows.append({
                "cluster_id": label,
                "x_bar": center[0],
                "y_bar": center[1],
                "sigma2_xx": cov[0, 0],
                "sigma2_yy": cov[1, 1],
                "sigma2_xy": cov[0, 1],
                "eig_min": eigenvalues[0],
                "eig_max": eigenvalues[1],
                "pick_nodes": len(self.pick_sets[label].s_pick),
                "stops": self.pick_sets[label].stop_count,
            })
        stops = pd.DataFrame(stop_rows, columns=["i", "j", "frequency", "cluster_id"])
        centers = pd.DataFrame(center_rows, columns=[
            "cluster_id", "x_bar", "y_bar", "sigma2_xx", "sigma2_yy", "sigma2_xy",
            "eig_min", "eig_max", "pick_nodes", "stops",
        ])
        return stops, centers


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.sum((points[:, np.newaxis, :] - centroids[np.newaxis, :, :]) ** 2, axis=2)


def kmeans_plus_plus(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; falls back to a uniform draw when all remaining distances are zero"""
    n = len(points)
    chosen = [int(rng.integers(n))]
    for _ in range(K - 1):
        d2 = _squared_distances(points, points[chosen]).min(axis=1)
        total = d2.sum()
        if total <= 0:
            chosen.append(int(rng.integers(n)))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
    return points[chosen].astype(float)


def _lloyd(X: np.ndarray, K: int, centroids: np.ndarray, max_iter: int) -> KMeansResult:
    labels = None
    history: List[float] = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        new_labels = np.argmin(_squared_distances(X, centroids), axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels

        for c in range(K):
            members = labels == c
            if members.any():
                centroids[c] = X[members].mean(axis=0)
        distances = np.sum((X - centroids[labels]) ** 2, axis=1)
        history.append(float(distances.sum()))

        taken = set()
        for c in range(K):
            if (labels == c).any():
                continue
            order = np.argsort(-distances, kind="stable")
            candidate = next(int(p) for p in order if int(p) not in taken)
            taken.add(candidate)
            centroids[c] = X[candidate]
            logger.debug(f"Re-seeded empty cluster {c} at point {candidate}")

    return KMeansResult(labels=labels, centroids=centroids, iterations=iterations, inertia_history=history)


def kmeans(points, K: int, seed: int = 0, max_iter: int = MAX_LLOYD_ITERATIONS,
           init: Optional[np.ndarray] = None, n_init: int = 1) -> KMeansResult:
    """
    Lloyd iterations from k-means++ seeding (or from `init` centroids).

    Stops when assignments are stable or after max_iter iterations. An empty
    cluster is re-seeded to the point farthest from its own centroid. With
    n_init > 1 the seedings are drawn in sequence from one generator and the
    run with the lowest final inertia wins, the earliest on ties.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, np.newaxis]
    if K < 1:
        raise ClusteringError(f"K must be positive, got {K}")
    if n_init < 1:
        raise ClusteringError(f"n_init must be positive, got {n_init}")
    if len(X) < K:
        raise ClusteringError(f"Cannot form {K} clusters from {len(X)} points")

    if init is not None:
        return _lloyd(X, K, np.array(init, dtype=float), max_iter)

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        result = _lloyd(X, K, kmeans_plus_plus(X, K, rng), max_iter)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def cluster_statistics(nodes) -> Tuple[Tuple[float, float], np.ndarray]:
    """Center (x̄, ȳ) and population covariance Σ of the (i, j) coordinates of picking nodes"""
    xy = np.asarray([(node[0], node[1]) for node in nodes], dtype=float)
    if len(xy) == 0:
        raise ClusteringError("Cluster statistics of an empty node set")
    center = xy.mean(axis=0)
    diffs = xy - center
    covariance = diffs.T @ diffs / len(xy)
    return (float(center[0]), float(center[1])), covariance


def purchase_features(state: WarehouseState, order: Order, features: str = "centroid") -> np.ndarray:
    """
    One K-means feature row per purchase order.

    `centroid` is the mean stop of the purchase order's articles. `lines`
    concatenates the stop of every line in line order, so a replaced line
    changes its own two coordinates only; shorter purchase orders are padded
    with their mean stop.
    """
    if features not in FEATURE_MODES:
        raise ClusteringError(f"Unknown feature mode {features!r}; expected one of {FEATURE_MODES}")
    stops = [stop_positions(state, purchase.article_types).astype(float) for purchase in order.purchases]
    if features == "centroid":
        return np.asarray([s.mean(axis=0) if len(s) else np.zeros(2) for s in stops], dtype=float)

    width = max((len(s) for s in stops), default=0)
    rows = []
    for s in stops:
        fill = s.mean(axis=0) if len(s) else np.zeros(2)
        padded = np.vstack([s, np.tile(fill, (width - len(s), 1))]) if width > len(s) else s
        rows.append(padded.reshape(-1))
    return np.asarray(rows, dtype=float)


def cluster_orders(state: WarehouseState, order: Order, K: int = DEFAULT_K, seed: int = 0,
                   assignment: Optional[Mapping[int, int]] = None, features: str = "centroid",
                   n_init: int = 1) -> ClusterModel:
    """
    Group the purchase orders by where their articles are stored and derive
    the per-cluster pick sets, centers and covariances.

    A node ordered by several purchase orders belongs to the cluster of the
    first one, so the S_pick(ℓ) partition S_pick. Passing `assignment`
    (purchase order -> ℓ) skips K-means and reuses a fixed grouping.
    """
    if assignment is None:
        result = kmeans(purchase_features(state, order, features), K, seed=seed, n_init=n_init)
        assignment = {p: int(label) + 1 for p, label in enumerate(result.labels)}
    else:
        assignment = dict(assignment)

    article_labels = {article: assignment[p] for article, p in order.owner_of().items()}
    articles = list(article_labels)
    nodes = node_positions(state, articles)
    node_labels = {Coord(*map(int, node)): article_labels[a] for a, node in zip(articles, nodes)}

    pick_sets, centers, covariances = {}, {}, {}
    for label in range(1, K + 1):
        members = [node for node, owner in node_labels.items() if owner == label]
        pick_sets[label] = PickSets.from_nodes(members)
        if members:
            centers[label], covariances[label] = cluster_statistics(members)
        else:
            centers[label], covariances[label] = None, None

    return ClusterModel(
        K=K,
        assignment=assignment,
        pick_sets=pick_sets,
        centers=centers,
        covariances=covariances,
        node_labels=node_labels,
        article_labels=article_labels,
    )


def silhouette_samples(points, labels) -> np.ndarray:
    """Per-point s(i); singleton clusters and a(i)=b(i)=0 score 0"""
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, np.newaxis]
    labels = np.asarray(labels)
    if len(X) != len(labels):
        raise ClusteringError(f"{len(X)} points but {len(labels)} labels")
    unique, codes = np.unique(labels, return_inverse=True)
    if len(unique) < 2:
        raise ClusteringError("Silhouette is undefined for fewer than two clusters")

    D = cdist(X, X)
    onehot = np.zeros((len(X), len(unique)))
    onehot[np.arange(len(X)), codes] = 1.0
    sums = D @ onehot
    counts = onehot.sum(axis=0)
    rows = np.arange(len(X))

    own_counts = counts[codes]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(own_counts > 1, sums[rows, codes] / (own_counts - 1), 0.0)
        means = sums / counts
    means[rows, codes] = np.inf
    b = means.min(axis=1)

    denominator = np.maximum(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denominator > 0, (b - a) / denominator, 0.0)
    s[own_counts == 1] = 0.0
    return s


def silhouette(points, labels) -> float:
    """Overall silhouette score S, the mean of s(i)"""
    return float(np.mean(silhouette_samples(points, labels)))


def silhouette_of_clustering(state: WarehouseState, order: Order, model: ClusterModel) -> float:
    """Silhouette over the stops of all picking nodes, each stop repeated by its picking frequency"""
    nodes = sorted(model.node_labels)
    points = np.array([node.stop for node in nodes], dtype=float)
    labels = np.array([model.node_labels[node] for node in nodes])
    return silhouette(points, labels)


def triangle_area(centers: Sequence[Tuple[float, float]]) -> float:
    """Shoelace area of the triangle spanned by three cluster centers"""
    if len(centers) != 3:
        raise ClusteringError(f"Triangle area needs exactly 3 centers, got {len(centers)}")
    (x1, y1), (x2, y2), (x3, y3) = centers
    return abs(x1 * (y2 - y3) + x2 * (y3 - y1) + x3 * (y1 - y2)) / 2.0


def export_cluster_csv(model: ClusterModel, stops_path: Union[str, Path],
                       centers_path: Union[str, Path]) -> Tuple[Path, Path]:
    stops, centers = model.to_frames()
    stops.to_csv(stops_path, index=False)
    centers.to_csv(centers_path, index=False, float_format="%.12g")
    return Path(stops_path), Path(centers_path)
