# -*- coding: utf-8 -*-
"""
Routing Module for ClusterSlot
Grid graphs, batched Bellman-Ford shortest paths, exact open routes over
segmented permutation spaces, Held-Karp and cluster-decomposed routing
"""

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from clustering import ClusterModel
from warehouse_state import GridDims, WarehouseState

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

INF = np.iinfo(np.int64).max // 4
DEFAULT_SEGMENT_CAPACITY = 2_903_040
DEFAULT_EXHAUSTIVE_LIMIT = 10
HELD_KARP_LIMIT = 16
MAX_STITCH_CLUSTERS = 7
SOURCE_BATCH = 64

Stop = Tuple[int, int]


class NegativeCycleError(ValueError):
    """A negative cycle is reachable from one of the sources"""

    def __init__(self, vertex: int):
        super().__init__(f"Negative cycle reachable through vertex {vertex}")
        self.vertex = vertex


class RouteLimitError(ValueError):
    """Too many stops for exhaustive routing"""


class DisconnectedStopsError(ValueError):
    """Some pair of stops has no connecting path"""


@dataclass
class EdgeListGraph:
    """Directed graph as parallel source/destination/weight arrays"""
    vertex_count: int
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    grid_dims: Optional[GridDims] = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.int64).reshape(-1)
        self.v = np.asarray(self.v, dtype=np.int64).reshape(-1)
        self.w = np.asarray(self.w, dtype=np.int64).reshape(-1)
        if not len(self.u) == len(self.v) == len(self.w):
            raise ValueError("Edge arrays u, v, w differ in length")
        if self.vertex_count < 0:
            raise ValueError(f"vertex_count must be >= 0, got {self.vertex_count}")
        if len(self.u) and (min(self.u.min(), self.v.min()) < 0
                            or max(self.u.max(), self.v.max()) >= self.vertex_count):
            raise ValueError(f"Edge endpoint outside [0, {self.vertex_count})")

    @property
    def edge_count(self) -> int:
        return len(self.u)

    def vertex_of(self, stop: Stop) -> int:
        if self.grid_dims is None:
            raise ValueError("vertex_of needs a grid graph")
        i, j = stop
        if not (1 <= i <= self.grid_dims.n_x and 1 <= j <= self.grid_dims.n_y):
            raise ValueError(f"Stop {stop} outside the {self.grid_dims.n_x}x{self.grid_dims.n_y} grid")
        return self.grid_dims.stop_index(stop)

    def stop_of(self, vertex: int) -> Stop:
        if self.grid_dims is None:
            raise ValueError("stop_of needs a grid graph")
        return self.grid_dims.stop_of_index(vertex)


@dataclass
class ShortestPaths:
    """Per-source distance and predecessor rows; unreachable entries hold INF and -1"""
    sources: np.ndarray
    dist: np.ndarray
    pred: np.ndarray
    rounds: int
    relaxations: int

    def path_to(self, source_row: int, target: int) -> List[int]:
        if self.dist[source_row, target] >= INF:
            return []
        path = [int(target)]
        source = int(self.sources[source_row])
        for _ in range(self.dist.shape[1]):
            if path[-1] == source:
                return path[::-1]
            path.append(int(self.pred[source_row, path[-1]]))
        raise ValueError(f"Predecessor chain from {target} does not reach source {source}")


@dataclass
class DistanceMatrix:
    stops: List[Stop]
    d: np.ndarray

    @property
    def n(self) -> int:
        return len(self.stops)

    def subset(self, indices: Sequence[int]) -> "DistanceMatrix":
        idx = np.asarray(indices, dtype=np.int64)
        return DistanceMatrix([self.stops[i] for i in idx], self.d[np.ix_(idx, idx)])

    def check_connected(self) -> None:
        if self.n and self.d.max() >= INF:
            a, b = np.argwhere(self.d >= INF)[0]
            raise DisconnectedStopsError(f"No path between stops {self.stops[a]} and {self.stops[b]}")

    def length_of(self, order: Sequence[int]) -> int:
        return int(sum(self.d[a, b] for a, b in zip(order, order[1:])))


@dataclass
class RoutePlan:
    """An open route over stops; length is the sum of consecutive shortest-path distances"""
    stops: List[Stop]
    total_length: int
    method: str

    def reversed(self) -> "RoutePlan":
        return RoutePlan(list(reversed(self.stops)), self.total_length, self.method)

    def to_frame(self, dims: Optional[GridDims] = None) -> pd.DataFrame:
        rows = []
        for position, (i, j) in enumerate(self.stops):
            rows.append({
                "position": position,
                "i": i,
                "j": j,
                "stop_index": dims.stop_index((i, j)) if dims else None,
                "total_length": self.total_length,
                "method": self.method,
            })
        return pd.DataFrame(rows, columns=["position", "i", "j", "stop_index", "total_length", "method"])

    def to_csv(self, path: Union[str, Path], dims: Optional[GridDims] = None) -> Path:
        self.to_frame(dims).to_csv(path, index=False)
        return Path(path)


@dataclass
class SegmentationPlan:
    n_perm: int
    capacity: int
    ranges: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def batch_count(self) -> int:
        return len(self.ranges)


def build_grid_graph(dims: GridDims) -> EdgeListGraph:
    """Unit-weight 4-neighbour grid on the (i, j) plane, vertex (j-1)*n_x + (i-1)"""
    V = dims.n_x * dims.n_y
    idx = np.arange(V, dtype=np.int64).reshape(dims.n_y, dims.n_x)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    u = np.concatenate([a, b])
    v = np.concatenate([b, a])
    order = np.lexsort((v, u))
    return EdgeListGraph(V, u[order], v[order], np.ones(len(u), dtype=np.int64), grid_dims=dims)


def _relax(graph: EdgeListGraph, dist: np.ndarray):
    """One Jacobi round: every candidate reads the previous round's distances"""
    S, V = dist.shape
    du = dist[:, graph.u]
    valid = du < INF
    candidates = np.where(valid, du + graph.w, INF)
    new = dist.reshape(-1).copy()
    targets = (np.arange(S, dtype=np.int64)[:, np.newaxis] * V + graph.v).reshape(-1)
    np.minimum.at(new, targets, candidates.reshape(-1))
    return new.reshape(S, V), candidates, valid


def _bellman_ford_batch(graph: EdgeListGraph, sources: np.ndarray) -> ShortestPaths:
    S, V = len(sources), graph.vertex_count
    dist = np.full((S, V), INF, dtype=np.int64)
    pred = np.full((S, V), -1, dtype=np.int64)
    dist[np.arange(S), sources] = 0

    rounds = relaxations = 0
    converged = False
    for _ in range(max(V - 1, 0)):
        new, candidates, valid = _relax(graph, dist)
        relaxations += int(valid.sum())
        rounds += 1
        improved = new < dist
        if not improved.any():
            converged = True
            break
        # predecessor: smallest edge index attaining the new minimum
        attains = valid & improved[:, graph.v] & (candidates == new[:, graph.v])
        rows, cols = np.nonzero(attains)
        flat_targets = rows * V + graph.v[cols]
        unique_targets, first = np.unique(flat_targets, return_index=True)
        pred.reshape(-1)[unique_targets] = graph.u[cols[first]]
        dist = new

    if not converged and graph.edge_count:
        new, _, valid = _relax(graph, dist)
        relaxations += int(valid.sum())
        improved = new < dist
        if improved.any():
            vertex = int(np.nonzero(improved.any(axis=0))[0][0])
            raise NegativeCycleError(vertex)

    return ShortestPaths(sources, dist, pred, rounds, relaxations)


def bellman_ford(graph: EdgeListGraph, sources, batch_size: int = SOURCE_BATCH) -> ShortestPaths:
    """
    Single-source shortest paths from every source at once.

    Each round relaxes all edges for a batch of sources with a min-reduction,
    stopping early on a quiet round. When V-1 rounds were not enough, one
    more round detects a reachable negative cycle.

    Raises:
        NegativeCycleError: naming a vertex whose distance still decreases
    """
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if len(sources) and (sources.min() < 0 or sources.max() >= graph.vertex_count):
        raise ValueError(f"Source outside [0, {graph.vertex_count})")

    parts = [
        _bellman_ford_batch(graph, sources[start:start + batch_size])
        for start in range(0, len(sources), batch_size)
    ]
    if not parts:
        empty = np.zeros((0, graph.vertex_count), dtype=np.int64)
        return ShortestPaths(sources, empty, empty.copy(), 0, 0)

    result = ShortestPaths(
        sources=sources,
        dist=np.vstack([p.dist for p in parts]),
        pred=np.vstack([p.pred for p in parts]),
        rounds=max(p.rounds for p in parts),
        relaxations=sum(p.relaxations for p in parts),
    )
    logger.debug(f"Bellman-Ford: {len(sources)} sources, {result.rounds} rounds, {result.relaxations} relaxations")
    return result


def benchmark_bellman_ford(graph: EdgeListGraph, sources, repeats: int = 3) -> Dict[str, float]:
    """Edges relaxed per second over the best of `repeats` runs"""
    best = math.inf
    paths = None
    for _ in range(max(repeats, 1)):
        start = time.perf_counter()
        paths = bellman_ford(graph, sources)
        best = min(best, time.perf_counter() - start)
    rate = paths.relaxations / best if best > 0 else math.inf
    logger.info(f"Bellman-Ford benchmark: V={graph.vertex_count} E={graph.edge_count} "
                f"{paths.relaxations} relaxations in {best:.4f}s ({rate:,.0f} edges/s)")
    return {
        "vertices": graph.vertex_count,
        "edges": graph.edge_count,
        "sources": len(np.atleast_1d(sources)),
        "rounds": paths.rounds,
        "relaxations": paths.relaxations,
        "seconds": best,
        "edges_per_second": rate,
    }


def pairwise_distances(graph: EdgeListGraph, stops: Sequence) -> DistanceMatrix:
    """Shortest-path lengths between every pair of stops; stops are (i, j) on grid graphs, else vertices"""
    stops = list(stops)
    if graph.grid_dims is not None:
        vertices = [graph.vertex_of(tuple(stop)) for stop in stops]
        stops = [tuple(int(c) for c in stop) for stop in stops]
    else:
        vertices = [int(stop) for stop in stops]
    if not vertices:
        return DistanceMatrix([], np.zeros((0, 0), dtype=np.int64))
    paths = bellman_ford(graph, vertices)
    return DistanceMatrix(stops, paths.dist[:, vertices])


def plan_segmentation(n_perm: int, capacity: int = DEFAULT_SEGMENT_CAPACITY) -> SegmentationPlan:
    """Split [0, n_perm) into consecutive ranges of at most `capacity` ranks"""
    if capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")
    if n_perm < 0:
        raise ValueError(f"n_perm must be >= 0, got {n_perm}")
    ranges = [(start, min(capacity, n_perm - start)) for start in range(0, n_perm, capacity)]
    return SegmentationPlan(n_perm, capacity, ranges)


def open_route_space(n: int) -> int:
    """Number of undirected open routes over n stops (orientations with first < last)"""
    return 1 if n <= 2 else math.factorial(n) // 2


class _EndpointPermutations:
    """
    Ranks the open routes with first endpoint < last endpoint: the rank
    selects an endpoint pair (a, b) in lexicographic order, then a
    lexicographic permutation of the remaining stops placed between them.
    """

    def __init__(self, n: int):
        self.n = n
        self.pairs = np.array([(a, b) for a in range(n) for b in range(a + 1, n)], dtype=np.int64)
        self.inner = np.array(
            [[c for c in range(n) if c != a and c != b] for a, b in self.pairs], dtype=np.int64,
        ).reshape(len(self.pairs), n - 2)
        self.inner_count = math.factorial(n - 2)
        self.radix = [math.factorial(n - 3 - k) for k in range(n - 2)]

    def unrank(self, start: int, count: int) -> np.ndarray:
        ranks = np.arange(start, start + count, dtype=np.int64)
        pair = ranks // self.inner_count
        rest = ranks % self.inner_count
        m = self.n - 2
        perms = np.empty((count, self.n), dtype=np.int64)
        perms[:, 0] = self.pairs[pair, 0]
        perms[:, -1] = self.pairs[pair, 1]
        used = np.zeros((count, m), dtype=bool)
        rows = np.arange(count)
        for k in range(m):
            digit = (rest // self.radix[k]) % (m - k)
            free_rank = np.cumsum(~used, axis=1, dtype=np.int16)
            slot = np.argmax((free_rank == (digit + 1)[:, np.newaxis]) & ~used, axis=1)
            used[rows, slot] = True
            perms[:, k + 1] = self.inner[pair, slot]
        return perms


def _best_in_segment(d: np.ndarray, space: _EndpointPermutations, start: int, count: int) -> Tuple[int, Tuple[int, ...]]:
    perms = space.unrank(start, count)
    lengths = np.zeros(count, dtype=np.int64)
    for k in range(space.n - 1):
        lengths += d[perms[:, k], perms[:, k + 1]]
    best = lengths.min()
    ties = perms[lengths == best]
    winner = ties[np.lexsort(ties.T[::-1])[0]]
    return int(best), tuple(int(p) for p in winner)


def exact_open_route(dm: DistanceMatrix, limit: int = DEFAULT_EXHAUSTIVE_LIMIT,
                     capacity: int = DEFAULT_SEGMENT_CAPACITY, workers: int = 1) -> RoutePlan:
    """
    Shortest open undirected route by exhaustive evaluation of the n!/2
    routes with first < last endpoint.

    Ties go to the lexicographically smallest stop-index sequence. Segments
    of the rank space may be evaluated by a thread pool; the reduction runs
    in segment order.

    Raises:
        RouteLimitError: n above `limit`
        DisconnectedStopsError: some pair of stops is unreachable
    """
    n = dm.n
    if n > limit:
        raise RouteLimitError(
            f"{n} stops exceed the exhaustive limit of {limit}; use clustered_route or held_karp_open_route"
        )
    dm.check_connected()
    if n == 0:
        return RoutePlan([], 0, "exact")
    if n == 1:
        return RoutePlan([dm.stops[0]], 0, "exact")

    space = _EndpointPermutations(n)
    plan = plan_segmentation(open_route_space(n), capacity)
    logger.debug(f"Exact route over {n} stops: {plan.n_perm} routes in {plan.batch_count} segments")

    if workers > 1 and plan.batch_count > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda r: _best_in_segment(dm.d, space, *r), plan.ranges))
    else:
        results = [_best_in_segment(dm.d, space, start, count) for start, count in plan.ranges]

    length, order = min(results)
    return RoutePlan([dm.stops[i] for i in order], length, "exact")


def held_karp_open_route(dm: DistanceMatrix, limit: int = HELD_KARP_LIMIT) -> RoutePlan:
    """Subset dynamic program for the shortest open route with free endpoints"""
    n = dm.n
    if n > limit:
        raise RouteLimitError(f"{n} stops exceed the Held-Karp limit of {limit}")
    dm.check_connected()
    if n <= 1:
        return RoutePlan(list(dm.stops), 0, "held_karp")

    d = dm.d.astype(np.int64)
    full = (1 << n) - 1
    dp = np.full((1 << n, n), INF, dtype=np.int64)
    parent = np.full((1 << n, n), -1, dtype=np.int64)
    for j in range(n):
        dp[1 << j, j] = 0
    bits = 1 << np.arange(n, dtype=np.int64)

    for mask in range(1, full):
        inside = (mask & bits) != 0
        row = dp[mask]
        if row.min() >= INF:
            continue
        candidates = np.where(inside[:, np.newaxis] & (row[:, np.newaxis] < INF), row[:, np.newaxis] + d, INF)
        best = candidates.min(axis=0)
        via = candidates.argmin(axis=0)
        targets = np.nonzero(~inside)[0]
        new_masks = mask | bits[targets]
        better = best[targets] < dp[new_masks, targets]
        dp[new_masks[better], targets[better]] = best[targets[better]]
        parent[new_masks[better], targets[better]] = via[targets[better]]

    end = int(np.argmin(dp[full]))
    length = int(dp[full, end])
    order = [end]
    mask = full
    while parent[mask, order[-1]] >= 0:
        previous = int(parent[mask, order[-1]])
        mask ^= 1 << order[-1]
        order.append(previous)
    if order[0] > order[-1]:
        order.reverse()
    return RoutePlan([dm.stops[i] for i in order], length, "held_karp")


def _solve_cluster(dm: DistanceMatrix, limit: int, capacity: int, workers: int) -> RoutePlan:
    if dm.n <= limit:
        return exact_open_route(dm, limit, capacity, workers)
    return held_karp_open_route(dm)


def clustered_route(dm: DistanceMatrix, labels, limit: int = DEFAULT_EXHAUSTIVE_LIMIT,
                    capacity: int = DEFAULT_SEGMENT_CAPACITY, workers: int = 1) -> RoutePlan:
    """
    Exact open route inside each cluster, then the best stitching over all
    cluster orders and orientations, joining consecutive clusters between
    their boundary stops.

    `labels` maps each stop to its cluster, either as a dict keyed by stop
    or as a sequence aligned with dm.stops. Empty clusters are skipped.
    """
    if isinstance(labels, Mapping):
        labels = [labels[stop] for stop in dm.stops]
    labels = list(labels)
    if len(labels) != dm.n:
        raise ValueError(f"{len(labels)} labels for {dm.n} stops")
    dm.check_connected()
    if dm.n == 0:
        return RoutePlan([], 0, "clustered")

    groups = {}
    for index, label in enumerate(labels):
        groups.setdefault(label, []).append(index)
    members = [groups[label] for label in sorted(groups)]
    if len(members) > MAX_STITCH_CLUSTERS:
        raise RouteLimitError(f"{len(members)} clusters exceed the stitching limit of {MAX_STITCH_CLUSTERS}")

    paths, internal = [], 0
    for indices in members:
        plan = _solve_cluster(dm.subset(indices), limit, capacity, workers)
        position = {stop: index for index, stop in zip(indices, dm.subset(indices).stops)}
        paths.append([position[stop] for stop in plan.stops])
        internal += plan.total_length

    d = dm.d
    best_length, best_order = None, None
    for cluster_order in itertools.permutations(range(len(paths))):
        for flips in itertools.product((False, True), repeat=len(paths)):
            chain = [paths[c][::-1] if flip else paths[c] for c, flip in zip(cluster_order, flips)]
            length = internal + sum(int(d[a[-1], b[0]]) for a, b in zip(chain, chain[1:]))
            if best_length is None or length < best_length:
                best_length = length
                best_order = [index for path in chain for index in path]

    return RoutePlan([dm.stops[i] for i in best_order], best_length, "clustered")


def route_count_reduction(n: int, partition: Sequence[int]) -> Tuple[int, int]:
    """(m!·2^(m-1) + Σ undirected routes per cluster, n!/2) as exact integers"""
    partition = [int(size) for size in partition]
    if any(size < 1 for size in partition):
        raise ValueError("Cluster sizes must be positive")
    if sum(partition) != n:
        raise ValueError(f"Partition {partition} does not sum to n={n}")
    m = len(partition)
    reduced = math.factorial(m) * 2 ** (m - 1) + sum(open_route_space(size) for size in partition)
    return reduced, open_route_space(n)


def write_edge_list(graph: EdgeListGraph, path: Union[str, Path]) -> Path:
    """`V E` header, then one `u v w` line per edge"""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"{graph.vertex_count} {graph.edge_count}\n")
        for u, v, w in zip(graph.u.tolist(), graph.v.tolist(), graph.w.tolist()):
            handle.write(f"{u} {v} {w}\n")
    return Path(path)


def read_edge_list(path: Union[str, Path]) -> EdgeListGraph:
    with open(path, "r", encoding="utf-8") as handle:
        header = handle.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: expected a 'V E' header")
        V, E = int(header[0]), int(header[1])
        rows = [line.split() for line in handle if line.strip()]
    if len(rows) != E:
        raise ValueError(f"{path}: header announces {E} edges, found {len(rows)}")
    edges = np.array(rows, dtype=np.int64).reshape(E, 3)
    return EdgeListGraph(V, edges[:, 0], edges[:, 1], edges[:, 2])


def plan_routes_for_model(state: WarehouseState, model: ClusterModel,
                          exhaustive_limit: int = DEFAULT_EXHAUSTIVE_LIMIT,
                          capacity: int = DEFAULT_SEGMENT_CAPACITY, workers: int = 1,
                          graph: Optional[EdgeListGraph] = None,
                          optimal_method: str = "exact") -> Tuple[Optional[RoutePlan], RoutePlan]:
    """
    Optimal and cluster-decomposed routes over the stops of a ClusterModel.

    With optimal_method="exact" the optimum comes from exhaustive search
    within `exhaustive_limit`, then from Held-Karp; with "held_karp" the
    subset program is used directly. Above the Held-Karp limit the optimum
    is deferred and returned as None.
    """
    if optimal_method not in ("exact", "held_karp"):
        raise ValueError(f"Unknown optimal_method {optimal_method!r}")
    graph = graph or build_grid_graph(state.dims)
    stop_labels = model.stop_labels()
    dm = pairwise_distances(graph, list(stop_labels))

    if optimal_method == "exact" and dm.n <= exhaustive_limit:
        optimal = exact_open_route(dm, exhaustive_limit, capacity, workers)
    elif dm.n <= HELD_KARP_LIMIT:
        optimal = held_karp_open_route(dm)
    else:
        logger.warning(f"Optimal route over {dm.n} stops deferred (above {HELD_KARP_LIMIT})")
        optimal = None

    clustered = clustered_route(dm, list(stop_labels.values()), exhaustive_limit, capacity, workers)
    return optimal, clustered


class RouteEvaluator:
    """
    Callable used by the WMS loop to record route lengths. When `at_iterations`
    is given, only those (1-based) calls plan routes; other calls report the
    stop count alone.
    """

    def __init__(self, dims: GridDims, exhaustive_limit: int = DEFAULT_EXHAUSTIVE_LIMIT,
                 capacity: int = DEFAULT_SEGMENT_CAPACITY, workers: int = 1,
                 optimal_method: str = "exact", at_iterations: Optional[Sequence[int]] = None):
        self.graph = build_grid_graph(dims)
        self.exhaustive_limit = exhaustive_limit
        self.capacity = capacity
        self.workers = workers
        self.optimal_method = optimal_method
        self.at_iterations = set(at_iterations) if at_iterations is not None else None
        self.calls = 0
        self.plans: Dict[int, Tuple[Optional[RoutePlan], RoutePlan]] = {}

    def __call__(self, state: WarehouseState, order, model: ClusterModel) -> Tuple[Optional[int], Optional[int], int]:
        self.calls += 1
        if self.at_iterations is not None and self.calls not in self.at_iterations:
            return None, None, len(model.stop_labels())
        optimal, clustered = plan_routes_for_model(
            state, model, self.exhaustive_limit, self.capacity, self.workers,
            graph=self.graph, optimal_method=self.optimal_method,
        )
        self.plans[self.calls] = (optimal, clustered)
        exact = optimal.total_length if optimal is not None else None
        return exact, clustered.total_length, len(clustered.stops)
