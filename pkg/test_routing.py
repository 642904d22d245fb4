"""
Tests for grid graphs, Bellman-Ford, exact and cluster-decomposed routing
"""

import heapq
import itertools
import math

import numpy as np
import pytest

from clustering import cluster_orders
from orders import OrderStream, generate_route_study_order
from routing import (
    DEFAULT_SEGMENT_CAPACITY,
    INF,
    DisconnectedStopsError,
    DistanceMatrix,
    EdgeListGraph,
    NegativeCycleError,
    RouteEvaluator,
    RouteLimitError,
    bellman_ford,
    benchmark_bellman_ford,
    build_grid_graph,
    clustered_route,
    exact_open_route,
    held_karp_open_route,
    pairwise_distances,
    plan_routes_for_model,
    plan_segmentation,
    read_edge_list,
    route_count_reduction,
    write_edge_list,
)
from warehouse_state import GridDims
from wms_loop import run_main_loop


def dijkstra_oracle(graph, source):
    adjacency = {}
    for u, v, w in zip(graph.u.tolist(), graph.v.tolist(), graph.w.tolist()):
        adjacency.setdefault(u, []).append((v, w))
    dist = [INF] * graph.vertex_count
    dist[source] = 0
    heap = [(0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adjacency.get(u, []):
            if d + w < dist[v]:
                dist[v] = d + w
                heapq.heappush(heap, (d + w, v))
    return dist


def random_graph(rng, vertices, edges, low=0, high=20):
    return EdgeListGraph(
        vertices,
        rng.integers(0, vertices, size=edges),
        rng.integers(0, vertices, size=edges),
        rng.integers(low, high + 1, size=edges),
    )


def random_distance_matrix(rng, n, grid=10):
    graph = build_grid_graph(GridDims(grid, grid, 1))
    stops = set()
    while len(stops) < n:
        stops.add((int(rng.integers(1, grid + 1)), int(rng.integers(1, grid + 1))))
    return pairwise_distances(graph, sorted(stops))


def brute_force_open_route(dm):
    best = math.inf
    for order in itertools.permutations(range(dm.n)):
        best = min(best, dm.length_of(order))
    return best


@pytest.mark.parametrize("nx,ny,edges", [(2, 2, 8), (10, 10, 360), (1, 1, 0), (3, 1, 4)])
def test_grid_graph_counts(nx, ny, edges):
    graph = build_grid_graph(GridDims(nx, ny, 1))
    assert graph.vertex_count == nx * ny
    assert graph.edge_count == edges
    assert (graph.w == 1).all()


def test_grid_graph_edges_join_neighbours():
    dims = GridDims(4, 3, 1)
    graph = build_grid_graph(dims)
    for u, v in zip(graph.u, graph.v):
        (ui, uj), (vi, vj) = graph.stop_of(u), graph.stop_of(v)
        assert abs(ui - vi) + abs(uj - vj) == 1


def test_path_graph_distances():
    graph = EdgeListGraph(3, [0, 1, 1, 2], [1, 0, 2, 1], [1, 1, 1, 1])
    paths = bellman_ford(graph, [0])
    assert paths.dist[0].tolist() == [0, 1, 2]
    assert paths.path_to(0, 2) == [0, 1, 2]


def test_grid_distance_is_manhattan():
    graph = build_grid_graph(GridDims(10, 10, 1))
    paths = bellman_ford(graph, [graph.vertex_of((1, 1))])
    assert paths.dist[0, graph.vertex_of((10, 10))] == 18
    assert paths.dist[0, graph.vertex_of((4, 7))] == 9


def test_unreachable_vertices_stay_infinite():
    graph = EdgeListGraph(4, [0, 2], [1, 3], [5, 1])
    paths = bellman_ford(graph, [0])
    assert paths.dist[0, 1] == 5
    assert paths.dist[0, 3] == INF
    assert paths.pred[0, 3] == -1
    assert paths.path_to(0, 3) == []


def test_bellman_ford_matches_dijkstra_on_random_graphs():
    rng = np.random.default_rng(0)
    for _ in range(500):
        vertices = int(rng.integers(2, 60))
        graph = random_graph(rng, vertices, int(rng.integers(1, 4 * vertices)))
        sources = rng.choice(vertices, size=min(3, vertices), replace=False)
        paths = bellman_ford(graph, sources)
        for row, source in enumerate(sources):
            assert paths.dist[row].tolist() == dijkstra_oracle(graph, int(source))


def test_predecessors_encode_shortest_paths():
    rng = np.random.default_rng(1)
    graph = random_graph(rng, 40, 160, low=1)
    paths = bellman_ford(graph, [0])
    weights = {}
    for u, v, w in zip(graph.u.tolist(), graph.v.tolist(), graph.w.tolist()):
        weights[(u, v)] = min(w, weights.get((u, v), INF))
    for target in range(40):
        path = paths.path_to(0, target)
        if not path:
            continue
        assert sum(weights[(a, b)] for a, b in zip(path, path[1:])) == paths.dist[0, target]


def test_negative_weights_without_cycle():
    # DAG 0 -> 1 -> 2 with a negative shortcut
    graph = EdgeListGraph(4, [0, 1, 0, 2], [1, 2, 2, 3], [4, -3, 2, 1])
    paths = bellman_ford(graph, [0])
    assert paths.dist[0].tolist() == [0, 4, 1, 2]


def test_planted_negative_cycles_are_detected():
    rng = np.random.default_rng(2)
    for _ in range(50):
        vertices = int(rng.integers(5, 40))
        base = random_graph(rng, vertices, 3 * vertices)
        cycle = rng.choice(np.arange(1, vertices), size=3, replace=False)
        u = np.concatenate([base.u, [0, cycle[0], cycle[1], cycle[2]]])
        v = np.concatenate([base.v, [cycle[0], cycle[1], cycle[2], cycle[0]]])
        w = np.concatenate([base.w, [1, -10, -10, -10]])
        graph = EdgeListGraph(vertices, u, v, w)
        with pytest.raises(NegativeCycleError) as info:
            bellman_ford(graph, [0])
        assert 0 <= info.value.vertex < vertices


def test_negative_self_loop_on_single_vertex():
    with pytest.raises(NegativeCycleError):
        bellman_ford(EdgeListGraph(1, [0], [0], [-1]), [0])


def test_pairwise_distances_match_single_source_runs():
    graph = build_grid_graph(GridDims(8, 6, 1))
    stops = [(1, 1), (8, 6), (3, 4), (5, 2)]
    dm = pairwise_distances(graph, stops)
    assert (np.diag(dm.d) == 0).all()
    np.testing.assert_array_equal(dm.d, dm.d.T)
    for a, stop in enumerate(stops):
        single = bellman_ford(graph, [graph.vertex_of(stop)])
        for b, other in enumerate(stops):
            assert dm.d[a, b] == single.dist[0, graph.vertex_of(other)]
    assert pairwise_distances(graph, [(1, 1), (1, 3)]).d[0, 1] == 2


def test_source_batches_agree_with_single_batch():
    graph = build_grid_graph(GridDims(6, 6, 1))
    sources = list(range(36))
    np.testing.assert_array_equal(bellman_ford(graph, sources, batch_size=5).dist,
                                  bellman_ford(graph, sources, batch_size=64).dist)


def test_plan_segmentation_examples():
    assert plan_segmentation(10, 4).ranges == [(0, 4), (4, 4), (8, 2)]
    assert plan_segmentation(7, 100).ranges == [(0, 7)]
    assert plan_segmentation(math.factorial(10) // 2).batch_count == 1
    with pytest.raises(ValueError):
        plan_segmentation(10, 0)


def test_plan_segmentation_partitions_space():
    plan = plan_segmentation(1000, 37)
    covered = [i for start, count in plan.ranges for i in range(start, start + count)]
    assert covered == list(range(1000))
    assert all(count <= 37 for _, count in plan.ranges)


def test_exact_route_small_cases():
    dm = DistanceMatrix([(0, 0), (0, 1), (0, 2)], np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]]))
    plan = exact_open_route(dm)
    assert plan.total_length == 2
    assert plan.stops == [(0, 0), (0, 1), (0, 2)]

    single = DistanceMatrix([(3, 3)], np.zeros((1, 1), dtype=np.int64))
    assert exact_open_route(single).total_length == 0


def test_exact_route_matches_brute_force():
    rng = np.random.default_rng(3)
    for n in range(2, 7):
        dm = random_distance_matrix(rng, n)
        assert exact_open_route(dm).total_length == brute_force_open_route(dm)


def test_exact_route_equals_held_karp():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(2, 10))
        if rng.random() < 0.5:
            dm = random_distance_matrix(rng, n)
        else:
            d = rng.integers(1, 30, size=(n, n))
            d = np.triu(d, 1) + np.triu(d, 1).T
            dm = DistanceMatrix([(i + 1, 1) for i in range(n)], d)
        assert exact_open_route(dm).total_length == held_karp_open_route(dm).total_length


def test_segmented_evaluation_returns_same_route():
    rng = np.random.default_rng(5)
    for n in (5, 7, 8):
        dm = random_distance_matrix(rng, n)
        whole = exact_open_route(dm)
        pieces = exact_open_route(dm, capacity=97)
        threaded = exact_open_route(dm, capacity=211, workers=3)
        assert whole == pieces == threaded


def test_exact_route_ties_go_to_smallest_sequence():
    d = np.ones((4, 4), dtype=np.int64) - np.eye(4, dtype=np.int64)
    dm = DistanceMatrix([(1, 1), (2, 1), (3, 1), (4, 1)], d)
    assert exact_open_route(dm).stops == [(1, 1), (2, 1), (3, 1), (4, 1)]


def test_route_length_consistent_with_matrix():
    rng = np.random.default_rng(6)
    dm = random_distance_matrix(rng, 7)
    index = {stop: i for i, stop in enumerate(dm.stops)}
    for plan in (exact_open_route(dm), held_karp_open_route(dm)):
        order = [index[stop] for stop in plan.stops]
        assert sorted(order) == list(range(7))
        assert dm.length_of(order) == plan.total_length
        reverse = [index[stop] for stop in plan.reversed().stops]
        assert dm.length_of(reverse) == plan.total_length


def test_held_karp_two_stops():
    dm = DistanceMatrix([(1, 1), (4, 5)], np.array([[0, 7], [7, 0]]))
    assert held_karp_open_route(dm).total_length == 7


def test_route_limits():
    rng = np.random.default_rng(7)
    dm = random_distance_matrix(rng, 6)
    with pytest.raises(RouteLimitError):
        exact_open_route(dm, limit=5)
    with pytest.raises(RouteLimitError):
        held_karp_open_route(dm, limit=4)


def test_disconnected_stops_are_rejected():
    graph = EdgeListGraph(4, [0, 1, 2, 3], [1, 0, 3, 2], [1, 1, 1, 1])
    dm = pairwise_distances(graph, [0, 2])
    with pytest.raises(DisconnectedStopsError):
        exact_open_route(dm)


def test_clustered_route_with_one_cluster_is_exact():
    rng = np.random.default_rng(8)
    dm = random_distance_matrix(rng, 6)
    assert clustered_route(dm, [1] * 6).total_length == exact_open_route(dm).total_length


def test_clustered_route_with_singletons_is_exact():
    rng = np.random.default_rng(9)
    for n in range(2, 7):
        dm = random_distance_matrix(rng, n)
        assert clustered_route(dm, list(range(n))).total_length == exact_open_route(dm).total_length


def test_clustered_route_never_beats_optimum():
    rng = np.random.default_rng(10)
    for _ in range(30):
        n = int(rng.integers(3, 10))
        dm = random_distance_matrix(rng, n)
        labels = rng.integers(1, 4, size=n).tolist()
        plan = clustered_route(dm, labels)
        assert plan.total_length >= exact_open_route(dm).total_length
        index = {stop: i for i, stop in enumerate(dm.stops)}
        assert dm.length_of([index[s] for s in plan.stops]) == plan.total_length


def test_clustered_route_accepts_stop_mapping():
    dm = DistanceMatrix([(1, 1), (1, 2), (5, 5)], np.array([[0, 1, 8], [1, 0, 7], [8, 7, 0]]))
    plan = clustered_route(dm, {(1, 1): 2, (1, 2): 2, (5, 5): 9})
    assert plan.total_length == 8


@pytest.mark.parametrize("n,partition,expected", [
    (12, (6, 6), 724),
    (12, (4, 4, 4), 60),
    (12, (3, 3, 3, 3), 204),
    (15, (5, 5, 5), 204),
])
def test_route_count_reduction(n, partition, expected):
    reduced, brute = route_count_reduction(n, partition)
    assert reduced == expected
    assert brute == math.factorial(n) // 2


def test_route_count_reduction_single_cluster():
    assert route_count_reduction(9, (9,)) == (1 + math.factorial(9) // 2, math.factorial(9) // 2)
    with pytest.raises(ValueError):
        route_count_reduction(10, (4, 4))


def test_edge_list_round_trip(tmp_path):
    graph = build_grid_graph(GridDims(3, 4, 1))
    loaded = read_edge_list(write_edge_list(graph, tmp_path / "grid.txt"))
    assert loaded.vertex_count == graph.vertex_count
    np.testing.assert_array_equal(loaded.u, graph.u)
    np.testing.assert_array_equal(loaded.w, graph.w)
    assert (tmp_path / "grid.txt").read_text().splitlines()[0] == "12 34"


def test_edge_list_header_mismatch(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("3 2\n0 1 1\n")
    with pytest.raises(ValueError):
        read_edge_list(path)


def test_benchmark_reports_rate():
    graph = build_grid_graph(GridDims(20, 20, 1))
    report = benchmark_bellman_ford(graph, [0, 399], repeats=1)
    assert report["relaxations"] > 0
    assert report["edges_per_second"] > 0


def test_plan_routes_for_model(tiny_config, tiny_state):
    order = generate_route_study_order(tiny_config, seed=2, products=6)
    model = cluster_orders(tiny_state, order, K=3, seed=0)
    optimal, clustered = plan_routes_for_model(tiny_state, model)
    assert optimal is not None
    assert optimal.total_length <= clustered.total_length
    assert set(optimal.stops) == set(model.stop_labels())
    held_karp, _ = plan_routes_for_model(tiny_state, model, optimal_method="held_karp")
    assert held_karp.total_length == optimal.total_length


def test_route_evaluator_only_plans_requested_iterations(tiny_config, tiny_state):
    order = generate_route_study_order(tiny_config, seed=3, products=6)
    evaluator = RouteEvaluator(tiny_config.dims, at_iterations={1, 4})
    trajectory = run_main_loop(tiny_state, OrderStream(order), 4, route_evaluator=evaluator)
    exact = [record.route_len_exact for record in trajectory.records]
    assert exact[1] is None and exact[2] is None
    assert exact[0] is not None and exact[3] is not None
    assert sorted(evaluator.plans) == [1, 4]


def test_route_plan_csv(tmp_path):
    dm = DistanceMatrix([(1, 1), (2, 1)], np.array([[0, 1], [1, 0]]))
    plan = exact_open_route(dm)
    path = plan.to_csv(tmp_path / "route.csv", GridDims(3, 3, 1))
    lines = path.read_text().splitlines()
    assert lines[0] == "position,i,j,stop_index,total_length,method"
    assert lines[1] == "0,1,1,0,1,exact"


def test_default_capacity_constant():
    assert DEFAULT_SEGMENT_CAPACITY == 2_903_040
