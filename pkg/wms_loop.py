# -*- coding: utf-8 -*-
"""
WMS Loop Module for ClusterSlot
The picking and restocking dynamical system: pick map, stock update, stock
check, relocation toward cluster centers and the trajectory iterator
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from clustering import (
    ClusterModel,
    ClusteringError,
    cluster_orders,
    silhouette_of_clustering,
    triangle_area,
)
from orders import Order, OrderStream
from warehouse_state import (
    Coord,
    WarehouseState,
    empty_node_array,
    locate_article,
    state_digest,
    total_stock,
    validate_state,
)

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# purchase orders are grouped by their line-wise stops, best of 10 K-means++ seedings
DEFAULT_FEATURES = "lines"
DEFAULT_KMEANS_RESTARTS = 10

# (exact length or None, clustered length, stop count)
RouteLengthFn = Callable[[WarehouseState, Order, ClusterModel], Tuple[Optional[int], Optional[int], int]]


@dataclass
class PickMap:
    """w(x, o): parcels to collect per node"""
    w: Dict[Coord, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.w.values())

    @property
    def support(self) -> List[Coord]:
        return sorted(node for node, count in self.w.items() if count)


@dataclass
class RelocationEvent:
    """An article moved from an insufficient node to an empty node nearer its cluster center"""
    article: int
    from_node: Coord
    to_node: Coord
    shortfall: int
    residue: int
    top_up: int
    distance_before: float
    distance_after: float


@dataclass
class ShortfallRecord:
    """Ledger row for an article whose node failed the strict stock check"""
    article: int
    node: Coord
    need: int
    residue: int
    top_up: int
    unfilled: int
    relocated: bool
    blocked: bool


@dataclass
class RestockOutcome:
    relocations: List[RelocationEvent] = field(default_factory=list)
    shortfalls: List[ShortfallRecord] = field(default_factory=list)

    @property
    def blocked(self) -> List[ShortfallRecord]:
        return [record for record in self.shortfalls if record.blocked]

    @property
    def top_up(self) -> int:
        return sum(record.top_up for record in self.shortfalls)

    @property
    def unfilled(self) -> int:
        return sum(record.unfilled for record in self.shortfalls)


@dataclass
class IterationRecord:
    """Statistics of iteration n, computed on state x_{n-1} and order o_n"""
    n: int
    state_digest: str
    order_size: int
    centers: Dict[int, Optional[Tuple[float, float]]]
    covariances: Dict[int, Optional[np.ndarray]]
    silhouette: float
    triangle_area: float
    relocations: int
    blocked: int
    stock_before: int
    stock_after: int
    top_up: int
    unfilled: int
    n_stops: int
    route_len_exact: Optional[int] = None
    route_len_approx: Optional[int] = None

    def as_row(self) -> Dict:
        row = {
            "n": self.n,
            "silhouette": self.silhouette,
            "area": self.triangle_area,
            "relocations": self.relocations,
            "route_len_exact": self.route_len_exact,
            "route_len_approx": self.route_len_approx,
            "n_stops": self.n_stops,
            "blocked": self.blocked,
            "order_size": self.order_size,
            "stock_before": self.stock_before,
            "stock_after": self.stock_after,
            "top_up": self.top_up,
            "unfilled": self.unfilled,
        }
        for label in sorted(self.centers):
            center = self.centers[label]
            cov = self.covariances[label]
            row[f"cx_{label}"] = center[0] if center else math.nan
            row[f"cy_{label}"] = center[1] if center else math.nan
            row[f"sxx_{label}"] = cov[0, 0] if cov is not None else math.nan
            row[f"syy_{label}"] = cov[1, 1] if cov is not None else math.nan
            row[f"sxy_{label}"] = cov[0, 1] if cov is not None else math.nan
        row["state_digest"] = self.state_digest
        return row


@dataclass
class Trajectory:
    """Per-iteration records of x_n = f(x_{n-1}, o_n) plus the event ledger"""
    records: List[IterationRecord] = field(default_factory=list)
    events: List[Dict] = field(default_factory=list)
    final_state: Optional[WarehouseState] = None

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([record.as_row() for record in self.records])

    def silhouette_series(self) -> np.ndarray:
        return np.array([record.silhouette for record in self.records], dtype=float)

    def area_series(self) -> np.ndarray:
        return np.array([record.triangle_area for record in self.records], dtype=float)

    def write_csv(self, path: Union[str, Path]) -> Path:
        self.to_frame().to_csv(path, index=False, float_format="%.12g")
        return Path(path)

    def write_events_jsonl(self, path: Union[str, Path]) -> Path:
        with open(path, "w", encoding="utf-8") as handle:
            for event in self.events:
                handle.write(json.dumps(event, sort_keys=True) + "\n")
        return Path(path)


def compute_pick_map(state: WarehouseState, order: Order) -> PickMap:
    """w at the unique node of every ordered article equals its ordered quantity"""
    dense = order.dense()
    w = {}
    for article in order.article_types:
        if dense[article] > 0:
            w[locate_article(state, article)] = int(dense[article])
    return PickMap(w)


def update_stock(state: WarehouseState, pick_map: PickMap) -> List[Coord]:
    """M' = M - w clamped at 0; returns the nodes driven to zero"""
    emptied = []
    for node, count in pick_map.w.items():
        index = (node.i - 1, node.j - 1, node.k - 1)
        remaining = max(int(state.M[index]) - count, 0)
        state.M[index] = remaining
        if count > 0:
            state.pick_count[index] += 1
        if remaining == 0 and count > 0:
            emptied.append(node)
    return sorted(emptied)


def increment_pick_count(state: WarehouseState, nodes) -> None:
    for node in nodes:
        state.pick_count[node.i - 1, node.j - 1, node.k - 1] += 1


def check_stock(state: WarehouseState, order: Order) -> bool:
    """True iff m_ijk > w_ijk at every picked node, so no shelf is emptied"""
    dense = order.dense()
    for article in order.article_types:
        need = int(dense[article])
        if need == 0:
            continue
        if not state.is_placed(article):
            return False
        if state.M.ravel()[state.article_index[article]] <= need:
            return False
    return True


def _distance(stop_i: float, stop_j: float, center: Tuple[float, float]) -> float:
    return math.hypot(stop_i - center[0], stop_j - center[1])


def check_stock_and_move(state: WarehouseState, order: Order, clusters: ClusterModel) -> RestockOutcome:
    """
    Restock every article whose node fails the strict check m > w.

    The article moves to the empty node whose stop is nearest its cluster
    center when its current stop is strictly farther from that center;
    otherwise, or when no empty node is left, it is replenished in place.
    Either way the residue is picked, the article gets M_n parcels and the
    shortfall is picked from its (new) node.
    """
    outcome = RestockOutcome()
    dense = order.dense()
    empty = empty_node_array(state)
    available = np.ones(len(empty), dtype=bool)
    flat_A = state.A.reshape(-1)
    flat_M = state.M.reshape(-1)

    for article in order.article_types:
        need = int(dense[article])
        if need == 0:
            continue
        node = locate_article(state, article)
        old_flat = int(state.article_index[article])
        residue = int(flat_M[old_flat])
        if residue > need:
            continue

        center = clusters.center_of_article(article)
        top_up = int(state.max_balance[article])
        shortfall = need - residue
        picked_after = min(shortfall, top_up)
        unfilled = shortfall - picked_after

        target = None
        current = _distance(node.i, node.j, center)
        if available.any():
            d = np.hypot(empty[:, 0] - center[0], empty[:, 1] - center[1])
            d[~available] = np.inf
            slot = int(np.argmin(d))
            if current > d[slot]:
                target = slot
            blocked = False
        else:
            blocked = True
            logger.warning(f"No empty node left for article {article}; replenishing in place at {tuple(node)}")

        if target is None:
            flat_M[old_flat] = top_up - picked_after
            increment_pick_count(state, [node])
            outcome.shortfalls.append(ShortfallRecord(
                article, node, need, residue, top_up, unfilled, relocated=False, blocked=blocked,
            ))
            continue

        new_node = Coord(*(int(v) for v in empty[target]))
        new_flat = state.flat_of(new_node)
        flat_A[old_flat] = 0
        flat_M[old_flat] = 0
        flat_A[new_flat] = article
        flat_M[new_flat] = top_up - picked_after
        state.article_index[article] = new_flat
        available[target] = False
        if residue > 0:
            increment_pick_count(state, [node])
        increment_pick_count(state, [new_node])

        outcome.relocations.append(RelocationEvent(
            article=article,
            from_node=node,
            to_node=new_node,
            shortfall=shortfall,
            residue=residue,
            top_up=top_up,
            distance_before=current,
            distance_after=_distance(new_node.i, new_node.j, center),
        ))
        outcome.shortfalls.append(ShortfallRecord(
            article, node, need, residue, top_up, unfilled, relocated=True, blocked=False,
        ))

    logger.debug(f"Restock: {len(outcome.relocations)} relocations, {len(outcome.shortfalls)} shortfalls")
    return outcome


def process_order(state: WarehouseState, order: Order,
                  clusters: ClusterModel) -> Tuple[WarehouseState, PickMap, RestockOutcome]:
    """x' = f(x, o): restock the articles that fail the strict check, then pick the rest"""
    pick_map = compute_pick_map(state, order)
    outcome = check_stock_and_move(state, order, clusters)
    handled = {record.article for record in outcome.shortfalls}

    dense = order.dense()
    remaining = PickMap({
        locate_article(state, article): int(dense[article])
        for article in order.article_types
        if article not in handled and dense[article] > 0
    })
    update_stock(state, remaining)
    return state, pick_map, outcome


def _event_rows(n: int, outcome: RestockOutcome) -> List[Dict]:
    rows = []
    for event in outcome.relocations:
        row = asdict(event)
        row.update({"n": n, "kind": "relocation",
                    "from_node": list(event.from_node), "to_node": list(event.to_node)})
        rows.append(row)
    for record in outcome.shortfalls:
        row = asdict(record)
        row.update({"n": n, "kind": "shortfall", "node": list(record.node)})
        rows.append(row)
    return rows


class WMSEngine:
    """Iterates the picking and restocking map over an order stream"""

    def __init__(self, x0: WarehouseState, stream: OrderStream, K: int = 3, kmeans_seed: int = 0,
                 clusters_per_step: bool = True, route_evaluator: Optional[RouteLengthFn] = None,
                 validate: bool = False, features: str = DEFAULT_FEATURES,
                 kmeans_restarts: int = DEFAULT_KMEANS_RESTARTS):
        self.state = x0.copy()
        self.stream = stream
        self.K = K
        self.kmeans_seed = kmeans_seed
        self.features = features
        self.kmeans_restarts = kmeans_restarts
        self.clusters_per_step = clusters_per_step
        self.route_evaluator = route_evaluator
        self.validate = validate
        self.n = 0
        self.frozen_assignment: Optional[Dict[int, int]] = None
        self.last_model: Optional[ClusterModel] = None
        self.trajectory = Trajectory()

    def step(self) -> IterationRecord:
        """Fill the next order o_n from x_{n-1}; clusters are computed before picking"""
        self.n += 1
        n = self.n
        order = self.stream.next_order()

        if self.clusters_per_step or self.frozen_assignment is None:
            # same seed every iteration: an unchanged layout regroups identically
            model = cluster_orders(self.state, order, self.K, seed=self.kmeans_seed,
                                   features=self.features, n_init=self.kmeans_restarts)
            self.frozen_assignment = model.assignment
        else:
            model = cluster_orders(self.state, order, self.K, assignment=self.frozen_assignment)

        try:
            score = silhouette_of_clustering(self.state, order, model)
        except ClusteringError as e:
            logger.warning(f"Iteration {n}: silhouette undefined ({e})")
            score = math.nan

        self.last_model = model
        nonempty = model.nonempty_clusters()
        area = triangle_area([model.centers[label] for label in nonempty]) if len(nonempty) == 3 else math.nan

        exact = approx = None
        n_stops = len({node.stop for node in model.node_labels})
        if self.route_evaluator is not None:
            exact, approx, n_stops = self.route_evaluator(self.state, order, model)

        digest = state_digest(self.state)
        stock_before = total_stock(self.state)
        _, _, outcome = process_order(self.state, order, model)
        stock_after = total_stock(self.state)
        if self.validate:
            validate_state(self.state)

        record = IterationRecord(
            n=n,
            state_digest=digest,
            order_size=order.size,
            centers=dict(model.centers),
            covariances=dict(model.covariances),
            silhouette=score,
            triangle_area=area,
            relocations=len(outcome.relocations),
            blocked=len(outcome.blocked),
            stock_before=stock_before,
            stock_after=stock_after,
            top_up=outcome.top_up,
            unfilled=outcome.unfilled,
            n_stops=n_stops,
            route_len_exact=exact,
            route_len_approx=approx,
        )
        self.trajectory.records.append(record)
        self.trajectory.events.extend(_event_rows(n, outcome))
        logger.debug(f"Iteration {n}: silhouette={score:.4f} area={area:.4f} relocations={record.relocations}")
        return record

    def run(self, iterations: int, progress: bool = False) -> Trajectory:
        if iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {iterations}")
        for _ in tqdm(range(iterations), desc="WMS iterations", disable=not progress, leave=False):
            self.step()
        self.trajectory.final_state = self.state
        return self.trajectory


def run_main_loop(x0: WarehouseState, stream: OrderStream, iterations: int, clusters_per_step: bool = True,
                  K: int = 3, kmeans_seed: int = 0, route_evaluator: Optional[RouteLengthFn] = None,
                  validate: bool = False, progress: bool = False, features: str = DEFAULT_FEATURES,
                  kmeans_restarts: int = DEFAULT_KMEANS_RESTARTS) -> Trajectory:
    """Iterate x_n = f(x_{n-1}, o_n) for n = 1..iterations; x0 itself is not modified"""
    engine = WMSEngine(x0, stream, K=K, kmeans_seed=kmeans_seed, clusters_per_step=clusters_per_step,
                       route_evaluator=route_evaluator, validate=validate, features=features,
                       kmeans_restarts=kmeans_restarts)
    return engine.run(iterations, progress=progress)


def reconcile(record: IterationRecord) -> bool:
    """Parcel conservation: removed = order size - unfilled, added = Σ top-ups"""
    return record.stock_before - record.stock_after == record.order_size - record.unfilled - record.top_up
