# -*- coding: utf-8 -*-
"""
Warehouse State Module for ClusterSlot
Article placement (A) and inventory balances (M) on the 3-D node grid,
placement queries and versioned snapshot files
"""

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, NamedTuple, Tuple, Union

import numpy as np

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"CSLT"
SNAPSHOT_VERSION = 1
# magic, version, n_x, n_y, n_z, N
_HEADER = struct.Struct("<4sHIIII")


class ConfigurationError(ValueError):
    """Raised when a warehouse or order configuration is inconsistent"""


class ArticleNotFoundError(KeyError):
    """Raised when an article type is not placed in the warehouse"""


class SnapshotDecodeError(ValueError):
    """Raised for malformed, truncated or version-mismatched snapshots"""


class StateInvariantError(AssertionError):
    """Raised by validate_state when a state invariant is violated"""


class Coord(NamedTuple):
    """1-based node coordinate (i, j, k)"""
    i: int
    j: int
    k: int

    @property
    def stop(self) -> Tuple[int, int]:
        return (self.i, self.j)


@dataclass(frozen=True)
class GridDims:
    """Node counts per axis"""
    n_x: int
    n_y: int
    n_z: int

    def __post_init__(self):
        for name in ("n_x", "n_y", "n_z"):
            value = getattr(self, name)
            if int(value) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {value}")
        if self.n_x * self.n_y * self.n_z > np.iinfo(np.int64).max:
            raise ConfigurationError("Grid too large for the native index range")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.n_x, self.n_y, self.n_z)

    @property
    def total_nodes(self) -> int:
        return self.n_x * self.n_y * self.n_z

    @property
    def stop_count(self) -> int:
        return self.n_x * self.n_y

    def contains(self, coord: Coord) -> bool:
        return 1 <= coord.i <= self.n_x and 1 <= coord.j <= self.n_y and 1 <= coord.k <= self.n_z

    def stop_index(self, stop: Tuple[int, int]) -> int:
        """Flattened 0-based stop index; (1,1) is stop 0"""
        i, j = stop
        return (j - 1) * self.n_x + (i - 1)

    def stop_of_index(self, index: int) -> Tuple[int, int]:
        j0, i0 = divmod(int(index), self.n_x)
        return (i0 + 1, j0 + 1)


@dataclass
class StateConfig:
    """Parameters of a randomized initial warehouse state"""
    dims: GridDims
    article_count: int
    max_balance: Union[int, Mapping[int, int]] = 10
    empty_rack_count: int = 0
    rng_seed: int = 0

    @classmethod
    def small(cls, rng_seed: int = 0) -> "StateConfig":
        return cls(GridDims(10, 10, 10), 890, 10, 11, rng_seed)

    @classmethod
    def large(cls, rng_seed: int = 0) -> "StateConfig":
        return cls(GridDims(100, 100, 10), 89_000, 10, 1100, rng_seed)

    def max_balance_array(self) -> np.ndarray:
        """M_n indexed by article type (index 0 is the empty marker)"""
        limits = np.zeros(self.article_count + 1, dtype=np.int64)
        if isinstance(self.max_balance, Mapping):
            missing = [n for n in range(1, self.article_count + 1) if n not in self.max_balance]
            if missing:
                raise ConfigurationError(f"No maximum balance for {len(missing)} article types (first: {missing[0]})")
            for article, limit in self.max_balance.items():
                if not 1 <= int(article) <= self.article_count:
                    raise ConfigurationError(f"Maximum balance given for unknown article {article}")
                limits[int(article)] = int(limit)
        else:
            limits[1:] = int(self.max_balance)
        if self.article_count and limits[1:].min() < 1:
            raise ConfigurationError("Every maximum balance M_n must be >= 1")
        return limits

    def validate(self) -> None:
        if self.article_count < 1:
            raise ConfigurationError(f"article_count must be positive, got {self.article_count}")
        if self.empty_rack_count < 0:
            raise ConfigurationError("empty_rack_count must be nonnegative")
        if self.empty_rack_count > self.dims.stop_count:
            raise ConfigurationError(
                f"Cannot empty {self.empty_rack_count} racks in a {self.dims.n_x}x{self.dims.n_y} grid"
            )
        stocked = self.dims.total_nodes - self.dims.n_z * self.empty_rack_count
        if self.article_count != stocked:
            raise ConfigurationError(
                f"N={self.article_count} article types but {stocked} nonempty nodes; they must match"
            )
        self.max_balance_array()


@dataclass
class WarehouseState:
    """State x = (A, M) plus the article index and pick telemetry"""
    dims: GridDims
    A: np.ndarray
    M: np.ndarray
    max_balance: np.ndarray
    article_index: np.ndarray = field(default=None)
    pick_count: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.article_index is None:
            self.article_index = build_article_index(self.A, self.article_count)
        if self.pick_count is None:
            self.pick_count = np.zeros(self.dims.shape, dtype=np.int64)

    @property
    def article_count(self) -> int:
        return len(self.max_balance) - 1

    def copy(self) -> "WarehouseState":
        return WarehouseState(
            dims=self.dims,
            A=self.A.copy(),
            M=self.M.copy(),
            max_balance=self.max_balance.copy(),
            article_index=self.article_index.copy(),
            pick_count=self.pick_count.copy(),
        )

    def coord_of_flat(self, flat: int) -> Coord:
        i0, j0, k0 = np.unravel_index(int(flat), self.dims.shape)
        return Coord(int(i0) + 1, int(j0) + 1, int(k0) + 1)

    def flat_of(self, coord: Coord) -> int:
        return int(np.ravel_multi_index((coord.i - 1, coord.j - 1, coord.k - 1), self.dims.shape))

    def article_at(self, coord: Coord) -> int:
        return int(self.A[coord.i - 1, coord.j - 1, coord.k - 1])

    def balance_at(self, coord: Coord) -> int:
        return int(self.M[coord.i - 1, coord.j - 1, coord.k - 1])

    def is_placed(self, article: int) -> bool:
        return 1 <= article <= self.article_count and self.article_index[article] >= 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, WarehouseState):
            return NotImplemented
        return (
            self.dims == other.dims
            and np.array_equal(self.A, other.A)
            and np.array_equal(self.M, other.M)
            and np.array_equal(self.max_balance, other.max_balance)
            and np.array_equal(self.article_index, other.article_index)
            and np.array_equal(self.pick_count, other.pick_count)
        )


def build_article_index(A: np.ndarray, article_count: int) -> np.ndarray:
    """Inverse of A on its nonzero entries: article -> flat node index (-1 if absent)"""
    index = np.full(article_count + 1, -1, dtype=np.int64)
    flat = A.ravel()
    nodes = np.flatnonzero(flat)
    index[flat[nodes]] = nodes
    return index


def init_random_state(config: StateConfig) -> WarehouseState:
    """
    Randomize x_0: whole empty racks chosen without replacement from the
    (i,j) grid, a unique article type on every other node, fully stocked.
    """
    config.validate()
    dims = config.dims
    rng = np.random.default_rng(config.rng_seed)
    limits = config.max_balance_array()

    rack_ids = rng.choice(dims.stop_count, size=config.empty_rack_count, replace=False)
    empty_mask = np.zeros((dims.n_x, dims.n_y), dtype=bool)
    # rack id is the flattened stop index
    empty_mask[rack_ids % dims.n_x, rack_ids // dims.n_x] = True

    A = np.zeros(dims.shape, dtype=np.int64)
    stocked = ~np.broadcast_to(empty_mask[:, :, None], dims.shape)
    A[stocked] = rng.permutation(config.article_count) + 1
    M = limits[A]
    M[A == 0] = 0

    state = WarehouseState(dims=dims, A=A, M=M, max_balance=limits)
    logger.info(
        f"Initialized {dims.n_x}x{dims.n_y}x{dims.n_z} warehouse: "
        f"{config.article_count} stocked nodes, {config.empty_rack_count} empty racks (seed {config.rng_seed})"
    )
    return state


def empty_node_array(state: WarehouseState) -> np.ndarray:
    """Empty nodes as an (n, 3) array of 1-based coordinates in lexicographic order"""
    return np.argwhere(state.A == 0) + 1


def find_empty_nodes(state: WarehouseState) -> List[Coord]:
    """Coordinates with a_ijk = 0 in lexicographic (i,j,k) order"""
    return [Coord(int(i), int(j), int(k)) for i, j, k in empty_node_array(state)]


def locate_article(state: WarehouseState, article: int) -> Coord:
    """The unique node holding the article"""
    article = int(article)
    if not state.is_placed(article):
        raise ArticleNotFoundError(f"Article {article} is not placed in the warehouse")
    return state.coord_of_flat(state.article_index[article])


def total_stock(state: WarehouseState) -> int:
    return int(state.M.sum())


def validate_state(state: WarehouseState) -> None:
    """Check every WarehouseState invariant; raise StateInvariantError on the first failure"""
    A, M = state.A, state.M
    if A.shape != state.dims.shape or M.shape != state.dims.shape:
        raise StateInvariantError(f"Array shapes {A.shape}/{M.shape} do not match dims {state.dims.shape}")
    if A.min() < 0 or A.max() > state.article_count:
        raise StateInvariantError("Article ids outside [0, N]")
    if np.any(M[A == 0] != 0):
        raise StateInvariantError("Empty node carries stock")
    if M.min() < 0:
        raise StateInvariantError("Negative balance")
    if np.any(M > state.max_balance[A]):
        raise StateInvariantError("Balance above the article's maximum M_n")

    placed = A[A > 0]
    counts = np.bincount(placed, minlength=state.article_count + 1)
    if counts.max(initial=0) > 1:
        duplicated = int(np.argmax(counts))
        raise StateInvariantError(f"Article {duplicated} stored at {counts[duplicated]} nodes")
    if not np.array_equal(state.article_index, build_article_index(A, state.article_count)):
        raise StateInvariantError("article_index inconsistent with A")


def snapshot(state: WarehouseState) -> bytes:
    """Versioned little-endian snapshot: header, max balances, then A, M and pick counts row-major"""
    dims = state.dims
    header = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, dims.n_x, dims.n_y, dims.n_z, state.article_count)
    body = b"".join(
        np.ascontiguousarray(array, dtype="<u4").tobytes()
        for array in (state.max_balance, state.A, state.M, state.pick_count)
    )
    return header + body


def _check_decoded(limits: np.ndarray, A: np.ndarray, M: np.ndarray, article_count: int) -> None:
    """Reject decoded arrays that cannot form a valid state"""
    if A.size and A.max() > article_count:
        raise SnapshotDecodeError(f"Snapshot stores article {int(A.max())} outside [0, {article_count}]")
    if np.any(M > limits[A]):
        raise SnapshotDecodeError("Snapshot stores a balance above the article's maximum M_n")
    if np.any(M[A == 0] != 0):
        raise SnapshotDecodeError("Snapshot stores stock on an empty node")
    counts = np.bincount(A[A > 0], minlength=article_count + 1)
    if counts.max(initial=0) > 1:
        raise SnapshotDecodeError(f"Snapshot stores article {int(np.argmax(counts))} at {counts.max()} nodes")


def restore(data: bytes) -> WarehouseState:
    """Inverse of snapshot"""
    if len(data) < _HEADER.size:
        raise SnapshotDecodeError(f"Snapshot truncated: {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, n_x, n_y, n_z, article_count = _HEADER.unpack_from(data, 0)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotDecodeError(f"Bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise SnapshotDecodeError(f"Snapshot version {version} unsupported (expected {SNAPSHOT_VERSION})")
    try:
        dims = GridDims(n_x, n_y, n_z)
    except ConfigurationError as e:
        raise SnapshotDecodeError(f"Bad dims in snapshot: {e}") from e

    nodes = dims.total_nodes
    expected = _HEADER.size + 4 * ((article_count + 1) + 3 * nodes)
    if len(data) != expected:
        raise SnapshotDecodeError(f"Snapshot length {len(data)} does not match expected {expected}")

    offset = _HEADER.size
    arrays = []
    for count in (article_count + 1, nodes, nodes, nodes):
        chunk = np.frombuffer(data, dtype="<u4", count=count, offset=offset).astype(np.int64)
        arrays.append(chunk)
        offset += 4 * count
    limits, A, M, picks = arrays
    _check_decoded(limits, A, M, article_count)
    return WarehouseState(
        dims=dims,
        A=A.reshape(dims.shape),
        M=M.reshape(dims.shape),
        max_balance=limits,
        pick_count=picks.reshape(dims.shape),
    )


def save_snapshot(path: Union[str, Path], state: WarehouseState) -> Path:
    path = Path(path)
    path.write_bytes(snapshot(state))
    return path


def load_snapshot(path: Union[str, Path]) -> WarehouseState:
    return restore(Path(path).read_bytes())


def state_digest(state: WarehouseState) -> str:
    return hashlib.sha256(snapshot(state)).hexdigest()


def stop_positions(state: WarehouseState, articles) -> np.ndarray:
    """(n, 2) array of (i, j) stops for placed articles; ArticleNotFoundError for any unplaced one"""
    articles = np.asarray(list(articles), dtype=np.int64)
    if articles.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    bad = (articles < 1) | (articles > state.article_count)
    if bad.any():
        raise ArticleNotFoundError(f"Article {int(articles[bad][0])} is not a valid article type")
    flat = state.article_index[articles]
    if (flat < 0).any():
        raise ArticleNotFoundError(f"Article {int(articles[flat < 0][0])} is not placed in the warehouse")
    i0, j0, _ = np.unravel_index(flat, state.dims.shape)
    return np.stack([i0 + 1, j0 + 1], axis=1)


def node_positions(state: WarehouseState, articles) -> np.ndarray:
    """(n, 3) array of 1-based (i, j, k) nodes for placed articles"""
    articles = np.asarray(list(articles), dtype=np.int64)
    if articles.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    stop_positions(state, articles)
    flat = state.article_index[articles]
    return np.stack(np.unravel_index(flat, state.dims.shape), axis=1) + 1
