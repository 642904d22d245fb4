"""
Tests for the warehouse state: initialization, lookup, invariants and snapshots
"""

import numpy as np
import pytest

from warehouse_state import (
    ArticleNotFoundError,
    ConfigurationError,
    Coord,
    GridDims,
    SnapshotDecodeError,
    StateConfig,
    StateInvariantError,
    WarehouseState,
    find_empty_nodes,
    init_random_state,
    load_snapshot,
    locate_article,
    node_positions,
    restore,
    save_snapshot,
    snapshot,
    state_digest,
    stop_positions,
    total_stock,
    validate_state,
)


def test_small_preset_matches_article_count():
    config = StateConfig.small()
    config.validate()
    assert config.article_count == 890
    assert config.dims.total_nodes - config.dims.n_z * config.empty_rack_count == 890


def test_large_preset_matches_article_count():
    config = StateConfig.large()
    config.validate()
    assert config.article_count == 89_000


def test_inconsistent_article_count_rejected():
    with pytest.raises(ConfigurationError):
        StateConfig(GridDims(4, 4, 2), 30, 10, 2).validate()


def test_too_many_empty_racks_rejected():
    with pytest.raises(ConfigurationError):
        StateConfig(GridDims(2, 2, 2), 1, 10, 5).validate()


def test_grid_dims_reject_nonpositive_axes():
    with pytest.raises(ConfigurationError):
        GridDims(0, 3, 3)


def test_stop_index_flattening():
    dims = GridDims(10, 10, 10)
    assert dims.stop_index((1, 1)) == 0
    assert dims.stop_index((2, 1)) == 1
    assert dims.stop_index((1, 2)) == 10
    assert dims.stop_index((10, 10)) == 99
    for index in (0, 7, 42, 99):
        assert dims.stop_index(dims.stop_of_index(index)) == index


def test_init_places_every_article_once(tiny_config, tiny_state):
    placed = tiny_state.A[tiny_state.A > 0]
    assert sorted(placed.tolist()) == list(range(1, tiny_config.article_count + 1))
    validate_state(tiny_state)


def test_init_empties_whole_racks(tiny_config, tiny_state):
    empty = tiny_state.A == 0
    per_rack = empty.sum(axis=2)
    assert set(np.unique(per_rack).tolist()) <= {0, tiny_config.dims.n_z}
    assert int((per_rack == tiny_config.dims.n_z).sum()) == tiny_config.empty_rack_count


def test_init_is_fully_stocked(tiny_state):
    np.testing.assert_array_equal(tiny_state.M, tiny_state.max_balance[tiny_state.A])
    assert total_stock(tiny_state) == 10 * 96


def test_init_is_deterministic(tiny_config):
    assert init_random_state(tiny_config) == init_random_state(tiny_config)


def test_different_seeds_give_different_layouts(tiny_config):
    other = StateConfig(tiny_config.dims, tiny_config.article_count, 10, 4, rng_seed=8)
    assert not np.array_equal(init_random_state(tiny_config).A, init_random_state(other).A)


def test_per_article_max_balance():
    limits = {n: 1 + n % 5 for n in range(1, 29)}
    state = init_random_state(StateConfig(GridDims(4, 4, 2), 28, limits, 2, rng_seed=1))
    for article in (1, 7, 28):
        assert state.balance_at(locate_article(state, article)) == limits[article]


def test_missing_max_balance_rejected():
    with pytest.raises(ConfigurationError):
        StateConfig(GridDims(4, 4, 2), 28, {1: 5}, 2).validate()


def test_locate_article_round_trip(tiny_state):
    for article in (1, 50, 96):
        node = locate_article(tiny_state, article)
        assert tiny_state.article_at(node) == article


def test_locate_unknown_article_raises(tiny_state):
    with pytest.raises(ArticleNotFoundError):
        locate_article(tiny_state, 97)
    with pytest.raises(ArticleNotFoundError):
        locate_article(tiny_state, 0)


def test_find_empty_nodes_lexicographic(tiny_state):
    nodes = find_empty_nodes(tiny_state)
    assert nodes == sorted(nodes)
    assert len(nodes) == 4 * 3
    assert all(tiny_state.article_at(node) == 0 for node in nodes)


def test_validate_detects_duplicate_article(tiny_state):
    state = tiny_state.copy()
    first = locate_article(state, 1)
    second = locate_article(state, 2)
    state.A[second.i - 1, second.j - 1, second.k - 1] = 1
    with pytest.raises(StateInvariantError):
        validate_state(state)
    assert first != second


def test_validate_detects_stock_on_empty_node(tiny_state):
    state = tiny_state.copy()
    node = find_empty_nodes(state)[0]
    state.M[node.i - 1, node.j - 1, node.k - 1] = 3
    with pytest.raises(StateInvariantError):
        validate_state(state)


def test_validate_detects_overfilled_node(tiny_state):
    state = tiny_state.copy()
    node = locate_article(state, 5)
    state.M[node.i - 1, node.j - 1, node.k - 1] = 11
    with pytest.raises(StateInvariantError):
        validate_state(state)


def test_copy_is_independent(tiny_state):
    clone = tiny_state.copy()
    clone.M[0, 0, 0] += 1
    assert clone != tiny_state


def test_snapshot_restores_equal_state(tiny_state):
    state = tiny_state.copy()
    state.pick_count[1, 2, 0] = 4
    assert restore(snapshot(state)) == state


def test_snapshot_file_round_trip(tmp_path, tiny_state):
    path = save_snapshot(tmp_path / "x0.bin", tiny_state)
    assert load_snapshot(path) == tiny_state


def test_snapshot_rejects_bad_magic(tiny_state):
    data = bytearray(snapshot(tiny_state))
    data[:4] = b"XXXX"
    with pytest.raises(SnapshotDecodeError):
        restore(bytes(data))


def test_snapshot_rejects_unknown_version(tiny_state):
    data = bytearray(snapshot(tiny_state))
    data[4:6] = (2).to_bytes(2, "little")
    with pytest.raises(SnapshotDecodeError):
        restore(bytes(data))


def test_snapshot_rejects_truncation(tiny_state):
    data = snapshot(tiny_state)
    with pytest.raises(SnapshotDecodeError):
        restore(data[:-4])
    with pytest.raises(SnapshotDecodeError):
        restore(data[:10])


def square_state():
    dims = GridDims(2, 2, 1)
    A = np.array([1, 2, 3, 0], dtype=np.int64).reshape(dims.shape)
    M = np.array([5, 5, 5, 0], dtype=np.int64).reshape(dims.shape)
    return WarehouseState(dims, A, M, np.array([0, 10, 10, 10], dtype=np.int64))


def patched_snapshot(state, array, flat, value):
    """Overwrite one u32 entry of A (array 0) or M (array 1) in a snapshot"""
    data = bytearray(snapshot(state))
    nodes = state.dims.total_nodes
    header = len(data) - 4 * (state.article_count + 1 + 3 * nodes)
    start = header + 4 * (state.article_count + 1) + 4 * (array * nodes + flat)
    data[start:start + 4] = int(value).to_bytes(4, "little")
    return bytes(data)


@pytest.mark.parametrize("array, flat, value", [
    (0, 0, 999),  # article id above N
    (1, 0, 11),   # balance above M_n
    (0, 3, 1),    # article 1 stored twice
    (1, 3, 2),    # stock on an empty node
])
def test_snapshot_rejects_inconsistent_arrays(array, flat, value):
    state = square_state()
    assert restore(snapshot(state)) == state
    with pytest.raises(SnapshotDecodeError):
        restore(patched_snapshot(state, array, flat, value))


def test_digest_tracks_balances(tiny_state):
    state = tiny_state.copy()
    before = state_digest(state)
    node = locate_article(state, 3)
    state.M[node.i - 1, node.j - 1, node.k - 1] -= 1
    assert state_digest(state) != before
    assert state_digest(tiny_state) == before


def test_stop_and_node_positions(tiny_state):
    articles = [4, 9, 20]
    nodes = node_positions(tiny_state, articles)
    stops = stop_positions(tiny_state, articles)
    for article, node, stop in zip(articles, nodes, stops):
        coord = locate_article(tiny_state, article)
        assert tuple(node) == tuple(coord)
        assert tuple(stop) == coord.stop


def test_stop_positions_rejects_unplaced(tiny_state):
    state = tiny_state.copy()
    node = locate_article(state, 6)
    state.A[node.i - 1, node.j - 1, node.k - 1] = 0
    state.M[node.i - 1, node.j - 1, node.k - 1] = 0
    state.article_index[6] = -1
    with pytest.raises(ArticleNotFoundError):
        stop_positions(state, [6])


def test_coord_stop_projection():
    assert Coord(3, 4, 2).stop == (3, 4)
