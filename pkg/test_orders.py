"""
Tests for picking orders, perturbed order streams and the order text format
"""

import numpy as np
import pytest

from orders import (
    Order,
    OrderStream,
    PerturbationModel,
    PurchaseOrder,
    format_order,
    generate_base_order,
    generate_route_study_order,
    order_diff_fraction,
    parse_order,
    product_label,
)
from warehouse_state import ConfigurationError, StateConfig, locate_article


def test_base_order_shape_on_small_warehouse():
    order = generate_base_order(StateConfig.small(), seed=0)
    assert len(order.purchases) == 20
    assert all(len(p.lines) == 10 for p in order.purchases)
    assert len(order.article_types) == 200


def test_base_order_purchase_orders_are_disjoint(tiny_order):
    seen = set()
    for purchase in tiny_order.purchases:
        types = set(purchase.article_types)
        assert len(types) == len(purchase.lines)
        assert not seen & types
        seen |= types


def test_base_order_quantities_in_range(tiny_order):
    quantities = [q for p in tiny_order.purchases for _, q in p.lines]
    assert min(quantities) >= 1
    assert max(quantities) <= 10


def test_base_order_is_deterministic(tiny_config):
    first = generate_base_order(tiny_config, seed=11, purchase_orders=3, lines_per_purchase=2)
    second = generate_base_order(tiny_config, seed=11, purchase_orders=3, lines_per_purchase=2)
    assert format_order(first) == format_order(second)


def test_base_order_needs_enough_article_types(tiny_config):
    with pytest.raises(ConfigurationError):
        generate_base_order(tiny_config, seed=0, purchase_orders=20, lines_per_purchase=10)


def test_dense_vector_sums_quantities():
    order = Order([PurchaseOrder([(1, 3), (4, 2)]), PurchaseOrder([(4, 5)])], article_count=5)
    np.testing.assert_array_equal(order.dense(), [0, 3, 0, 0, 7, 0])
    assert order.size == 10
    assert order.line_count == 3
    assert order.article_types == [1, 4]
    assert order.owner_of() == {1: 0, 4: 0}


def test_unperturbed_stream_repeats_base(tiny_order):
    stream = OrderStream(tiny_order, PerturbationModel.NONE, rng_seed=1)
    for _ in range(5):
        assert order_diff_fraction(stream.next_order(), tiny_order) == 0.0
    assert stream.position == 5


def test_fixed_slot_stream_changes_first_line_only(tiny_order):
    stream = OrderStream(tiny_order, PerturbationModel.FIXED_SLOT, rng_seed=2)
    order = stream.next_order()
    for base, new in zip(tiny_order.purchases, order.purchases):
        assert new.lines[1:] == base.lines[1:]
        assert len(set(new.article_types)) == len(new.lines)


def test_random_slot_stream_changes_one_line_per_purchase(tiny_order):
    stream = OrderStream(tiny_order, PerturbationModel.RANDOM_SLOT, rng_seed=3)
    order = stream.next_order()
    for base, new in zip(tiny_order.purchases, order.purchases):
        changed = sum(1 for a, b in zip(base.lines, new.lines) if a != b)
        assert changed <= 1
        assert len(new.lines) == len(base.lines)


def test_stream_does_not_mutate_base(tiny_order):
    before = format_order(tiny_order)
    stream = OrderStream(tiny_order, PerturbationModel.RANDOM_SLOT, rng_seed=4)
    for _ in range(10):
        stream.next_order()
    assert format_order(tiny_order) == before


def test_perturbed_stream_is_deterministic(tiny_order):
    a = OrderStream(tiny_order, PerturbationModel.RANDOM_SLOT, rng_seed=9)
    b = OrderStream(tiny_order, PerturbationModel.RANDOM_SLOT, rng_seed=9)
    for _ in range(4):
        assert format_order(a.next_order()) == format_order(b.next_order())


def test_noise_level_of_fixed_slot_stream(tiny_order):
    stream = OrderStream(tiny_order, PerturbationModel.FIXED_SLOT, rng_seed=5)
    fraction = order_diff_fraction(stream.next_order(), tiny_order)
    # one of four lines per purchase order is redrawn
    assert 0.0 < fraction <= 0.25


def test_experiment_tags_map_to_models():
    assert PerturbationModel.for_experiment(1) is PerturbationModel.NONE
    assert PerturbationModel.for_experiment(2) is PerturbationModel.FIXED_SLOT
    assert PerturbationModel.for_experiment(3) is PerturbationModel.RANDOM_SLOT
    with pytest.raises(ConfigurationError):
        PerturbationModel.for_experiment(4)


def test_order_diff_fraction_of_disjoint_orders():
    a = Order([PurchaseOrder([(1, 1), (2, 1)])], 4)
    b = Order([PurchaseOrder([(3, 1), (4, 1)])], 4)
    assert order_diff_fraction(a, b) == 1.0
    assert order_diff_fraction(a, a) == 0.0


def test_order_text_format_round_trip(tiny_order):
    parsed = parse_order(format_order(tiny_order), tiny_order.article_count)
    assert [p.lines for p in parsed.purchases] == [p.lines for p in tiny_order.purchases]


def test_parse_order_skips_comments_and_blank_runs():
    text = "# customer batch\n3,2\n5,1\n\n\n# second\n7,4\n"
    order = parse_order(text, 10)
    assert [p.lines for p in order.purchases] == [[(3, 2), (5, 1)], [(7, 4)]]


@pytest.mark.parametrize("text", ["3;2\n", "11,1\n", "3,0\n", "abc\n"])
def test_parse_order_rejects_bad_lines(text):
    with pytest.raises(ConfigurationError):
        parse_order(text, 10)


def test_route_study_order_has_single_line_purchases(tiny_config):
    order = generate_route_study_order(tiny_config, seed=1, products=10)
    assert len(order.purchases) == 10
    assert all(len(p.lines) == 1 for p in order.purchases)
    assert len(order.article_types) == 10


def test_product_label_uses_stop_and_level(tiny_config, tiny_state):
    node = locate_article(tiny_state, 12)
    expected = f"a{(node.j - 1) * 6 + (node.i - 1)}_{node.k - 1}"
    assert product_label(tiny_state, 12) == expected


def test_replacement_article_type_is_uniform():
    from scipy.stats import chisquare

    base = Order([PurchaseOrder([(1, 1)])], article_count=20)
    stream = OrderStream(base, PerturbationModel.FIXED_SLOT, rng_seed=21)
    drawn = [stream.next_order().purchases[0].lines[0][0] for _ in range(4000)]
    counts = np.bincount(drawn, minlength=21)[1:]
    assert counts.min() > 0
    assert chisquare(counts).pvalue > 0.001


@pytest.mark.parametrize(
    "model,expected,tolerance",
    [(PerturbationModel.FIXED_SLOT, 0.10, 0.02), (PerturbationModel.RANDOM_SLOT, 0.19, 0.02)],
)
def test_consecutive_orders_differ_at_calibrated_rate(model, expected, tolerance):
    base = generate_base_order(StateConfig.small(), seed=0)
    stream = OrderStream(base, model, rng_seed=13)
    previous = stream.next_order()
    fractions = []
    for _ in range(1000):
        current = stream.next_order()
        fractions.append(order_diff_fraction(previous, current))
        previous = current
    assert np.mean(fractions) == pytest.approx(expected, abs=tolerance)
