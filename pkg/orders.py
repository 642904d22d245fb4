# -*- coding: utf-8 -*-
"""
Orders Module for ClusterSlot
Picking orders built from purchase orders, perturbed order streams and the
line-oriented order text format
"""

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, List, Optional, Tuple

import numpy as np

from warehouse_state import ConfigurationError, StateConfig, WarehouseState, locate_article

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

PURCHASE_ORDERS_PER_ORDER = 20
LINES_PER_PURCHASE_ORDER = 10
MAX_LINE_QUANTITY = 10

_LINE_PATTERN = re.compile(r"^\s*(\d+)\s*,\s*(\d+)\s*$")


@dataclass
class PurchaseOrder:
    """One customer order; line order is insertion order"""
    lines: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def article_types(self) -> List[int]:
        return [article for article, _ in self.lines]

    @property
    def size(self) -> int:
        return sum(quantity for _, quantity in self.lines)


@dataclass
class Order:
    """A picking order o: a batch of purchase orders over N article types"""
    purchases: List[PurchaseOrder]
    article_count: int

    def dense(self) -> np.ndarray:
        """o = (m_1, ..., m_N) as a length N+1 vector (index 0 unused)"""
        m = np.zeros(self.article_count + 1, dtype=np.int64)
        for purchase in self.purchases:
            for article, quantity in purchase.lines:
                m[article] += quantity
        return m

    @property
    def size(self) -> int:
        return sum(purchase.size for purchase in self.purchases)

    @property
    def line_count(self) -> int:
        return sum(len(purchase.lines) for purchase in self.purchases)

    @property
    def article_types(self) -> List[int]:
        """Distinct ordered article types, first occurrence order"""
        seen = {}
        for purchase in self.purchases:
            for article, _ in purchase.lines:
                seen.setdefault(article, None)
        return list(seen)

    def owner_of(self) -> dict:
        """Article type -> index of the first purchase order containing it"""
        owners = {}
        for p, purchase in enumerate(self.purchases):
            for article, _ in purchase.lines:
                owners.setdefault(article, p)
        return owners

    def copy(self) -> "Order":
        return Order([PurchaseOrder(list(p.lines)) for p in self.purchases], self.article_count)


class PerturbationModel(Enum):
    """How successive orders in a stream deviate from the base order"""
    NONE = "none"
    FIXED_SLOT = "fixed_slot"
    RANDOM_SLOT = "random_slot"

    @classmethod
    def for_experiment(cls, experiment: int) -> "PerturbationModel":
        mapping = {1: cls.NONE, 2: cls.FIXED_SLOT, 3: cls.RANDOM_SLOT}
        if experiment not in mapping:
            raise ConfigurationError(f"Unknown experiment {experiment}; expected 1, 2 or 3")
        return mapping[experiment]


def _draw_quantities(rng: np.random.Generator, count: int, max_quantity: int) -> List[int]:
    return [int(q) for q in rng.integers(1, max_quantity + 1, size=count)]


def generate_base_order(config: StateConfig, seed: int,
                        purchase_orders: int = PURCHASE_ORDERS_PER_ORDER,
                        lines_per_purchase: int = LINES_PER_PURCHASE_ORDER,
                        max_quantity: int = MAX_LINE_QUANTITY) -> Order:
    """
    Build the base picking order: mutually disjoint purchase orders of
    distinct article types with quantities uniform in [1, max_quantity].

    Raises:
        ConfigurationError: if N is smaller than the number of ordered types
    """
    needed = purchase_orders * lines_per_purchase
    if config.article_count < needed:
        raise ConfigurationError(
            f"N={config.article_count} article types cannot supply {needed} distinct ordered types"
        )
    rng = np.random.default_rng(seed)
    types = rng.choice(config.article_count, size=needed, replace=False) + 1
    quantities = _draw_quantities(rng, needed, max_quantity)

    purchases = []
    for p in range(purchase_orders):
        block = slice(p * lines_per_purchase, (p + 1) * lines_per_purchase)
        purchases.append(PurchaseOrder(list(zip((int(t) for t in types[block]), quantities[block]))))
    return Order(purchases, config.article_count)


def generate_route_study_order(config: StateConfig, seed: int, products: int = 10,
                               max_quantity: int = MAX_LINE_QUANTITY) -> Order:
    """Recurring customer order of the route study: one single-line purchase order per product"""
    order = generate_base_order(config, seed, purchase_orders=products,
                                lines_per_purchase=1, max_quantity=max_quantity)
    logger.info(f"Route-study order with {products} products, {order.size} parcels")
    return order


class OrderStream:
    """
    Sequential order stream ω = (o_1, o_2, ...). Each call to next_order
    applies the shift θ and returns the next order.
    """

    def __init__(self, base: Order, model: PerturbationModel = PerturbationModel.NONE, rng_seed: int = 0):
        self.base = base
        self.model = model
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self.position = 0

    def __iter__(self) -> Iterator[Order]:
        return self

    def __next__(self) -> Order:
        return self.next_order()

    def next_order(self) -> Order:
        self.position += 1
        if self.model is PerturbationModel.NONE:
            return self.base
        order = self.base.copy()
        for purchase in order.purchases:
            if not purchase.lines:
                continue
            if self.model is PerturbationModel.FIXED_SLOT:
                slot = 0
            else:
                slot = int(self.rng.integers(len(purchase.lines)))
            purchase.lines[slot] = self._replacement_line(purchase, slot)
        return order

    def _replacement_line(self, purchase: PurchaseOrder, slot: int) -> Tuple[int, int]:
        others = {article for s, (article, _) in enumerate(purchase.lines) if s != slot}
        if len(others) >= self.base.article_count:
            raise ConfigurationError("No article type left to draw a distinct replacement")
        # redraw until the type is new within this purchase order
        while True:
            article = int(self.rng.integers(1, self.base.article_count + 1))
            if article not in others:
                break
        quantity = int(self.rng.integers(1, MAX_LINE_QUANTITY + 1))
        return (article, quantity)


def next_order(stream: OrderStream) -> Order:
    return stream.next_order()


def order_diff_fraction(o1: Order, o2: Order) -> float:
    """Multiset symmetric difference of article-type lines over the total line count"""
    if o1.article_count != o2.article_count:
        raise ConfigurationError("Orders over different article universes")
    lines1 = Counter(article for p in o1.purchases for article, _ in p.lines)
    lines2 = Counter(article for p in o2.purchases for article, _ in p.lines)
    total = sum(lines1.values()) + sum(lines2.values())
    if total == 0:
        return 0.0
    difference = sum(((lines1 - lines2) + (lines2 - lines1)).values())
    return difference / total


def format_order(order: Order) -> str:
    """`article_id,quantity` per line, purchase orders separated by blank lines"""
    blocks = ["\n".join(f"{article},{quantity}" for article, quantity in p.lines) for p in order.purchases]
    return "\n\n".join(blocks) + "\n"


def parse_order(text: str, article_count: int) -> Order:
    """Parse the text format written by format_order; '#' lines are comments"""
    purchases: List[PurchaseOrder] = []
    current: Optional[PurchaseOrder] = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#"):
            continue
        if not line:
            current = None
            continue
        match = _LINE_PATTERN.match(line)
        if not match:
            raise ConfigurationError(f"Line {number}: expected 'article_id,quantity', got {raw!r}")
        article, quantity = int(match.group(1)), int(match.group(2))
        if not 1 <= article <= article_count:
            raise ConfigurationError(f"Line {number}: article {article} outside [1, {article_count}]")
        if quantity < 1:
            raise ConfigurationError(f"Line {number}: quantity must be positive")
        if current is None:
            current = PurchaseOrder()
            purchases.append(current)
        current.lines.append((article, quantity))
    return Order(purchases, article_count)


def product_label(state: WarehouseState, article: int) -> str:
    """`a{stop}_{level}` with the flattened 0-based stop index and 0-based level"""
    node = locate_article(state, article)
    return f"a{state.dims.stop_index(node.stop)}_{node.k - 1}"
