"""Condition schema, condition keys and in-memory datasets."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .graph import Graph, StateSpaces

# A categorical value is an int; a numeric value is a tuple of floats.
ConditionValue = Union[int, tuple]
ConditionAssignment = tuple  # of ConditionValue | None, one per slot


class ConditionError(ValueError):
    pass


@dataclass(frozen=True)
class CategoricalSlot:
    num_classes: int
    kind: str = field(default="categorical", init=False)

    def check(self, value) -> int:
        if isinstance(value, (bool, float)) or not isinstance(value, (int, np.integer)):
            raise ConditionError(f"categorical slot expects a class index, got {value!r}")
        if not 0 <= value < self.num_classes:
            raise ConditionError(f"class {value} outside [0, {self.num_classes})")
        return int(value)


@dataclass(frozen=True)
class NumericSlot:
    dim: int = 1
    kind: str = field(default="numeric", init=False)

    def check(self, value) -> tuple:
        vec = tuple(float(v) for v in np.atleast_1d(np.asarray(value, dtype=float)))
        if len(vec) != self.dim:
            raise ConditionError(f"numeric slot expects dimension {self.dim}, got {len(vec)}")
        return vec


Slot = Union[CategoricalSlot, NumericSlot]


@dataclass(frozen=True)
class ConditionKey:
    """Which conditions a scorer is asked about.

    Stored as sorted ``(slot, value)`` pairs: the empty key is the unconditional
    (null) input, one pair is a single property, all ``M`` pairs the joint
    condition. Equal keys denote the same conditioning input regardless of how
    they were built.
    """

    items: tuple = ()

    def __post_init__(self):
        items = tuple(sorted(self.items, key=lambda kv: kv[0]))
        slots = [s for s, _ in items]
        if len(set(slots)) != len(slots):
            raise ConditionError(f"duplicate slots in {items}")
        object.__setattr__(self, "items", items)

    @classmethod
    def null(cls) -> "ConditionKey":
        return cls(())

    @classmethod
    def single(cls, slot: int, value) -> "ConditionKey":
        return cls(((slot, value),))

    @classmethod
    def subset(cls, pairs) -> "ConditionKey":
        pairs = tuple(pairs)
        if not pairs:
            raise ConditionError("a subset key needs at least one condition")
        return cls(pairs)

    @classmethod
    def joint(cls, assignment: Sequence) -> "ConditionKey":
        return cls(tuple((m, v) for m, v in enumerate(assignment)))

    @property
    def is_null(self) -> bool:
        return not self.items

    @property
    def slots(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.items)

    def matches(self, assignment: Sequence) -> bool:
        return all(assignment[m] == v for m, v in self.items)

    def __str__(self):
        if self.is_null:
            return "null"
        return ",".join(f"{m}={v}" for m, v in self.items)


@dataclass
class Dataset:
    """Weighted set of ``(graph, condition assignment)`` records; duplicates add weight."""

    n: int
    spaces: StateSpaces
    schema: tuple
    graphs: list
    conditions: list

    def __post_init__(self):
        self.schema = tuple(self.schema)
        if not self.graphs:
            raise ConditionError("dataset is empty")
        if len(self.graphs) != len(self.conditions):
            raise ConditionError("graphs and conditions differ in length")
        self.conditions = [self.normalize(c, k) for k, c in enumerate(self.conditions)]
        for k, G in enumerate(self.graphs):
            if G.n != self.n:
                raise ConditionError(f"record {k}: expected {self.n} nodes, got {G.n}")
            try:
                G.validate(self.spaces)
            except ValueError as err:
                raise ConditionError(f"record {k}: {err}") from None
            if G.has_mask(self.spaces):
                raise ConditionError(f"record {k}: clean data may not contain MASK states")

    @property
    def M(self) -> int:
        return len(self.schema)

    def __len__(self):
        return len(self.graphs)

    def normalize(self, assignment, index=None) -> tuple:
        assignment = tuple(assignment)
        if len(assignment) != self.M:
            raise ConditionError(f"record {index}: {len(assignment)} conditions, schema has {self.M}")
        out = []
        for slot, value in zip(self.schema, assignment):
            out.append(None if value is None else slot.check(value))
        return tuple(out)

    def check_key(self, key: ConditionKey) -> ConditionKey:
        items = []
        for m, v in key.items:
            if not 0 <= m < self.M:
                raise ConditionError(f"slot {m} not in schema with {self.M} slots")
            items.append((m, self.schema[m].check(v)))
        return ConditionKey(tuple(items))

    def slot_values(self, m: int) -> list:
        """Distinct observed values of slot ``m`` in first-seen order."""
        seen = []
        for c in self.conditions:
            if c[m] is not None and c[m] not in seen:
                seen.append(c[m])
        return seen

    def single_keys(self) -> list[ConditionKey]:
        return [ConditionKey.single(m, v) for m in range(self.M) for v in self.slot_values(m)]

    def subset_keys(self) -> list[ConditionKey]:
        keys = []
        for c in self.conditions:
            for size in range(1, self.M + 1):
                for slots in itertools.combinations(range(self.M), size):
                    if any(c[m] is None for m in slots):
                        continue
                    key = ConditionKey(tuple((m, c[m]) for m in slots))
                    if key not in keys:
                        keys.append(key)
        return keys

    def weights(self, key: ConditionKey | None = None) -> np.ndarray:
        """Record weights of ``p_data(. | key)``; exact match on the key's slots."""
        w = np.ones(len(self), dtype=float)
        if key is not None and not key.is_null:
            w = np.array([float(key.matches(c)) for c in self.conditions])
        total = w.sum()
        if total == 0:
            raise ConditionError(f"no record matches condition {key}")
        return w / total

    def token_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        nodes = np.array([G.nodes for G in self.graphs], dtype=np.int64).reshape(len(self), self.n)
        edges = np.array([G.edges_upper for G in self.graphs], dtype=np.int64).reshape(len(self), -1)
        return nodes, edges


def parity_fraction_labeler(G: Graph, spaces: StateSpaces) -> tuple:
    """Edge-count parity (categorical) and fraction of state-1 nodes (numeric).

    MASK edges are not counted as edges.
    """
    mask_e = spaces.mask_edge_index
    edges = sum(1 for e in G.edges_upper if e != 0 and e != mask_e)
    frac = sum(1 for x in G.nodes if x == 1) / G.n
    return (edges % 2, (frac,))


PARITY_FRACTION_SCHEMA = (CategoricalSlot(2), NumericSlot(1))


def acceptance_dataset(absorbing: bool = False) -> Dataset:
    """The four-graph benchmark on three nodes, closed under node permutation.

    Graphs: all nodes 0 or all nodes 1, with either no edges or a full
    triangle, so the parity and fraction labels are balanced and independent.
    With ``absorbing`` each space gains a MASK state.
    """
    extra = 1 if absorbing else 0
    spaces = StateSpaces(2 + extra, 2 + extra, absorbing)
    graphs = [Graph((x,) * 3, (e,) * 3) for x in (0, 1) for e in (0, 1)]
    conds = [parity_fraction_labeler(G, spaces) for G in graphs]
    return Dataset(3, spaces, PARITY_FRACTION_SCHEMA, graphs, conds)
