"""Fidelity, validity, controllability and permutation-invariance metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import CategoricalSlot, NumericSlot, parity_fraction_labeler
from .graph import Graph, Permutation, StateSpaces, permutation_index_map, token_table


class MetricError(ValueError):
    pass


def total_variation(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise MetricError(f"support mismatch: {p.shape} vs {q.shape}")
    for name, d in (("p", p), ("q", q)):
        if abs(d.sum() - 1) > 1e-6 or np.any(d < -1e-12):
            raise MetricError(f"{name} is not a distribution (sum {d.sum():.8g})")
    return 0.5 * float(np.abs(p - q).sum())


def empirical_distribution(graphs: Sequence[Graph], spaces: StateSpaces) -> np.ndarray:
    """Histogram of samples over the enumerated space, normalised."""
    if not graphs:
        raise MetricError("no samples")
    n = graphs[0].n
    tab = token_table(n, spaces)
    nodes = np.array([G.nodes for G in graphs], dtype=np.int64)
    edges = np.array([G.edges_upper for G in graphs], dtype=np.int64).reshape(len(graphs), -1)
    counts = np.bincount(tab.index_of(nodes, edges), minlength=tab.size)
    return counts / counts.sum()


@dataclass(frozen=True)
class ValenceTable:
    """Upper bound on the weighted degree of a node in each node state.

    An edge in state ``v`` contributes ``v`` to the degree of both endpoints.
    """

    max_degree: tuple

    def __post_init__(self):
        if any(b < 0 for b in self.max_degree):
            raise MetricError("degree bounds must be non-negative")


def is_valid(G: Graph, table: ValenceTable, spaces: StateSpaces) -> bool:
    if G.has_mask(spaces):
        return False
    degree = G.edges.sum(axis=1)
    bounds = np.asarray(table.max_degree)[list(G.nodes)]
    return bool(np.all(degree <= bounds))


def validity_rate(samples: Sequence[Graph], table: ValenceTable, spaces: StateSpaces) -> float:
    if not samples:
        return float("nan")
    return sum(is_valid(G, table, spaces) for G in samples) / len(samples)


class SyntheticLabeler:
    """Deterministic graph -> condition assignment map with its schema."""

    def __init__(self, schema, fn: Callable, spaces: StateSpaces):
        self.schema = tuple(schema)
        self.fn = fn
        self.spaces = spaces

    def __call__(self, G: Graph) -> tuple:
        return self.fn(G, self.spaces)

    @classmethod
    def parity_fraction(cls, spaces: StateSpaces):
        return cls((CategoricalSlot(2), NumericSlot(1)), parity_fraction_labeler, spaces)


def _wilson(k: int, n: int, z: float = 1.96) -> tuple[float, float]:
    if n == 0:
        return float("nan"), float("nan")
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return centre - half, centre + half


@dataclass
class SlotReport:
    slot: int
    kind: str
    value: float  # accuracy or MAE
    ci_low: float
    ci_high: float
    count: int


def controllability(samples: Sequence[Graph], requested: Sequence, labeler: SyntheticLabeler) -> dict:
    """Accuracy per categorical slot and MAE per numeric slot, with 95% intervals.

    ``requested`` holds one condition assignment per sample; slots requested as
    ``None`` are skipped.
    """
    if not samples:
        raise MetricError("controllability needs at least one sample")
    if len(samples) != len(requested):
        raise MetricError("one requested assignment per sample is needed")
    labels = [labeler(G) for G in samples]
    report = {}
    for m, slot in enumerate(labeler.schema):
        pairs = [(lab[m], req[m]) for lab, req in zip(labels, requested) if req[m] is not None]
        if not pairs:
            continue
        if isinstance(slot, CategoricalSlot):
            if any(isinstance(r, tuple) for _, r in pairs):
                raise MetricError(f"slot {m} is categorical but a numeric value was requested")
            hits = sum(int(lab == req) for lab, req in pairs)
            lo, hi = _wilson(hits, len(pairs))
            report[m] = SlotReport(m, "accuracy", hits / len(pairs), lo, hi, len(pairs))
        else:
            if any(not isinstance(r, (tuple, list, np.ndarray, float)) for _, r in pairs):
                raise MetricError(f"slot {m} is numeric but a class index was requested")
            err = np.array([np.abs(np.subtract(lab, req)).mean() for lab, req in pairs])
            half = 1.96 * err.std(ddof=1) / np.sqrt(len(err)) if len(err) > 1 else float("nan")
            report[m] = SlotReport(m, "mae", float(err.mean()), float(err.mean() - half),
                                   float(err.mean() + half), len(err))
    return report


def controllability_exact(distribution, n: int, spaces: StateSpaces, requested, labeler: SyntheticLabeler) -> dict:
    """Expected accuracy / MAE under an exact distribution over enumerated graphs."""
    from .graph import enumerate_graphs

    p = np.asarray(distribution, dtype=float)
    out = {}
    graphs = enumerate_graphs(n, spaces)
    labels = [labeler(G) for G in graphs]
    for m, slot in enumerate(labeler.schema):
        if requested[m] is None:
            continue
        if isinstance(slot, CategoricalSlot):
            out[m] = float(sum(pi for pi, lab in zip(p, labels) if lab[m] == requested[m]))
        else:
            out[m] = float(sum(pi * np.abs(np.subtract(lab[m], requested[m])).mean() for pi, lab in zip(p, labels)))
    return out


def invariance_check(distribution, n: int, spaces: StateSpaces) -> float:
    """Largest ``|p(pi G) - p(G)|`` over every graph and node permutation."""
    p = np.asarray(distribution, dtype=float)
    if n > 3:
        raise MetricError("the exhaustive invariance check is limited to n <= 3")
    tab = token_table(n, spaces)
    if p.shape != (tab.size,):
        raise MetricError(f"distribution has {p.size} entries, space has {tab.size}")
    worst = 0.0
    for perm in Permutation.all(n):
        worst = max(worst, float(np.abs(p[permutation_index_map(n, spaces, perm)] - p).max()))
    return worst
