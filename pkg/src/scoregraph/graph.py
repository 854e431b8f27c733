"""Graph states, canonical enumeration and permutation machinery.

A graph with ``n`` nodes is stored as a tuple of node states plus the
upper-triangle edge states in row-major order ``(0,1), (0,2), ..., (n-2,n-1)``.
Those ``n + n(n-1)/2`` entries are the diffusion *tokens*; the full symmetric
edge matrix (zero diagonal) is derived on demand.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence, Union

import numpy as np

ENUMERATION_LIMIT = 10**6


class GraphError(ValueError):
    """Invalid graph, address or state index."""


class EnumerationTooLarge(GraphError):
    """The requested state space exceeds the enumeration guard."""


@dataclass(frozen=True)
class StateSpaces:
    """Node and edge state cardinalities.

    With ``absorbing=True`` the last index of each space is the MASK state.
    Edge index 0 always means "no edge".
    """

    node_cardinality: int
    edge_cardinality: int
    absorbing: bool = False

    def __post_init__(self):
        if self.node_cardinality < 2 or self.edge_cardinality < 2:
            raise GraphError("state spaces need at least two states each")

    @property
    def mask_node_index(self) -> int | None:
        return self.node_cardinality - 1 if self.absorbing else None

    @property
    def mask_edge_index(self) -> int | None:
        return self.edge_cardinality - 1 if self.absorbing else None

    def space_size(self, n: int) -> int:
        return self.node_cardinality**n * self.edge_cardinality ** num_edge_slots(n)


def num_edge_slots(n: int) -> int:
    return n * (n - 1) // 2


@lru_cache(maxsize=None)
def edge_pairs(n: int) -> tuple[tuple[int, int], ...]:
    """Upper-triangle pairs ``(i, j)``, ``i < j``, in token order."""
    return tuple((i, j) for i in range(n) for j in range(i + 1, n))


@dataclass(frozen=True)
class Graph:
    nodes: tuple[int, ...]
    edges_upper: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(int(x) for x in self.nodes))
        object.__setattr__(self, "edges_upper", tuple(int(e) for e in self.edges_upper))
        if len(self.edges_upper) != num_edge_slots(len(self.nodes)):
            raise GraphError(
                f"{len(self.nodes)} nodes need {num_edge_slots(len(self.nodes))} "
                f"upper-triangle edges, got {len(self.edges_upper)}"
            )

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def edges(self) -> np.ndarray:
        """Symmetric ``n x n`` edge-state matrix with a zero diagonal."""
        mat = np.zeros((self.n, self.n), dtype=np.int64)
        for (i, j), e in zip(edge_pairs(self.n), self.edges_upper):
            mat[i, j] = mat[j, i] = e
        return mat

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.nodes + self.edges_upper

    @classmethod
    def from_matrix(cls, nodes: Sequence[int], edges) -> "Graph":
        mat = np.asarray(edges)
        n = len(nodes)
        if mat.shape != (n, n):
            raise GraphError(f"edge matrix must be {n}x{n}, got {mat.shape}")
        if not np.array_equal(mat, mat.T):
            raise GraphError("edge matrix is not symmetric")
        if np.any(np.diag(mat) != 0):
            raise GraphError("diagonal edges must be 0 (no edge)")
        return cls(tuple(nodes), tuple(int(mat[i, j]) for i, j in edge_pairs(n)))

    def validate(self, spaces: StateSpaces) -> None:
        if any(not 0 <= x < spaces.node_cardinality for x in self.nodes):
            raise GraphError(f"node state out of range in {self.nodes}")
        if any(not 0 <= e < spaces.edge_cardinality for e in self.edges_upper):
            raise GraphError(f"edge state out of range in {self.edges_upper}")

    def has_mask(self, spaces: StateSpaces) -> bool:
        if not spaces.absorbing:
            return False
        return spaces.mask_node_index in self.nodes or spaces.mask_edge_index in self.edges_upper


def _check_guard(n: int, spaces: StateSpaces) -> int:
    size = spaces.space_size(n)
    if n > 4 or size > ENUMERATION_LIMIT:
        raise EnumerationTooLarge(
            f"n={n} with a={spaces.node_cardinality}, b={spaces.edge_cardinality} "
            f"gives {size} graphs (limit n<=4 and {ENUMERATION_LIMIT})"
        )
    return size


def enumerate_graphs(n: int, spaces: StateSpaces) -> list[Graph]:
    """Every graph on ``n`` nodes, in canonical (lexicographic) order."""
    _check_guard(n, spaces)
    m = num_edge_slots(n)
    out = []
    for tok in itertools.product(
        *([range(spaces.node_cardinality)] * n + [range(spaces.edge_cardinality)] * m)
    ):
        out.append(Graph(tok[:n], tok[n:]))
    return out


def radix_weights(n: int, spaces: StateSpaces) -> np.ndarray:
    """Mixed-radix place values per token; the first node is most significant."""
    card = [spaces.node_cardinality] * n + [spaces.edge_cardinality] * num_edge_slots(n)
    weights = np.ones(len(card), dtype=np.int64)
    for k in range(len(card) - 2, -1, -1):
        weights[k] = weights[k + 1] * card[k + 1]
    return weights


def canonical_index(G: Graph, spaces: StateSpaces) -> int:
    G.validate(spaces)
    return int(np.dot(radix_weights(G.n, spaces), G.tokens))


def decode_index(index: int, n: int, spaces: StateSpaces) -> Graph:
    size = spaces.space_size(n)
    if not 0 <= index < size:
        raise GraphError(f"index {index} outside [0, {size})")
    tok = []
    for w in radix_weights(n, spaces):
        q, index = divmod(index, int(w))
        tok.append(q)
    return Graph(tok[:n], tok[n:])


@dataclass(frozen=True)
class TokenTable:
    """All graphs of a space as token arrays, for vectorised oracles."""

    n: int
    spaces: StateSpaces
    nodes: np.ndarray  # (S, n)
    edges: np.ndarray  # (S, m)
    weights: np.ndarray  # radix weights, (n + m,)

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    def index_of(self, nodes: np.ndarray, edges: np.ndarray) -> np.ndarray:
        tokens = np.concatenate([nodes, edges], axis=-1)
        return tokens @ self.weights


@lru_cache(maxsize=16)
def token_table(n: int, spaces: StateSpaces) -> TokenTable:
    size = _check_guard(n, spaces)
    w = radix_weights(n, spaces)
    idx = np.arange(size, dtype=np.int64)
    tokens = (idx[:, None] // w[None, :]) % np.array(
        [spaces.node_cardinality] * n + [spaces.edge_cardinality] * num_edge_slots(n)
    )
    nodes = np.ascontiguousarray(tokens[:, :n])
    edges = np.ascontiguousarray(tokens[:, n:])
    nodes.flags.writeable = False
    edges.flags.writeable = False
    return TokenTable(n, spaces, nodes, edges, w)


@dataclass(frozen=True)
class Permutation:
    mapping: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "mapping", tuple(int(i) for i in self.mapping))
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise GraphError(f"{self.mapping} is not a permutation")

    def __len__(self):
        return len(self.mapping)

    def compose(self, other: "Permutation") -> "Permutation":
        """``self o other``: apply ``other`` first."""
        return Permutation(tuple(self.mapping[other.mapping[i]] for i in range(len(self))))

    @classmethod
    def all(cls, n: int) -> list["Permutation"]:
        return [cls(p) for p in itertools.permutations(range(n))]


def apply_permutation(G: Graph, perm: Permutation) -> Graph:
    """Relabel nodes so that node ``i`` moves to position ``perm(i)``."""
    if len(perm) != G.n:
        raise GraphError(f"permutation of size {len(perm)} applied to {G.n} nodes")
    p = perm.mapping
    nodes = [0] * G.n
    for i, x in enumerate(G.nodes):
        nodes[p[i]] = x
    old = G.edges
    new = np.zeros_like(old)
    new[np.ix_(p, p)] = old
    return Graph.from_matrix(nodes, new)


def permutation_index_map(n: int, spaces: StateSpaces, perm: Permutation) -> np.ndarray:
    """``out[k]`` is the canonical index of ``perm`` applied to graph ``k``."""
    table = token_table(n, spaces)
    p = perm.mapping
    nodes = np.empty_like(table.nodes)
    nodes[:, list(p)] = table.nodes
    pairs = edge_pairs(n)
    pos = {pair: k for k, pair in enumerate(pairs)}
    edges = np.empty_like(table.edges)
    for k, (i, j) in enumerate(pairs):
        a, b = sorted((p[i], p[j]))
        edges[:, pos[(a, b)]] = table.edges[:, k]
    return table.index_of(nodes, edges)


NodeSite = int
EdgeSite = tuple[int, int]
Site = Union[NodeSite, EdgeSite]


def token_flip(G: Graph, site: Site, new_state: int, spaces: StateSpaces | None = None) -> Graph:
    """Copy of ``G`` with one node (``site=i``) or edge (``site=(i, j)``) changed."""
    if isinstance(site, tuple):
        i, j = site
        if i == j:
            raise GraphError("diagonal edges are not diffusion tokens")
        if i > j:
            raise GraphError(f"edge sites are addressed with i<j, got {site}")
        if spaces is not None and not 0 <= new_state < spaces.edge_cardinality:
            raise GraphError(f"edge state {new_state} out of range")
        k = edge_pairs(G.n).index((i, j))
        edges = list(G.edges_upper)
        edges[k] = new_state
        return Graph(G.nodes, tuple(edges))
    if spaces is not None and not 0 <= new_state < spaces.node_cardinality:
        raise GraphError(f"node state {new_state} out of range")
    if not 0 <= site < G.n:
        raise GraphError(f"node {site} out of range")
    nodes = list(G.nodes)
    nodes[site] = new_state
    return Graph(tuple(nodes), G.edges_upper)


def iter_sites(n: int) -> Iterator[Site]:
    yield from range(n)
    yield from edge_pairs(n)
