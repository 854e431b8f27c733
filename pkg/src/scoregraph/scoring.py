"""Concrete-score tensors, the exact enumeration oracle and the tabular scorer.

Every scorer exposes ``log_scores(nodes, edges, t, key)`` over a batch of token
arrays ``nodes (B, n)`` and ``edges (B, m)`` and returns log concrete scores of
shape ``(B, n, a)`` and ``(B, m, b)``. The entry at each token's current state
is 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ConditionKey, Dataset
from .graph import Graph, StateSpaces, num_edge_slots, token_table
from .noise import NoiseSchedule, TransitionModel, kernel, models_for


class ScoreError(ValueError):
    pass


class NumericHealthError(FloatingPointError):
    """Non-finite parameters or predictions."""


class OracleDomainError(ScoreError):
    """The current state has zero probability under the data marginal."""


class UnknownKey(KeyError):
    pass


@dataclass
class ScoreTensor:
    """Log concrete scores; leading batch dimensions are allowed.

    ``-inf`` marks provably impossible alternative states.
    """

    node_log_scores: np.ndarray
    edge_log_scores: np.ndarray

    @property
    def shape(self):
        return self.node_log_scores.shape, self.edge_log_scores.shape

    def check_current(self, G: Graph) -> None:
        n_idx = np.arange(G.n)
        e_idx = np.arange(len(G.edges_upper))
        if np.any(self.node_log_scores[..., n_idx, list(G.nodes)] != 0) or np.any(
            self.edge_log_scores[..., e_idx, list(G.edges_upper)] != 0
        ):
            raise ScoreError("current-state entries must be exactly 0")


def pin_current(log_scores: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Zero the entry at each token's current state, in place."""
    np.put_along_axis(log_scores, states[..., None], 0.0, axis=-1)
    return log_scores


def as_batch(G: Graph) -> tuple[np.ndarray, np.ndarray]:
    return (np.array([G.nodes], dtype=np.int64),
            np.array(G.edges_upper, dtype=np.int64).reshape(1, num_edge_slots(G.n)))


def score_graph(scorer, G: Graph, t: float, key: ConditionKey = ConditionKey()) -> ScoreTensor:
    node, edge = scorer.log_scores(*as_batch(G), t, key)
    return ScoreTensor(node[0], edge[0])


class ExactScorer:
    """Concrete scores computed from the definition by summing over the data.

    ``p_t(H) = sum_G0 p_data(G0 | key) prod_tokens exp(sigma_bar Q)[H_tok, G0_tok]``
    and the score of a single-token flip is the ratio of two such marginals.

    ``outside_support`` controls states with ``p_t = 0``: ``"error"`` raises
    :class:`OracleDomainError`; ``"zero"`` returns all-zero log scores there
    (used when driving reverse dynamics) and counts them in ``fallbacks``.
    """

    def __init__(self, dataset: Dataset, schedule: NoiseSchedule | None = None,
                 node_model: TransitionModel | None = None,
                 edge_model: TransitionModel | None = None,
                 outside_support: str = "error"):
        self.dataset = dataset
        self.n = dataset.n
        self.spaces = dataset.spaces
        self.schedule = schedule or NoiseSchedule()
        default_node, default_edge = models_for(dataset.spaces)
        self.node_model = node_model or default_node
        self.edge_model = edge_model or default_edge
        if outside_support not in ("error", "zero"):
            raise ValueError("outside_support must be 'error' or 'zero'")
        self.outside_support = outside_support
        self.fallbacks = 0
        self.table = token_table(self.n, self.spaces)
        self._data_nodes, self._data_edges = dataset.token_arrays()
        self._cache_key = None
        self._cache = None

    def marginal(self, t: float, key: ConditionKey = ConditionKey()) -> np.ndarray:
        """``p_t`` over every enumerated graph, in canonical order."""
        key = self.dataset.check_key(key)
        w = self.dataset.weights(key)
        sb = float(self.schedule.sigma_bar(t))
        Kn = kernel(self.node_model, sb)
        Ke = kernel(self.edge_model, sb)
        tab = self.table
        p = np.zeros(tab.size)
        for g in np.flatnonzero(w):
            like = np.ones(tab.size)
            for i in range(self.n):
                like *= Kn[tab.nodes[:, i], self._data_nodes[g, i]]
            for k in range(tab.edges.shape[1]):
                like *= Ke[tab.edges[:, k], self._data_edges[g, k]]
            p += w[g] * like
        return p

    def _all_scores(self, t: float, key: ConditionKey):
        cache_key = (float(t), key)
        if self._cache_key == cache_key:
            return self._cache
        p = self.marginal(t, key)
        tab = self.table
        idx = np.arange(tab.size)
        n, a, b = self.n, self.spaces.node_cardinality, self.spaces.edge_cardinality
        w = tab.weights
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = np.log(p)
            flips = idx[:, None, None] + (np.arange(a)[None, None, :] - tab.nodes[:, :, None]) * w[None, :n, None]
            node = logp[flips] - logp[:, None, None]
            flips = idx[:, None, None] + (np.arange(b)[None, None, :] - tab.edges[:, :, None]) * w[None, n:, None]
            edge = logp[flips] - logp[:, None, None]
        dead = p <= 0
        node[dead] = 0.0
        edge[dead] = 0.0
        pin_current(node, tab.nodes)
        pin_current(edge, tab.edges)
        self._cache_key = cache_key
        self._cache = (node, edge, dead)
        return self._cache

    def log_scores(self, nodes: np.ndarray, edges: np.ndarray, t: float, key: ConditionKey = ConditionKey()):
        node, edge, dead = self._all_scores(t, key)
        idx = self.table.index_of(nodes, edges)
        if np.any(dead[idx]):
            if self.outside_support == "error":
                raise OracleDomainError(f"current state has zero probability at t={t} under {key}")
            self.fallbacks += int(dead[idx].sum())
        return node[idx].copy(), edge[idx].copy()

    def all_log_scores(self, t: float, key: ConditionKey = ConditionKey()):
        node, edge, _ = self._all_scores(t, key)
        return node, edge


def exact_score(dataset: Dataset, G_t: Graph, t: float, key: ConditionKey = ConditionKey(),
                schedule: NoiseSchedule | None = None, node_model=None, edge_model=None) -> ScoreTensor:
    return score_graph(ExactScorer(dataset, schedule, node_model, edge_model), G_t, t, key)


class TabularScorer:
    """A free log-score per (graph, condition key, time node, token, state).

    Time is handled by linear interpolation between ``time_bins`` nodes spaced
    uniformly in ``log sigma_bar`` over ``[t_min, 1]``.
    """

    kind = "tabular"

    def __init__(self, n: int, spaces: StateSpaces, keys, schedule: NoiseSchedule | None = None,
                 time_bins: int = 32, schema=()):
        if time_bins < 2:
            raise ValueError("need at least two time nodes")
        self.n = n
        self.spaces = spaces
        self.schedule = schedule or NoiseSchedule()
        self.time_bins = time_bins
        self.schema = tuple(schema)
        self.keys = [ConditionKey.null()] + [k for k in keys if not k.is_null]
        if len(set(self.keys)) != len(self.keys):
            raise ScoreError("duplicate condition keys")
        self._key_index = {k: i for i, k in enumerate(self.keys)}
        self.table = token_table(n, spaces)
        S, m = self.table.size, num_edge_slots(n)
        self.params = {
            "node": np.zeros((S, len(self.keys), time_bins, n, spaces.node_cardinality)),
            "edge": np.zeros((S, len(self.keys), time_bins, m, spaces.edge_cardinality)),
        }
        lo = np.log(float(self.schedule.sigma_bar(self.schedule.t_min)))
        hi = np.log(float(self.schedule.sigma_bar(1.0)))
        self.log_sigma_nodes = np.linspace(lo, hi, time_bins)

    def key_index(self, key: ConditionKey) -> int:
        try:
            return self._key_index[key]
        except KeyError:
            raise UnknownKey(f"condition key {key} was never trained; fall back to the null key") from None

    def node_times(self) -> np.ndarray:
        """Times at which the interpolation nodes sit."""
        sb = np.exp(self.log_sigma_nodes)
        return -np.expm1(-sb) / (1 - self.schedule.eps)

    def interpolation(self, t):
        u = np.log(self.schedule.sigma_bar(t))
        f = (u - self.log_sigma_nodes[0]) / (self.log_sigma_nodes[1] - self.log_sigma_nodes[0])
        f = np.clip(f, 0, self.time_bins - 1)
        lo = np.minimum(np.floor(f).astype(np.int64), self.time_bins - 2)
        return lo, f - lo

    def check_finite(self):
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise NumericHealthError(f"non-finite entries in tabular {name} table")

    def _lookup(self, nodes, edges, t, kidx):
        """Gather for per-row times and key indices; also returns the cells touched."""
        idx = self.table.index_of(nodes, edges)
        kidx = np.broadcast_to(np.asarray(kidx, dtype=np.int64), idx.shape)
        lo, frac = self.interpolation(np.broadcast_to(np.asarray(t, dtype=float), idx.shape))
        wl = (1 - frac)[:, None, None]
        wh = frac[:, None, None]
        out = []
        for name, states in (("node", nodes), ("edge", edges)):
            P = self.params[name]
            val = wl * P[idx, kidx, lo] + wh * P[idx, kidx, lo + 1]
            out.append(pin_current(val, states))
        return out, (idx, kidx, lo, frac)

    def log_scores(self, nodes, edges, t, key: ConditionKey = ConditionKey()):
        (node, edge), _ = self._lookup(nodes, edges, t, self.key_index(key))
        return node, edge

    def batch_log_scores(self, nodes, edges, t: np.ndarray, keys):
        """Per-row times and keys (a list of keys or an array of key indices)."""
        if isinstance(keys, list):
            keys = np.array([self.key_index(k) for k in keys], dtype=np.int64)
        return self._lookup(nodes, edges, t, keys)

    def sparse_gradient(self, cells, node_grad, edge_grad):
        """Scatter log-score gradients into sparse ``{name: (flat_index, value)}``."""
        idx, kidx, lo, frac = cells
        grads = {}
        for name, g in (("node", node_grad), ("edge", edge_grad)):
            P = self.params[name]
            L, K = P.shape[-2:]
            base = np.ravel_multi_index((idx, kidx, lo), P.shape[:3]) * (L * K)
            local = np.arange(L * K)
            flat = np.concatenate([(base[:, None] + local).ravel(), (base[:, None] + L * K + local).ravel()])
            vals = np.concatenate([((1 - frac)[:, None, None] * g).reshape(-1),
                                   (frac[:, None, None] * g).reshape(-1)])
            dense = np.bincount(flat, weights=vals, minlength=P.size)
            nz = np.flatnonzero(dense)
            grads[name] = (nz, dense[nz])
        return grads
