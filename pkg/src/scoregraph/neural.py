"""Condition encoders and a small per-token feedforward scorer.

All parameters live in one flat ``params`` dict of numpy arrays and every
gradient is derived by hand, so the model can be trained with the same
optimizer as the tabular scorer and checked against finite differences.
"""

from __future__ import annotations

import numpy as np

from .data import CategoricalSlot, ConditionKey, NumericSlot
from .graph import StateSpaces, num_edge_slots
from .noise import NoiseSchedule
from .scoring import NumericHealthError, pin_current


class EncoderError(ValueError):
    pass


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class CategoricalEncoder:
    """Embedding table of ``K + 1`` rows; row ``K`` is the dropped/null label."""

    def __init__(self, num_classes: int, d_h: int, rng: np.random.Generator, p_drop: float = 0.1,
                 prefix: str = "cat"):
        self.K = num_classes
        self.d_h = d_h
        self.p_drop = p_drop
        self.prefix = prefix
        self.params = {f"{prefix}.table": rng.normal(0, 0.5, (num_classes + 1, d_h))}

    def forward(self, value, dropped: bool = False):
        table = self.params[f"{self.prefix}.table"]
        if dropped or value is None:
            return table[self.K], ("null",)
        if not 0 <= int(value) < self.K:
            raise EncoderError(f"class {value} outside [0, {self.K})")
        return table[int(value)], ("row", int(value))

    def backward(self, cache, grad, grads):
        row = self.K if cache[0] == "null" else cache[1]
        grads[f"{self.prefix}.table"][row] += grad


class ClusterEncoder:
    """``W2 softmax(W1 c + b1) + b2``, or the learnable null embedding when dropped."""

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator, clusters: int = 8,
                 p_drop: float = 0.1, prefix: str = "num"):
        self.d_in = d_in
        self.d_h = d_h
        self.p_drop = p_drop
        self.prefix = prefix
        p = prefix
        self.params = {
            f"{p}.W1": rng.normal(0, 1.0, (clusters, d_in)),
            f"{p}.b1": rng.normal(0, 0.1, clusters),
            f"{p}.W2": rng.normal(0, 0.5, (d_h, clusters)),
            f"{p}.b2": np.zeros(d_h),
            f"{p}.null": rng.normal(0, 0.5, d_h),
        }

    def forward(self, value, dropped: bool = False):
        p = self.prefix
        if dropped or value is None:
            return self.params[f"{p}.null"], ("null",)
        c = np.atleast_1d(np.asarray(value, dtype=float))
        if c.shape != (self.d_in,):
            raise EncoderError(f"numeric condition of shape {c.shape}, expected ({self.d_in},)")
        a = _softmax(self.params[f"{p}.W1"] @ c + self.params[f"{p}.b1"])
        return self.params[f"{p}.W2"] @ a + self.params[f"{p}.b2"], ("mlp", c, a)

    def backward(self, cache, grad, grads):
        p = self.prefix
        if cache[0] == "null":
            grads[f"{p}.null"] += grad
            return
        _, c, a = cache
        grads[f"{p}.W2"] += np.outer(grad, a)
        grads[f"{p}.b2"] += grad
        da = self.params[f"{p}.W2"].T @ grad
        dz = a * (da - a @ da)
        grads[f"{p}.W1"] += np.outer(dz, c)
        grads[f"{p}.b1"] += dz


def make_encoders(schema, d_h: int, rng: np.random.Generator, p_drop: float = 0.1):
    encoders = []
    for m, slot in enumerate(schema):
        if isinstance(slot, CategoricalSlot):
            encoders.append(CategoricalEncoder(slot.num_classes, d_h, rng, p_drop, prefix=f"enc{m}"))
        elif isinstance(slot, NumericSlot):
            encoders.append(ClusterEncoder(slot.dim, d_h, rng, p_drop=p_drop, prefix=f"enc{m}"))
        else:
            raise EncoderError(f"unknown slot type {slot!r}")
    return encoders


def encode_condition(encoder, value, dropped: bool = False) -> np.ndarray:
    return encoder.forward(value, dropped)[0].copy()


def pool_subset(embeddings) -> np.ndarray:
    embeddings = list(embeddings)
    if not embeddings:
        raise EncoderError("cannot pool an empty set of embeddings")
    return np.mean(np.stack(embeddings), axis=0)


def time_features(schedule: NoiseSchedule, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return np.stack([t, np.log(schedule.sigma_bar(t)) / 5.0, np.sin(np.pi * t), np.cos(np.pi * t)], axis=-1)


class NeuralScorer:
    """Per-token network over ``[one-hot state, mean node one-hot, mean edge
    one-hot, time features, condition embedding]`` with one tanh layer.

    Node and edge tokens have separate weights. The condition embedding is the
    mean of the key's slot embeddings; the null key pools every slot's null
    embedding.
    """

    kind = "neural"

    def __init__(self, n: int, spaces: StateSpaces, schema, schedule: NoiseSchedule | None = None,
                 hidden: int = 32, d_h: int = 8, seed: int = 0, p_drop: float = 0.1,
                 zero_head: bool = True):
        self.n = n
        self.spaces = spaces
        self.schema = tuple(schema)
        self.schedule = schedule or NoiseSchedule()
        self.hidden = hidden
        self.d_h = d_h
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoders = make_encoders(self.schema, d_h, rng, p_drop)
        a, b = spaces.node_cardinality, spaces.edge_cardinality
        self.params = {}
        for fam, K in (("node", a), ("edge", b)):
            D = K + a + b + 4 + d_h
            self.params[f"{fam}.W1"] = rng.normal(0, 1 / np.sqrt(D), (hidden, D))
            self.params[f"{fam}.b1"] = np.zeros(hidden)
            self.params[f"{fam}.W2"] = np.zeros((K, hidden)) if zero_head else \
                rng.normal(0, 1 / np.sqrt(hidden), (K, hidden))
            self.params[f"{fam}.b2"] = np.zeros(K)
        for enc in self.encoders:
            self.params.update(enc.params)
            enc.params = self.params  # share storage

    @property
    def M(self) -> int:
        return len(self.schema)

    def check_finite(self):
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise NumericHealthError(f"non-finite parameter {name}")

    def embed(self, key: ConditionKey):
        if key.is_null:
            parts = [enc.forward(None, dropped=True) for enc in self.encoders]
            if not parts:
                return np.zeros(self.d_h), []
            return pool_subset([p[0] for p in parts]), [(m, c, len(parts)) for m, (_, c) in enumerate(parts)]
        parts = []
        for m, value in key.items:
            if not 0 <= m < self.M:
                raise EncoderError(f"slot {m} not in schema")
            parts.append((m, self.encoders[m].forward(value)))
        emb = pool_subset([e for _, (e, _) in parts])
        return emb, [(m, c, len(parts)) for m, (_, c) in parts]

    def _features(self, nodes, edges, t, keys):
        B = nodes.shape[0]
        a, b = self.spaces.node_cardinality, self.spaces.edge_cardinality
        oh_n = np.eye(a)[nodes]
        oh_e = np.eye(b)[edges]
        ctx = [oh_n.mean(axis=1)]
        ctx.append(oh_e.mean(axis=1) if edges.shape[1] else np.zeros((B, b)))
        tf = time_features(self.schedule, np.broadcast_to(np.asarray(t, dtype=float), (B,)))
        if isinstance(keys, list):
            embs, caches = zip(*(self.embed(k) for k in keys))
            emb = np.stack(embs)
        else:
            e, c = self.embed(keys)
            emb = np.broadcast_to(e, (B, self.d_h))
            caches = [c] * B
        shared = np.concatenate(ctx + [tf, emb], axis=-1)
        return oh_n, oh_e, shared, list(caches)

    def _forward(self, nodes, edges, t, keys):
        self.check_finite()
        oh_n, oh_e, shared, caches = self._features(nodes, edges, t, keys)
        outs, tape = [], []
        for fam, oh, states in (("node", oh_n, nodes), ("edge", oh_e, edges)):
            L = oh.shape[1]
            x = np.concatenate([oh, np.broadcast_to(shared[:, None, :], (shared.shape[0], L, shared.shape[1]))], axis=-1)
            h = np.tanh(x @ self.params[f"{fam}.W1"].T + self.params[f"{fam}.b1"])
            out = h @ self.params[f"{fam}.W2"].T + self.params[f"{fam}.b2"]
            outs.append(pin_current(out, states))
            tape.append((fam, x, h))
        return outs, (tape, caches, oh_n.shape[-1] + 0)

    def log_scores(self, nodes, edges, t, key: ConditionKey = ConditionKey()):
        (node, edge), _ = self._forward(nodes, edges, t, key)
        return node, edge

    def batch_log_scores(self, nodes, edges, t, keys: list):
        return self._forward(nodes, edges, t, keys)

    def gradient(self, cells, node_grad, edge_grad):
        """Dense parameter gradients given ``dL/d(log score)`` per entry."""
        tape, caches, _ = cells
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        d_cond = 0.0
        for (fam, x, h), g in zip(tape, (node_grad, edge_grad)):
            if x.shape[1] == 0:
                continue
            grads[f"{fam}.W2"] += np.einsum("blk,blh->kh", g, h)
            grads[f"{fam}.b2"] += g.sum(axis=(0, 1))
            dpre = (g @ self.params[f"{fam}.W2"]) * (1 - h**2)
            grads[f"{fam}.W1"] += np.einsum("blh,bld->hd", dpre, x)
            grads[f"{fam}.b1"] += dpre.sum(axis=(0, 1))
            dx = dpre @ self.params[f"{fam}.W1"]
            d_cond = d_cond + dx[..., -self.d_h:].sum(axis=1)
        if np.ndim(d_cond) == 0:
            return grads
        for row, cache in enumerate(caches):
            for m, c, count in cache:
                self.encoders[m].backward(c, d_cond[row] / count, grads)
        return grads
