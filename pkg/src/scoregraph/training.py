"""Denoising score-entropy loss, its gradients, and the training loops."""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .data import ConditionKey, Dataset
from .graph import Graph
from .noise import NoiseSchedule, TransitionModel, corrupt_tokens, forward_ratios, models_for
from .scoring import NumericHealthError, ScoreTensor, TabularScorer

log = logging.getLogger(__name__)


class Regime(str, Enum):
    PER_PROPERTY = "per-property"
    SUBSET_POOLED = "subset-pooled"


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 64
    steps: int = 1000
    lambda_edge: float = 1.0
    p_drop: float = 0.1
    warmup_steps: int = 1500
    grad_clip_norm: float | None = 1.0
    regime: Regime = Regime.PER_PROPERTY
    seed: int = 0
    lr_decay: str = "none"  # or "cosine"
    final_lr_fraction: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    optimizer: str = "adam"  # or "adagrad"

    def __post_init__(self):
        self.regime = Regime(self.regime)
        if self.lambda_edge <= 0:
            raise ValueError("lambda_edge must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.p_drop <= 1:
            raise ValueError("p_drop must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError("lr_decay must be 'none' or 'cosine'")
        if self.optimizer not in ("adam", "adagrad"):
            raise ValueError("optimizer must be 'adam' or 'adagrad'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regime"] = self.regime.value
        return d

    def lr_at(self, step: int) -> float:
        lr = self.learning_rate
        if self.warmup_steps > 0:
            lr *= min(1.0, (step + 1) / self.warmup_steps)
        if self.lr_decay == "cosine" and step >= self.warmup_steps:
            span = max(1, self.steps - self.warmup_steps)
            frac = min(1.0, (step - self.warmup_steps) / span)
            lr *= self.final_lr_fraction + (1 - self.final_lr_fraction) * 0.5 * (1 + np.cos(np.pi * frac))
        return lr


@dataclass
class LossReport:
    node_term: float
    edge_term: float
    total: float
    token_count: int


def entropy_terms(log_s: np.ndarray, ratios: np.ndarray, valid: np.ndarray, current: np.ndarray,
                  sigma: np.ndarray):
    """Per-row ``sigma * sum (s - r log s)`` over alternative states and its gradient.

    Shapes: ``log_s``, ``ratios``, ``valid`` are ``(B, L, K)``; ``current`` is
    ``(B, L)``; ``sigma`` is ``(B,)``. Entries whose current state is
    unreachable (``valid`` False) are skipped. The gradient is with respect to
    the log score.
    """
    K = log_s.shape[-1]
    alt = (np.arange(K) != current[..., None]) & valid
    used = np.where(alt, log_s, 0.0)
    if not np.all(np.isfinite(used)):
        raise NumericHealthError("non-finite predicted log score")
    s = np.exp(used)
    sig = sigma[:, None, None]
    per = np.where(alt, s - ratios * used, 0.0)
    terms = sigma * per.sum(axis=(1, 2))
    grad = np.where(alt, sig * (s - ratios), 0.0)
    return terms, grad


def _ratios(model: TransitionModel, sigma_bar, x0, xt):
    if x0.shape[1] == 0:
        shape = x0.shape + (model.K,)
        return np.zeros(shape), np.zeros(shape, dtype=bool)
    return forward_ratios(model, sigma_bar, x0, xt)


def batch_loss(node_ls, edge_ls, x0_nodes, x0_edges, xt_nodes, xt_edges, t, schedule: NoiseSchedule,
               node_model: TransitionModel, edge_model: TransitionModel, lambda_edge: float):
    """Mean loss report plus gradients of the mean total w.r.t. the log scores."""
    t = np.asarray(t, dtype=float)
    sb, sig = schedule.sigma_bar(t), schedule.sigma(t)
    rn, vn = _ratios(node_model, sb, x0_nodes, xt_nodes)
    re, ve = _ratios(edge_model, sb, x0_edges, xt_edges)
    tn, gn = entropy_terms(node_ls, rn, vn, xt_nodes, sig)
    te, ge = entropy_terms(edge_ls, re, ve, xt_edges, sig)
    B = len(t)
    node_term, edge_term = float(tn.mean()), float(te.mean())
    report = LossReport(node_term, edge_term, node_term + lambda_edge * edge_term,
                        int(vn[..., 0].sum() + ve[..., 0].sum()))
    return report, gn / B, lambda_edge * ge / B


def score_entropy_loss(pred: ScoreTensor, G0: Graph, G_t: Graph, t: float, schedule: NoiseSchedule,
                       node_model: TransitionModel, edge_model: TransitionModel,
                       lambda_edge: float = 1.0) -> LossReport:
    arr = lambda seq: np.array(seq, dtype=np.int64).reshape(1, -1)
    report, _, _ = batch_loss(pred.node_log_scores[None], pred.edge_log_scores[None],
                              arr(G0.nodes), arr(G0.edges_upper), arr(G_t.nodes), arr(G_t.edges_upper),
                              np.array([t]), schedule, node_model, edge_model, lambda_edge)
    return report


def loss_gradient_tabular(scorer: TabularScorer, G0: Graph, G_t: Graph, t: float, key: ConditionKey,
                          schedule: NoiseSchedule, node_model: TransitionModel, edge_model: TransitionModel,
                          lambda_edge: float = 1.0):
    """Sparse gradient ``{name: (flat_index, value)}`` of one item's loss."""
    arr = lambda seq: np.array(seq, dtype=np.int64).reshape(1, -1)
    nodes, edges = arr(G_t.nodes), arr(G_t.edges_upper)
    (node_ls, edge_ls), cells = scorer.batch_log_scores(nodes, edges, np.array([t]), [key])
    _, gn, ge = batch_loss(node_ls, edge_ls, arr(G0.nodes), arr(G0.edges_upper), nodes, edges,
                           np.array([t]), schedule, node_model, edge_model, lambda_edge)
    return scorer.sparse_gradient(cells, gn, ge)


class Adam:
    """Adam with dense or lazy sparse updates.

    Sparse updates touch only the supplied entries and bias-correct with each
    entry's own update count.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.count: dict = {}
        self.t = 0

    def _state(self, name, like):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)
            self.count[name] = np.zeros(like.shape, dtype=np.int64)
        return self.m[name], self.v[name]

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        for name, g in grads.items():
            m, v = self._state(name, params[name])
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            params[name] -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def sparse_step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        for name, (idx, g) in grads.items():
            m, v = self._state(name, params[name])
            m, v, c = m.reshape(-1), v.reshape(-1), self.count[name].reshape(-1)
            flat = params[name].reshape(-1)
            c[idx] += 1
            m[idx] = self.beta1 * m[idx] + (1 - self.beta1) * g
            v[idx] = self.beta2 * v[idx] + (1 - self.beta2) * g * g
            mhat = m[idx] / (1 - self.beta1 ** c[idx])
            vhat = v[idx] / (1 - self.beta2 ** c[idx])
            flat[idx] -= lr * mhat / (np.sqrt(vhat) + self.eps)


class Adagrad:
    """Per-entry step ``lr * g / sqrt(sum g^2)``; steps shrink with each
    entry's own gradient history, which averages noisy targets."""

    def __init__(self, eps: float = 1e-10):
        self.eps = eps
        self.acc: dict = {}

    def _acc(self, name, like):
        if name not in self.acc:
            self.acc[name] = np.zeros_like(like)
        return self.acc[name]

    def step(self, params: dict, grads: dict, lr: float):
        for name, g in grads.items():
            acc = self._acc(name, params[name])
            acc += g * g
            params[name] -= lr * g / (np.sqrt(acc) + self.eps)

    def sparse_step(self, params: dict, grads: dict, lr: float):
        for name, (idx, g) in grads.items():
            acc = self._acc(name, params[name]).reshape(-1)
            acc[idx] += g * g
            params[name].reshape(-1)[idx] -= lr * g / (np.sqrt(acc[idx]) + self.eps)


def global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        vals = g[1] if isinstance(g, tuple) else g
        total += float(np.sum(vals * vals))
    return float(np.sqrt(total))


def clip_gradients(grads: dict, max_norm: float | None) -> float:
    """Rescale in place so the global norm is at most ``max_norm``; returns the factor."""
    if not max_norm:
        return 1.0
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0:
        return 1.0
    scale = max_norm / norm
    for g in grads.values():
        if isinstance(g, tuple):
            g[1][...] *= scale
        else:
            g *= scale
    return scale


def keys_for(dataset: Dataset, regime: Regime) -> list[ConditionKey]:
    if Regime(regime) is Regime.PER_PROPERTY:
        return dataset.single_keys()
    return dataset.subset_keys()


def _choices(M: int, regime: Regime) -> list[tuple[int, ...]]:
    if regime is Regime.PER_PROPERTY:
        return [(m,) for m in range(M)]
    return [s for r in range(1, M + 1) for s in itertools.combinations(range(M), r)]


def sample_keys(dataset: Dataset, records: np.ndarray, config: TrainConfig, rng: np.random.Generator):
    """One condition key per item; dropped (unconditional) items get the null key.

    Per-property training picks one slot uniformly; subset-pooled training
    picks a non-empty subset of slots uniformly.
    """
    choices = _choices(dataset.M, config.regime)
    keys = []
    for r in records:
        if not choices:
            keys.append(ConditionKey.null())
            continue
        slots = choices[int(rng.integers(len(choices)))]
        drop = rng.random() < config.p_drop
        cond = dataset.conditions[r]
        pairs = tuple((m, cond[m]) for m in slots if cond[m] is not None)
        keys.append(ConditionKey.null() if drop or not pairs else ConditionKey(pairs))
    return keys


class Trainer:
    """Holds optimizer state across steps for one scorer."""

    def __init__(self, scorer, dataset: Dataset, config: TrainConfig, schedule: NoiseSchedule | None = None,
                 node_model=None, edge_model=None):
        self.scorer = scorer
        self.dataset = dataset
        self.config = config
        self.schedule = schedule or NoiseSchedule()
        dn, de = models_for(dataset.spaces)
        self.node_model = node_model or dn
        self.edge_model = edge_model or de
        self.optimizer = Adam(config.beta1, config.beta2) if config.optimizer == "adam" else Adagrad()
        self.step_count = 0
        self.rng = np.random.default_rng(config.seed)
        self._nodes, self._edges = dataset.token_arrays()
        # key_table[r, c]: index into self.keys for record r under slot choice c
        self._choices = _choices(dataset.M, config.regime)
        self.keys = [ConditionKey.null()]
        self._key_table = np.zeros((len(dataset), max(1, len(self._choices))), dtype=np.int64)
        for r, cond in enumerate(dataset.conditions):
            for c, slots in enumerate(self._choices):
                pairs = tuple((m, cond[m]) for m in slots if cond[m] is not None)
                key = ConditionKey(pairs)
                if key not in self.keys:
                    self.keys.append(key)
                self._key_table[r, c] = self.keys.index(key)
        if isinstance(scorer, TabularScorer):
            self._scorer_index = np.array([scorer.key_index(k) for k in self.keys], dtype=np.int64)

    def draw_batch(self, rng):
        cfg = self.config
        B = cfg.batch_size
        records = rng.integers(0, len(self.dataset), size=B)
        t = rng.uniform(self.schedule.t_min, 1.0, size=B)
        choice = rng.integers(0, max(1, len(self._choices)), size=B)
        drop = rng.random(B) < cfg.p_drop
        kidx = np.where(drop, 0, self._key_table[records, choice])
        sb = self.schedule.sigma_bar(t)
        x0n, x0e = self._nodes[records], self._edges[records]
        xtn = corrupt_tokens(self.node_model, sb, x0n, rng)
        xte = corrupt_tokens(self.edge_model, sb, x0e, rng) if x0e.shape[1] else x0e.copy()
        return x0n, x0e, xtn, xte, t, kidx

    def batch_keys(self, kidx) -> list[ConditionKey]:
        return [self.keys[k] for k in kidx]

    def gradients(self, batch):
        x0n, x0e, xtn, xte, t, kidx = batch
        tabular = isinstance(self.scorer, TabularScorer)
        keys = self._scorer_index[kidx] if tabular else self.batch_keys(kidx)
        (node_ls, edge_ls), cells = self.scorer.batch_log_scores(xtn, xte, t, keys)
        report, gn, ge = batch_loss(node_ls, edge_ls, x0n, x0e, xtn, xte, t, self.schedule,
                                    self.node_model, self.edge_model, self.config.lambda_edge)
        if tabular:
            grads = self.scorer.sparse_gradient(cells, gn, ge)
        else:
            grads = self.scorer.gradient(cells, gn, ge)
        return report, grads

    def step(self, batch=None) -> LossReport:
        batch = batch if batch is not None else self.draw_batch(self.rng)
        report, grads = self.gradients(batch)
        clip_gradients(grads, self.config.grad_clip_norm)
        lr = self.config.lr_at(self.step_count)
        if isinstance(self.scorer, TabularScorer):
            self.optimizer.sparse_step(self.scorer.params, grads, lr)
        else:
            self.optimizer.step(self.scorer.params, grads, lr)
        self.step_count += 1
        self.scorer.check_finite()
        return report

    def run(self, steps: int | None = None, log_every: int = 0) -> list[LossReport]:
        trace = []
        for k in range(steps if steps is not None else self.config.steps):
            trace.append(self.step())
            if log_every and (k + 1) % log_every == 0:
                log.info("step %d loss %.5g", k + 1, trace[-1].total)
        return trace


def train_step(trainer: Trainer, batch=None) -> LossReport:
    return trainer.step(batch)


def make_tabular(dataset: Dataset, config: TrainConfig, schedule: NoiseSchedule | None = None,
                 time_bins: int = 32) -> TabularScorer:
    return TabularScorer(dataset.n, dataset.spaces, keys_for(dataset, config.regime), schedule, time_bins,
                         schema=dataset.schema)


def train(dataset: Dataset, config: TrainConfig, schedule: NoiseSchedule | None = None,
          node_model=None, edge_model=None, scorer=None, log_every: int = 0):
    """Train ``scorer`` (a fresh tabular one by default) for ``config.steps`` steps."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    schedule = schedule or NoiseSchedule()
    scorer = scorer if scorer is not None else make_tabular(dataset, config, schedule)
    trainer = Trainer(scorer, dataset, config, schedule, node_model, edge_model)
    trace = trainer.run(log_every=log_every)
    return scorer, trace


def write_loss_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "node_term", "edge_term", "total"])
        for k, r in enumerate(trace, 1):
            w.writerow([k, repr(r.node_term), repr(r.edge_term), repr(r.total)])
