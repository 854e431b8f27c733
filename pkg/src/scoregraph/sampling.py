"""Guidance composition, the Tweedie tau-leaping reverse step, probability
calibration, and the sampling loop (sampled or exactly propagated)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import ConditionKey
from .graph import Graph, StateSpaces, num_edge_slots, token_table
from .noise import (NoiseSchedule, TransitionModel, base_distribution, base_tokens, draw_categorical, kernel,
                    models_for)
from .scoring import ScoreTensor

log = logging.getLogger(__name__)


class GuidanceError(ValueError):
    pass


class DegenerateDistribution(ArithmeticError):
    pass


# -- guidance ---------------------------------------------------------------

def _affine(null: np.ndarray, terms) -> np.ndarray:
    """``(1 - sum w) * null + sum w * s`` in the log domain.

    An entry is ``-inf`` when any tensor entering with a nonzero coefficient is
    ``-inf`` there (the state is impossible under that component).
    """
    coef_null = 1.0 - sum(w for _, w in terms)
    out = np.zeros(np.shape(null))
    dead = np.zeros(np.shape(null), dtype=bool)
    for arr, c in [(null, coef_null)] + list(terms):
        if np.shape(arr) != np.shape(null):
            raise GuidanceError(f"shape mismatch {np.shape(arr)} vs {np.shape(null)}")
        if c == 0:
            continue
        inf = np.isneginf(arr)
        dead |= inf
        out = out + c * np.where(inf, 0.0, arr)
    out[dead] = -np.inf
    return out


def _compose(s_null: ScoreTensor, terms) -> ScoreTensor:
    return ScoreTensor(
        _affine(s_null.node_log_scores, [(s.node_log_scores, w) for s, w in terms]),
        _affine(s_null.edge_log_scores, [(s.edge_log_scores, w) for s, w in terms]),
    )


def compose_cfg(s_null: ScoreTensor, s_cond: ScoreTensor, w: float) -> ScoreTensor:
    return _compose(s_null, [(s_cond, w)])


def compose_cog(s_null: ScoreTensor, per_slot) -> ScoreTensor:
    per_slot = list(per_slot)
    if not per_slot:
        raise GuidanceError("composable guidance needs at least one slot")
    return _compose(s_null, per_slot)


def compose_fast_cog(s_null: ScoreTensor, s_subset: ScoreTensor, w: float) -> ScoreTensor:
    return _compose(s_null, [(s_subset, w)])


@dataclass(frozen=True)
class GuidanceSpec:
    """``mode`` is one of ``unconditional``, ``cfg``, ``cog``, ``fast-cog``.

    ``weights`` holds ``(slot, w_m)`` pairs for ``cog``; ``cfg`` and
    ``fast-cog`` use the single scale ``w`` (``subset`` lists the slots pooled
    by ``fast-cog``).
    """

    mode: str = "unconditional"
    w: float = 1.0
    weights: tuple = ()
    subset: tuple = ()

    def __post_init__(self):
        if self.mode not in ("unconditional", "cfg", "cog", "fast-cog"):
            raise GuidanceError(f"unknown guidance mode {self.mode!r}")
        ws = [self.w] + [w for _, w in self.weights]
        if not np.all(np.isfinite(ws)):
            raise GuidanceError("guidance weights must be finite")
        if self.mode == "cog":
            slots = [m for m, _ in self.weights]
            if not slots or len(set(slots)) != len(slots):
                raise GuidanceError("cog needs a non-empty list of distinct slots")
        if self.mode == "fast-cog" and (not self.subset or len(set(self.subset)) != len(self.subset)):
            raise GuidanceError("fast-cog needs a non-empty set of distinct slots")

    @classmethod
    def unconditional(cls):
        return cls("unconditional")

    @classmethod
    def cfg(cls, w: float):
        return cls("cfg", w=w)

    @classmethod
    def cog(cls, weights):
        items = weights.items() if isinstance(weights, dict) else weights
        return cls("cog", weights=tuple((int(m), float(w)) for m, w in items))

    @classmethod
    def fast_cog(cls, subset, w: float):
        return cls("fast-cog", w=w, subset=tuple(sorted(int(m) for m in subset)))

    def slots(self, M: int) -> tuple[int, ...]:
        if self.mode == "cog":
            return tuple(m for m, _ in self.weights)
        if self.mode == "fast-cog":
            return self.subset
        if self.mode == "cfg":
            return tuple(range(M))
        return ()

    def plan(self, conditions) -> tuple[list, list]:
        """Keys to query and the ``(key, weight)`` guidance terms."""
        conditions = tuple(conditions)
        for m in self.slots(len(conditions)):
            if not 0 <= m < len(conditions):
                raise GuidanceError(f"slot {m} outside the {len(conditions)} condition slots")
            if conditions[m] is None:
                raise GuidanceError(f"slot {m} is guided but has no requested value")
        null = ConditionKey.null()
        if self.mode == "unconditional":
            return [null], []
        if self.mode == "cfg":
            terms = [(ConditionKey.joint(conditions), self.w)]
        elif self.mode == "fast-cog":
            terms = [(ConditionKey.subset((m, conditions[m]) for m in self.subset), self.w)]
        else:
            terms = [(ConditionKey.single(m, conditions[m]), w) for m, w in self.weights]
        return [null] + [k for k, _ in terms], terms

    @property
    def calls_per_step(self) -> int:
        return {"unconditional": 1, "cfg": 2, "fast-cog": 2}.get(self.mode, 1 + len(self.weights))


def guided_log_scores(scorer, guidance: GuidanceSpec, conditions, nodes, edges, t):
    keys, terms = guidance.plan(conditions)
    out = {k: scorer.log_scores(nodes, edges, t, k) for k in keys}
    s_null = out[ConditionKey.null()]
    if not terms:
        return s_null
    return (_affine(s_null[0], [(out[k][0], w) for k, w in terms]),
            _affine(s_null[1], [(out[k][1], w) for k, w in terms]))


# -- reverse step -----------------------------------------------------------

def reverse_raw(log_scores: np.ndarray, cur: np.ndarray, sigma_leap: float, model: TransitionModel) -> np.ndarray:
    """Unnormalised Tweedie tau-leaping transition for every token.

    ``raw[y] = (exp(-leap Q) s)[y] * exp(leap Q)[cur, y]`` with ``s = exp(log_scores)``.
    """
    if sigma_leap < 0:
        raise ValueError("leap must be non-negative")
    s = np.exp(log_scores)
    back = s @ kernel(model, -sigma_leap).T
    fwd = kernel(model, sigma_leap)[cur]
    raw = back * fwd
    raw[np.isneginf(log_scores)] = 0.0
    return raw


def normalize_rows(raw: np.ndarray, cur: np.ndarray):
    """Clamp negatives, normalise; all-zero rows become a point mass at ``cur``."""
    p = np.maximum(raw, 0.0)
    total = p.sum(axis=-1, keepdims=True)
    bad = total[..., 0] <= 0
    p = np.where(total > 0, p / np.where(total > 0, total, 1.0), 0.0)
    if np.any(bad):
        np.put_along_axis(p, cur[..., None], np.where(bad[..., None], 1.0, np.take_along_axis(p, cur[..., None], -1)), -1)
    return p, bad


def reverse_token_distribution(score_row, cur: int, sigma_leap: float, model: TransitionModel) -> np.ndarray:
    raw = reverse_raw(np.asarray(score_row, dtype=float)[None], np.array([cur]), sigma_leap, model)
    p, bad = normalize_rows(raw, np.array([cur]))
    if bad[0]:
        log.warning("degenerate reverse distribution; using a point mass at the current state")
    return p[0]


# -- probability calibration --------------------------------------------------

@dataclass(frozen=True)
class CalibrationParams:
    alpha: float = 1.0
    beta: float = 99.0
    tau: float = 1.0
    eps: float = 1e-6
    enabled: bool = True
    scope: str = "token"  # percentiles per token, or "graph": over every entry of a graph

    def __post_init__(self):
        if self.scope not in ("token", "graph"):
            raise ValueError("scope must be 'token' or 'graph'")
        if not 0 <= self.alpha < self.beta <= 100:
            raise ValueError("need 0 <= alpha < beta <= 100")
        if self.tau <= 0 or self.eps <= 0:
            raise ValueError("tau and eps must be positive")


def calibrate_rows(p_raw: np.ndarray, params: CalibrationParams, lo=None, hi=None):
    """Percentile thresholding then temperature scaling along the last axis.

    ``lo``/``hi`` override the per-row percentile thresholds (they must
    broadcast against ``p_raw``). Returns ``(probs, degenerate)``; degenerate
    rows fall back to a point mass at the pre-calibration argmax.
    """
    p_raw = np.asarray(p_raw, dtype=float)
    if not np.all(np.isfinite(p_raw)):
        raise ValueError("calibration input must be finite")
    p = np.maximum(p_raw, 0.0)
    if lo is None:
        lo = np.percentile(p, params.alpha, axis=-1, keepdims=True)
        hi = np.percentile(p, params.beta, axis=-1, keepdims=True)
    hi = np.maximum(hi, lo + params.eps)
    clipped = np.maximum(p - lo, 0.0) / (hi - lo)
    scaled = clipped ** (1.0 / params.tau)
    total = scaled.sum(axis=-1, keepdims=True)
    bad = total[..., 0] <= 0
    out = scaled / np.where(total > 0, total, 1.0)
    if np.any(bad):
        point = np.zeros_like(out)
        np.put_along_axis(point, np.argmax(p_raw, axis=-1)[..., None], 1.0, -1)
        out = np.where(bad[..., None], point, out)
    return out, bad


def calibrate(p_raw, params: CalibrationParams) -> np.ndarray:
    out, bad = calibrate_rows(np.asarray(p_raw, dtype=float)[None], params)
    if bad[0]:
        log.warning("calibration removed all mass; using a point mass at the argmax")
    return out[0]


def token_distributions(log_scores, cur, sigma_leap, model, calibration: CalibrationParams | None):
    raw = reverse_raw(log_scores, cur, sigma_leap, model)
    if calibration is not None and calibration.enabled:
        return calibrate_rows(raw, calibration)
    return normalize_rows(raw, cur)


def step_distributions(node_ls, edge_ls, nodes, edges, sigma_leap, node_model, edge_model,
                       calibration: CalibrationParams | None):
    """Per-token reverse distributions for node and edge tokens of a batch of graphs.

    Returns ``(node_probs, node_degenerate, edge_probs, edge_degenerate)``.
    """
    if calibration is None or not calibration.enabled or calibration.scope == "token":
        pn, bn = token_distributions(node_ls, nodes, sigma_leap, node_model, calibration)
        pe, be = token_distributions(edge_ls, edges, sigma_leap, edge_model, calibration)
        return pn, bn, pe, be
    rn = np.maximum(reverse_raw(node_ls, nodes, sigma_leap, node_model), 0.0)
    re = np.maximum(reverse_raw(edge_ls, edges, sigma_leap, edge_model), 0.0)
    flat = np.concatenate([rn.reshape(len(rn), -1), re.reshape(len(re), -1)], axis=1)
    lo = np.percentile(flat, calibration.alpha, axis=1)[:, None, None]
    hi = np.percentile(flat, calibration.beta, axis=1)[:, None, None]
    pn, bn = calibrate_rows(rn, calibration, lo, hi)
    pe, be = calibrate_rows(re, calibration, lo, hi)
    return pn, bn, pe, be


# -- sampling loop ----------------------------------------------------------

@dataclass
class SamplerConfig:
    steps: int = 1000
    n: int = 3
    num_samples: int = 1
    seed: int = 0
    times: tuple | None = None  # explicit t_0 <= ... <= t_T, overrides steps

    def __post_init__(self):
        if self.steps < 1 or self.n < 1 or self.num_samples < 1:
            raise ValueError("steps, n and num_samples must be positive")

    def grid(self, schedule: NoiseSchedule) -> np.ndarray:
        if self.times is not None:
            times = np.asarray(self.times, dtype=float)
            if np.any(np.diff(times) < 0):
                raise ValueError("time grid must be non-decreasing")
            return times
        return schedule.time_grid(self.steps)


@dataclass
class SampleDiagnostics:
    degenerate_tokens: int = 0
    scorer_calls: int = 0
    mean_entropy: list = field(default_factory=list)


def _entropy(*dists) -> float:
    """Mean per-token entropy (nats) over every token of every distribution."""
    total, count = 0.0, 0
    for p in dists:
        logp = np.log(np.where(p > 0, p, 1.0))
        total += float(-(p * logp).sum())
        count += p[..., 0].size
    return total / max(count, 1)


def sample_tokens(scorer, guidance: GuidanceSpec, calibration: CalibrationParams | None, config: SamplerConfig,
                  conditions=(), schedule: NoiseSchedule | None = None, node_model=None, edge_model=None):
    """Run the reverse chain for ``config.num_samples`` graphs at once."""
    schedule = schedule or NoiseSchedule()
    dn, de = models_for(scorer.spaces)
    node_model, edge_model = node_model or dn, edge_model or de
    rng = np.random.default_rng(config.seed)
    B, n = config.num_samples, config.n
    nodes = base_tokens(node_model, (B, n), rng)
    edges = base_tokens(edge_model, (B, num_edge_slots(n)), rng)
    times = config.grid(schedule)
    sb = schedule.sigma_bar(times)
    diag = SampleDiagnostics()
    for k in range(len(times) - 1, 0, -1):
        leap = float(sb[k] - sb[k - 1])
        node_ls, edge_ls = guided_log_scores(scorer, guidance, conditions, nodes, edges, times[k])
        diag.scorer_calls += guidance.calls_per_step
        pn, bn, pe, be = step_distributions(node_ls, edge_ls, nodes, edges, leap, node_model, edge_model,
                                            calibration)
        diag.degenerate_tokens += int(bn.sum() + be.sum())
        diag.mean_entropy.append(_entropy(pn, pe))
        nodes = draw_categorical(rng, pn)
        edges = draw_categorical(rng, pe)
    return nodes, edges, diag


def sample(scorer, guidance: GuidanceSpec, calibration: CalibrationParams | None, config: SamplerConfig,
           conditions=(), schedule: NoiseSchedule | None = None, node_model=None, edge_model=None):
    """Sampled graphs plus diagnostics."""
    nodes, edges, diag = sample_tokens(scorer, guidance, calibration, config, conditions, schedule,
                                       node_model, edge_model)
    return [Graph(tuple(x), tuple(e)) for x, e in zip(nodes, edges)], diag


def base_distribution_over(n: int, spaces: StateSpaces, node_model, edge_model) -> np.ndarray:
    tab = token_table(n, spaces)
    pn, pe = base_distribution(node_model), base_distribution(edge_model)
    p = np.prod(pn[tab.nodes], axis=1)
    if tab.edges.shape[1]:
        p = p * np.prod(pe[tab.edges], axis=1)
    return p


def exact_model_distribution(scorer, guidance: GuidanceSpec, calibration: CalibrationParams | None,
                             config: SamplerConfig, conditions=(), schedule: NoiseSchedule | None = None,
                             node_model=None, edge_model=None) -> np.ndarray:
    """Terminal distribution of the reverse chain, propagated over every graph.

    The per-step transition between graphs is the product of the per-token
    reverse distributions, exactly as the sampler draws them.
    """
    schedule = schedule or NoiseSchedule()
    dn, de = models_for(scorer.spaces)
    node_model, edge_model = node_model or dn, edge_model or de
    tab = token_table(config.n, scorer.spaces)
    p = base_distribution_over(config.n, scorer.spaces, node_model, edge_model)
    times = config.grid(schedule)
    sb = schedule.sigma_bar(times)
    for k in range(len(times) - 1, 0, -1):
        leap = float(sb[k] - sb[k - 1])
        node_ls, edge_ls = guided_log_scores(scorer, guidance, conditions, tab.nodes, tab.edges, times[k])
        pn, _, pe, _ = step_distributions(node_ls, edge_ls, tab.nodes, tab.edges, leap, node_model, edge_model,
                                          calibration)
        trans = np.ones((tab.size, tab.size))
        for i in range(tab.nodes.shape[1]):
            trans *= pn[:, i, :][:, tab.nodes[:, i]]
        for j in range(tab.edges.shape[1]):
            trans *= pe[:, j, :][:, tab.edges[:, j]]
        p = p @ trans
    return p
