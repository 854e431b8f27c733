"""Log-linear noise schedule, Uniform/Absorb rate matrices and their kernels.

Kernels are column-stochastic: column ``x`` of ``exp(sigma_bar * Q)`` is the
distribution of a token at time ``t`` given it started in state ``x``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .graph import Graph, StateSpaces, num_edge_slots


class ImpossibleTransition(ArithmeticError):
    """A forward ratio whose denominator has zero probability."""


class Kind(str, Enum):
    UNIFORM = "uniform"
    ABSORB = "absorb"


@dataclass(frozen=True)
class NoiseSchedule:
    eps: float = 1e-5
    t_min: float = 1e-3

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if not 0 < self.t_min < 1:
            raise ValueError("t_min must lie in (0, 1)")

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0) or np.any(t > 1):
            raise ValueError(f"t must lie in (0, 1], got {t}")
        return t

    def sigma_bar(self, t):
        """Cumulative noise ``-log(1 - (1 - eps) t)``."""
        t = self._check(t)
        return -np.log1p(-(1 - self.eps) * t)

    def sigma(self, t):
        """Instantaneous rate, the derivative of :meth:`sigma_bar`."""
        t = self._check(t)
        return (1 - self.eps) / (1 - (1 - self.eps) * t)

    def time_grid(self, steps: int) -> np.ndarray:
        """``t_0 = t_min < ... < t_T = 1`` on a linear grid."""
        if steps < 1:
            raise ValueError("need at least one step")
        return self.t_min + (1 - self.t_min) * np.arange(steps + 1) / steps


@dataclass(frozen=True)
class TransitionModel:
    kind: Kind
    K: int

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.K < 2:
            raise ValueError("K must be at least 2")

    @property
    def mask(self) -> int | None:
        return self.K - 1 if self.kind is Kind.ABSORB else None


def models_for(spaces: StateSpaces) -> tuple[TransitionModel, TransitionModel]:
    kind = Kind.ABSORB if spaces.absorbing else Kind.UNIFORM
    return TransitionModel(kind, spaces.node_cardinality), TransitionModel(kind, spaces.edge_cardinality)


def rate_matrix(model: TransitionModel) -> np.ndarray:
    K = model.K
    if model.kind is Kind.UNIFORM:
        return np.full((K, K), 1.0 / K) - np.eye(K)
    Q = -np.eye(K)
    Q[K - 1, :] = 1.0
    Q[K - 1, K - 1] = 0.0
    return Q


def kernel(model: TransitionModel, sigma_bar: float) -> np.ndarray:
    """Closed form of ``exp(sigma_bar * Q)``; any real ``sigma_bar`` is accepted."""
    K = model.K
    decay = np.exp(-sigma_bar)
    if model.kind is Kind.UNIFORM:
        return decay * np.eye(K) + (1 - decay) / K
    M = decay * np.eye(K)
    M[K - 1, :] = 1 - decay
    M[K - 1, K - 1] = 1.0
    return M


def cumulative_kernel(model: TransitionModel, sigma_bar: float) -> np.ndarray:
    if sigma_bar < 0:
        raise ValueError("cumulative noise must be non-negative")
    return kernel(model, sigma_bar)


def series_expm(A: np.ndarray, terms: int = 30) -> np.ndarray:
    """Truncated Taylor series for ``exp(A)`` with scaling and squaring.

    Independent of the closed forms; used as their oracle.
    """
    norm = np.abs(A).sum(axis=0).max()
    squarings = max(0, int(np.ceil(np.log2(norm / 0.5)))) if norm > 0.5 else 0
    B = A / 2.0**squarings
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms):
        term = term @ B / k
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out


def forward_ratio(model: TransitionModel, sigma_bar: float, x0: int, x_cur: int, x_alt: int) -> float:
    """``p_{t|0}(x_alt | x0) / p_{t|0}(x_cur | x0)``."""
    M = cumulative_kernel(model, sigma_bar)
    denom = M[x_cur, x0]
    if denom <= 0:
        raise ImpossibleTransition(f"state {x_cur} unreachable from {x0}")
    return float(M[x_alt, x0] / denom)


def forward_ratios(model: TransitionModel, sigma_bar: np.ndarray, x0: np.ndarray, x_cur: np.ndarray):
    """Vectorised forward ratios over every alternative state.

    ``sigma_bar`` has shape ``(B,)``, ``x0`` and ``x_cur`` shape ``(B, L)``.
    Returns ``(ratios, valid)`` of shape ``(B, L, K)``; ``valid`` is False where
    the current state is unreachable from ``x0`` (ratios there are 0).
    """
    K = model.K
    decay = np.exp(-np.asarray(sigma_bar, dtype=float))[:, None, None]
    states = np.arange(K)[None, None, :]
    x0 = x0[..., None]
    x_cur = x_cur[..., None]
    if model.kind is Kind.UNIFORM:
        move = (1 - decay) / K
        stay = decay + move
        p_alt = np.where(states == x0, stay, move)
        p_cur = np.where(x_cur == x0, stay, move)
    else:
        mask = K - 1
        p_alt = np.where(states == x0, decay, 0.0) + np.where((states == mask) & (x0 != mask), 1 - decay, 0.0)
        p_alt = np.where((states == mask) & (x0 == mask), 1.0, p_alt)
        p_cur = np.where(x_cur == x0, np.where(x0 == mask, 1.0, decay), 0.0)
        p_cur = np.where((x_cur == mask) & (x0 != mask), 1 - decay, p_cur)
    valid = np.broadcast_to(p_cur > 0, p_alt.shape)
    ratios = np.where(valid, p_alt / np.where(p_cur > 0, p_cur, 1.0), 0.0)
    return ratios, valid


def draw_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Sample the last axis of ``probs`` (rows sum to 1)."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.minimum((u >= cdf).sum(axis=-1), probs.shape[-1] - 1)


def corrupt_tokens(model: TransitionModel, sigma_bar: np.ndarray, x0: np.ndarray, rng) -> np.ndarray:
    """Draw ``x_t ~ p_{t|0}(. | x0)`` for token arrays ``(B, L)``; one ``sigma_bar`` per row."""
    decay = np.exp(-np.asarray(sigma_bar, dtype=float))[:, None]
    u = rng.random(x0.shape)
    moved = u >= decay
    if model.kind is Kind.UNIFORM:
        return np.where(moved, rng.integers(0, model.K, size=x0.shape), x0)
    return np.where(moved, model.K - 1, x0)


def forward_sample(G0: Graph, t: float, schedule: NoiseSchedule, node_model: TransitionModel,
                   edge_model: TransitionModel, rng: np.random.Generator) -> Graph:
    sb = np.atleast_1d(schedule.sigma_bar(t))
    nodes = corrupt_tokens(node_model, sb, np.array([G0.nodes]), rng)[0]
    edges = corrupt_tokens(edge_model, sb, np.array([G0.edges_upper], dtype=np.int64).reshape(1, -1), rng)[0]
    return Graph(tuple(nodes), tuple(edges))


def base_tokens(model: TransitionModel, shape, rng: np.random.Generator) -> np.ndarray:
    if model.kind is Kind.ABSORB:
        return np.full(shape, model.K - 1, dtype=np.int64)
    return rng.integers(0, model.K, size=shape)


def base_sample(n: int, spaces: StateSpaces, node_model: TransitionModel,
                edge_model: TransitionModel, rng: np.random.Generator) -> Graph:
    if n < 1:
        raise ValueError("n must be positive")
    nodes = base_tokens(node_model, (n,), rng)
    edges = base_tokens(edge_model, (num_edge_slots(n),), rng)
    G = Graph(tuple(nodes), tuple(edges))
    G.validate(spaces)
    return G


def base_distribution(model: TransitionModel) -> np.ndarray:
    if model.kind is Kind.ABSORB:
        p = np.zeros(model.K)
        p[-1] = 1.0
        return p
    return np.full(model.K, 1.0 / model.K)
