"""Interest-fusion kernels: vanilla softmax attention, precision-weighted
fusion against a query prior (base), its frequency-capped grouped form
(freq), and the two ablation variants (bs: prior precision pinned to 1;
fs: random error neglected).

Everything here is pure numpy over plain floats; the trainable model
re-expresses the same arithmetic on the autodiff tape and is tested for
agreement with these reference kernels.

Conventions: precisions (inverse variances) are the canonical currency.
Precision 0 encodes an infinitely wide, uninformative prior or measurement;
sigmas appear only where the grouped model genuinely needs both error
components (system_sigma, random_sigma).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import as_tensor, softmax

__all__ = [
    "Measurement",
    "QueryPrior",
    "DedupGroup",
    "AttentionWeights",
    "MlpParams",
    "vanilla_attention",
    "kfatt_base",
    "kfatt_freq",
    "kfatt_variant",
    "group_weight",
    "prior_head",
    "noise_head",
]


@dataclass(frozen=True)
class Measurement:
    """One historical click treated as a noisy sensor reading of the
    user's current interest: a value vector and its precision 1/sigma^2."""

    value: np.ndarray
    precision: float

    def __post_init__(self):
        object.__setattr__(self, "value", as_tensor(self.value))
        if not np.isfinite(self.precision) or self.precision < 0:
            raise ValueError(f"measurement precision must be finite and >= 0, got {self.precision}")
        if not np.all(np.isfinite(self.value)):
            raise ValueError("non-finite measurement value")


@dataclass(frozen=True)
class QueryPrior:
    """Global belief about the interest behind a query: mean vector and
    precision. Precision 0 means no prior information (sigma = infinity)."""

    mean: np.ndarray
    precision: float

    def __post_init__(self):
        object.__setattr__(self, "mean", as_tensor(self.mean))
        if not np.isfinite(self.precision) or self.precision < 0:
            raise ValueError(f"prior precision must be finite and >= 0, got {self.precision}")
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("non-finite prior mean")


@dataclass(frozen=True)
class DedupGroup:
    """All clicks issued under one deduplicated query.

    system_sigma is the per-group sensor bias scale (must be positive:
    repeating a query never removes its bias); random_sigma is the
    per-click noise scale that averaging does suppress (may be zero).
    key is the deduplicated query vector; the kernels ignore it, the
    decoder uses it for precision logits.
    """

    values: Sequence[np.ndarray]
    system_sigma: float
    random_sigma: float
    key: np.ndarray | None = field(default=None)

    def __post_init__(self):
        vals = tuple(as_tensor(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) == 0:
            raise ValueError("empty group")
        if not (np.isfinite(self.system_sigma) and self.system_sigma > 0):
            raise ValueError(f"system sigma must be positive, got {self.system_sigma}")
        if not (np.isfinite(self.random_sigma) and self.random_sigma >= 0):
            raise ValueError(f"random sigma must be >= 0, got {self.random_sigma}")

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def mean_value(self) -> np.ndarray:
        return np.mean(np.stack(self.values), axis=0)


@dataclass(frozen=True)
class AttentionWeights:
    """Normalized fusion coefficients: one for the prior, one per behavior
    (or per deduplicated group). Nonnegative, summing to 1."""

    prior_weight: float
    behavior_weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "behavior_weights", as_tensor(self.behavior_weights))
        total = self.prior_weight + float(np.sum(self.behavior_weights))
        if self.prior_weight < 0 or np.any(self.behavior_weights < 0):
            raise ValueError("negative attention weight")
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"attention weights sum to {total}, not 1")


def vanilla_attention(q, keys: Sequence, values: Sequence) -> tuple[np.ndarray, AttentionWeights]:
    """Softmax attention: weights proportional to exp(q . k_t).

    The estimate is the weight-averaged value; the prior gets weight 0
    (this kernel has no notion of one).
    """
    if len(keys) == 0:
        raise ValueError("vanilla attention undefined on empty history")
    if len(keys) != len(values):
        raise ValueError(f"{len(keys)} keys vs {len(values)} values")
    qv = as_tensor(q)
    K = np.stack([as_tensor(k) for k in keys])
    V = np.stack([as_tensor(v) for v in values])
    alpha = softmax(K @ qv)
    return alpha @ V, AttentionWeights(0.0, alpha)


def kfatt_base(prior: QueryPrior, measurements: Sequence[Measurement]) -> tuple[np.ndarray, AttentionWeights]:
    """Fuse the prior with each click, weighted by precision.

    estimate = (p0 * mu + sum_t p_t * v_t) / (p0 + sum_t p_t).

    With no informative history (all p_t = 0) the estimate falls back to
    the prior mean; with p0 = 0 it is a precision-weighted average of the
    clicks. Total precision 0 has no defined estimate and raises.
    """
    p0 = float(prior.precision)
    precs = np.array([m.precision for m in measurements], dtype=np.float64)
    total = p0 + float(precs.sum())
    if total <= 0.0:
        raise ValueError("degenerate fusion: total precision zero")
    if len(measurements) == 0:
        est = prior.mean.copy()
    else:
        V = np.stack([m.value for m in measurements])
        est = (p0 * prior.mean + precs @ V) / total
    return est, AttentionWeights(p0 / total, precs / total)


def group_weight(group: DedupGroup) -> float:
    """Fusion weight of one deduplicated group: 1 / (sigma^2 + sigma'^2/n).

    Nondecreasing in n and capped at 1/sigma^2: averaging n same-query
    clicks cancels their shared random error but never their system error,
    so repetition count alone cannot buy unbounded weight.
    """
    return 1.0 / (group.system_sigma ** 2 + group.random_sigma ** 2 / group.n)


def kfatt_freq(prior: QueryPrior, groups: Sequence[DedupGroup]) -> tuple[np.ndarray, AttentionWeights]:
    """Grouped fusion: clicks under one deduplicated query act as repeated
    readings of a single sensor.

    estimate = (p0 * mu + sum_m w_m * vbar_m) / (p0 + sum_m w_m), with
    vbar_m the group mean and w_m = group_weight. With every group of
    size 1 and zero random error this is exactly the ungrouped fusion.
    """
    p0 = float(prior.precision)
    weights = np.array([group_weight(g) for g in groups], dtype=np.float64)
    total = p0 + float(weights.sum())
    if total <= 0.0:
        raise ValueError("degenerate fusion: total precision zero")
    if len(groups) == 0:
        est = prior.mean.copy()
    else:
        Vbar = np.stack([g.mean_value for g in groups])
        est = (p0 * prior.mean + weights @ Vbar) / total
    return est, AttentionWeights(p0 / total, weights / total)


def kfatt_variant(mode: str, prior: QueryPrior,
                  measurements: Sequence[Measurement] | None = None,
                  groups: Sequence[DedupGroup] | None = None) -> tuple[np.ndarray, AttentionWeights]:
    """Dispatch between the full kernels and the two ablations.

    base / freq run the kernels as-is. bs pins the prior precision to 1
    (the prior mean still adapts per query). fs zeroes every group's
    random error, so group weight is the fully capped 1/sigma^2 regardless
    of group size.
    """
    if mode in ("base", "bs"):
        if measurements is None:
            raise ValueError(f"mode {mode!r} needs measurements")
        if mode == "bs":
            prior = QueryPrior(prior.mean, 1.0)
        return kfatt_base(prior, measurements)
    if mode in ("freq", "fs"):
        if groups is None:
            raise ValueError(f"mode {mode!r} needs groups")
        if mode == "fs":
            groups = [DedupGroup(g.values, g.system_sigma, 0.0, g.key) for g in groups]
        return kfatt_freq(prior, groups)
    raise ValueError(f"unknown kernel mode {mode!r}")


@dataclass(frozen=True)
class MlpParams:
    """Two-layer perceptron weights: x -> relu(x W1 + b1) W2 + b2."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = np.maximum(as_tensor(x) @ self.W1 + self.b1, 0.0)
        return h @ self.W2 + self.b2


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def prior_head(q, mu_mlp: MlpParams, sigma_mlp: MlpParams) -> QueryPrior:
    """Learned prior for a query: mean from one MLP, precision from the
    softplus of another (scalar output), so precision is positive and
    smooth in the parameters."""
    qv = as_tensor(q)
    mean = mu_mlp(qv)
    raw = sigma_mlp(qv)
    if np.size(raw) != 1:
        raise ValueError(f"precision branch must output a scalar, got shape {np.shape(raw)}")
    return QueryPrior(mean, float(_softplus(np.reshape(raw, ()))))


def noise_head(k, mlp: MlpParams) -> float:
    """Learned per-group random-error scale sigma' >= 0 via softplus."""
    raw = mlp(as_tensor(k))
    if np.size(raw) != 1:
        raise ValueError(f"noise head must output a scalar, got shape {np.shape(raw)}")
    return float(_softplus(np.reshape(raw, ())))
