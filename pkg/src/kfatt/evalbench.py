"""AUC with tie handling, subset reporting, and the cost benchmark.

AUC is the Mann-Whitney statistic: over all (negative, positive) pairs,
full credit when the positive scores higher, half credit on ties (the
strict variant, credit only for strictly higher, is available behind a
flag). The fast path ranks once in O(n log n); a brute-force pairwise
reference is exported for equivalence testing.

The benchmark times forward passes at growing history lengths and counts
multiply-accumulates, separating the encoder's count so the
session-restricted cost can be compared against encoding the same
history as one full-attention block.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .model import (CtrInstance, ModelConfig, _TapeParams, ctr_forward,
                    encode_history, init_params)
from .numerics import mac_counter

__all__ = [
    "auc",
    "auc_pairwise",
    "MetricRow",
    "subset_aucs",
    "evaluate_model",
    "format_metrics",
    "BenchRow",
    "make_bench_instance",
    "encoder_mac_count",
    "bench_latency",
]

SUBSETS = ("All", "New", "Infreq")


def _split_scores(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pos = s[y == 1]
    neg = s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC undefined: need at least one positive and one negative")
    return s, y, pos, neg


def auc(scores, labels, strict: bool = False) -> float:
    """Rank-based Mann-Whitney AUC in O(n log n).

    Average ranks give tied pairs exactly half credit; strict mode then
    subtracts that credit, scoring ties as misorderings.
    """
    s, y, pos, neg = _split_scores(scores, labels)
    n_pos, n_neg = len(pos), len(neg)
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average of 1-based ranks
        i = j + 1
    u = float(ranks[y == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    value = u / (n_pos * n_neg)
    if strict:
        tie_pairs = 0.0
        for v in np.unique(s):
            tie_pairs += float(np.sum(pos == v)) * float(np.sum(neg == v))
        value -= 0.5 * tie_pairs / (n_pos * n_neg)
    return value


def auc_pairwise(scores, labels, strict: bool = False) -> float:
    """Quadratic reference: enumerate every (negative, positive) pair."""
    _, _, pos, neg = _split_scores(scores, labels)
    total = 0.0
    for a in neg:
        for b in pos:
            if a < b:
                total += 1.0
            elif a == b and not strict:
                total += 0.5
    return total / (len(pos) * len(neg))


@dataclass(frozen=True)
class MetricRow:
    name: str
    subset: str
    auc: float | None
    n_pos: int
    n_neg: int

    def format(self) -> str:
        a = "n/a" if self.auc is None else f"{self.auc:.6f}"
        return f"{self.name}\t{self.subset}\t{a}\t{self.n_pos}\t{self.n_neg}"


def _subset_mask(instances: Sequence[CtrInstance], subset: str) -> np.ndarray:
    if subset == "All":
        return np.ones(len(instances), dtype=bool)
    return np.array([subset in inst.tag.split("+") for inst in instances])


def subset_aucs(name: str, scores, instances: Sequence[CtrInstance]) -> list[MetricRow]:
    """One row per subset; a subset without both classes reports n/a."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.array([inst.label for inst in instances])
    rows = []
    for subset in SUBSETS:
        mask = _subset_mask(instances, subset)
        n_pos = int(np.sum(y[mask] == 1))
        n_neg = int(np.sum(y[mask] == 0))
        value = auc(s[mask], y[mask]) if n_pos and n_neg else None
        rows.append(MetricRow(name, subset, value, n_pos, n_neg))
    return rows


def evaluate_model(params: dict[str, np.ndarray], cfg: ModelConfig,
                   instances: Sequence[CtrInstance], name: str,
                   ) -> tuple[np.ndarray, list[MetricRow]]:
    """Score every instance with the frozen model, then slice by subset."""
    scores = np.array([ctr_forward(params, cfg, inst) for inst in instances])
    return scores, subset_aucs(name, scores, instances)


def format_metrics(rows: Sequence[MetricRow]) -> str:
    header = "name\tsubset\tauc\tn_pos\tn_neg"
    return "\n".join([header] + [r.format() for r in rows]) + "\n"


@dataclass(frozen=True)
class BenchRow:
    kernel: str
    length: int
    p50_us: float
    p99_us: float
    macs: int
    encoder_macs: int

    def format(self) -> str:
        return (f"{self.kernel}\t{self.length}\t{self.p50_us:.1f}\t{self.p99_us:.1f}\t"
                f"{self.macs}\t{self.encoder_macs}")


BENCH_VOCAB_QUERIES = 16
BENCH_VOCAB_ITEMS = 32


def make_bench_instance(length: int, per_session: int = 25) -> CtrInstance:
    """History of the given length that segments into ceil(length/25)
    sessions: a >30 min jump before each block of per_session events."""
    events = []
    t = 0.0
    for i in range(length):
        t += 45.0 if (i % per_session == 0 and i) else 1.0
        events.append((t, i % BENCH_VOCAB_QUERIES, i % BENCH_VOCAB_ITEMS))
    return CtrInstance(0, 0, 0, 1, tuple(events))


def _bench_config(kernel: str, length: int, single_session: bool,
                  per_session: int = 25) -> ModelConfig:
    cap = length if single_session else per_session
    return ModelConfig(kernel=kernel, d_model=4, n_heads=2, d_k=4, d_v=4,
                       ctr_hidden=8, max_sessions=max(1, -(-length // per_session)),
                       max_per_session=max(cap, 1), single_session=single_session,
                       n_queries=BENCH_VOCAB_QUERIES, n_items=BENCH_VOCAB_ITEMS)


def encoder_mac_count(cfg: ModelConfig, params: dict[str, np.ndarray],
                      inst: CtrInstance) -> int:
    """Multiply-accumulates of the encoding phase alone (projections,
    attention scores, head mixes, output projection, FC)."""
    tape = ad.Tape()
    with mac_counter:
        encode_history(_TapeParams(tape, params), cfg, inst)
        return mac_counter.total


def _forward_macs(cfg: ModelConfig, params: dict[str, np.ndarray],
                  inst: CtrInstance) -> int:
    with mac_counter:
        ctr_forward(params, cfg, inst)
        return mac_counter.total


def bench_latency(kernels: Sequence[str], lengths: Sequence[int],
                  reps: int = 200, per_session: int = 25,
                  seed: int = 0) -> list[BenchRow]:
    """Wall-clock percentiles and MAC counts per (kernel, length).

    Each listed kernel runs session-restricted; a full_attention
    comparator row (same dimensions, one session spanning the whole
    history) is added per length. Single-threaded by construction.
    """
    if not lengths or min(lengths) < 1:
        raise ValueError("lengths must be positive")
    if reps < 200:
        raise ValueError("percentiles need at least 200 repetitions")
    rows = []
    for length in lengths:
        inst = make_bench_instance(length, per_session)
        for kernel in list(kernels) + ["full_attention"]:
            full = kernel == "full_attention"
            cfg = _bench_config("transformer" if full else kernel, length,
                                single_session=full, per_session=per_session)
            params = init_params(cfg, seed)
            macs = _forward_macs(cfg, params, inst)
            enc = encoder_mac_count(cfg, params, inst)
            times = np.empty(reps)
            for r in range(reps):
                t0 = time.perf_counter()
                ctr_forward(params, cfg, inst)
                times[r] = (time.perf_counter() - t0) * 1e6
            rows.append(BenchRow(kernel, length,
                                 float(np.percentile(times, 50)),
                                 float(np.percentile(times, 99)),
                                 macs, enc))
    return rows


def format_bench(rows: Sequence[BenchRow]) -> str:
    header = "kernel\tlength\tp50_us\tp99_us\tmacs\tencoder_macs"
    return "\n".join([header] + [r.format() for r in rows]) + "\n"
