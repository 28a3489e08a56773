"""Session-based behavior model with a pluggable interest-fusion decoder.

Pipeline per instance: embed each historical (query, clicked item) pair,
segment the history into sessions by time gap, add learned position
encodings, run multi-head self-attention within each session (never
across), then decode the current query's interest from the concatenated
session encodings with one of the kernels:

  vanilla      plain softmax attention over raw embeddings, no encoder
               (the classical baseline; no prior, no sessions)
  transformer  session encoder + multi-head softmax cross-attention
  kfatt_base   session encoder + per-click precision fusion with a
               learned query prior
  kfatt_freq   as base, but clicks sharing a query id form one group
               whose weight is capped by its system error
  kfatt_bs     base with the prior precision pinned to 1 (ablation)
  kfatt_fs     freq with the random error pinned to 0 (ablation)

The CTR head concatenates [query embedding, fused interest,
candidate ⊙ interest] into a two-layer MLP. The product block is how the
candidate is scored at all: the head compares it against the interest
estimate coordinate by coordinate, and a candidate that matches no part
of the estimate has nothing to recommend it. Everything runs on the
autodiff tape; training is plain minibatch Adam on binary cross-entropy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .numerics import Rng, as_tensor

__all__ = [
    "KERNELS",
    "DECODE_KERNELS",
    "ModelConfig",
    "CtrInstance",
    "segment_sessions",
    "init_params",
    "position_encode",
    "encode_session",
    "encode_history",
    "decode_interest",
    "ctr_logit",
    "ctr_forward",
    "batch_loss",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

KERNELS = ("vanilla", "transformer", "kfatt_base", "kfatt_freq", "kfatt_bs", "kfatt_fs")

# Model-level kernel -> decoder-level kernel. The vanilla model bypasses
# the encoder entirely, so it has no decoder-level entry.
DECODE_KERNELS = {
    "transformer": "vanilla",
    "kfatt_base": "kfatt_base",
    "kfatt_freq": "kfatt_freq",
    "kfatt_bs": "bs",
    "kfatt_fs": "fs",
}


@dataclass(frozen=True)
class ModelConfig:
    kernel: str = "kfatt_freq"
    d_model: int = 32
    n_heads: int = 2
    d_k: int = 16
    d_v: int = 16
    ctr_hidden: int = 64
    session_gap_minutes: float = 30.0
    max_sessions: int = 10
    max_per_session: int = 25
    single_session: bool = False
    # Divide precision logits by sqrt(d_k) (as the encoder does); the
    # fusion formulation itself uses the bare dot product.
    scale_logits: bool = True
    logit_clip: float = 60.0
    # Initial prior precision (softplus pre-activation of the sigma head
    # bias). A fresh model's query-key logits hover near zero, so an
    # uninformative history of length T contributes about T units of
    # precision; setting this near the typical history length makes the
    # prior and an irrelevant history start at comparable weight instead
    # of the history drowning the prior T-to-one.
    prior_init: float = 0.0
    # Initial per-group random error (softplus pre-activation of the noise
    # head bias, frequency kernels only). Positive values make repeated
    # clicks start out sharing error mass, so capping binds from step one.
    noise_init: float = 0.0
    n_queries: int = 0
    n_items: int = 0

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel mode {self.kernel!r} (choose from {', '.join(KERNELS)})")
        for name in ("d_model", "n_heads", "d_k", "d_v", "ctr_hidden", "max_sessions", "max_per_session"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.session_gap_minutes <= 0:
            raise ValueError("session_gap_minutes must be positive")


@dataclass(frozen=True)
class CtrInstance:
    """One scoring task: does this user click this item for this query,
    given their time-stamped click history."""

    user_id: int
    query_id: int
    item_id: int
    label: int
    events: tuple[tuple[float, int, int], ...]  # (timestamp_minutes, query_id, item_id)
    tag: str = "-"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        ts = [e[0] for e in self.events]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("behavior timestamps must be nondecreasing")


def segment_sessions(timestamps: Sequence[float], gap: float,
                     max_sessions: int, max_per_session: int) -> list[list[int]]:
    """Split a sorted history into sessions at inter-event gaps >= gap.

    Keeps the most recent max_sessions sessions and, within each, the most
    recent max_per_session events. Returns index lists in time order;
    an empty history gives an empty list.
    """
    ts = list(timestamps)
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise ValueError("timestamps must be nondecreasing")
    if not ts:
        return []
    sessions: list[list[int]] = [[0]]
    for i in range(1, len(ts)):
        if ts[i] - ts[i - 1] >= gap:
            sessions.append([i])
        else:
            sessions[-1].append(i)
    sessions = sessions[-max_sessions:]
    return [s[-max_per_session:] for s in sessions]


def _kept_indices(inst: CtrInstance, cfg: ModelConfig) -> list[list[int]]:
    ts = [e[0] for e in inst.events]
    if cfg.single_session:
        if not ts:
            return []
        return [list(range(len(ts)))[-cfg.max_per_session:]]
    return segment_sessions(ts, cfg.session_gap_minutes, cfg.max_sessions, cfg.max_per_session)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """All trainable tensors, every kernel mode sharing one layout so
    checkpoints are interchangeable across modes of equal dimensions."""
    if cfg.n_queries <= 0 or cfg.n_items <= 0:
        raise ValueError("vocab sizes must be set before initializing parameters")
    rng = Rng(seed).split(7)
    p: dict[str, np.ndarray] = {}

    def mat(name, rows, cols):
        p[name] = rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols))

    def vec(name, n):
        p[name] = np.zeros(n)

    # Row 0 of each embedding table is the out-of-vocabulary bucket.
    # Query embeddings start at unit scale so that, together with the
    # tied decoder projections below, a repeated query id is already a
    # high-precision measurement at initialization; items stay small.
    p["emb.query"] = rng.normal(0.0, 1.0, size=(cfg.n_queries + 1, cfg.d_model))
    p["emb.item"] = rng.normal(0.0, 0.1, size=(cfg.n_items + 1, cfg.d_model))
    p["enc.pos"] = rng.normal(0.0, 0.1, size=(cfg.max_per_session, cfg.d_model))
    for i in range(cfg.n_heads):
        # Key projections start equal to the query projections (free to
        # diverge): q't k't = |W q|^2 > 0 exactly when the ids match, so
        # relevance discrimination exists before any training. The same
        # tie keeps encoder self-attention focused near the diagonal.
        mat(f"enc.h{i}.Wq", cfg.d_model, cfg.d_k)
        p[f"enc.h{i}.Wk"] = p[f"enc.h{i}.Wq"].copy()
        mat(f"enc.h{i}.Wv", cfg.d_model, cfg.d_v)
        mat(f"dec.h{i}.Wq", cfg.d_model, cfg.d_k)
        p[f"dec.h{i}.Wk"] = p[f"dec.h{i}.Wq"].copy()
        mat(f"dec.h{i}.Wv", cfg.d_model, cfg.d_v)
        for branch, out in (("mu", cfg.d_v), ("sig", 1)):
            mat(f"prior.h{i}.{branch}.W1", cfg.d_k, cfg.d_k)
            vec(f"prior.h{i}.{branch}.b1", cfg.d_k)
            mat(f"prior.h{i}.{branch}.W2", cfg.d_k, out)
            vec(f"prior.h{i}.{branch}.b2", out)
        p[f"prior.h{i}.sig.b2"] += cfg.prior_init
        mat(f"noise.h{i}.W1", cfg.d_k, cfg.d_k)
        vec(f"noise.h{i}.b1", cfg.d_k)
        mat(f"noise.h{i}.W2", cfg.d_k, 1)
        vec(f"noise.h{i}.b2", 1)
        p[f"noise.h{i}.b2"] += cfg.noise_init
    mat("enc.Wo", cfg.n_heads * cfg.d_v, cfg.d_model)
    mat("enc.fc.W", cfg.d_model, cfg.d_model)
    vec("enc.fc.b", cfg.d_model)
    mat("dec.Wo", cfg.n_heads * cfg.d_v, cfg.d_model)
    mat("ctr.W1", 3 * cfg.d_model, cfg.ctr_hidden)
    vec("ctr.b1", cfg.ctr_hidden)
    mat("ctr.W2", cfg.ctr_hidden, 1)
    vec("ctr.b2", 1)
    return p


class _TapeParams:
    """Lazily enters parameters onto a tape, one leaf per name."""

    def __init__(self, tape: ad.Tape, params: dict[str, np.ndarray]):
        self.tape = tape
        self.params = params
        self._cache: dict[str, ad.Var] = {}

    def __getitem__(self, name: str) -> ad.Var:
        if name not in self._cache:
            self._cache[name] = self.tape.leaf(self.params[name], param=name)
        return self._cache[name]


def _mlp2(P: _TapeParams, x: ad.Var, prefix: str) -> ad.Var:
    h = ad.relu(ad.matmul(x, P[f"{prefix}.W1"]) + P[f"{prefix}.b1"])
    return ad.matmul(h, P[f"{prefix}.W2"]) + P[f"{prefix}.b2"]


def position_encode(P: _TapeParams, cfg: ModelConfig,
                    K: ad.Var, V: ad.Var) -> tuple[ad.Var, ad.Var]:
    """Add the learned position row (0-based index within the session) to
    both key and value rows. Sessions longer than the table reject."""
    t = K.value.shape[0]
    if t > cfg.max_per_session:
        raise ValueError(f"position {t - 1} beyond table size {cfg.max_per_session}")
    pos = ad.gather(P["enc.pos"], np.arange(t))
    return K + pos, V + pos


def encode_session(P: _TapeParams, cfg: ModelConfig,
                   Kp: ad.Var, Vp: ad.Var) -> ad.Var:
    """Multi-head self-attention over one session, concat -> output
    projection -> FC with ReLU. No term ever mixes sessions."""
    heads = []
    for i in range(cfg.n_heads):
        Q = ad.matmul(Kp, P[f"enc.h{i}.Wq"])
        K2 = ad.matmul(Kp, P[f"enc.h{i}.Wk"])
        scores = ad.scale(ad.matmul(Q, ad.transpose(K2)), 1.0 / np.sqrt(cfg.d_k))
        alpha = ad.softmax(scores)
        heads.append(ad.matmul(alpha, ad.matmul(Vp, P[f"enc.h{i}.Wv"])))
    z = ad.matmul(ad.concat(heads, axis=1), P["enc.Wo"])
    return ad.relu(ad.matmul(z, P["enc.fc.W"]) + P["enc.fc.b"])


def _group_matrix(query_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Averaging matrix G (M, T) with rows 1/n_m over each dedup group
    (first-appearance order), plus the per-group counts."""
    order: dict[int, int] = {}
    for q in query_ids:
        order.setdefault(int(q), len(order))
    gid = np.array([order[int(q)] for q in query_ids])
    counts = np.bincount(gid, minlength=len(order)).astype(np.float64)
    G = np.zeros((len(order), len(query_ids)))
    G[gid, np.arange(len(query_ids))] = 1.0 / counts[gid]
    return G, counts


def decode_interest(P: _TapeParams, cfg: ModelConfig, q: ad.Var,
                    K: ad.Var, H: ad.Var, query_ids: np.ndarray,
                    kernel: str) -> ad.Var:
    """Fuse the history into one interest vector for query q.

    Per head: project q/keys/values, turn key-query dot products into
    precisions (through exp, clamped), and fuse. The vanilla kernel
    softmaxes the same logits instead and has no prior, so it cannot
    handle an empty history; the fusion kernels fall back to the head's
    learned prior mean.
    """
    if kernel not in ("vanilla", "kfatt_base", "kfatt_freq", "bs", "fs"):
        raise ValueError(f"unknown decode kernel {kernel!r}")
    t = K.value.shape[0]
    if kernel == "vanilla" and t == 0:
        raise ValueError("vanilla attention undefined on empty history")
    heads = []
    for i in range(cfg.n_heads):
        qp = ad.matmul(q, P[f"dec.h{i}.Wq"])            # (1, d_k)
        Kp = ad.matmul(K, P[f"dec.h{i}.Wk"])            # (T, d_k)
        Vp = ad.matmul(H, P[f"dec.h{i}.Wv"])            # (T, d_v)
        if kernel == "vanilla":
            logits = ad.matmul(qp, ad.transpose(Kp))
            if cfg.scale_logits:
                logits = ad.scale(logits, 1.0 / np.sqrt(cfg.d_k))
            heads.append(ad.matmul(ad.softmax(logits), Vp))
            continue

        mu = ad.reshape(_mlp2(P, qp, f"prior.h{i}.mu"), (cfg.d_v,))
        if kernel == "bs":
            p0 = P.tape.leaf(np.asarray(1.0))
        else:
            p0 = ad.reshape(ad.softplus(_mlp2(P, qp, f"prior.h{i}.sig")), ())

        if t == 0:
            values = P.tape.leaf(np.zeros((0, cfg.d_v)))
            weights = P.tape.leaf(np.zeros(0))
        else:
            if kernel in ("kfatt_base", "bs"):
                keys, values = Kp, Vp
                counts = np.ones(t)
            else:  # kfatt_freq / fs: rows sharing a query id form one group
                G, counts = _group_matrix(query_ids)
                Gv = P.tape.leaf(G)
                keys = ad.matmul(Gv, Kp)
                values = ad.matmul(Gv, Vp)
            m = keys.value.shape[0]
            logits = ad.matmul(qp, ad.transpose(keys))
            if cfg.scale_logits:
                logits = ad.scale(logits, 1.0 / np.sqrt(cfg.d_k))
            logits = ad.reshape(ad.clip(logits, -cfg.logit_clip, cfg.logit_clip), (m,))
            if kernel == "kfatt_freq":
                sys_var = ad.exp(ad.neg(logits))
                noise = ad.reshape(ad.softplus(_mlp2(P, keys, f"noise.h{i}")), (m,))
                weights = ad.reciprocal(sys_var + ad.mul(noise, noise) * P.tape.leaf(1.0 / counts))
            else:
                # Per-click precision (base/bs) or fully capped group weight (fs).
                weights = ad.exp(logits)

        heads.append(ad.reshape(ad.fuse(mu, p0, values, weights), (1, cfg.d_v)))
    return ad.matmul(ad.concat(heads, axis=1), P["dec.Wo"])


def encode_history(P: _TapeParams, cfg: ModelConfig,
                   inst: CtrInstance) -> tuple[ad.Var, ad.Var, np.ndarray]:
    """Session-segmented encoding of the kept history.

    Returns the position-encoded keys K, the session encodings H (both
    stacked across sessions in time order), and the kept query ids.
    """
    sessions = _kept_indices(inst, cfg)
    kept = [i for s in sessions for i in s]
    qids = np.array([inst.events[i][1] for i in kept], dtype=np.int64)
    iids = np.array([inst.events[i][2] for i in kept], dtype=np.int64)
    k_parts, h_parts = [], []
    offset = 0
    for s in sessions:
        n = len(s)
        Ks = ad.gather(P["emb.query"], qids[offset:offset + n] + 1)
        Vs = ad.gather(P["emb.item"], iids[offset:offset + n] + 1)
        offset += n
        Kp, Vp = position_encode(P, cfg, Ks, Vs)
        k_parts.append(Kp)
        h_parts.append(encode_session(P, cfg, Kp, Vp))
    if k_parts:
        K = ad.concat(k_parts, axis=0)
        H = ad.concat(h_parts, axis=0)
    else:
        K = P.tape.leaf(np.zeros((0, cfg.d_model)))
        H = P.tape.leaf(np.zeros((0, cfg.d_model)))
    return K, H, qids


def ctr_logit(P: _TapeParams, cfg: ModelConfig, inst: CtrInstance) -> ad.Var:
    """Full forward to the pre-sigmoid click logit, shape (1, 1)."""
    q = ad.gather(P["emb.query"], np.array([inst.query_id + 1]))
    cand = ad.gather(P["emb.item"], np.array([inst.item_id + 1]))

    if cfg.kernel == "vanilla":
        kept = [i for s in _kept_indices(inst, cfg) for i in s]
        if len(kept) == 0:
            raise ValueError("vanilla attention undefined on empty history")
        qids = np.array([inst.events[i][1] for i in kept], dtype=np.int64)
        iids = np.array([inst.events[i][2] for i in kept], dtype=np.int64)
        K = ad.gather(P["emb.query"], qids + 1)
        V = ad.gather(P["emb.item"], iids + 1)
        logits = ad.matmul(q, ad.transpose(K))
        est = ad.matmul(ad.softmax(logits), V)
    else:
        K, H, qids = encode_history(P, cfg, inst)
        est = decode_interest(P, cfg, q, K, H, qids, DECODE_KERNELS[cfg.kernel])

    # The candidate enters only through its product with the fused
    # interest: the head ranks items by how well they match the estimate,
    # not by any standalone candidate feature. A raw candidate input would
    # hand every kernel a popularity shortcut (embedding drift tracks
    # global click counts) and the interest pathway would go unused.
    x = ad.concat([q, est, ad.mul(cand, est)], axis=1)
    h = ad.relu(ad.matmul(x, P["ctr.W1"]) + P["ctr.b1"])
    return ad.matmul(h, P["ctr.W2"]) + P["ctr.b2"]


def ctr_forward(params: dict[str, np.ndarray], cfg: ModelConfig,
                inst: CtrInstance) -> float:
    """Click probability in (0, 1) for one instance (no gradients kept)."""
    tape = ad.Tape()
    logit = ctr_logit(_TapeParams(tape, params), cfg, inst)
    return float(ad.sigmoid(logit).value[0, 0])


def batch_loss(tape: ad.Tape, params: dict[str, np.ndarray], cfg: ModelConfig,
               batch: Sequence[CtrInstance]) -> ad.Var:
    """Mean binary cross-entropy over a batch, as a scalar tape node."""
    if not batch:
        raise ValueError("empty batch")
    P = _TapeParams(tape, params)
    losses = []
    for inst in batch:
        z = ctr_logit(P, cfg, inst)
        losses.append(ad.reshape(ad.bce_with_logits(z, float(inst.label)), (1,)))
    return ad.mean_all(ad.concat(losses, axis=0))


def train(params: dict[str, np.ndarray], cfg: ModelConfig,
          instances: Sequence[CtrInstance], epochs: int, lr: float,
          batch_size: int, seed: int) -> list[float]:
    """Minibatch Adam; returns the per-epoch mean training loss.

    Instance order is reshuffled per epoch from the seed alone, so a
    fixed (seed, config, data) triple replays the exact loss trajectory.
    """
    if epochs <= 0 or batch_size <= 0:
        raise ValueError("epochs and batch_size must be positive")
    state = ad.AdamState()
    rng = Rng(seed)
    log = []
    idx = np.arange(len(instances))
    for epoch in range(epochs):
        order = rng.split(epoch).permutation(idx)
        total, count = 0.0, 0
        for lo in range(0, len(order), batch_size):
            batch = [instances[i] for i in order[lo:lo + batch_size]]
            tape = ad.Tape()
            loss = batch_loss(tape, params, cfg, batch)
            tape.backward(loss)
            ad.sgd_step(params, tape.grads(), lr, state)
            total += float(loss.value) * len(batch)
            count += len(batch)
        log.append(total / max(count, 1))
    return log


CHECKPOINT_MAGIC = b"KFCKPT01"


def save_checkpoint(path, params: dict[str, np.ndarray], config_digest: str) -> None:
    """Binary layout: 8-byte magic, u32 little-endian manifest length, JSON
    manifest {version, config_digest, params: [{name, shape}]}, then each
    tensor's float64 little-endian bytes in manifest order."""
    names = sorted(params)
    manifest = {
        "version": 1,
        "config_digest": config_digest,
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of save_checkpoint; validates magic, version and length."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        if manifest.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
        params = {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"truncated checkpoint at parameter {entry['name']!r}")
            params[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ValueError("trailing bytes after last parameter")
    return params, manifest
