"""Reverse-mode differentiation over the small op set the behavior model needs.

Define-by-run: every operation appends a node to a :class:`Tape`, and
``tape.backward(loss)`` walks the nodes once in reverse. The op set is closed
(see ``_OPS``); anything else raises. The interest-fusion expression is a
single composite op with a hand-derived backward so the gradient check
exercises it directly instead of a long chain of primitive nodes.

``sgd_step`` applies the Adam update rule (the training loop's single writer).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .numerics import as_tensor, mac_counter

__all__ = [
    "Tape",
    "Var",
    "apply",
    "forward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "gather",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "relu",
    "clip",
    "reciprocal",
    "softmax",
    "sum_all",
    "mean_all",
    "bce_with_logits",
    "fuse",
    "AdamState",
    "sgd_step",
]


class Var:
    """One tape node: a value plus how to push gradients to its parents."""

    __slots__ = ("tape", "idx", "op", "value", "parents", "grad", "param_name", "_push")

    def __init__(self, tape: "Tape", op: str, value: np.ndarray,
                 parents: tuple["Var", ...] = (),
                 push: Callable[[np.ndarray], None] | None = None,
                 param_name: str | None = None):
        self.tape = tape
        self.op = op
        self.value = value
        self.parents = parents
        self.grad = None
        self.param_name = param_name
        self._push = push
        self.idx = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    # Operator sugar; right-hand constants are wrapped as leaves.

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Topologically ordered op record with trainable-leaf bookkeeping."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.parameters: dict[str, Var] = {}

    def leaf(self, value, param: str | None = None) -> Var:
        """Enter a tensor. With ``param=<name>`` it is tracked as trainable."""
        v = Var(self, "leaf", as_tensor(value), param_name=param)
        if param is not None:
            if param in self.parameters:
                raise ValueError(f"duplicate parameter leaf {param!r}")
            self.parameters[param] = v
        return v

    def backward(self, loss: Var) -> None:
        """Seed d(loss)/d(loss)=1 and sweep the tape once in reverse."""
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.shape != ():
            raise ValueError("loss must be scalar")
        loss.grad = np.float64(1.0)
        for node in reversed(self.nodes[: loss.idx + 1]):
            if node.grad is None or node._push is None:
                continue
            node._push(np.asarray(node.grad))

    def grads(self) -> dict[str, np.ndarray]:
        """Parameter gradients; leaves the loss never reached get zeros."""
        out = {}
        for name, var in self.parameters.items():
            g = var.grad
            out[name] = np.zeros_like(var.value) if g is None else np.asarray(g)
        return out


def _accum(var: Var, g: np.ndarray) -> None:
    if g.shape != var.value.shape:
        raise ValueError(f"gradient shape {g.shape} != value shape {var.value.shape} at op {var.op!r}")
    if var.grad is None:
        var.grad = g.copy()
    else:
        var.grad = var.grad + g


def _wrap(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x
    return tape.leaf(as_tensor(x))


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("at least one operand must be a Var")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _require_finite(op: str, out: np.ndarray) -> np.ndarray:
    # Only ops with singularities call this; finite-in/finite-out ops skip it.
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite result from op {op!r}")
    return out


# Elementwise and structural ops.

def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    out = a.value + b.value

    def push(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return Var(t, "add", out, (a, b), push)


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    out = a.value - b.value

    def push(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return Var(t, "sub", out, (a, b), push)


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    out = a.value * b.value

    def push(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return Var(t, "mul", out, (a, b), push)


def neg(a: Var) -> Var:
    def push(g):
        _accum(a, -g)

    return Var(a.tape, "neg", -a.value, (a,), push)


def scale(a: Var, c: float) -> Var:
    """Multiply by a compile-time constant (no gradient for c)."""
    c = float(c)

    def push(g):
        _accum(a, c * g)

    return Var(a.tape, "scale", c * a.value, (a,), push)


def matmul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _wrap(t, a), _wrap(t, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.value.shape} @ {b.value.shape}")
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.value.shape} @ {b.value.shape}")
    n, m = a.value.shape
    k = b.value.shape[1]
    mac_counter.add(n * m * k)
    out = a.value @ b.value

    def push(g):
        mac_counter.add(2 * n * m * k)
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return Var(t, "matmul", out, (a, b), push)


def transpose(a: Var) -> Var:
    if a.value.ndim != 2:
        raise ValueError("transpose expects a 2-D operand")

    def push(g):
        _accum(a, g.T)

    return Var(a.tape, "transpose", a.value.T.copy(), (a,), push)


def reshape(a: Var, shape) -> Var:
    shape = tuple(int(s) for s in (shape if isinstance(shape, Iterable) else (shape,)))
    out = a.value.reshape(shape)

    def push(g):
        _accum(a, g.reshape(a.value.shape))

    return Var(a.tape, "reshape", out, (a,), push)


def concat(parts: Sequence, axis: int = 0) -> Var:
    if len(parts) == 0:
        raise ValueError("concat of zero tensors")
    t = _tape_of(*parts)
    parts = [_wrap(t, p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def push(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return Var(t, "concat", out, tuple(parts), push)


def gather(table: Var, indices) -> Var:
    """Row lookup (embedding fetch); backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.value.ndim != 2:
        raise ValueError("gather expects a 2-D table")
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise IndexError(f"gather index out of range for table of {table.value.shape[0]} rows")
    out = table.value[idx]

    def push(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return Var(table.tape, "gather", out, (table,), push)


def exp(a: Var) -> Var:
    out = _require_finite("exp", np.exp(a.value))

    def push(g):
        _accum(a, g * out)

    return Var(a.tape, "exp", out, (a,), push)


def log(a: Var) -> Var:
    if np.any(a.value <= 0):
        raise FloatingPointError("log of non-positive value")
    out = np.log(a.value)

    def push(g):
        _accum(a, g / a.value)

    return Var(a.tape, "log", out, (a,), push)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Two-branch form keeps exp arguments non-positive.
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a: Var) -> Var:
    out = _sigmoid(a.value)

    def push(g):
        _accum(a, g * out * (1.0 - out))

    return Var(a.tape, "sigmoid", out, (a,), push)


def softplus(a: Var) -> Var:
    out = _softplus(a.value)

    def push(g):
        _accum(a, g * _sigmoid(a.value))

    return Var(a.tape, "softplus", out, (a,), push)


def relu(a: Var) -> Var:
    out = np.maximum(a.value, 0.0)

    def push(g):
        _accum(a, g * (a.value > 0.0))

    return Var(a.tape, "relu", out, (a,), push)


def clip(a: Var, lo: float, hi: float) -> Var:
    """Clamp to [lo, hi]; gradient passes only through the interior."""
    lo, hi = float(lo), float(hi)
    out = np.clip(a.value, lo, hi)
    inside = (a.value > lo) & (a.value < hi)

    def push(g):
        _accum(a, g * inside)

    return Var(a.tape, "clip", out, (a,), push)


def reciprocal(a: Var) -> Var:
    out = _require_finite("reciprocal", 1.0 / a.value)

    def push(g):
        _accum(a, -g * out * out)

    return Var(a.tape, "reciprocal", out, (a,), push)


def softmax(a: Var) -> Var:
    """Softmax over the last axis (1-D vector or rows of a 2-D matrix)."""
    z = a.value
    if z.ndim not in (1, 2):
        raise ValueError("softmax expects a 1-D or 2-D operand")
    if z.shape[-1] == 0:
        raise ValueError("empty logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def push(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        _accum(a, out * (g - dot))

    return Var(a.tape, "softmax", out, (a,), push)


def sum_all(a: Var) -> Var:
    out = np.float64(a.value.sum())

    def push(g):
        _accum(a, np.broadcast_to(g, a.value.shape).astype(np.float64))

    return Var(a.tape, "sum", np.asarray(out), (a,), push)


def mean_all(a: Var) -> Var:
    n = a.value.size
    if n == 0:
        raise ValueError("mean of empty tensor")
    out = np.asarray(np.float64(a.value.mean()))

    def push(g):
        _accum(a, np.broadcast_to(g / n, a.value.shape).astype(np.float64))

    return Var(a.tape, "mean", out, (a,), push)


def bce_with_logits(z: Var, y) -> Var:
    """Elementwise binary cross-entropy on logits: softplus(z) - y*z.

    Stable for logits of any magnitude; labels are constants (no gradient).
    Gradient w.r.t. z is sigmoid(z) - y.
    """
    yv = as_tensor(y)
    out = _softplus(z.value) - yv * z.value

    def push(g):
        _accum(z, _unbroadcast(g * (_sigmoid(z.value) - yv), z.value.shape))

    return Var(z.tape, "bce_with_logits", out, (z,), push)


def fuse(prior_mean: Var, prior_prec: Var, values: Var, weights: Var) -> Var:
    """Precision-weighted fusion of a prior with T weighted value rows.

    out = (p0 * mu + sum_t w_t * V_t) / (p0 + sum_t w_t), shapes
    mu: (d,), p0: scalar (), V: (T, d), w: (T,). T = 0 is allowed and
    returns mu. The backward is the hand-derived differential of the
    rational form, pushed to all four operands.
    """
    mu, p0, V, w = prior_mean, prior_prec, values, weights
    if mu.value.ndim != 1 or p0.value.shape != () or V.value.ndim != 2 or w.value.ndim != 1:
        raise ValueError("fuse expects mu (d,), p0 (), V (T,d), w (T,)")
    if V.value.shape[0] != w.value.shape[0] or (V.value.shape[0] > 0 and V.value.shape[1] != mu.value.shape[0]):
        raise ValueError(f"fuse shape mismatch: V {V.value.shape}, w {w.value.shape}, mu {mu.value.shape}")
    if np.any(w.value < 0) or p0.value < 0:
        raise ValueError("fuse requires nonnegative precisions")
    Z = float(p0.value + w.value.sum())
    if Z <= 0.0:
        raise ValueError("degenerate fusion: total precision zero")
    mac_counter.add(w.value.shape[0] * mu.value.shape[0])
    out = (p0.value * mu.value + w.value @ V.value) / Z if V.value.shape[0] else mu.value.copy()

    def push(g):
        _accum(mu, (float(p0.value) / Z) * g)
        _accum(p0, np.asarray(np.dot(g, mu.value - out) / Z))
        if V.value.shape[0]:
            _accum(V, np.outer(w.value, g) / Z)
            _accum(w, (V.value - out) @ g / Z)
        else:
            _accum(V, np.zeros_like(V.value))
            _accum(w, np.zeros_like(w.value))

    return Var(mu.tape, "fuse", out, (mu, p0, V, w), push)


# Tag table for the expression-form entry point and for error reporting.
_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "gather": gather,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "relu": relu,
    "clip": clip,
    "reciprocal": reciprocal,
    "softmax": softmax,
    "sum": sum_all,
    "mean": mean_all,
    "bce_with_logits": bce_with_logits,
    "fuse": fuse,
}


def apply(tag: str, *args, **kwargs) -> Var:
    """Dispatch by op tag; unknown tags are rejected by name."""
    fn = _OPS.get(tag)
    if fn is None:
        raise KeyError(f"unsupported op tag {tag!r}")
    return fn(*args, **kwargs)


def forward(expr, inputs: dict[str, np.ndarray], params: Iterable[str] = ()) -> tuple[Tape, Var]:
    """Evaluate a nested (tag, *children) expression against named inputs.

    Children may be input names, literal numbers/tuples (passed through to
    the op, e.g. a scale factor), nested expressions, or lists of
    expressions (for concat). Returns the tape and the output node.
    """
    tape = Tape()
    params = set(params)
    leaves: dict[str, Var] = {}

    def lookup(name: str) -> Var:
        if name not in leaves:
            if name not in inputs:
                raise KeyError(f"unknown input {name!r}")
            leaves[name] = tape.leaf(inputs[name], param=name if name in params else None)
        return leaves[name]

    def ev(node):
        if isinstance(node, str):
            return lookup(node)
        if isinstance(node, (int, float)):
            return node
        if isinstance(node, np.ndarray):
            return tape.leaf(node)
        if isinstance(node, list):
            return [ev(child) for child in node]
        if isinstance(node, tuple):
            if len(node) == 0 or not isinstance(node[0], str):
                raise ValueError("expression tuples must start with an op tag")
            tag, *children = node
            if tag not in _OPS and tag not in inputs:
                raise KeyError(f"unsupported op tag {tag!r}")
            return apply(tag, *[ev(c) for c in children])
        raise TypeError(f"bad expression node of type {type(node).__name__}")

    return tape, ev(expr)


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float, state: AdamState) -> dict[str, np.ndarray]:
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-8), in place.

    Steady-state per-coordinate movement is bounded by ~lr. Parameters
    without a gradient entry are treated as zero-gradient.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params
