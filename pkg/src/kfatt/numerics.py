"""Dense float64 primitives shared by every other module.

All public functions take and return plain numpy arrays (64-bit floats,
row-major) and guarantee finite outputs. Randomness goes through :class:`Rng`,
a thin wrapper over a counter-based bit generator so that streams are
reproducible and splittable independently of iteration order.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "as_tensor",
    "softmax",
    "gaussian_logpdf",
    "finite_diff_grad",
    "Rng",
    "MacCounter",
    "mac_counter",
]


def as_tensor(x) -> np.ndarray:
    """Coerce input to a float64 ndarray without copying when possible."""
    return np.asarray(x, dtype=np.float64)


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector.

    The maximum entry is subtracted before exponentiation, so arbitrarily
    large logits cannot overflow. Output entries are positive and sum to 1
    within 1e-12.
    """
    z = as_tensor(logits)
    if z.ndim != 1:
        raise ValueError(f"softmax expects a 1-D vector, got shape {z.shape}")
    if z.size == 0:
        raise ValueError("empty logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    shifted = z - np.max(z)
    e = np.exp(shifted)
    return e / np.sum(e)


def gaussian_logpdf(x, mean, sigma: float) -> float:
    """Log density of an isotropic Gaussian N(mean, sigma^2 I) at x.

    Returns -d/2 * log(2*pi*sigma^2) - ||x - mean||^2 / (2*sigma^2).
    """
    if sigma <= 0:
        raise ValueError("non-positive sigma")
    xv = as_tensor(x)
    mv = as_tensor(mean)
    if xv.shape != mv.shape:
        raise ValueError(f"shape mismatch: {xv.shape} vs {mv.shape}")
    d = xv.size
    diff = xv - mv
    return float(-0.5 * d * np.log(2.0 * np.pi * sigma * sigma)
                 - np.dot(diff, diff) / (2.0 * sigma * sigma))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Element i is (f(x + h*e_i) - f(x - h*e_i)) / (2h). Raises if either
    probe evaluates to a non-finite value, naming the offending index.
    """
    xv = as_tensor(x).copy()
    grad = np.zeros_like(xv)
    flat = xv.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(xv))
        flat[i] = orig - h
        f_minus = float(f(xv))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite function value while probing index {i}")
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


class Rng:
    """Seeded, splittable random stream backed by the Philox counter generator.

    Equal seeds give bit-identical streams. ``split(key)`` derives a child
    stream from (seed, path, key) alone, so per-entity substreams do not
    depend on the order in which they are created.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, key: int) -> "Rng":
        """Deterministic child stream for integer key (e.g. a user index)."""
        return Rng(self.seed, self._path + (int(key),))

    # Delegated draws. All return float64 / int64 numpy types.

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self._gen.permutation(x)


class MacCounter:
    """Running count of multiply-accumulate operations.

    The autodiff layer reports n*m*k for every (n,m)@(m,k) product when
    counting is enabled; benchmarks read and reset the total.
    """

    def __init__(self):
        self.enabled = False
        self.total = 0

    def add(self, n: int):
        if self.enabled:
            self.total += int(n)

    def reset(self):
        self.total = 0

    def __enter__(self):
        self.enabled = True
        self.reset()
        return self

    def __exit__(self, *exc):
        self.enabled = False
        return False


#: Process-wide counter used by benchmarks. Not thread-safe by design: the
#: latency benchmark pins to a single worker.
mac_counter = MacCounter()
