"""Prior-aware, frequency-capped attention with a session-based CTR model.

Layering, bottom up: numerics (float64 primitives, RNG, MAC counter),
autodiff (reverse-mode tape + Adam), attention (fusion kernels), oracle
(independent MAP maximizer certifying the closed forms), model (session
encoder, fused decoder, CTR head, training), datagen (synthetic behavior
logs), evalbench (AUC + latency/op-count benchmark), config and cli.
"""

__version__ = "0.1.0"
