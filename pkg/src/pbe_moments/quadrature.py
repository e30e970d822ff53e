"""Gauss-Lobatto quadrature on arbitrary intervals."""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_NEWTON_TOL = 1e-14
_NEWTON_MAXITER = 100


@lru_cache(maxsize=64)
def _reference_lobatto(n):
    """Nodes and weights of the ``n``-point Lobatto rule on [-1, 1].

    Interior nodes are the roots of P'_{n-1}; they coincide with the roots
    of x P_{n-1}(x) - P_{n-2}(x), which Newton's method finds from the
    Chebyshev-Gauss-Lobatto points.
    """
    deg = n - 1
    x = np.cos(np.pi * np.arange(n) / deg)
    p = np.zeros((n, n))
    for _ in range(_NEWTON_MAXITER):
        x_old = x
        p[:, 0] = 1.0
        p[:, 1] = x
        for k in range(2, n):
            p[:, k] = ((2 * k - 1) * x * p[:, k - 1] - (k - 1) * p[:, k - 2]) / k
        x = x_old - (x * p[:, deg] - p[:, deg - 1]) / (n * p[:, deg])
        if np.max(np.abs(x - x_old)) <= _NEWTON_TOL:
            break
    p[:, 0] = 1.0
    p[:, 1] = x
    for k in range(2, n):
        p[:, k] = ((2 * k - 1) * x * p[:, k - 1] - (k - 1) * p[:, k - 2]) / k
    w = 2.0 / (deg * n * p[:, deg] ** 2)
    x = x[::-1].copy()
    w = w[::-1].copy()
    # pin the endpoints and restore exact symmetry
    x[0], x[-1] = -1.0, 1.0
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Lobatto nodes/weights on ``[lower, upper]`` (endpoints included)."""

    nodes: np.ndarray
    weights: np.ndarray
    lower: float
    upper: float

    @property
    def size(self):
        return len(self.nodes)

    def scaled(self, lower, upper):
        """The same rule mapped affinely onto another interval."""
        return gauss_lobatto(self.size, lower, upper)

    def integrate(self, values):
        """``sum_i w_i g(v_i)``; ``values`` is a callable or the sampled array."""
        return integrate(values, self)


def gauss_lobatto(n_q, lower=-1.0, upper=1.0):
    """Build the ``n_q``-point Gauss-Lobatto rule on ``[lower, upper]``.

    The rule is exact for polynomials of degree ``2 n_q - 3``.
    """
    if isinstance(lower, (tuple, list)) or hasattr(lower, "v_min"):
        lower, upper = _unpack_interval(lower)
    n_q = int(n_q)
    if n_q < 2:
        raise ValueError(f"Lobatto rule needs at least 2 points, got {n_q}")
    if not upper > lower:
        raise ValueError(f"empty interval [{lower}, {upper}]")
    x, w = _reference_lobatto(n_q)
    half = 0.5 * (upper - lower)
    nodes = lower + half * (x + 1.0)
    nodes[0], nodes[-1] = lower, upper
    return QuadratureRule(nodes=nodes, weights=half * w, lower=float(lower), upper=float(upper))


def integrate(g, rule):
    """Apply ``rule`` to ``g`` (a vectorised callable or values at the nodes).

    Extra trailing axes of the sampled values are integrated component-wise
    only if the node axis comes first.
    """
    values = g(rule.nodes) if callable(g) else np.asarray(g)
    return np.tensordot(rule.weights, values, axes=(0, 0))


def sub_interval_nodes(rule_size, lower, upper):
    """Nodes and weights of scaled rules on many intervals at once.

    ``lower`` and ``upper`` are broadcast-compatible arrays; the result has
    shape ``broadcast(lower, upper).shape + (rule_size,)``. Degenerate
    intervals (``upper <= lower``) get zero weights.
    """
    x, w = _reference_lobatto(rule_size)
    lower = np.asarray(lower, dtype=float)[..., None]
    upper = np.asarray(upper, dtype=float)[..., None]
    half = 0.5 * np.maximum(upper - lower, 0.0)
    return lower + half * (x + 1.0), half * w


def _unpack_interval(interval):
    if hasattr(interval, "v_min"):
        return interval.v_min, interval.v_max
    return interval[0], interval[1]
