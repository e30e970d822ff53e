"""Polynomial bases of the volume variable.

Both evaluators return the basis values along a new trailing axis, so
``monomial(v, N)[..., k] == v**k``.
"""
import numpy as np

MONOMIAL = "monomial"
LEGENDRE = "legendre"
BASES = (MONOMIAL, LEGENDRE)


def monomial(v, order):
    v = np.asarray(v, dtype=float)
    return v[..., None] ** np.arange(order + 1)


def legendre(v, order, v_min, v_max):
    """Legendre polynomials shifted to ``[v_min, v_max]`` (three-term recursion)."""
    v = np.asarray(v, dtype=float)
    s = 2.0 * (v - v_min) / (v_max - v_min) - 1.0
    out = np.empty(v.shape + (order + 1,))
    out[..., 0] = 1.0
    if order >= 1:
        out[..., 1] = s
    for i in range(2, order + 1):
        out[..., i] = ((2 * i - 1) * s * out[..., i - 1] - (i - 1) * out[..., i - 2]) / i
    return out


def evaluate(basis, v, order, v_min, v_max):
    if basis == MONOMIAL:
        return monomial(v, order)
    if basis == LEGENDRE:
        return legendre(v, order, v_min, v_max)
    raise ValueError(f"unknown basis {basis!r}")


def legendre_norms(order, v_min, v_max):
    """``<m_i m_i>`` for the shifted Legendre basis."""
    return (v_max - v_min) / (2.0 * np.arange(order + 1) + 1.0)


def connection_matrix(order, v_min, v_max):
    """Lower-triangular ``C`` with ``legendre(v) = C @ monomial(v)``.

    Built from the same recursion, acting on coefficient vectors.
    """
    length = v_max - v_min
    a = 2.0 / length
    b = -2.0 * v_min / length - 1.0
    c = np.zeros((order + 1, order + 1))
    c[0, 0] = 1.0
    if order >= 1:
        c[1, 0] = b
        c[1, 1] = a
    for i in range(2, order + 1):
        s_prev = np.zeros(order + 1)
        s_prev[1:] = a * c[i - 1, :-1]
        s_prev += b * c[i - 1]
        c[i] = ((2 * i - 1) * s_prev - (i - 1) * c[i - 2]) / i
    return c
