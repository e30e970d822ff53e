"""Aggregation and breakage source terms of the moment equations.

Continuous closures (polynomial, maximum entropy) are integrated with the
global Lobatto rule; the aggregation double integrals use the collapsed
map of the inner variable onto the admissible range ``[v_min, v_max - v]``
so that every pair node lies inside the support of the kernel. QMOM
sources are the exact discrete sums over atoms.
"""
from dataclasses import dataclass

import numpy as np

from . import basis as _basis
from .closures import (
    AtomicReconstruction,
    MaxEntReconstruction,
    MomentVector,
    PolynomialReconstruction,
    maxent_solve,
    pn_close,
    qmom_atoms,
    wheeler_invert,
)
from .errors import PBEError
from .kernels import aggregation_kernel, breakage_frequency, daughter_moments

PN, MN, QMOM = "PN", "MN", "QMOM"
CLOSURES = (PN, MN, QMOM)


@dataclass(frozen=True, eq=False)
class SourceEvaluation:
    """Moments of the four source terms, in ``basis`` (arrays may be stacked)."""

    birth_agg: np.ndarray
    death_agg: np.ndarray
    birth_brk: np.ndarray
    death_brk: np.ndarray
    basis: str = _basis.MONOMIAL

    @property
    def total(self):
        return self.birth_agg - self.death_agg + self.birth_brk - self.death_brk

    def mass(self, domain):
        """First monomial moment of the total source."""
        return mass_moment(self.total, self.basis, domain)


def mass_moment(values, basis, domain):
    values = np.asarray(values)
    if basis == _basis.MONOMIAL:
        return values[..., 1]
    # v = v_min + L (m_1 + 1) / 2 for the shifted Legendre basis
    return domain.v_min * values[..., 0] + 0.5 * domain.length * (values[..., 1] + values[..., 0])


def collapsed_inner(u, domain):
    """Map of the inner aggregation variable onto ``[v_min, v_max - u]``.

    Returns ``(scale, shift)`` with ``g(u, x) = shift + scale * (x - v_min)``;
    ``scale`` is also the Jacobian and is zero where the range is empty.
    """
    u = np.asarray(u, dtype=float)
    scale = np.clip(domain.v_max - domain.v_min - u, 0.0, None) / domain.length
    return scale, np.full_like(u, domain.v_min)


class SourceOperator:
    """Precomputed quadrature tensors for one kernel set, rule, order and basis."""

    def __init__(self, kernels, rule, order, basis=_basis.MONOMIAL):
        dom = kernels.domain
        self.kernels, self.rule, self.order, self.basis = kernels, rule, order, basis
        self.domain = dom
        u, w = rule.nodes, rule.weights
        self.nodes, self.weights = u, w
        self.m_nodes = self._basis(u)
        self.legendre_nodes = _basis.legendre(u, order, dom.v_min, dom.v_max)
        self.gamma = breakage_frequency(u, kernels) if kernels.has_breakage else np.zeros_like(u)
        if kernels.has_breakage:
            self.breakage_moments = daughter_moments(u, self._basis, kernels, rule.size)
        else:
            self.breakage_moments = np.zeros_like(self.m_nodes)

        scale, shift = collapsed_inner(u, dom)
        self.pair_nodes = shift[:, None] + scale[:, None] * (u[None, :] - dom.v_min)
        if kernels.has_aggregation:
            omega = aggregation_kernel(u[:, None], self.pair_nodes, kernels)
        else:
            omega = np.zeros((len(u), len(u)))
        # inner weights times Jacobian times kernel
        self.inner = omega * scale[:, None] * w[None, :]
        self.birth_basis = self._basis(u[:, None] + self.pair_nodes)
        self.legendre_pairs = _basis.legendre(self.pair_nodes, order, dom.v_min, dom.v_max)

    def _basis(self, v):
        return _basis.evaluate(self.basis, v, self.order, self.domain.v_min, self.domain.v_max)

    # -- continuous closures --
    def death_rates(self, f_pairs):
        """``<f(g(v, .)) omega(v, g(v, .)) g'(v, .)>`` at every global node."""
        return np.einsum("ab,...ab->...a", self.inner, f_pairs)

    def continuous(self, f_nodes, f_pairs):
        """Source moments from density values at the nodes and at the pair nodes."""
        w = self.weights
        wf = w * f_nodes
        rates = self.death_rates(f_pairs)
        death_agg = (wf * rates) @ self.m_nodes
        birth_agg = 0.5 * np.einsum("...a,ab,...ab,abk->...k", wf, self.inner, f_pairs, self.birth_basis)
        wgf = wf * self.gamma
        death_brk = wgf @ self.m_nodes
        birth_brk = wgf @ self.breakage_moments
        return SourceEvaluation(birth_agg, death_agg, birth_brk, death_brk, self.basis)

    def polynomial_values(self, legendre_coeffs):
        c = np.asarray(legendre_coeffs)
        return c @ self.legendre_nodes.T, np.einsum("abk,...k->...ab", self.legendre_pairs, c)

    def maxent_values(self, legendre_multipliers):
        c = np.asarray(legendre_multipliers)
        return (
            np.exp(c @ self.legendre_nodes.T),
            np.exp(np.einsum("abk,...k->...ab", self.legendre_pairs, c)),
        )

    def continuous_cfl_rates(self, f_nodes, f_pairs):
        """Largest death rates (aggregation, breakage) over the nodes."""
        rates = self.death_rates(np.abs(f_pairs))
        return rates.max(axis=-1), np.full(rates.shape[:-1], self.gamma.max(initial=0.0))

    # -- QMOM --
    def qmom(self, weights, abscissas):
        """Exact discrete source sums for atomic measures (monomial basis)."""
        if self.basis != _basis.MONOMIAL:
            raise ValueError("QMOM sources are defined for the monomial basis")
        kern = self.kernels
        w = np.asarray(weights, dtype=float)
        x = np.asarray(abscissas, dtype=float)
        mx = _basis.monomial(x, self.order)
        if kern.has_aggregation:
            omega = aggregation_kernel(x[..., :, None], x[..., None, :], kern)
            ww = w[..., :, None] * w[..., None, :] * omega
            birth_agg = 0.5 * np.einsum("...ij,...ijk->...k", ww, _basis.monomial(x[..., :, None] + x[..., None, :], self.order))
            death_agg = np.einsum("...ij,...jk->...k", ww, mx)
        else:
            birth_agg = np.zeros(w.shape[:-1] + (self.order + 1,))
            death_agg = birth_agg.copy()
        if kern.has_breakage:
            gam = breakage_frequency(x, kern)
            death_brk = np.einsum("...i,...ik->...k", w * gam, mx)
            bm = daughter_moments(x, lambda v: _basis.monomial(v, self.order), kern, self.rule.size)
            birth_brk = np.einsum("...i,...ik->...k", w * gam, bm)
        else:
            death_brk = np.zeros_like(birth_agg)
            birth_brk = np.zeros_like(birth_agg)
        return SourceEvaluation(birth_agg, death_agg, birth_brk, death_brk, _basis.MONOMIAL)

    def qmom_cfl_rates(self, weights, abscissas):
        w = np.asarray(weights, dtype=float)
        x = np.asarray(abscissas, dtype=float)
        probe = np.concatenate([np.broadcast_to(self.nodes, x.shape[:-1] + self.nodes.shape), x], axis=-1)
        omega = aggregation_kernel(probe[..., :, None], x[..., None, :], self.kernels)
        agg = np.einsum("...pj,...j->...p", omega, w).max(axis=-1)
        brk = breakage_frequency(probe, self.kernels).max(axis=-1)
        return agg, brk


_OPERATORS = {}


def source_operator(kernels, rule, order, basis=_basis.MONOMIAL):
    """Cached ``SourceOperator`` (keyed on kernel set, rule identity, order, basis)."""
    key = (kernels, id(rule), order, basis)
    op = _OPERATORS.get(key)
    if op is None or op.rule is not rule:
        if len(_OPERATORS) > 32:
            _OPERATORS.clear()
        op = SourceOperator(kernels, rule, order, basis)
        _OPERATORS[key] = op
    return op


def _check_finite(values):
    if not np.all(np.isfinite(values)):
        raise PBEError("reconstruction is not finite at a quadrature node")


def sources_continuous(recon, kernels, rule):
    """Source moments for a polynomial or maximum-entropy reconstruction.

    Polynomial reconstructions yield Legendre moments, maximum-entropy ones
    monomial moments.
    """
    if isinstance(recon, PolynomialReconstruction):
        op = source_operator(kernels, rule, len(recon.coefficients) - 1, _basis.LEGENDRE)
        f_nodes, f_pairs = op.polynomial_values(recon.coefficients)
    elif isinstance(recon, MaxEntReconstruction):
        op = source_operator(kernels, rule, len(recon.multipliers) - 1, _basis.MONOMIAL)
        f_nodes, f_pairs = op.maxent_values(recon.legendre_multipliers)
    else:
        raise TypeError(f"not a continuous reconstruction: {type(recon).__name__}")
    _check_finite(f_nodes)
    _check_finite(f_pairs)
    return op.continuous(f_nodes, f_pairs)


def sources_qmom(recon, kernels, rule, order=None):
    """Source moments ``0..order`` (default ``2n - 1``) of an atomic measure."""
    order = 2 * recon.n - 1 if order is None else order
    op = source_operator(kernels, rule, order, _basis.MONOMIAL)
    return op.qmom(recon.weights, recon.abscissas)


def _max_rate(agg, brk, safety):
    if not 0.0 < safety <= 1.0:
        raise ValueError("safety factor must lie in (0, 1]")
    rate = np.maximum(agg, brk)
    with np.errstate(divide="ignore"):
        return np.where(rate > 0, safety / np.where(rate > 0, rate, 1.0), np.inf)


def cfl_homogeneous(recon, kernels, rule, safety=1.0):
    """Largest realizability-preserving forward-Euler step for one reconstruction.

    Returns ``inf`` when both kernels vanish. For polynomial
    reconstructions the bound is computed with ``|f|`` and carries no
    realizability guarantee.
    """
    if isinstance(recon, AtomicReconstruction):
        op = source_operator(kernels, rule, 2 * recon.n - 1, _basis.MONOMIAL)
        agg, brk = op.qmom_cfl_rates(recon.weights, recon.abscissas)
    elif isinstance(recon, PolynomialReconstruction):
        op = source_operator(kernels, rule, len(recon.coefficients) - 1, _basis.LEGENDRE)
        agg, brk = op.continuous_cfl_rates(*op.polynomial_values(recon.coefficients))
    elif isinstance(recon, MaxEntReconstruction):
        op = source_operator(kernels, rule, len(recon.multipliers) - 1, _basis.MONOMIAL)
        agg, brk = op.continuous_cfl_rates(*op.maxent_values(recon.legendre_multipliers))
    else:
        raise TypeError(f"unsupported reconstruction {type(recon).__name__}")
    return float(_max_rate(agg, brk, safety))


def close(gamma, closure, rule=None, params=None):
    """Reconstruction of ``gamma`` with the named closure.

    Returns ``(reconstruction, moments)`` where ``moments`` may differ from
    ``gamma`` when the maximum-entropy solver had to regularise.
    """
    if closure == PN:
        return pn_close(gamma), gamma
    if gamma.basis != _basis.MONOMIAL:
        raise ValueError(f"{closure} works on monomial moments")
    if closure == MN:
        recon = maxent_solve(gamma, rule, params)
        return recon, recon.regularized_moments if recon.regularization > 0 else gamma
    if closure == QMOM:
        return wheeler_invert(gamma, qmom_atoms(gamma.order)), gamma
    raise ValueError(f"unknown closure {closure!r}")


def step_homogeneous(gamma, closure, kernels, rule, dt, params=None):
    """One forward-Euler step of the spatially homogeneous moment system."""
    if dt == 0:
        return gamma
    recon, gamma = close(gamma, closure, rule, params)
    if closure == QMOM:
        src = sources_qmom(recon, kernels, rule, gamma.order)
    else:
        src = sources_continuous(recon, kernels, rule)
    return MomentVector(gamma.values + dt * src.total, gamma.basis, gamma.domain)
