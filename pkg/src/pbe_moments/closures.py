"""Moment vectors and the three closures: polynomial, maximum entropy and QMOM.

The maximum-entropy solver works on stacks of moment vectors so that all
spatial cells of a field can be closed in one call; the scalar entry
points wrap a stack of one.
"""
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.optimize import linprog

from . import basis as _basis
from .errors import OptimizationError, RealizabilityError
from .kernels import VolumeDomain

# sufficient-decrease constant of the Armijo rule
_ARMIJO_C = 1e-4
# roundoff allowance (in units of eps) when comparing dual objective values
_ROUNDOFF = 16.0
# minimal normalised LP margin that still counts as strictly interior
_INTERIOR_MARGIN = 1e-10


@dataclass(frozen=True, eq=False)
class MomentVector:
    values: np.ndarray
    basis: str
    domain: VolumeDomain

    def __post_init__(self):
        if self.basis not in _basis.BASES:
            raise ValueError(f"unknown basis {self.basis!r}")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    @property
    def order(self):
        return len(self.values) - 1

    def to(self, target_basis):
        return basis_convert(self, target_basis)


def basis_convert(gamma, target_basis):
    """Change between monomial and shifted-Legendre moments (exact linear map)."""
    if target_basis == gamma.basis:
        return gamma
    dom = gamma.domain
    c = _basis.connection_matrix(gamma.order, dom.v_min, dom.v_max)
    if target_basis == _basis.LEGENDRE:
        values = c @ gamma.values
    elif target_basis == _basis.MONOMIAL:
        values = _lower_solve(c, gamma.values)
    else:
        raise ValueError(f"unknown basis {target_basis!r}")
    return MomentVector(values, target_basis, dom)


def _lower_solve(c, b):
    # forward substitution; c is lower triangular with a positive diagonal
    x = np.zeros(len(b))
    for i in range(len(b)):
        x[i] = (b[i] - c[i, :i] @ x[:i]) / c[i, i]
    return x


def moments_of(values, nodes, weights, order, basis, domain):
    """Quadrature moments ``sum_i w_i m(v_i) f_i``."""
    m = _basis.evaluate(basis, nodes, order, domain.v_min, domain.v_max)
    return MomentVector(m.T @ (np.asarray(weights) * np.asarray(values)), basis, domain)


# --- polynomial closure ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class PolynomialReconstruction:
    coefficients: np.ndarray
    domain: VolumeDomain

    def __call__(self, v):
        n = len(self.coefficients) - 1
        m = _basis.legendre(v, n, self.domain.v_min, self.domain.v_max)
        return m @ self.coefficients


def pn_close(gamma):
    """Legendre-expansion density with the given moments.

    Monomial input is converted first. The result may be negative.
    """
    gamma = basis_convert(gamma, _basis.LEGENDRE)
    n = gamma.order
    dom = gamma.domain
    coeffs = gamma.values * (2.0 * np.arange(n + 1) + 1.0) / dom.length
    return PolynomialReconstruction(coeffs, dom)


# --- QMOM ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AtomicReconstruction:
    weights: np.ndarray
    abscissas: np.ndarray

    @property
    def n(self):
        return len(self.weights)

    def moments(self, order):
        return (self.weights[:, None] * self.abscissas[:, None] ** np.arange(order + 1)).sum(axis=0)


def qmom_atoms(order):
    """Number of atoms used for moments ``0..order``."""
    return max((order + 1) // 2, 1)


def wheeler_recurrence(moments, n):
    """Recurrence coefficients ``(a, b)`` from raw moments (Wheeler's algorithm).

    ``moments`` has shape ``(..., >= 2n)``. Raises ``RealizabilityError`` on
    a non-positive pivot; ``error.cell`` is the flat index of the first
    offending vector of the stack.
    """
    mu = np.asarray(moments, dtype=float)
    batch = mu.shape[:-1]
    mu = mu.reshape(-1, mu.shape[-1])
    size = mu.shape[0]
    if mu.shape[1] < 2 * n:
        raise ValueError(f"{2 * n} moments needed for {n} atoms, got {mu.shape[1]}")
    if np.any(~(mu[:, 0] > 0)):
        bad = int(np.flatnonzero(~(mu[:, 0] > 0))[0])
        raise RealizabilityError("non-positive zeroth moment", order=0, cell=bad)
    a = np.zeros((size, n))
    b = np.zeros((size, n))
    sigma = np.zeros((size, n + 1, 2 * n + 1))
    # row k of sigma holds sigma_{k-1, l}; row 0 is the zero sequence sigma_{-1}
    sigma[:, 1, : 2 * n] = mu[:, : 2 * n]
    a[:, 0] = mu[:, 1] / mu[:, 0]
    for k in range(1, n):
        ls = np.arange(k, 2 * n - k)
        sigma[:, k + 1, ls] = (
            sigma[:, k, ls + 1] - a[:, k - 1, None] * sigma[:, k, ls] - b[:, k - 1, None] * sigma[:, k - 1, ls]
        )
        pivot = sigma[:, k + 1, k]
        bad = ~(pivot > 0) | ~np.isfinite(pivot)
        if np.any(bad):
            raise RealizabilityError(
                f"non-positive pivot at order {2 * k}: moment vector is not realizable",
                order=2 * k,
                cell=int(np.flatnonzero(bad)[0]),
            )
        a[:, k] = sigma[:, k + 1, k + 1] / pivot - sigma[:, k, k] / sigma[:, k, k - 1]
        b[:, k] = pivot / sigma[:, k, k - 1]
    return a.reshape(batch + (n,)), b.reshape(batch + (n,))


def wheeler_invert_batch(moments, n):
    """Weights and abscissas of ``n``-atom measures for a stack of moment vectors."""
    mu = np.asarray(moments, dtype=float)
    a, b = wheeler_recurrence(mu, n)
    jac = np.zeros(a.shape + (n,))
    idx = np.arange(n)
    jac[..., idx, idx] = a
    if n > 1:
        off = np.sqrt(b[..., 1:])
        jac[..., idx[:-1], idx[1:]] = off
        jac[..., idx[1:], idx[:-1]] = off
    nodes, vecs = np.linalg.eigh(jac)
    weights = mu[..., 0, None] * vecs[..., 0, :] ** 2
    return weights, nodes


def wheeler_invert(gamma, n):
    """Invert ``2n`` monomial moments into an ``n``-atom measure."""
    values = gamma.values if isinstance(gamma, MomentVector) else np.asarray(gamma, dtype=float)
    if isinstance(gamma, MomentVector) and gamma.basis != _basis.MONOMIAL:
        values = basis_convert(gamma, _basis.MONOMIAL).values
    w, x = wheeler_invert_batch(values[None, :], n)
    return AtomicReconstruction(w[0], x[0])


# --- maximum entropy -------------------------------------------------------

@dataclass(frozen=True)
class NewtonParams:
    k_max: int = 400
    eps: float = 2.0 ** -52
    chi: float = 0.6
    tau: float = 1e-9
    r_list: Tuple[float, ...] = (0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2, 0.1, 0.5, 1.0)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        r = tuple(float(x) for x in self.r_list)
        if not r or r[0] != 0.0 or r[-1] != 1.0 or any(b < a for a, b in zip(r, r[1:])):
            raise ValueError("r_list must start at 0, end at 1 and be nondecreasing")
        object.__setattr__(self, "r_list", r)


@dataclass(frozen=True, eq=False)
class MaxEntReconstruction:
    """Density ``exp(alpha . (1, v, ..., v^N))``.

    ``multipliers`` are the monomial-basis multipliers. Pointwise evaluation
    uses ``legendre_multipliers`` (the same exponent in the shifted-Legendre
    basis), which stays accurate where the monomial form cancels badly.
    """

    multipliers: np.ndarray
    legendre_multipliers: np.ndarray
    regularization: float
    regularized_moments: MomentVector
    iterations: int = 0
    gradient_norm: float = 0.0

    @property
    def domain(self):
        return self.regularized_moments.domain

    def exponent(self, v):
        n = len(self.legendre_multipliers) - 1
        m = _basis.legendre(v, n, self.domain.v_min, self.domain.v_max)
        return m @ self.legendre_multipliers

    def __call__(self, v):
        return np.exp(self.exponent(v))


@dataclass
class MaxEntBatchResult:
    """Per-vector results of ``maxent_solve_batch`` (leading axis = vector)."""

    legendre_multipliers: np.ndarray
    multipliers: np.ndarray
    regularization: np.ndarray
    regularized_moments: np.ndarray
    iterations: np.ndarray
    gradient_norm: np.ndarray
    node_values: np.ndarray = field(repr=False)


class _MaxEntProblem:
    """Quadrature data shared by every solve on one rule and order."""

    def __init__(self, order, nodes, weights, domain):
        self.order = order
        self.w = np.asarray(weights, dtype=float)
        self.p_leg = _basis.legendre(nodes, order, domain.v_min, domain.v_max)
        self.p_mono = _basis.monomial(nodes, order)
        self.connection = _basis.connection_matrix(order, domain.v_min, domain.v_max)
        self.domain = domain

    def newton(self, basis0, target_p, target_mono, beta0, params):
        """Batched damped Newton with adaptive change of basis.

        ``basis0`` is the ``(nQ, K)`` starting basis at the nodes,
        ``target_p`` the target moments in that basis, ``target_mono`` the
        monomial targets used by the stopping test. Returns the exponent
        coefficients w.r.t. ``basis0``, convergence flags, iteration counts,
        final monomial gradient norms and the density at the nodes.
        """
        w = self.w
        count, dim = beta0.shape
        mono = self.p_mono[:, : target_mono.shape[1]]
        p = np.broadcast_to(basis0, (count,) + basis0.shape).copy()
        trans = np.broadcast_to(np.eye(dim), (count, dim, dim)).copy()
        beta = beta0.copy()
        gamma_p = target_p.copy()
        converged = np.zeros(count, dtype=bool)
        failed = np.zeros(count, dtype=bool)
        iterations = np.zeros(count, dtype=int)
        gnorm = np.full(count, np.inf)
        node_vals = np.zeros((count, len(w)))
        active = np.arange(count)
        # tau is absolute; vectors with gamma_0 < 1 are held to tau * gamma_0
        tol = params.tau * np.minimum(1.0, np.abs(target_mono[:, 0]))

        for _ in range(params.k_max + 1):
            if active.size == 0:
                break
            pa, ba = p[active], beta[active]
            with np.errstate(over="ignore", invalid="ignore"):
                dens = np.exp(np.einsum("cqk,ck->cq", pa, ba))
            wg = w * dens
            grad_mono = wg @ mono - target_mono[active]
            gn = np.linalg.norm(grad_mono, axis=1)
            gn = np.where(np.isfinite(gn), gn, np.inf)
            gnorm[active] = gn
            node_vals[active] = dens
            done = gn < tol[active]
            converged[active[done]] = True
            over_budget = iterations[active] >= params.k_max
            failed[active[over_budget & ~done]] = True
            keep = ~done & ~over_budget
            active, pa, ba, wg = active[keep], pa[keep], ba[keep], wg[keep]
            if active.size == 0:
                break
            iterations[active] += 1

            hess = np.einsum("cqi,cq,cqj->cij", pa, wg, pa)
            chol, ok = _batched_cholesky(hess)
            if not np.all(ok):
                failed[active[~ok]] = True
                active, pa, ba, wg, chol = active[ok], pa[ok], ba[ok], wg[ok], chol[ok]
                if active.size == 0:
                    break
            linv = np.linalg.inv(chol)
            # new basis p <- L^{-1} p makes the Hessian the identity
            pa = np.einsum("cqk,cjk->cqj", pa, linv)
            ba = np.einsum("ckj,ck->cj", chol, ba)
            ga = np.einsum("cjk,ck->cj", linv, gamma_p[active])
            trans[active] = np.einsum("cjk,ckl->cjl", linv, trans[active])
            p[active], beta[active], gamma_p[active] = pa, ba, ga

            grad = np.einsum("cqk,cq->ck", pa, wg) - ga
            direction = -grad
            slope = np.einsum("ck,ck->c", grad, direction)
            lin = np.einsum("ck,ck->c", ba, ga)
            h0 = wg.sum(axis=1) - lin
            slack = _ROUNDOFF * params.eps * (wg.sum(axis=1) + np.abs(lin))
            step = np.ones(active.size)
            accepted = np.zeros(active.size, dtype=bool)
            pending = np.arange(active.size)
            while pending.size:
                trial = ba[pending] + step[pending, None] * direction[pending]
                with np.errstate(over="ignore", invalid="ignore"):
                    tdens = np.exp(np.einsum("cqk,ck->cq", pa[pending], trial))
                    h1 = tdens @ w - np.einsum("ck,ck->c", trial, ga[pending])
                ok_step = np.isfinite(h1) & (
                    h1 <= h0[pending] + _ARMIJO_C * step[pending] * slope[pending] + slack[pending]
                )
                accepted[pending[ok_step]] = True
                beta[active[pending[ok_step]]] = trial[ok_step]
                rest = pending[~ok_step]
                step[rest] *= params.chi
                too_small = step[rest] < params.eps
                failed[active[rest[too_small]]] = True
                pending = rest[~too_small]
            active = active[accepted]

        failed |= ~converged
        # exponent coefficients with respect to basis0: beta^T T basis0
        coeffs = np.einsum("ckj,ck->cj", trans, beta)
        return coeffs, converged, iterations, gnorm, node_vals


def _batched_cholesky(mats):
    ok = np.ones(mats.shape[0], dtype=bool)
    if not np.all(np.isfinite(mats)):
        ok &= np.all(np.isfinite(mats), axis=(1, 2))
    safe = np.where(ok[:, None, None], mats, np.eye(mats.shape[-1]))
    try:
        return np.linalg.cholesky(safe), ok
    except np.linalg.LinAlgError:
        chol = np.zeros_like(safe)
        for i in range(safe.shape[0]):
            if not ok[i]:
                chol[i] = np.eye(safe.shape[-1])
                continue
            try:
                chol[i] = np.linalg.cholesky(safe[i])
            except np.linalg.LinAlgError:
                ok[i] = False
                chol[i] = np.eye(safe.shape[-1])
        return chol, ok


_PROBLEM_CACHE = {}


def _problem(order, rule, domain):
    key = (order, id(rule), rule.size, domain)
    prob = _PROBLEM_CACHE.get(key)
    if prob is None or prob.w is not rule.weights and not np.array_equal(prob.w, rule.weights):
        prob = _MaxEntProblem(order, rule.nodes, rule.weights, domain)
        if len(_PROBLEM_CACHE) > 64:
            _PROBLEM_CACHE.clear()
        _PROBLEM_CACHE[key] = prob
    return prob


def maxent_solve_batch(moments, rule, domain, params=None):
    """Maximum-entropy multipliers for a stack of monomial moment vectors.

    Every solve starts from the two-moment sub-problem and the Legendre
    basis. Vectors that fail climb the regularization ladder
    ``(1 - r) gamma + r Q`` individually. Raises ``OptimizationError`` (with
    ``cell`` set to the offending row) if a vector fails even at ``r = 1``.
    """
    params = params or NewtonParams()
    gamma = np.atleast_2d(np.asarray(moments, dtype=float))
    count, dim = gamma.shape
    order = dim - 1
    if rule.size < dim:
        raise ValueError(f"n_Q = {rule.size} < N + 1 = {dim}: Hessian would be singular")
    if np.any(~(gamma[:, 0] > 0)):
        bad = int(np.flatnonzero(~(gamma[:, 0] > 0))[0])
        raise OptimizationError("non-positive zeroth moment", cell=bad)
    prob = _problem(order, rule, domain)
    conn = prob.connection
    gamma_leg = gamma @ conn.T

    # (i) two-moment sub-problem from (ln gamma_0, 0)
    sub = min(2, dim)
    beta_sub0 = np.zeros((count, sub))
    beta_sub0[:, 0] = np.log(gamma[:, 0])
    beta_sub, ok, _, gn_sub, dens0 = prob.newton(
        prob.p_leg[:, :sub], gamma_leg[:, :sub], gamma[:, :sub], beta_sub0, params
    )
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        raise OptimizationError("two-moment initial guess did not converge", gn_sub[bad], cell=bad)

    # (ii)-(iii) padded initial multipliers, already in the Legendre basis
    beta0 = np.zeros((count, dim))
    beta0[:, :sub] = beta_sub
    q_mono = (prob.w * dens0) @ prob.p_mono
    # the initial guess reproduces gamma_0 and gamma_1 up to tau; pin them exactly
    q_mono[:, :sub] = gamma[:, :sub]

    leg_mult = np.zeros((count, dim))
    reg = np.full(count, np.nan)
    reg_mom = gamma.copy()
    iters = np.zeros(count, dtype=int)
    gnorm = np.full(count, np.inf)
    node_values = np.zeros((count, rule.size))
    pending = np.arange(count)
    for r in params.r_list:
        if pending.size == 0:
            break
        target = (1.0 - r) * gamma[pending] + r * q_mono[pending]
        target[:, :sub] = gamma[pending, :sub]
        coeffs, ok, it, gn, dens = prob.newton(
            prob.p_leg, target @ conn.T, target, beta0[pending], params
        )
        iters[pending] += it
        gnorm[pending] = gn
        done = pending[ok]
        leg_mult[done] = coeffs[ok]
        reg[done] = r
        reg_mom[done] = target[ok]
        node_values[done] = dens[ok]
        pending = pending[~ok]
    if pending.size:
        bad = int(pending[0])
        raise OptimizationError(
            f"maximum-entropy solve failed for every regularization (|g| = {gnorm[bad]:.3e})",
            gnorm[bad],
            cell=bad,
        )
    mono_mult = leg_mult @ conn
    return MaxEntBatchResult(leg_mult, mono_mult, reg, reg_mom, iters, gnorm, node_values)


def maxent_solve(gamma, rule, params=None):
    """Maximum-entropy reconstruction of a single monomial moment vector."""
    if gamma.basis != _basis.MONOMIAL:
        gamma = basis_convert(gamma, _basis.MONOMIAL)
    res = maxent_solve_batch(gamma.values[None, :], rule, gamma.domain, params)
    return MaxEntReconstruction(
        multipliers=res.multipliers[0],
        legendre_multipliers=res.legendre_multipliers[0],
        regularization=float(res.regularization[0]),
        regularized_moments=MomentVector(res.regularized_moments[0], _basis.MONOMIAL, gamma.domain),
        iterations=int(res.iterations[0]),
        gradient_norm=float(res.gradient_norm[0]),
    )


# --- quadrature realizability ----------------------------------------------

def realizability_margin(gamma, rule):
    """Largest ``t`` with ``gamma = sum_i w_i m(v_i) f_i`` and all ``f_i >= t``.

    The LP is posed in the Legendre basis with densities normalised by the
    mean density ``gamma_0 / sum(w)``; ``-inf`` means infeasible.
    """
    dom = gamma.domain
    leg = basis_convert(gamma, _basis.LEGENDRE).values
    n = gamma.order
    if rule.size < n + 1:
        raise ValueError("realizability test needs n_Q >= N + 1")
    m = _basis.legendre(rule.nodes, n, dom.v_min, dom.v_max)
    a = (m * rule.weights[:, None]).T
    norms = _basis.legendre_norms(n, dom.v_min, dom.v_max)
    scale = abs(leg[0]) / rule.weights.sum() if leg[0] != 0 else 1.0
    # rows scaled by the basis norms keep the constraint matrix O(1)
    a_eq = np.hstack([a / norms[:, None], np.zeros((n + 1, 1))])
    b_eq = leg / norms / scale
    nq = rule.size
    a_ub = np.hstack([-np.eye(nq), np.ones((nq, 1))])
    b_ub = np.zeros(nq)
    c = np.zeros(nq + 1)
    c[-1] = -1.0
    bounds = [(None, None)] * (nq + 1)
    res = linprog(
        c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        return -np.inf
    return float(-res.fun) if leg[0] > 0 else -np.inf


def realizable_q(gamma, rule):
    """Membership in the open quadrature-realizable cone of ``rule``."""
    if not gamma.values[0] > 0 or not np.all(np.isfinite(gamma.values)):
        return False
    return realizability_margin(gamma, rule) > _INTERIOR_MARGIN
