"""Aggregation kernel, breakage frequency and multiple-breakage daughter distribution.

The kernels follow Coulaloglou & Tavlarides; the daughter distribution is a
weighted sum of i-fragment densities built on the purely statistical
Hill-Ng model, with the ``i = 1`` member being a Dirac mass at the mother
volume.

Volumes passed to every function are in *internal* units; ``KernelSet``
carries the conversion factors needed to evaluate the physical formulas.
"""
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import gammaln, xlogy

from .errors import DomainError
from .quadrature import sub_interval_nodes

# relative slack used for interval and cutoff comparisons
_EDGE_RTOL = 1e-12


@dataclass(frozen=True)
class VolumeDomain:
    v_min: float
    v_max: float

    def __post_init__(self):
        if not 0.0 < self.v_min < self.v_max:
            raise ValueError(f"need 0 < v_min < v_max, got {self.v_min}, {self.v_max}")

    @property
    def length(self):
        return self.v_max - self.v_min

    def contains(self, v):
        v = np.asarray(v, dtype=float)
        tol = _EDGE_RTOL * self.v_max
        return (v >= self.v_min - tol) & (v <= self.v_max + tol)

    def check(self, v, name="v"):
        if not np.all(self.contains(v)):
            raise DomainError(f"{name} outside [{self.v_min:g}, {self.v_max:g}]")


@dataclass(frozen=True)
class BreakageConfig:
    """Daughter-distribution shape (``p``, ``m``) and breakage-frequency parameters."""

    p: int = 2
    m: int = 2
    C1: float = 0.12
    C2: float = 0.078
    alpha_d: float = 0.01
    epsilon: float = 0.004
    rho_d: float = 865.6
    sigma: float = 0.0361

    def __post_init__(self):
        if self.p < 1 or self.m < 0:
            raise ValueError("need p >= 1 and m >= 0")
        for name in ("C1", "C2", "alpha_d", "epsilon", "rho_d", "sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"breakage parameter {name} must be positive")


@dataclass(frozen=True)
class AggregationConfig:
    """Parameters of the aggregation kernel."""

    C_omega: float = 41.2
    k_omega: float = 1.33e10
    alpha_d: float = 0.01
    epsilon: float = 0.004
    rho_c: float = 1000.0
    sigma: float = 0.0361
    eta_c: float = 0.001

    def __post_init__(self):
        for name in ("C_omega", "k_omega", "alpha_d", "epsilon", "rho_c", "sigma", "eta_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"aggregation parameter {name} must be positive")


@dataclass(frozen=True)
class KernelSet:
    """Kernels on a volume domain.

    ``breakage`` / ``aggregation`` set to ``None`` switch that process off.
    ``frequency`` and ``aggregation_rate`` optionally replace the
    Coulaloglou-Tavlarides formulas by custom callables (still subject to
    the domain restriction and the ``v + w > v_max`` cutoff).

    ``volume_unit`` is the size of one internal volume unit in m^3 and
    ``number_unit`` the number-density scale, so physical kernels are
    evaluated at ``v * volume_unit`` and the aggregation rate is multiplied
    by ``number_unit``.
    """

    domain: VolumeDomain
    breakage: Optional[BreakageConfig] = field(default_factory=BreakageConfig)
    aggregation: Optional[AggregationConfig] = field(default_factory=AggregationConfig)
    volume_unit: float = 1.0
    number_unit: float = 1.0
    frequency: Optional[Callable] = None
    aggregation_rate: Optional[Callable] = None
    # shape of the daughter distribution, used even when breakage is off
    p: Optional[int] = None
    m: Optional[int] = None

    @property
    def fragments_p(self):
        if self.p is not None:
            return self.p
        return self.breakage.p if self.breakage is not None else BreakageConfig.p

    @property
    def shape_m(self):
        if self.m is not None:
            return self.m
        return self.breakage.m if self.breakage is not None else BreakageConfig.m

    @property
    def has_breakage(self):
        return self.breakage is not None or self.frequency is not None

    @property
    def has_aggregation(self):
        return self.aggregation is not None or self.aggregation_rate is not None


# --- daughter distribution -------------------------------------------------

def interval_index(v_prime, domain, p):
    """Index ``l`` of the interval ``I_l`` containing ``v_prime`` (vectorised).

    ``I_1 = [v_min, 2 v_min]``, ``I_l = ]l v_min, (l+1) v_min]`` and the last
    interval ``I_{2p-1}`` extends up to ``v_max``.
    """
    ratio = np.asarray(v_prime, dtype=float) / domain.v_min
    nearest = np.round(ratio)
    ratio = np.where(np.abs(ratio - nearest) <= 4 * np.finfo(float).eps * ratio, nearest, ratio)
    l = np.ceil(ratio).astype(int) - 1
    return np.clip(l, 1, max(2 * p - 1, 1))


def _count_and_offset(l, p):
    l = np.asarray(l)
    n = np.where(l <= p, l, p)
    k = np.where(l <= p, l, np.where(l == 2 * p - 1, 1, 2 * p - l))
    return n, k


def fragment_count(v_prime, domain, p):
    """Average number of fragments N(v') from a mother particle of volume ``v_prime``."""
    domain.check(v_prime, "v'")
    n, _ = _count_and_offset(interval_index(v_prime, domain, p), p)
    return int(n) if np.ndim(n) == 0 else n


def _weights_table(v_prime, domain, p):
    """Weights g_1..g_{2p-1} for every entry of ``v_prime`` (zero-padded)."""
    l = interval_index(v_prime, domain, p)
    n, k = _count_and_offset(l, p)
    j = 3.0 - 2.0 ** (-(n - 1.0 - k))
    width = 2 * p - 1
    idx = np.arange(1, width + 1)
    n_ = n[..., None]
    # upper half mirrors the lower half about N(v')
    mirror = np.where(idx <= n_, idx, 2 * n_ - idx)
    valid = (mirror >= 1) & (idx <= 2 * n_ - 1)
    indicator = (mirror + 1 - k[..., None]) > 0
    g = np.where(valid & indicator, 1.0 / (j[..., None] * 2.0 ** (n_ - mirror)), 0.0)
    return g, n


def breakage_weights(v_prime, domain, p):
    """Weights ``g_1 .. g_{2N(v')-1}`` of the i-fragment densities at ``v_prime``."""
    domain.check(v_prime, "v'")
    if np.ndim(v_prime) != 0:
        raise TypeError("breakage_weights takes a scalar volume; use weights_table for arrays")
    g, n = _weights_table(np.asarray([v_prime], dtype=float), domain, p)
    return g[0, : 2 * int(n[0]) - 1]


def weights_table(v_prime, domain, p):
    """Vectorised weights, shape ``v_prime.shape + (2p - 1,)``."""
    g, _ = _weights_table(np.asarray(v_prime, dtype=float), domain, p)
    return g


def fragment_density(v, v_prime, i, domain, m):
    """Smooth i-fragment density (i >= 2), zero outside its support."""
    if i < 2:
        raise ValueError("the i = 1 member is a Dirac mass, not a density")
    v = np.asarray(v, dtype=float)
    v_prime = np.asarray(v_prime, dtype=float)
    v_min = domain.v_min
    span = v_prime - i * v_min
    upper = v_prime - (i - 1) * v_min
    inside = (v >= v_min) & (v <= upper) & (span > 0)
    a = m * i + i - m - 2
    with np.errstate(divide="ignore", invalid="ignore"):
        log_const = np.log(i) + gammaln(m * i + i) - gammaln(m + 1) - gammaln(a + 1)
        x = np.clip(v - v_min, 0.0, None)
        y = np.clip(upper - v, 0.0, None)
        log_val = (
            log_const
            + xlogy(m, x)
            + xlogy(a, y)
            - (m * i + i - 1) * np.log(np.where(span > 0, span, 1.0))
        )
        return np.where(inside, np.exp(log_val), 0.0)


DaughterValue = namedtuple("DaughterValue", ["smooth", "atom_weight", "atom_location"])


def daughter_distribution(v, v_prime, kernels):
    """beta(v, v') split into its smooth part and the Dirac atom at ``v = v'``.

    The atom carries weight ``g_1(v')``; it is never folded into ``smooth``.
    """
    domain = kernels.domain
    domain.check(v, "v")
    domain.check(v_prime, "v'")
    v = np.asarray(v, dtype=float)
    v_prime = np.asarray(v_prime, dtype=float)
    smooth = np.where(v > v_prime, 0.0, daughter_smooth(v, v_prime, kernels))
    g1 = weights_table(v_prime, domain, kernels.fragments_p)[..., 0]
    return DaughterValue(smooth, g1, v_prime)


def daughter_smooth(v, v_prime, kernels):
    """Smooth part of beta(v, v') without domain checks (for grids)."""
    domain = kernels.domain
    p, m = kernels.fragments_p, kernels.shape_m
    v = np.asarray(v, dtype=float)
    v_prime = np.asarray(v_prime, dtype=float)
    g = weights_table(v_prime, domain, p)
    smooth = np.zeros(np.broadcast(v, v_prime).shape)
    for i in range(2, 2 * p):
        gi = g[..., i - 1]
        if np.any(gi > 0):
            smooth = smooth + gi * fragment_density(v, v_prime, i, domain, m)
    return smooth


def daughter_moments(v_prime, basis_fn, kernels, n_q):
    """``int m(v) beta(v, v') dv`` for each mother volume, Dirac share included.

    ``basis_fn(v)`` must return basis values along a trailing axis. Each
    i-fragment density is a polynomial on its own support, so a Lobatto rule
    with enough points on that support integrates it exactly.
    """
    domain = kernels.domain
    p, m = kernels.fragments_p, kernels.shape_m
    v_prime = np.asarray(v_prime, dtype=float)
    g = weights_table(v_prime, domain, p)
    out = g[..., 0, None] * basis_fn(v_prime)
    order = out.shape[-1] - 1
    for i in range(2, 2 * p):
        gi = g[..., i - 1]
        if not np.any(gi > 0):
            continue
        degree = m * i + i - 2 + order
        n_i = max(int(n_q), (degree + 4) // 2)
        upper = v_prime - (i - 1) * domain.v_min
        nodes, weights = sub_interval_nodes(n_i, np.full(v_prime.shape, domain.v_min), upper)
        dens = fragment_density(nodes, v_prime[..., None], i, domain, m)
        vals = basis_fn(nodes)
        out = out + gi[..., None] * np.einsum("...q,...q,...qk->...k", weights, dens, vals)
    return out


# --- rates -----------------------------------------------------------------

def breakage_frequency(v, kernels):
    """Breakage frequency Gamma(v); zero outside the domain or when breakage is off."""
    v = np.asarray(v, dtype=float)
    inside = kernels.domain.contains(v)
    if kernels.frequency is not None:
        return np.where(inside, kernels.frequency(v), 0.0)
    b = kernels.breakage
    if b is None:
        return np.zeros_like(v)
    vp = np.where(inside, v, kernels.domain.v_min) * kernels.volume_unit
    rate = (
        b.C1 * b.epsilon ** (1.0 / 3.0) / ((1.0 + b.alpha_d) * vp ** (2.0 / 9.0))
        * np.exp(-b.C2 * b.sigma * (1.0 + b.alpha_d) ** 2 / (b.rho_d * b.epsilon ** (2.0 / 3.0) * vp ** (5.0 / 9.0)))
    )
    return np.where(inside, rate, 0.0)


def aggregation_kernel(v, w, kernels):
    """Aggregation kernel omega(v, w), symmetric, with the ``v + w > v_max`` cutoff."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    dom = kernels.domain
    admissible = dom.contains(v) & dom.contains(w) & (v + w <= dom.v_max * (1.0 + _EDGE_RTOL))
    if kernels.aggregation_rate is not None:
        return np.where(admissible, kernels.aggregation_rate(v, w), 0.0)
    a = kernels.aggregation
    if a is None:
        return np.zeros(np.broadcast(v, w).shape)
    vs = np.where(admissible, v, dom.v_min) * kernels.volume_unit
    ws = np.where(admissible, w, dom.v_min) * kernels.volume_unit
    cv, cw = np.cbrt(vs), np.cbrt(ws)
    damping = a.k_omega * a.eta_c * a.rho_c * a.epsilon / (a.sigma ** 2 * (1.0 + a.alpha_d) ** 3)
    rate = (
        a.C_omega / (1.0 + a.alpha_d)
        * (cv + cw) ** 2
        * a.epsilon ** (1.0 / 3.0)
        * np.sqrt(vs ** (2.0 / 9.0) + ws ** (2.0 / 9.0))
        * np.exp(-damping * (cv * cw / (cv + cw)) ** 4)
    )
    return np.where(admissible, rate * kernels.number_unit, 0.0)
