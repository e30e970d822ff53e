"""Sectional finite-volume reference solver in conservative mass-density form.

The volume interval is split into ``n_v`` equal cells; cell averages
``f_i`` evolve through aggregation and breakage fluxes across cell edges,
so total mass ``sum v_i f_i dv`` changes only through the (vanishing)
boundary fluxes.

All flux routines accept stacked states: the volume axis is the last one.
"""
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import TimeStepError
from .kernels import aggregation_kernel, breakage_frequency, daughter_smooth

# states processed together in the aggregation flux (keeps the work buffers in cache)
_CHUNK_ROWS = 128
MAX_HALVINGS = 20


@dataclass(frozen=True)
class VolumeGrid:
    v_min: float
    v_max: float
    n_v: int

    def __post_init__(self):
        if self.n_v < 1:
            raise ValueError("need at least one volume cell")
        if not 0 < self.v_min < self.v_max:
            raise ValueError("need 0 < v_min < v_max")

    @classmethod
    def on(cls, domain, n_v):
        return cls(domain.v_min, domain.v_max, int(n_v))

    @property
    def dv(self):
        return (self.v_max - self.v_min) / self.n_v

    @cached_property
    def edges(self):
        e = self.v_min + np.arange(self.n_v + 1) * self.dv
        e[-1] = self.v_max
        return e

    @cached_property
    def midpoints(self):
        e = self.edges
        return 0.5 * (e[1:] + e[:-1])

    @property
    def zeta(self):
        return int(np.ceil(self.v_min / self.dv - 0.5))

    def cell_averages(self, cdf):
        """Cell averages from an antiderivative ``cdf`` of the density."""
        c = cdf(self.edges)
        return np.diff(c, axis=-1) / self.dv


class SectionalOperator:
    """Flux matrices for one grid and kernel set."""

    def __init__(self, grid, kernels):
        self.grid, self.kernels = grid, kernels
        n, dv, v = grid.n_v, grid.dv, grid.midpoints
        zeta = grid.zeta
        self.zeta = zeta

        # breakage: J_{i+1/2} = -sum_{l>=i+1} f_l Gamma_l dv^2 sum_{j<=i} v_j beta(v_j, v_l)
        self.has_breakage = kernels.has_breakage
        if self.has_breakage:
            gam = breakage_frequency(v, kernels)
            beta = daughter_smooth(v[:, None], v[None, :], kernels)  # [j, l]
            inner = np.vstack([np.zeros((1, n)), np.cumsum(v[:, None] * beta, axis=0)])  # [i, l]
            edge = np.arange(n + 1)[:, None]
            self.breakage_matrix = np.where(np.arange(n)[None, :] >= edge, -dv * dv * gam[None, :] * inner, 0.0)
            self.breakage_matrix[-1] = 0.0

        self.has_aggregation = kernels.has_aggregation
        if self.has_aggregation:
            self.omega = aggregation_kernel(v[:, None], v[None, :], kernels)  # [j, l]
            # partial length of the cell containing the lower inner limit
            self.partial = grid.v_min + (0.5 - zeta) * dv

    # -- fluxes on all edges, shape (..., n_v + 1) --
    def breakage_fluxes(self, f):
        f = np.asarray(f, dtype=float)
        if not self.has_breakage:
            return np.zeros(f.shape[:-1] + (self.grid.n_v + 1,))
        return f @ self.breakage_matrix.T

    def aggregation_fluxes(self, f):
        f = np.asarray(f, dtype=float)
        n = self.grid.n_v
        batch = f.shape[:-1]
        out = np.zeros(batch + (n + 1,))
        if not self.has_aggregation or n < 2:
            return out
        flat = f.reshape(-1, n)
        res = out.reshape(-1, n + 1)
        for s in range(0, flat.shape[0], _CHUNK_ROWS):
            res[s:s + _CHUNK_ROWS, 1:n] = self._aggregation_interior(flat[s:s + _CHUNK_ROWS])
        return out

    def _aggregation_interior(self, f):
        """Interior edges of ``sum_{l < e} a_l sum_k f_k omega_kl c(k + l - e)``.

        The weight ``c`` is ``dv`` when ``k + l >= e - zeta``, the partial
        length at ``k + l = e - zeta - 1`` and 0 below, so the double sum
        reduces to sums along anti-diagonals ``D_s = sum_{k + l = s}``.
        """
        n, dv, zeta = self.grid.n_v, self.grid.dv, self.zeta
        a = self.grid.midpoints * f * dv  # v_l f_l dv
        diag = np.zeros((f.shape[0], 2 * n))
        buf = np.empty_like(a)
        for k in range(n):
            np.multiply(a, self.omega[k], out=buf)
            buf *= f[:, k:k + 1]
            diag[:, k:k + n] += buf
        diag_tail = np.cumsum(diag[:, ::-1], axis=1)[:, ::-1]
        # mothers l >= e lie above the edge and are removed again
        above = a * (f @ self.omega)
        above_tail = np.cumsum(above[:, ::-1], axis=1)[:, ::-1]
        e = np.arange(1, n)
        p = e - zeta - 1
        partial = np.where(p >= 0, diag[:, np.maximum(p, 0)], 0.0)
        return dv * diag_tail[:, np.maximum(e - zeta, 0)] + self.partial * partial - dv * above_tail[:, e]

    def rhs(self, f):
        """``df_i/dt`` for a stacked state."""
        j = self.aggregation_fluxes(f) + self.breakage_fluxes(f)
        return -(j[..., 1:] - j[..., :-1]) / (self.grid.dv * self.grid.midpoints)


_OPS = {}


def sectional_operator(grid, kernels):
    key = (grid, kernels)
    op = _OPS.get(key)
    if op is None:
        if len(_OPS) > 8:
            _OPS.clear()
        op = _OPS[key] = SectionalOperator(grid, kernels)
    return op


def _edge(fluxes, i, n_v):
    if i is None:
        return fluxes
    if not 0 <= i <= n_v:
        raise IndexError(f"edge index {i} outside 0..{n_v}")
    return fluxes[..., i]


def breakage_flux(f, grid, kernels, i=None):
    """Mass flux through edge ``v_{i+1/2}`` (all edges when ``i`` is None)."""
    return _edge(sectional_operator(grid, kernels).breakage_fluxes(f), i, grid.n_v)


def aggregation_flux(f, grid, kernels, i=None):
    """Mass flux through edge ``v_{i+1/2}`` (all edges when ``i`` is None)."""
    return _edge(sectional_operator(grid, kernels).aggregation_fluxes(f), i, grid.n_v)


def fvs_step(f, grid, kernels, dt):
    """One forward-Euler step; raises ``TimeStepError`` if a cell turns negative."""
    f = np.asarray(f, dtype=float)
    if dt == 0:
        return f.copy()
    new = f + dt * sectional_operator(grid, kernels).rhs(f)
    if np.any(new < 0):
        bad = np.unravel_index(np.argmin(new), new.shape)
        raise TimeStepError(f"negative cell value {new[bad]:.3e} at index {bad} with dt = {dt:g}")
    return new


def fvs_advance(f, grid, kernels, dt, max_halvings=MAX_HALVINGS):
    """Advance by ``dt``, halving the sub-step after a negative-cell failure.

    Returns the new state and the number of sub-steps taken.
    """
    for halvings in range(max_halvings + 1):
        sub = dt / 2 ** halvings
        try:
            state = f
            for _ in range(2 ** halvings):
                state = fvs_step(state, grid, kernels, sub)
            return state, 2 ** halvings
        except TimeStepError:
            continue
    raise TimeStepError(f"no admissible step after {max_halvings} halvings of dt = {dt:g}")


def zeroth_moment(f, grid):
    return grid.dv * np.sum(f, axis=-1)


def total_mass(f, grid):
    return grid.dv * np.sum(np.asarray(f) * grid.midpoints, axis=-1)
