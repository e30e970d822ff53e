"""Two-dimensional advection-diffusion of densities, moments and QMOM atoms.

Scalars are transported with an upwind-split MUSCL scheme (minmod slopes)
plus a centred diffusion flux. Walls carry zero normal velocity and zero
diffusive flux, so domain integrals are conserved by transport.

Arrays on the grid are indexed ``[i, j, ...]`` with ``i`` along ``x``;
any trailing axes (volume cells, quadrature nodes, atoms) are carried along.
"""
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.sparse import bmat, diags, identity, kron
from scipy.sparse.linalg import splu

from . import basis as _basis
from .closures import maxent_solve_batch, qmom_atoms, wheeler_invert_batch
from .errors import PBEError, TimeStepError

_CFL_SLACK = 1e-12


@dataclass(frozen=True)
class Grid2D:
    n_x: int
    n_y: int
    x_min: float = 0.0
    x_max: float = 1.0
    y_min: float = 0.0
    y_max: float = 1.0

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1:
            raise ValueError("grid needs at least one cell per direction")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("empty spatial domain")

    @property
    def dx(self):
        return (self.x_max - self.x_min) / self.n_x

    @property
    def dy(self):
        return (self.y_max - self.y_min) / self.n_y

    @property
    def shape(self):
        return (self.n_x, self.n_y)

    @property
    def cell_area(self):
        return self.dx * self.dy

    @cached_property
    def x(self):
        return self.x_min + (np.arange(self.n_x) + 0.5) * self.dx

    @cached_property
    def y(self):
        return self.y_min + (np.arange(self.n_y) + 0.5) * self.dy

    def integrate(self, field):
        """Midpoint-rule integral over the domain (leading two axes)."""
        return self.cell_area * np.sum(field, axis=(0, 1))


@dataclass(frozen=True, eq=False)
class VelocityField:
    u: np.ndarray
    z: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if u.shape != z.shape or u.ndim != 2:
            raise ValueError("u and z must be matching 2-D arrays")
        d = np.broadcast_to(np.asarray(self.D, dtype=float), u.shape).copy()
        if np.any(d < 0):
            raise ValueError("diffusion rate must be nonnegative")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "D", d)

    @classmethod
    def uniform(cls, grid, u=0.0, z=0.0, D=0.0):
        shape = grid.shape
        return cls(np.full(shape, float(u)), np.full(shape, float(z)), np.full(shape, float(D)))

    @cached_property
    def edge_u(self):
        """``u`` on x-edges ``i+1/2``, shape ``(n_x + 1, n_y)``; walls are zero."""
        e = np.zeros((self.u.shape[0] + 1, self.u.shape[1]))
        e[1:-1] = 0.5 * (self.u[1:] + self.u[:-1])
        return e

    @cached_property
    def edge_z(self):
        e = np.zeros((self.z.shape[0], self.z.shape[1] + 1))
        e[:, 1:-1] = 0.5 * (self.z[:, 1:] + self.z[:, :-1])
        return e

    def divergence(self, grid):
        """Discrete divergence of the edge velocities, per cell."""
        return np.diff(self.edge_u, axis=0) / grid.dx + np.diff(self.edge_z, axis=1) / grid.dy


def minmod(a, b, c):
    """Argument of smallest modulus when all share a sign, else zero."""
    a, b, c = np.broadcast_arrays(*(np.asarray(t, dtype=float) for t in (a, b, c)))
    same = ((a > 0) & (b > 0) & (c > 0)) | ((a < 0) & (b < 0) & (c < 0))
    mag = np.minimum(np.minimum(np.abs(a), np.abs(b)), np.abs(c))
    out = np.where(same, np.sign(a) * mag, 0.0)
    return out if out.ndim else float(out)


def _slopes(f, axis):
    """Limited slopes along ``axis`` with zero-gradient ghost cells."""
    f = np.moveaxis(f, axis, 0)
    pad = np.concatenate([f[:1], f, f[-1:]], axis=0)
    fwd = pad[2:] - pad[1:-1]
    bwd = pad[1:-1] - pad[:-2]
    return np.moveaxis(minmod(2.0 * fwd, 0.5 * (pad[2:] - pad[:-2]), 2.0 * bwd), 0, axis)


def _trail(arr, ndim):
    return arr.reshape(arr.shape + (1,) * (ndim - arr.ndim))


def _edge_values(f, sigma, axis):
    """Interface values ``(f^+, f^-)`` at interior edges along ``axis``."""
    f, sigma = np.moveaxis(f, axis, 0), np.moveaxis(sigma, axis, 0)
    plus = f[:-1] + 0.5 * sigma[:-1]
    minus = f[1:] - 0.5 * sigma[1:]
    return np.moveaxis(plus, 0, axis), np.moveaxis(minus, 0, axis)


def _advective_flux(plus, minus, edge_vel, axis):
    """Upwind-split flux on interior edges; ``edge_vel`` includes wall edges."""
    inner = edge_vel[1:-1] if axis == 0 else edge_vel[:, 1:-1]
    vel = _trail(inner, plus.ndim)
    return np.maximum(vel, 0.0) * plus + np.minimum(vel, 0.0) * minus


def _diffusive_flux(f, d, axis, h):
    df = np.diff(f, axis=axis) / h
    dm = d[1:] + d[:-1] if axis == 0 else d[:, 1:] + d[:, :-1]
    return 0.5 * _trail(dm, f.ndim) * df


def _divergence_update(f, flux_x, flux_y, grid, dt):
    """``f - dt * div(flux)`` with zero flux through the walls."""
    out = f.copy()
    out[:-1] -= dt / grid.dx * flux_x
    out[1:] += dt / grid.dx * flux_x
    out[:, :-1] -= dt / grid.dy * flux_y
    out[:, 1:] += dt / grid.dy * flux_y
    return out


def cfl_spatial(vel, grid, safety=1.0):
    """Largest positivity-preserving step for the transport scheme.

    The bound ``max(A / theta, B / (1 - theta)) <= 1 / dt`` with advective
    part ``A`` and diffusive part ``B`` is minimised over ``theta`` in closed
    form at ``theta = A / (A + B)``, giving ``dt = 1 / (A + B)``.
    """
    if not 0.0 < safety <= 1.0:
        raise ValueError("safety factor must lie in (0, 1]")
    u, z, d = vel.u, vel.z, vel.D
    a = np.max(np.abs(u[1:] + u[:-1]), initial=0.0)
    b = np.max(np.abs(z[:, 1:] + z[:, :-1]), initial=0.0)
    # zero-gradient ghosts for D at the walls
    dp = np.pad(d, 1, mode="edge")
    c = np.max(dp[2:, 1:-1] + 2 * d + dp[:-2, 1:-1])
    e = np.max(dp[1:-1, 2:] + 2 * d + dp[1:-1, :-2])
    adv = max(2 * a / grid.dx, 2 * b / grid.dy)
    dif = 0.5 * (c / grid.dx ** 2 + e / grid.dy ** 2)
    rate = adv + dif
    return np.inf if rate == 0 else safety / rate


def _check_cfl(vel, grid, dt):
    limit = cfl_spatial(vel, grid)
    if dt > limit * (1.0 + _CFL_SLACK):
        raise TimeStepError(f"dt = {dt:g} exceeds the transport bound {limit:g}")


def advect_diffuse_step(field, vel, grid, dt, check=True):
    """One forward-Euler transport step of a scalar field (trailing axes allowed)."""
    f = np.asarray(field, dtype=float)
    if f.shape[:2] != grid.shape:
        raise ValueError(f"field shape {f.shape[:2]} does not match grid {grid.shape}")
    if check:
        _check_cfl(vel, grid, dt)
    if dt == 0:
        return f.copy()
    fx = _advective_flux(*_edge_values(f, _slopes(f, 0), 0), vel.edge_u, 0)
    fy = _advective_flux(*_edge_values(f, _slopes(f, 1), 1), vel.edge_z, 1)
    fx -= _diffusive_flux(f, vel.D, 0, grid.dx)
    fy -= _diffusive_flux(f, vel.D, 1, grid.dy)
    return _divergence_update(f, fx, fy, grid, dt)


# --- moment transport -----------------------------------------------------

def transport_qmom(gamma, weights, abscissas, vel, grid, dt, check=True):
    """QMOM transport: limited weights with frozen upwind abscissas.

    Diffusion acts linearly on the moments. Returns the new moments.
    """
    if check:
        _check_cfl(vel, grid, dt)
    order = gamma.shape[-1] - 1
    mom = _basis.monomial(abscissas, order)  # (nx, ny, n, K)
    fluxes = []
    for axis, edge_vel in ((0, vel.edge_u), (1, vel.edge_z)):
        plus_w, minus_w = _edge_values(weights, _slopes(weights, axis), axis)
        m_left = mom[:-1] if axis == 0 else mom[:, :-1]
        m_right = mom[1:] if axis == 0 else mom[:, 1:]
        inner = edge_vel[1:-1] if axis == 0 else edge_vel[:, 1:-1]
        vel_e = inner[..., None]
        flux = (np.maximum(vel_e, 0.0) * np.einsum("ija,ijak->ijk", plus_w, m_left)
                + np.minimum(vel_e, 0.0) * np.einsum("ija,ijak->ijk", minus_w, m_right))
        flux -= _diffusive_flux(gamma, vel.D, axis, grid.dx if axis == 0 else grid.dy)
        fluxes.append(flux)
    return _divergence_update(gamma, fluxes[0], fluxes[1], grid, dt)


def transport_moments(gamma, closure, vel, grid, rule, dt, domain=None, params=None, check=True,
                      reconstruction=None):
    """Transport a field of moment vectors ``gamma`` (shape ``(n_x, n_y, N+1)``).

    ``closure`` is ``"PN"`` (Legendre moments), ``"MN"`` or ``"QMOM"``
    (monomial moments). Continuous closures transport the reconstruction's
    values at the quadrature nodes with the scalar scheme; QMOM limits the
    atom weights. ``reconstruction`` may pass those nodal values (or the
    ``(weights, abscissas)`` pair for QMOM) when they are already known.
    Closure failures are re-raised with the cell coordinates in the message.
    """
    gamma = np.asarray(gamma, dtype=float)
    if check:
        _check_cfl(vel, grid, dt)
    if dt == 0:
        return gamma.copy()
    if closure == "QMOM":
        w, x = reconstruction if reconstruction is not None else qmom_atoms_field(gamma, grid)
        return transport_qmom(gamma, w, x, vel, grid, dt, check=False)
    if domain is None:
        raise ValueError("transport_moments needs the volume domain")
    f = reconstruction if reconstruction is not None else nodal_values(gamma, closure, grid, rule, domain, params)
    f_new = advect_diffuse_step(f, vel, grid, dt, check=False)
    if closure not in ("PN", "MN"):
        raise ValueError(f"unknown closure {closure!r}")
    # increment form: exact conservation; for MN the result differs from the
    # moments of the positive values f_new only by the solver residual
    b = _basis.LEGENDRE if closure == "PN" else _basis.MONOMIAL
    return gamma + moments_at_nodes(f_new - f, rule, gamma.shape[-1] - 1, b, domain)


def moments_at_nodes(values, rule, order, basis, domain):
    """``sum_a w_a m(v_a) values_a`` over the trailing node axis."""
    m = _basis.evaluate(basis, rule.nodes, order, domain.v_min, domain.v_max)
    return (values * rule.weights) @ m


def nodal_values(gamma, closure, grid, rule, domain, params=None):
    """Reconstruction values at the quadrature nodes for every cell."""
    flat = gamma.reshape(-1, gamma.shape[-1])
    order = flat.shape[-1] - 1
    if closure == "PN":
        coeffs = flat * (2.0 * np.arange(order + 1) + 1.0) / domain.length
        f = coeffs @ _basis.legendre(rule.nodes, order, domain.v_min, domain.v_max).T
    elif closure == "MN":
        f = _cellwise(maxent_solve_batch, flat, grid, rule, domain, params).node_values
    else:
        raise ValueError(f"no nodal values for closure {closure!r}")
    return f.reshape(gamma.shape[:-1] + (rule.size,))


def qmom_atoms_field(gamma, grid):
    """Wheeler inversion of every cell; errors carry the cell coordinates."""
    flat = gamma.reshape(-1, gamma.shape[-1])
    n = qmom_atoms(flat.shape[-1] - 1)
    try:
        w, x = wheeler_invert_batch(flat, n)
    except PBEError as exc:
        raise _with_cell(exc, grid) from exc
    return w.reshape(grid.shape + (n,)), x.reshape(grid.shape + (n,))


def _cellwise(solver, flat, grid, *args):
    try:
        return solver(flat, *args)
    except PBEError as exc:
        raise _with_cell(exc, grid) from exc


def _with_cell(exc, grid):
    cell = getattr(exc, "cell", None)
    if cell is not None and np.ndim(cell) == 0:
        exc.cell = tuple(int(c) for c in np.unravel_index(int(cell), grid.shape))
        exc.args = (f"{exc.args[0]} (cell {exc.cell})",) + exc.args[1:]
    return exc


# --- lid-driven cavity ----------------------------------------------------

def _laplacian_1d(n, h):
    """Cell-centred second difference with antisymmetric ghosts (zero wall value)."""
    main = -2.0 * np.ones(n)
    main[0] = main[-1] = -3.0
    return diags([np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1]) / h ** 2


def _center_diff_1d(n, h):
    # antisymmetric ghosts: the wall value is zero
    d = diags([-np.ones(n - 1), np.ones(n - 1)], [-1, 1]).tolil()
    d[0, 0] = 1.0
    d[n - 1, n - 1] = -1.0
    return d.tocsr() / (2.0 * h)


def _stream_velocities(psi, grid):
    """Cell-centred velocities from a cell-centred streamfunction (zero on walls)."""
    p = np.pad(psi, 1)
    p[0, :], p[-1, :] = -p[1, :], -p[-2, :]
    p[:, 0], p[:, -1] = -p[:, 1], -p[:, -2]
    u = (p[1:-1, 2:] - p[1:-1, :-2]) / (2.0 * grid.dy)
    z = -(p[2:, 1:-1] - p[:-2, 1:-1]) / (2.0 * grid.dx)
    return u, z


def cavity_velocity(grid, Re=5.0, lid_speed=1.0, D=0.0, tol=1e-10, max_iter=200, relax=1.0):
    """Steady lid-driven cavity flow from a vorticity-streamfunction solve.

    The lid (``y = y_max``) moves in ``+x`` with ``lid_speed``; the kinematic
    viscosity is ``lid_speed * width / Re``. Each Picard iteration solves
    the coupled linear system for streamfunction and vorticity with the
    advecting velocity lagged; raises ``PBEError`` if the update does not drop below
    ``tol`` (relative) within ``max_iter`` sweeps.
    """
    if not Re > 0:
        raise ValueError("Reynolds number must be positive")
    nx, ny, dx, dy = grid.n_x, grid.n_y, grid.dx, grid.dy
    if lid_speed == 0:
        zero = np.zeros(grid.shape)
        return VelocityField(zero, zero.copy(), D)
    nu = abs(lid_speed) * (grid.x_max - grid.x_min) / Re
    ix, iy = identity(nx), identity(ny)
    lap = (kron(_laplacian_1d(nx, dx), iy) + kron(ix, _laplacian_1d(ny, dy))).tocsc()
    ddx = kron(_center_diff_1d(nx, dx), iy)
    ddy = kron(ix, _center_diff_1d(ny, dy))

    n = nx * ny
    # wall vorticity from the one-sided Taylor expansion of psi about the wall:
    # w_wall = -8 psi_0 / h^2 (- 4 U / h on the lid); its ghost value
    # 2 w_wall - w_0 splits into the antisymmetric part kept in the matrices
    # and a source linear in psi
    cx, cy = -16.0 / dx ** 2, -16.0 / dy ** 2
    lid = np.zeros(grid.shape)
    lid[:, -1] = -8.0 * lid_speed / dy

    def wall_terms(u, z):
        coef = np.zeros(grid.shape)
        coef[:, 0] += cy * (nu / dy ** 2 + z[:, 0] / (2.0 * dy))
        coef[:, -1] += cy * (nu / dy ** 2 - z[:, -1] / (2.0 * dy))
        coef[0, :] += cx * (nu / dx ** 2 + u[0, :] / (2.0 * dx))
        coef[-1, :] += cx * (nu / dx ** 2 - u[-1, :] / (2.0 * dx))
        lid_src = lid * (nu / dy ** 2 - z / (2.0 * dy))
        return diags(coef.ravel()), lid_src.ravel()

    u = z = np.zeros(grid.shape)
    psi = np.zeros(n)
    resid = np.inf
    for it in range(max_iter):
        wall, lid_src = wall_terms(u, z)
        transport = nu * lap - diags(u.ravel()) @ ddx - diags(z.ravel()) @ ddy
        system = bmat([[lap, identity(n)], [wall, transport]]).tocsc()
        sol = splu(system).solve(np.concatenate([np.zeros(n), -lid_src]))
        psi_new = sol[:n]
        if not np.all(np.isfinite(psi_new)):
            raise PBEError("cavity solve produced non-finite values")
        change = np.max(np.abs(psi_new - psi)) / max(np.max(np.abs(psi_new)), 1e-300)
        psi = psi + relax * (psi_new - psi)
        u, z = _stream_velocities(psi.reshape(grid.shape), grid)
        resid = change
        if resid < tol:
            break
    else:
        raise PBEError(f"cavity solve did not converge (relative update {resid:.3e})")
    u, z = _stream_velocities(psi.reshape(grid.shape), grid)
    return VelocityField(u, z, D)


def save_velocity(vel, u_path, z_path):
    """Write ``u`` and ``z`` as whitespace-separated matrices (one row per grid row ``j``)."""
    np.savetxt(u_path, vel.u.T)
    np.savetxt(z_path, vel.z.T)


def load_velocity(u_path, z_path, D=0.0, grid=None):
    u = np.atleast_2d(np.loadtxt(u_path)).T
    z = np.atleast_2d(np.loadtxt(z_path)).T
    if grid is not None and u.shape != grid.shape:
        raise ValueError(f"velocity file shape {u.shape} does not match grid {grid.shape}")
    return VelocityField(u, z, D)
