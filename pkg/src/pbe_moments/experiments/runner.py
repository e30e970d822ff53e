"""Running the breakage, aggregation and cavity experiments.

Moment closures are advanced as stacks of moment vectors (one per spatial
cell, a single one for the homogeneous experiments). Every macro step of
the configured length is split into sub-steps no longer than the
realizability bounds of the transport and reaction parts (Lie splitting:
transport first, then reaction).
"""
import csv
import json
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import erf, erfc

from .. import basis as _basis
from ..closures import MomentVector, maxent_solve_batch, qmom_atoms, realizable_q, wheeler_invert_batch
from ..errors import PBEError, TimeStepError
from ..moment_rhs import source_operator, mass_moment
from ..quadrature import gauss_lobatto
from ..sectional import VolumeGrid, fvs_advance, sectional_operator, total_mass, zeroth_moment
from ..spatial import Grid2D, advect_diffuse_step, cavity_velocity, cfl_spatial, load_velocity, transport_moments
from .config import ConfigError, ExperimentConfig

# points of the rule used to compute initial moments
_INIT_POINTS = 400
PHASES = ("closure", "sources", "transport", "velocity", "total")


class RunFailure(PBEError):
    """A run aborted; ``report`` holds the data collected up to ``time``."""

    def __init__(self, message, report, time, cause):
        super().__init__(message)
        self.report, self.time, self.cause = report, time, cause


@dataclass
class RunReport:
    config: ExperimentConfig
    times: list = field(default_factory=list)
    gamma0: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    timings: dict = field(default_factory=lambda: dict.fromkeys(PHASES, 0.0))
    substeps: int = 0
    newton_solves: int = 0
    newton_iterations: int = 0
    newton_max_iterations: int = 0
    max_gradient_norm: float = 0.0
    regularization: Counter = field(default_factory=Counter)
    realizability_checks: int = 0
    realizability_failures: int = 0
    min_value: float = np.inf
    e2: Optional[float] = None
    final_state: object = field(default=None, repr=False)

    @property
    def spatial(self):
        return self.config.kind == "cavity"

    def series(self):
        """``(times, gamma0)`` as arrays; cavity fields have shape ``(steps, n_x, n_y)``."""
        return np.asarray(self.times), np.asarray(self.gamma0)

    def totals(self):
        """Domain integral of gamma_0 per time (the series itself when homogeneous)."""
        t, g = self.series()
        if not self.spatial:
            return g
        grid = grid_of(self.config)
        return grid.integrate(np.moveaxis(g, 0, -1))

    def summary(self):
        return {
            "kind": self.config.kind,
            "closure": self.config.closure,
            "order": self.config.order,
            "final_time": self.times[-1] if self.times else None,
            "e2": self.e2,
            "timings": {k: round(v, 6) for k, v in self.timings.items()},
            "substeps": self.substeps,
            "newton": {
                "solves": self.newton_solves,
                "iterations": self.newton_iterations,
                "max_iterations": self.newton_max_iterations,
                "max_gradient_norm": self.max_gradient_norm,
            },
            "regularization": {repr(k): v for k, v in sorted(self.regularization.items())},
            "realizability": {"checks": self.realizability_checks, "failures": self.realizability_failures},
        }

    def write(self, directory):
        """CSV of ``time, gamma0`` (domain integral for the cavity), snapshots and a JSON summary."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"{self.config.kind}_{self.config.closure}" + ("" if self.config.closure == "FVS" else f"_N{self.config.order}")
        t, _ = self.series()
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "gamma0", "mass"])
            for row in zip(t, self.totals(), self.mass):
                w.writerow([repr(float(x)) for x in row])
        if self.spatial and len(t):
            every = self.config.snapshot_every
            keep = range(0, len(t), every) if every else [len(t) - 1]
            for k in keep:
                np.savetxt(out / f"{stem}_gamma0_t{t[k]:.4f}.txt", np.asarray(self.gamma0[k]).T)
        (out / f"{stem}.json").write_text(json.dumps(self.summary(), sort_keys=True) + "\n")
        return out / f"{stem}.csv"


# --- setup ----------------------------------------------------------------

def grid_of(config):
    return Grid2D(config.n_x, config.n_y)


def _gaussian_cdf(v, config):
    mu, s = config.initial_center, config.initial_width
    return 0.5 * config.initial_number * (1.0 + erf((v - mu) / (np.sqrt(2.0) * s)))


def volume_density(v, config):
    mu, s = config.initial_center, config.initial_width
    return config.initial_number / (np.sqrt(2.0 * np.pi) * s) * np.exp(-0.5 * ((v - mu) / s) ** 2)


def spatial_profile(config):
    """Cell averages of the spatial Gaussian factor of the cavity initial condition.

    The prefactor ``1 / (4 pi^2 w^2)`` is used as given for the experiment.
    """
    grid = grid_of(config)
    w = config.width

    def averages(edges, center, h):
        z = (edges - center) / (np.sqrt(2.0) * w)
        lo, hi = z[:-1], z[1:]
        # erfc differences in the tails keep far cells positive instead of 0
        mass = np.where(lo > 0, erfc(lo) - erfc(hi), np.where(hi < 0, erfc(-hi) - erfc(-lo), erf(hi) - erf(lo)))
        return np.sqrt(2.0 * np.pi) * w * 0.5 * mass / h

    ex = grid.x_min + np.arange(grid.n_x + 1) * grid.dx
    ey = grid.y_min + np.arange(grid.n_y + 1) * grid.dy
    ax = averages(ex, config.center_x, grid.dx)
    ay = averages(ey, config.center_y, grid.dy)
    return np.outer(ax, ay) / (4.0 * np.pi ** 2 * w ** 2)


def moment_basis(closure):
    return _basis.LEGENDRE if closure == "PN" else _basis.MONOMIAL


def initial_moments(config):
    """Initial state: moment vector(s), or sectional cell averages for ``FVS``.

    Cavity states carry the two spatial axes in front.
    """
    dom = config.domain
    if config.closure == "FVS":
        grid = VolumeGrid.on(dom, config.n_v)
        state = grid.cell_averages(lambda v: _gaussian_cdf(v, config))
    else:
        rule = gauss_lobatto(_INIT_POINTS, dom)
        m = _basis.evaluate(moment_basis(config.closure), rule.nodes, config.order, dom.v_min, dom.v_max)
        state = (rule.weights * volume_density(rule.nodes, config)) @ m
    if config.kind == "cavity":
        state = spatial_profile(config)[..., None] * state
    return state


# --- moment engine ----------------------------------------------------------

class _MomentEngine:
    """Batched closure, sources and bounds for a stack of moment vectors."""

    def __init__(self, config, report, check_realizability=False):
        self.cfg, self.report = config, report
        self.closure = config.closure
        self.domain = config.domain
        self.kernels = config.kernels()
        self.rule = gauss_lobatto(config.n_q, self.domain)
        self.params = config.newton_params()
        self.basis = moment_basis(self.closure)
        self.order = config.order
        self.op = source_operator(self.kernels, self.rule, self.order, self.basis)
        self.check = check_realizability
        if self.closure == "QMOM":
            self.atoms = qmom_atoms(self.order)

    def close(self, gamma):
        """Reconstruction data for every row of ``gamma``; may regularise rows in place."""
        rep = self.report
        t0 = time.perf_counter()
        if self.closure == "PN":
            coeffs = gamma * (2.0 * np.arange(self.order + 1) + 1.0) / self.domain.length
            recon = {"coeffs": coeffs, "nodes": coeffs @ self.op.legendre_nodes.T}
        elif self.closure == "MN":
            res = maxent_solve_batch(gamma, self.rule, self.domain, self.params)
            rep.newton_solves += len(res.iterations)
            rep.newton_iterations += int(res.iterations.sum())
            rep.newton_max_iterations = max(rep.newton_max_iterations, int(res.iterations.max()))
            rep.max_gradient_norm = max(rep.max_gradient_norm, float(res.gradient_norm.max()))
            rep.regularization.update(float(r) for r in res.regularization)
            reg = res.regularization > 0
            gamma[reg] = res.regularized_moments[reg]
            recon = {"multipliers": res.legendre_multipliers,
                     "nodes": np.exp(res.legendre_multipliers @ self.op.legendre_nodes.T)}
        else:
            w, x = wheeler_invert_batch(gamma, self.atoms)
            recon = {"weights": w, "abscissas": x}
        rep.timings["closure"] += time.perf_counter() - t0
        return recon

    def _pairs(self, recon):
        if self.closure == "PN":
            return np.einsum("abk,ck->cab", self.op.legendre_pairs, recon["coeffs"])
        return np.exp(np.einsum("abk,ck->cab", self.op.legendre_pairs, recon["multipliers"]))

    def reaction(self, recon):
        """``(total source, step bound)`` per row."""
        t0 = time.perf_counter()
        if self.closure == "QMOM":
            src = self.op.qmom(recon["weights"], recon["abscissas"])
            agg, brk = self.op.qmom_cfl_rates(recon["weights"], recon["abscissas"])
        else:
            pairs = self._pairs(recon)
            src = self.op.continuous(recon["nodes"], pairs)
            agg, brk = self.op.continuous_cfl_rates(recon["nodes"], pairs)
        rate = float(np.max(np.maximum(agg, brk), initial=0.0))
        bound = np.inf if rate == 0 else self.cfg.cfl_safety / rate
        self.report.timings["sources"] += time.perf_counter() - t0
        return src.total, bound

    def react(self, gamma, dt):
        """Advance the reaction part by ``dt`` in realizability-bounded pieces."""
        left = dt
        while left > 0:
            recon = self.close(gamma)
            total, bound = self.reaction(recon)
            h = min(left, bound)
            if left - h < 1e-12 * dt:
                h = left
            gamma = gamma + h * total
            left -= h
            self.report.substeps += 1
            self.verify(gamma)
        return gamma

    def verify(self, gamma):
        """Count realizability checks of MN states when checking is on."""
        if not self.check or self.closure != "MN":
            return
        for row in gamma:
            self.report.realizability_checks += 1
            if not realizable_q(MomentVector(row, self.basis, self.domain), self.rule):
                self.report.realizability_failures += 1

    def mass(self, gamma):
        return mass_moment(gamma, self.basis, self.domain)


def _flush_failure(report, t, exc, config):
    if config.output_dir:
        report.write(config.output_dir)
    return RunFailure(f"{type(exc).__name__} at t = {t:.6g}: {exc}", report, t, exc)


def _run_moments_homogeneous(config, report, check):
    eng = _MomentEngine(config, report, check)
    gamma = np.asarray(initial_moments(config), dtype=float)[None, :].copy()
    dt, t = config.time_step, 0.0
    report.times.append(0.0)
    report.gamma0.append(float(gamma[0, 0]))
    report.mass.append(float(eng.mass(gamma)[0]))
    for k in range(config.steps):
        try:
            gamma = eng.react(gamma, dt)
        except PBEError as exc:
            raise _flush_failure(report, t, exc, config) from exc
        t = (k + 1) * dt
        report.times.append(t)
        report.gamma0.append(float(gamma[0, 0]))
        report.mass.append(float(eng.mass(gamma)[0]))
    return gamma[0]


def _run_fvs_homogeneous(config, report):
    grid = VolumeGrid.on(config.domain, config.n_v)
    kernels = config.kernels()
    f = initial_moments(config)
    sectional_operator(grid, kernels)
    dt, t = config.time_step, 0.0
    report.times.append(0.0)
    report.gamma0.append(float(zeroth_moment(f, grid)))
    report.mass.append(float(total_mass(f, grid)))
    for k in range(config.steps):
        t0 = time.perf_counter()
        try:
            f, n = fvs_advance(f, grid, kernels, dt)
        except PBEError as exc:
            raise _flush_failure(report, t, exc, config) from exc
        report.timings["sources"] += time.perf_counter() - t0
        report.substeps += n
        t = (k + 1) * dt
        report.times.append(t)
        report.gamma0.append(float(zeroth_moment(f, grid)))
        report.mass.append(float(total_mass(f, grid)))
        report.min_value = min(report.min_value, float(f.min()))
    return f


_VELOCITY_CACHE = {}


def velocity_of(config, report=None):
    """Cavity velocity field: read from the configured files or solved (cached)."""
    key = (config.n_x, config.n_y, config.reynolds, config.lid_speed, config.diffusion,
           config.velocity_u, config.velocity_z)
    vel = _VELOCITY_CACHE.get(key)
    if vel is None:
        t0 = time.perf_counter()
        if config.velocity_u is not None:
            try:
                vel = load_velocity(config.velocity_u, config.velocity_z, config.diffusion, grid_of(config))
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot use velocity files: {exc}") from exc
        else:
            vel = cavity_velocity(grid_of(config), config.reynolds, config.lid_speed, config.diffusion)
        _VELOCITY_CACHE[key] = vel
        if report is not None:
            report.timings["velocity"] += time.perf_counter() - t0
    return vel


def _spatial_substeps(config, vel, grid):
    bound = cfl_spatial(vel, grid, config.cfl_safety)
    n = max(1, int(np.ceil(config.time_step / bound - 1e-12)))
    return n, config.time_step / n


def _run_cavity(config, report, check):
    grid = grid_of(config)
    vel = velocity_of(config, report)
    n_sub, h = _spatial_substeps(config, vel, grid)
    state = np.asarray(initial_moments(config), dtype=float)
    fvs = config.closure == "FVS"
    if fvs:
        vgrid = VolumeGrid.on(config.domain, config.n_v)
        kernels = config.kernels()
        flat_shape = (-1, vgrid.n_v)
        g0 = lambda s: zeroth_moment(s, vgrid)
        mass = lambda s: grid.integrate(total_mass(s, vgrid))
    else:
        eng = _MomentEngine(config, report, check)
        flat_shape = (-1, config.order + 1)
        g0 = lambda s: s[..., 0]
        mass = lambda s: grid.integrate(eng.mass(s))
    t = 0.0
    report.times.append(0.0)
    report.gamma0.append(g0(state).copy())
    report.mass.append(float(mass(state)))
    for k in range(config.steps):
        try:
            for _ in range(n_sub):
                t0 = time.perf_counter()
                if fvs:
                    state = advect_diffuse_step(state, vel, grid, h, check=False)
                    report.timings["transport"] += time.perf_counter() - t0
                    if np.any(state < 0):
                        raise TimeStepError("transport produced a negative sectional value")
                    t0 = time.perf_counter()
                    flat, n = fvs_advance(state.reshape(flat_shape), vgrid, kernels, h)
                    state = flat.reshape(state.shape)
                    report.timings["sources"] += time.perf_counter() - t0
                    report.substeps += n
                    report.min_value = min(report.min_value, float(state.min()))
                else:
                    flat = state.reshape(flat_shape).copy()
                    recon = eng.close(flat)
                    t0 = time.perf_counter()
                    data = ((recon["weights"].reshape(grid.shape + (-1,)), recon["abscissas"].reshape(grid.shape + (-1,)))
                            if config.closure == "QMOM" else recon["nodes"].reshape(grid.shape + (-1,)))
                    state = transport_moments(flat.reshape(state.shape), config.closure, vel, grid, eng.rule, h,
                                              domain=eng.domain, check=False, reconstruction=data)
                    report.timings["transport"] += time.perf_counter() - t0
                    eng.verify(state.reshape(flat_shape))
                    state = eng.react(state.reshape(flat_shape), h).reshape(state.shape)
        except PBEError as exc:
            raise _flush_failure(report, t, exc, config) from exc
        t = (k + 1) * config.time_step
        report.times.append(t)
        report.gamma0.append(g0(state).copy())
        report.mass.append(float(mass(state)))
    return state


def run(config, check_realizability=False):
    """Run one experiment; writes CSV/JSON output when ``config.output_dir`` is set."""
    report = RunReport(config)
    start = time.perf_counter()
    if config.kind == "cavity":
        state = _run_cavity(config, report, check_realizability)
    elif config.closure == "FVS":
        state = _run_fvs_homogeneous(config, report)
    else:
        state = _run_moments_homogeneous(config, report, check_realizability)
    report.timings["total"] = time.perf_counter() - start
    report.final_state = state
    if config.output_dir:
        report.write(config.output_dir)
    return report


# --- errors and sweeps --------------------------------------------------------

def relative_l2_error(reference, candidate, times=None, candidate_times=None, cell_area=1.0):
    """Relative space-time L2 error of ``candidate`` against ``reference``.

    Leading axis is time (trapezoid rule), remaining axes are space
    (midpoint rule with ``cell_area``). A candidate sampled at other
    ``candidate_times`` is interpolated linearly onto ``times``.
    """
    ref = np.asarray(reference, dtype=float)
    cand = np.asarray(candidate, dtype=float)
    if times is None:
        times = np.arange(ref.shape[0], dtype=float)
    times = np.asarray(times, dtype=float)
    if candidate_times is not None and not np.array_equal(np.asarray(candidate_times, dtype=float), times):
        ct = np.asarray(candidate_times, dtype=float)
        flat = cand.reshape(len(ct), -1)
        cand = np.stack([np.interp(times, ct, flat[:, j]) for j in range(flat.shape[1])], axis=1)
        cand = cand.reshape((len(times),) + ref.shape[1:])
    if cand.shape != ref.shape:
        raise ValueError(f"shape mismatch: {cand.shape} vs {ref.shape}")

    def norm2(a):
        per_time = cell_area * np.sum(a.reshape(a.shape[0], -1) ** 2, axis=1)
        return trapezoid(per_time, times) if len(times) > 1 else per_time[0]

    denom = norm2(ref)
    if denom == 0:
        return 0.0 if norm2(cand) == 0 else np.inf
    return float(np.sqrt(norm2(ref - cand) / denom))


_REFERENCES = {}


def richardson(levels):
    """First-order Richardson table over solutions on grids ``n, 2n, 4n, ...``.

    Returns the most extrapolated entry; one level returns it unchanged.
    """
    row = [np.asarray(x, dtype=float) for x in levels]
    order = 1
    while len(row) > 1:
        c = 2.0 ** order
        row = [(c * fine - coarse) / (c - 1.0) for coarse, fine in zip(row[:-1], row[1:])]
        order += 1
    return row[0]


def reference_run(config):
    """FVS reference for the experiment of ``config`` (memoised per process).

    With ``reference_levels > 1`` the gamma_0 series of FVS runs on
    ``fvs_cells * 2**k`` cells are Richardson-extrapolated.
    """
    ref_cfg = config.with_(closure="FVS", output_dir=None)
    key = ref_cfg.with_(order=0, n_q=2, r_list=(0.0, 1.0))
    rep = _REFERENCES.get(key)
    if rep is None:
        n = ref_cfg.fvs_cells
        reps = [run(ref_cfg.with_(n_v=n * 2 ** k)) for k in range(ref_cfg.reference_levels)]
        rep = reps[-1]
        if len(reps) > 1:
            gamma = richardson([r.gamma0 for r in reps])
            rep = replace(rep, gamma0=list(gamma), timings={k: sum(r.timings[k] for r in reps) for k in PHASES})
        _REFERENCES[key] = rep
    return rep


def report_error(report, reference):
    t_ref, g_ref = reference.series()
    t, g = report.series()
    area = grid_of(report.config).cell_area if report.spatial else 1.0
    return relative_l2_error(g_ref, g, t_ref, t, area)


def _sweep_member(config, check_realizability):
    return run(config, check_realizability)


def sweep_orders(config, orders, out=None, check_realizability=False, parallel=False):
    """One run per order; returns rows ``(order, seconds, E2)`` and optionally writes CSV.

    Members run sequentially unless ``parallel`` is set, in which case the
    timings are no longer comparable.
    """
    if config.closure not in ("PN", "MN", "QMOM"):
        raise ConfigError("sweeps need a moment closure")
    ref = reference_run(config)
    configs = [config.with_(order=int(n), output_dir=None) for n in orders]
    if parallel:
        with ProcessPoolExecutor() as pool:
            reports = list(pool.map(_sweep_member, configs, [check_realizability] * len(configs)))
    else:
        reports = [run(cfg, check_realizability) for cfg in configs]
    rows = []
    for cfg, rep in zip(configs, reports):
        rep.e2 = report_error(rep, ref)
        rows.append((cfg.order, rep.timings["total"], rep.e2))
    if out is not None:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        target = path / f"sweep_{config.kind}_{config.closure}.csv"
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["order", "seconds", "E2"])
            for row in rows:
                w.writerow([row[0], repr(row[1]), repr(row[2])])
    return rows
