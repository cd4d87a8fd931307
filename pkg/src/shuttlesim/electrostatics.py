"""Variable-permittivity Poisson solver and gate/defect Green's functions.

The discrete problem is flux-conservative finite volume on the device
grid: sum_f c_f (phi_nbr - phi_c) = -q_c * e/eps0, with one face
conductance c_f = eps_face * A_face / d_face per neighbor and eps_face
the harmonic mean of the adjacent cell permittivities (preserves normal
flux across dielectric steps). Electrode cells are Dirichlet-pinned by
folding them into the stencil (unit diagonal, zero couplings), so the
sweep kernel is branch-free.

Successive over-relaxation runs in red-black ordering so that all cells
of one color update independently (deterministic and parallelizable);
plain lexicographic Gauss-Seidel is available as a fallback ordering.
Iteration stops when the largest absolute update in a sweep drops below
the configured tolerance.

Because the equation is linear in boundary data and sources, the
potential of the driven device is assembled at runtime as a weighted sum
of precomputed unit responses: one solve per electrode (1 V applied, the
rest grounded) and one per charge-defect site (+1e, all grounded).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numba
import numpy as np

from .constants import E_OVER_EPS0, MEV_PER_VOLT, OXIDE_BARRIER_MEV
from .device import DeviceLayout, DriveParams, electrode_mask, gate_voltages, permittivity_field
from .grid import GridSpec, ScalarField
from .surface import HeightField

BC_CODE = {"periodic": 0, "neumann": 1, "dirichlet-zero": 2}


class PoissonError(ValueError):
    pass


class PoissonConvergenceError(RuntimeError):
    def __init__(self, sweeps, last_update, tol, source=None):
        prefix = f"[{source}] " if source else ""
        super().__init__(
            f"{prefix}SOR did not converge in {sweeps} sweeps "
            f"(last max update {last_update:.3e} V, tolerance {tol:.3e} V)"
        )
        self.sweeps = sweeps
        self.last_update = last_update
        self.source = source


@dataclass(frozen=True)
class SolverConfig:
    omega_sor: float = 1.8
    tol: float = 1e-7  # max absolute update per sweep, volts
    max_sweeps: int = 200_000
    check_every: int = 100  # cadence for recording convergence history
    ordering: str = "red-black"  # or "lexicographic"
    cascade: bool = True  # coarse-grid initial guess

    def __post_init__(self):
        if not (0.0 < self.omega_sor < 2.0):
            raise PoissonError("omega_sor must lie in (0, 2)")
        if self.tol <= 0:
            raise PoissonError("tolerance must be > 0")
        if self.max_sweeps < 1 or self.check_every < 1:
            raise PoissonError("sweep counts must be positive")
        if self.ordering not in ("red-black", "lexicographic"):
            raise PoissonError(f"unknown ordering {self.ordering!r}")


@dataclass(frozen=True)
class PoissonProblem:
    spec: GridSpec
    eps: ScalarField  # relative permittivity
    dirichlet_mask: np.ndarray = field(repr=False)
    dirichlet_values: np.ndarray = field(repr=False)
    rho: Optional[np.ndarray] = field(default=None, repr=False)  # charges/cell

    def __post_init__(self):
        self.spec.require_compatible(self.eps.spec, "permittivity field")
        mask = np.ascontiguousarray(self.dirichlet_mask, dtype=bool)
        vals = np.ascontiguousarray(self.dirichlet_values, dtype=np.float64)
        if mask.shape != self.spec.shape or vals.shape != self.spec.shape:
            raise PoissonError("mask/value arrays must match the grid shape")
        if np.any(self.eps.values <= 0):
            raise PoissonError("permittivity must be strictly positive")
        rho = self.rho
        if rho is not None:
            rho = np.ascontiguousarray(rho, dtype=np.float64)
            if rho.shape != self.spec.shape:
                raise PoissonError("rho must match the grid shape")
        for arr in (mask, vals) + ((rho,) if rho is not None else ()):
            arr.setflags(write=False)
        object.__setattr__(self, "dirichlet_mask", mask)
        object.__setattr__(self, "dirichlet_values", vals)
        object.__setattr__(self, "rho", rho)

    def has_dirichlet(self) -> bool:
        return bool(np.any(self.dirichlet_mask)) or "dirichlet-zero" in (
            self.spec.bc_x, self.spec.bc_y, self.spec.bc_z)


@dataclass(frozen=True)
class SolveInfo:
    sweeps: int
    max_update: float
    flux_residual: float
    elapsed_s: float


@numba.njit(parallel=True, cache=True)
def _sweep_color(phi, cxm, cxp, cym, cyp, czm, czp, diag, b, omega, color, upd):
    nz, ny, nx = diag.shape
    for iz in numba.prange(nz):
        local = 0.0
        for iy in range(ny):
            ix0 = (color - iz - iy) % 2
            for ix in range(ix0, nx, 2):
                s = (cxm[iz, iy, ix] * phi[iz + 1, iy + 1, ix]
                     + cxp[iz, iy, ix] * phi[iz + 1, iy + 1, ix + 2]
                     + cym[iz, iy, ix] * phi[iz + 1, iy, ix + 1]
                     + cyp[iz, iy, ix] * phi[iz + 1, iy + 2, ix + 1]
                     + czm[iz, iy, ix] * phi[iz, iy + 1, ix + 1]
                     + czp[iz, iy, ix] * phi[iz + 2, iy + 1, ix + 1]
                     + b[iz, iy, ix])
                old = phi[iz + 1, iy + 1, ix + 1]
                new = (1.0 - omega) * old + omega * s / diag[iz, iy, ix]
                d = abs(new - old)
                if d > local:
                    local = d
                phi[iz + 1, iy + 1, ix + 1] = new
        upd[iz] = local


@numba.njit(cache=True)
def _sweep_lex(phi, cxm, cxp, cym, cyp, czm, czp, diag, b, omega):
    nz, ny, nx = diag.shape
    local = 0.0
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                s = (cxm[iz, iy, ix] * phi[iz + 1, iy + 1, ix]
                     + cxp[iz, iy, ix] * phi[iz + 1, iy + 1, ix + 2]
                     + cym[iz, iy, ix] * phi[iz + 1, iy, ix + 1]
                     + cyp[iz, iy, ix] * phi[iz + 1, iy + 2, ix + 1]
                     + czm[iz, iy, ix] * phi[iz, iy + 1, ix + 1]
                     + czp[iz, iy, ix] * phi[iz + 2, iy + 1, ix + 1]
                     + b[iz, iy, ix])
                old = phi[iz + 1, iy + 1, ix + 1]
                new = (1.0 - omega) * old + omega * s / diag[iz, iy, ix]
                d = abs(new - old)
                if d > local:
                    local = d
                phi[iz + 1, iy + 1, ix + 1] = new
    return local


def _harmonic(e0, e1):
    return 2.0 * e0 * e1 / (e0 + e1)


def _face_coefficients(problem: PoissonProblem):
    """Precompute stencil coefficients, folding BCs and Dirichlet cells in."""
    spec = problem.spec
    eps = problem.eps.values
    dx, dy, dz = spec.dx, spec.dy, spec.dz
    gx, gy, gz = dy * dz / dx, dx * dz / dy, dx * dy / dz

    def axis_pair(axis, bc, g):
        em = np.empty_like(eps)
        ep = np.empty_like(eps)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        ax = {"x": 2, "y": 1, "z": 0}[axis]
        lo[ax], hi[ax] = slice(1, None), slice(None, -1)
        inner_m = tuple(lo)
        inner_p = tuple(hi)
        em[inner_m] = _harmonic(eps[inner_m], eps[inner_p])
        ep[inner_p] = em[inner_m]
        first = [slice(None)] * 3
        last = [slice(None)] * 3
        first[ax], last[ax] = 0, -1
        first, last = tuple(first), tuple(last)
        if bc == "periodic":
            wrap = _harmonic(eps[first], eps[last])
            em[first] = wrap
            ep[last] = wrap
        elif bc == "neumann":
            em[first] = 0.0
            ep[last] = 0.0
        else:  # dirichlet-zero wall: ghost at 0 V, mirror permittivity
            em[first] = eps[first]
            ep[last] = eps[last]
        return g * em, g * ep

    cxm, cxp = axis_pair("x", spec.bc_x, gx)
    cym, cyp = axis_pair("y", spec.bc_y, gy)
    czm, czp = axis_pair("z", spec.bc_z, gz)

    b = np.zeros(spec.shape)
    if problem.rho is not None:
        b += problem.rho * E_OVER_EPS0
    diag = cxm + cxp + cym + cyp + czm + czp
    if np.any(diag <= 0):
        raise PoissonError("grid contains fully decoupled cells (check BCs)")

    mask = problem.dirichlet_mask
    for c in (cxm, cxp, cym, cyp, czm, czp):
        c[mask] = 0.0
    diag[mask] = 1.0
    b[mask] = problem.dirichlet_values[mask]
    return cxm, cxp, cym, cyp, czm, czp, diag, b


def _refresh_ghosts(phi, spec: GridSpec):
    if spec.bc_x == "periodic":
        phi[1:-1, 1:-1, 0] = phi[1:-1, 1:-1, -2]
        phi[1:-1, 1:-1, -1] = phi[1:-1, 1:-1, 1]
    elif spec.bc_x == "neumann":
        phi[1:-1, 1:-1, 0] = phi[1:-1, 1:-1, 1]
        phi[1:-1, 1:-1, -1] = phi[1:-1, 1:-1, -2]
    if spec.bc_y == "periodic":
        phi[1:-1, 0, 1:-1] = phi[1:-1, -2, 1:-1]
        phi[1:-1, -1, 1:-1] = phi[1:-1, 1, 1:-1]
    elif spec.bc_y == "neumann":
        phi[1:-1, 0, 1:-1] = phi[1:-1, 1, 1:-1]
        phi[1:-1, -1, 1:-1] = phi[1:-1, -2, 1:-1]
    if spec.bc_z == "periodic":
        phi[0, 1:-1, 1:-1] = phi[-2, 1:-1, 1:-1]
        phi[-1, 1:-1, 1:-1] = phi[1, 1:-1, 1:-1]
    elif spec.bc_z == "neumann":
        phi[0, 1:-1, 1:-1] = phi[1, 1:-1, 1:-1]
        phi[-1, 1:-1, 1:-1] = phi[-2, 1:-1, 1:-1]
    # dirichlet-zero ghosts stay 0 from initialization


def _flux_residual(phi_pad, coeffs, mask):
    cxm, cxp, cym, cyp, czm, czp, diag, b = coeffs
    c = phi_pad[1:-1, 1:-1, 1:-1]
    r = (cxm * phi_pad[1:-1, 1:-1, :-2] + cxp * phi_pad[1:-1, 1:-1, 2:]
         + cym * phi_pad[1:-1, :-2, 1:-1] + cyp * phi_pad[1:-1, 2:, 1:-1]
         + czm * phi_pad[:-2, 1:-1, 1:-1] + czp * phi_pad[2:, 1:-1, 1:-1]
         + b - diag * c)
    r = np.abs(r) / diag
    r[mask] = 0.0
    return float(r.max())


def _coarsen_problem(problem: PoissonProblem) -> Optional[PoissonProblem]:
    spec = problem.spec
    if any(n % 2 or n < 16 for n in (spec.nx, spec.ny, spec.nz)):
        return None
    shape = (spec.nz // 2, 2, spec.ny // 2, 2, spec.nx // 2, 2)
    eps_c = problem.eps.values.reshape(shape).mean(axis=(1, 3, 5))
    mask_c = problem.dirichlet_mask.reshape(shape).any(axis=(1, 3, 5))
    vsum = np.where(problem.dirichlet_mask, problem.dirichlet_values, 0.0)
    vsum = vsum.reshape(shape).sum(axis=(1, 3, 5))
    counts = problem.dirichlet_mask.reshape(shape).sum(axis=(1, 3, 5))
    vals_c = np.where(mask_c, vsum / np.maximum(counts, 1), 0.0)
    rho_c = None
    if problem.rho is not None:
        rho_c = problem.rho.reshape(shape).sum(axis=(1, 3, 5))
    spec_c = GridSpec(nx=spec.nx // 2, ny=spec.ny // 2, nz=spec.nz // 2,
                      dx=spec.dx * 2, dy=spec.dy * 2, dz=spec.dz * 2,
                      origin=spec.origin, bc_x=spec.bc_x, bc_y=spec.bc_y,
                      bc_z=spec.bc_z)
    return PoissonProblem(spec_c, ScalarField(spec_c, eps_c, "eps_r"),
                          mask_c, vals_c, rho_c)


def solve_poisson(problem: PoissonProblem, cfg: SolverConfig = SolverConfig(),
                  phi0: Optional[np.ndarray] = None) -> Tuple[ScalarField, SolveInfo]:
    """SOR solve of div(eps grad phi) = -rho. Returns potential in volts."""
    if not problem.has_dirichlet():
        raise PoissonError("problem has no potential reference; add an "
                           "electrode cell or a dirichlet-zero wall")
    t0 = time.perf_counter()
    spec = problem.spec
    coeffs = _face_coefficients(problem)
    cxm, cxp, cym, cyp, czm, czp, diag, b = coeffs

    if phi0 is None and cfg.cascade:
        coarse = _coarsen_problem(problem)
        if coarse is not None:
            coarse_cfg = SolverConfig(
                omega_sor=cfg.omega_sor, tol=max(cfg.tol, 1e-6),
                max_sweeps=cfg.max_sweeps, check_every=cfg.check_every,
                ordering=cfg.ordering, cascade=True)
            try:
                phi_c, _ = solve_poisson(coarse, coarse_cfg)
                phi0 = np.repeat(np.repeat(np.repeat(
                    phi_c.values, 2, axis=0), 2, axis=1), 2, axis=2)
            except PoissonConvergenceError:
                phi0 = None

    phi = np.zeros((spec.nz + 2, spec.ny + 2, spec.nx + 2))
    if phi0 is not None:
        if phi0.shape != spec.shape:
            raise PoissonError("initial guess must match the grid shape")
        phi[1:-1, 1:-1, 1:-1] = phi0
    phi[1:-1, 1:-1, 1:-1][problem.dirichlet_mask] = \
        problem.dirichlet_values[problem.dirichlet_mask]

    upd = np.zeros(spec.nz)
    max_update = np.inf
    sweeps = 0
    while sweeps < cfg.max_sweeps:
        if cfg.ordering == "red-black":
            _refresh_ghosts(phi, spec)
            _sweep_color(phi, cxm, cxp, cym, cyp, czm, czp, diag, b,
                         cfg.omega_sor, 0, upd)
            m0 = float(upd.max())
            _refresh_ghosts(phi, spec)
            _sweep_color(phi, cxm, cxp, cym, cyp, czm, czp, diag, b,
                         cfg.omega_sor, 1, upd)
            max_update = max(m0, float(upd.max()))
        else:
            _refresh_ghosts(phi, spec)
            max_update = float(_sweep_lex(phi, cxm, cxp, cym, cyp, czm, czp,
                                          diag, b, cfg.omega_sor))
        sweeps += 1
        if max_update < cfg.tol:
            break
    else:
        raise PoissonConvergenceError(sweeps, max_update, cfg.tol)

    _refresh_ghosts(phi, spec)
    residual = _flux_residual(phi, coeffs, problem.dirichlet_mask)
    out = ScalarField(spec, phi[1:-1, 1:-1, 1:-1].copy(), unit="V")
    return out, SolveInfo(sweeps=sweeps, max_update=max_update,
                          flux_residual=residual,
                          elapsed_s=time.perf_counter() - t0)


def device_grid(layout: DeviceLayout, quantum: GridSpec,
                pad_y: float = 30.0, pad_z: float = 30.0) -> GridSpec:
    """Poisson domain: layout x-span, quantum region padded in y and z."""
    dx, dy, dz = quantum.dx, quantum.dy, quantum.dz
    nx = int(round(layout.x_span / dx))
    if abs(nx * dx - layout.x_span) > 1e-9:
        raise PoissonError("grid spacing does not divide the layout x span")
    ny = quantum.ny + 2 * int(np.ceil(pad_y / dy))
    nz = quantum.nz + 2 * int(np.ceil(pad_z / dz))
    oy = quantum.origin[1] - dy * int(np.ceil(pad_y / dy))
    oz = quantum.origin[2] - dz * int(np.ceil(pad_z / dz))
    return GridSpec(nx=nx, ny=ny, nz=nz, dx=dx, dy=dy, dz=dz,
                    origin=(0.0, oy, oz),
                    bc_x="periodic", bc_y="neumann", bc_z="neumann")


def _crop_indices(device: GridSpec, quantum: GridSpec):
    offs = []
    for qo, do, d, axis in ((quantum.origin[0], device.origin[0], device.dx, "x"),
                            (quantum.origin[1], device.origin[1], device.dy, "y"),
                            (quantum.origin[2], device.origin[2], device.dz, "z")):
        o = (qo - do) / d
        if abs(o - round(o)) > 1e-9:
            raise PoissonError(f"quantum region is not cell-aligned on {axis}")
        offs.append(int(round(o)))
    ox, oy, oz = offs
    if (ox < 0 or oy < 0 or oz < 0
            or ox + quantum.nx > device.nx
            or oy + quantum.ny > device.ny
            or oz + quantum.nz > device.nz):
        raise PoissonError("quantum region does not fit inside the device grid")
    return (slice(oz, oz + quantum.nz), slice(oy, oy + quantum.ny),
            slice(ox, ox + quantum.nx))


def rasterize_charge(spec: GridSpec, site: Sequence[float]) -> np.ndarray:
    """Unit charge placed in the single cell containing ``site``."""
    x, y, z = site
    ix = int(np.floor((x - spec.origin[0]) / spec.dx))
    if spec.bc_x == "periodic":
        ix %= spec.nx
    iy = int(np.floor((y - spec.origin[1]) / spec.dy))
    iz = int(np.floor((z - spec.origin[2]) / spec.dz))
    if not (0 <= ix < spec.nx and 0 <= iy < spec.ny and 0 <= iz < spec.nz):
        raise PoissonError(f"charge site {tuple(site)} lies outside the grid")
    rho = np.zeros(spec.shape)
    rho[iz, iy, ix] = 1.0
    return rho


@dataclass(frozen=True)
class GreensSet:
    """Unit-response potentials cropped to the quantum region.

    Gate entries are stored in meV of electron potential energy per mV of
    applied bias (so they are -1 times the dimensionless electrostatic
    lever arm); defect entries are the electron potential energy in meV
    of a +1e point charge with all electrodes grounded.
    """

    quantum: GridSpec
    gate_ids: Tuple[str, ...]
    gate_fields: Dict[str, ScalarField] = field(repr=False)
    defect_sites: Tuple[Tuple[float, float, float], ...]
    defect_fields: Tuple[ScalarField, ...] = field(repr=False)
    solve_meta: Dict[str, dict] = field(default_factory=dict)
    content_hash: str = ""

    def gate_matrix(self) -> np.ndarray:
        """(n_gates, n_cells) stack for fast weighted assembly."""
        return np.stack([self.gate_fields[g].values.ravel() for g in self.gate_ids])


def greens_content_hash(layout: DeviceLayout, quantum: GridSpec,
                        defect_sites: Sequence[Sequence[float]],
                        cfg: SolverConfig, pad_y: float, pad_z: float) -> str:
    payload = {
        "layout": {
            "gates": [[g.gate_id, g.layer, g.center_x, g.width_x, g.y_min,
                       g.y_max, g.drive_index] for g in layout.gates],
            "period": layout.period, "n_periods": layout.n_periods,
            "channel_gap": layout.channel_gap, "rail_width": layout.rail_width,
            "metal_thickness": layout.metal_thickness,
            "eps": [layout.eps_si, layout.eps_ox],
        },
        "quantum": [quantum.nx, quantum.ny, quantum.nz, quantum.dx, quantum.dy,
                    quantum.dz, list(quantum.origin)],
        "defects": [list(map(float, s)) for s in defect_sites],
        "solver": [cfg.omega_sor, cfg.tol, cfg.max_sweeps, cfg.ordering],
        "pad": [pad_y, pad_z],
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def compute_greens(layout: DeviceLayout, quantum: GridSpec,
                   defect_sites: Sequence[Sequence[float]] = (),
                   cfg: SolverConfig = SolverConfig(),
                   pad_y: float = 30.0, pad_z: float = 30.0,
                   cache_dir: Optional[str] = None,
                   progress=None) -> GreensSet:
    """Solve (or load from cache) every gate and defect unit response."""
    content_hash = greens_content_hash(layout, quantum, defect_sites, cfg,
                                       pad_y, pad_z)
    if cache_dir is not None:
        from .storage import greens_cache_lookup
        cached = greens_cache_lookup(content_hash, cache_dir)
        if cached is not None:
            return cached

    dev = device_grid(layout, quantum, pad_y, pad_z)
    eps = permittivity_field(layout, dev)
    masks = {g.gate_id: electrode_mask(layout, dev, g) for g in layout.gates}
    crop = _crop_indices(dev, quantum)
    all_mask = np.zeros(dev.shape, dtype=bool)
    for m in masks.values():
        all_mask |= m

    gate_fields = {}
    meta: Dict[str, dict] = {}
    gate_ids = tuple(g.gate_id for g in layout.gates)
    for gid in gate_ids:
        values = np.where(masks[gid], 1.0, 0.0)
        problem = PoissonProblem(dev, eps, all_mask, values)
        try:
            phi, info = solve_poisson(problem, cfg)
        except PoissonConvergenceError as exc:
            raise PoissonConvergenceError(exc.sweeps, exc.last_update, cfg.tol,
                                          source=f"gate {gid}") from exc
        gate_fields[gid] = ScalarField(
            quantum, -phi.values[crop], unit="meV/mV")
        meta[f"gate:{gid}"] = {"sweeps": info.sweeps,
                               "flux_residual": info.flux_residual,
                               "elapsed_s": info.elapsed_s}
        if progress:
            progress(f"gate {gid}: {info.sweeps} sweeps, "
                     f"residual {info.flux_residual:.2e} V")

    defect_fields = []
    zeros = np.zeros(dev.shape)
    for j, site in enumerate(defect_sites):
        rho = rasterize_charge(dev, site)
        problem = PoissonProblem(dev, eps, all_mask, zeros, rho)
        try:
            phi, info = solve_poisson(problem, cfg)
        except PoissonConvergenceError as exc:
            raise PoissonConvergenceError(
                exc.sweeps, exc.last_update, cfg.tol,
                source=f"defect {j} at {tuple(site)}") from exc
        defect_fields.append(ScalarField(
            quantum, -MEV_PER_VOLT * phi.values[crop], unit="meV"))
        meta[f"defect:{j}"] = {"sweeps": info.sweeps,
                               "flux_residual": info.flux_residual,
                               "elapsed_s": info.elapsed_s,
                               "site": list(map(float, site))}
        if progress:
            progress(f"defect {j} at {tuple(site)}: {info.sweeps} sweeps, "
                     f"residual {info.flux_residual:.2e} V")

    gset = GreensSet(quantum=quantum, gate_ids=gate_ids, gate_fields=gate_fields,
                     defect_sites=tuple(tuple(map(float, s)) for s in defect_sites),
                     defect_fields=tuple(defect_fields), solve_meta=meta,
                     content_hash=content_hash)
    if cache_dir is not None:
        from .storage import greens_cache_store
        greens_cache_store(gset, cache_dir)
    return gset


def assemble_gate_potential(greens: GreensSet, drive: DriveParams,
                            layout: DeviceLayout, t: float,
                            _matrix: Optional[np.ndarray] = None) -> ScalarField:
    """V_g(r, t) = sum_i V_i(t) G_i(r); a weighted sum, no solve."""
    missing = [g.gate_id for g in layout.gates if g.gate_id not in greens.gate_fields]
    if missing:
        raise PoissonError(f"no Green's function for gate(s) {missing}")
    volts = gate_voltages(layout, drive, t)
    order = {gid: i for i, gid in enumerate(greens.gate_ids)}
    weights = np.zeros(len(greens.gate_ids))
    for g, v in zip(layout.gates, volts):
        weights[order[g.gate_id]] = v
    matrix = greens.gate_matrix() if _matrix is None else _matrix
    values = weights @ matrix
    return ScalarField(greens.quantum, values.reshape(greens.quantum.shape),
                       unit="meV")


def oxide_step(spec: GridSpec, height: Optional[HeightField]) -> np.ndarray:
    """Conduction-band offset: OXIDE_BARRIER_MEV wherever z >= h(x, y)."""
    z = spec.axis_centers("z")[:, None, None]
    if height is None:
        h = np.zeros((1, spec.ny, spec.nx))
    else:
        if height.heights.shape != (spec.ny, spec.nx):
            raise PoissonError("height field does not match the grid x-y plane")
        h = height.heights[None, :, :]
    return np.where(z >= h, OXIDE_BARRIER_MEV, 0.0)


def defect_potential(greens: GreensSet,
                     defects: Sequence[Tuple[Sequence[float], int]]) -> np.ndarray:
    """Sum of signed defect contributions, meV."""
    total = np.zeros(greens.quantum.shape)
    for site, sign in defects:
        key = tuple(map(float, site))
        try:
            j = greens.defect_sites.index(key)
        except ValueError:
            raise PoissonError(f"no Green's function for defect at {key}") from None
        total += float(sign) * greens.defect_fields[j].values
    return total


def total_potential(gate: ScalarField, height: Optional[HeightField],
                    defects: Sequence[Tuple[Sequence[float], int]],
                    greens: GreensSet) -> ScalarField:
    """V = V_gates + V_oxide_step + V_charge_defects, meV."""
    gate.spec.require_compatible(greens.quantum, "gate potential")
    values = gate.values + oxide_step(gate.spec, height)
    if defects:
        values = values + defect_potential(greens, defects)
    return ScalarField(gate.spec, values, unit="meV")
