"""Time propagation: spectral projection method and split-operator reference.

The projection evolver expands the state in the instantaneous eigenbasis
of H(t) and advances the coefficient vector one step at a time,

    c_n(t+dt) = sum_m O_nm exp(-i eps_m(t) dt / hbar) c_m(t),

with O the overlap matrix between consecutive (gauge-fixed) eigenbases.
The dynamical phase is applied exactly, so steps can be ~1 ps; all
non-adiabatic population transfer rides in O. Population falling outside
the tracked subspace accumulates in ``leaked_norm`` and is never
renormalized away - leakage is the truncation diagnostic.

The split-operator evolver is the conventional Strang factorization
exp(-iV dt/2h) exp(-iT dt/h) exp(-iV dt/2h) applied on the grid; it
needs femtosecond steps but serves as the high-accuracy benchmark.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import scipy.fft as sfft

from .constants import HBAR, ME, speed_to_nm_per_ps
from .grid import GridSpec, ScalarField, WaveFunction
from .quantum import (EigenSet, HamiltonianContext, LanczosError, MassTensor,
                      lanczos_lowest)
from . import analysis

_WORKERS = __import__("os").cpu_count() or 1


class ShuttleError(RuntimeError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class SplitStepConfig:
    dt: float = 2.5e-4  # ps
    refresh_every: int = 1  # steps between drive re-evaluations

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("split dt must be > 0")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")


@dataclass(frozen=True)
class LanczosParams:
    tol: float = 1e-8
    max_matvecs: int = 6000
    m_inner: int = 24
    n_buffer: int = 4


@dataclass(frozen=True)
class ProjectionStepConfig:
    dt: float = 1.0  # ps
    n_states: int = 10
    lanczos: LanczosParams = LanczosParams()
    renormalize: bool = False  # policy: never; leakage is reported instead
    degeneracy_window: float = 1e-6  # meV

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("projection dt must be > 0")
        if self.n_states < 2:
            raise ValueError("projection needs at least 2 tracked states")


@dataclass(frozen=True)
class CoeffVector:
    """Expansion coefficients c_n(t) plus the leaked (untracked) norm."""

    c: np.ndarray
    leaked_norm: float
    t: float

    def __post_init__(self):
        c = np.ascontiguousarray(self.c, dtype=np.complex128)
        c.setflags(write=False)
        object.__setattr__(self, "c", c)
        tracked = float(np.vdot(c, c).real)
        if abs(tracked + self.leaked_norm - 1.0) > 1e-6:
            raise ValueError("coefficients and leaked norm do not sum to 1")

    @property
    def populations(self) -> np.ndarray:
        return np.abs(self.c) ** 2

    @classmethod
    def from_amplitudes(cls, c, t) -> "CoeffVector":
        c = np.asarray(c, dtype=np.complex128)
        return cls(c=c, leaked_norm=1.0 - float(np.vdot(c, c).real), t=t)


@dataclass(frozen=True)
class OverlapMatrix:
    """O_nm = <phi_n(t+dt)|phi_m(t)>; sub-unitary by construction."""

    values: np.ndarray

    def max_singular_value(self) -> float:
        return float(np.linalg.svd(self.values, compute_uv=False).max())


def prepare_initial_state(eigset: EigenSet, velocity: float,
                          masses: MassTensor = MassTensor()) -> WaveFunction:
    """Ground state boosted to the signed x-velocity ``velocity`` (nm/ps).

    The boost phase exp(i m v x / hbar) gives <p_x>/m = velocity, so the
    caller passes the conveyor's actual velocity (negative for the
    standard phase ordering, which moves the minimum toward -x).
    """
    spec = eigset.spec
    k_boost = masses.mx * ME * velocity / HBAR
    x = spec.axis_centers("x")[None, None, :]
    psi = eigset.states[0] * np.exp(1j * k_boost * x)
    return WaveFunction(spec, psi).normalized()


def _gauge_fix_arrays(states: np.ndarray, energies: np.ndarray,
                      ref: Optional[np.ndarray], window: float,
                      measure: float = 1.0):
    """Phase/Procrustes gauge fixing on row-stacked state vectors.

    Returns (fixed_states, overlap_vs_ref or None). Works on any inner
    product space: grid wavefunctions (measure = cell volume) or reduced
    coordinate vectors (measure = 1).
    """
    n = states.shape[0]
    if ref is None:
        idx = np.argmax(np.abs(states), axis=1)
        lead = states[np.arange(n), idx]
        phases = np.where(np.abs(lead) > 0, lead / np.abs(lead), 1.0)
        return states * np.conj(phases)[:, None], None

    o_raw = np.conj(states @ np.conj(ref).T) * measure
    blocks = []
    start = 0
    for i in range(1, n + 1):
        if i == n or energies[i] - energies[i - 1] > window:
            blocks.append((start, i))
            start = i
    fixed = np.array(states)
    o_fix = np.array(o_raw)
    for lo, hi in blocks:
        sl = slice(lo, hi)
        if hi - lo == 1:
            d = o_raw[lo, lo]
            u = d / abs(d) if abs(d) > 1e-300 else 1.0
            fixed[sl] *= u
            o_fix[sl] *= np.conj(u)
        else:
            b = o_raw[sl, sl]
            uu, _, vh = np.linalg.svd(b)
            g = np.conj(vh).T @ np.conj(uu).T  # g @ b is Hermitian PSD
            o_fix[sl] = g @ o_fix[sl]
            fixed[sl] = np.conj(g) @ fixed[sl]
    return fixed, o_fix


def gauge_fix(eig: EigenSet, ref_states: Optional[np.ndarray],
              window: float = 1e-6) -> Tuple[EigenSet, Optional[np.ndarray]]:
    """Fix eigenvector phases; returns the fixed set and O vs the reference.

    With a reference basis, each eigenvector is rotated so its overlap
    with the same-index reference vector is real and positive; clusters
    of states within ``window`` in energy are aligned as a block by the
    unitary Procrustes solution, which stops spurious population swaps
    between degenerate partners. Without a reference (first step), the
    largest-magnitude component of each vector is made real positive.
    """
    states = eig.states.reshape(eig.n_states, -1)
    ref = None if ref_states is None else ref_states.reshape(ref_states.shape[0], -1)
    fixed, o_fix = _gauge_fix_arrays(states, eig.energies, ref, window,
                                     measure=eig.spec.cell_volume)
    out = replace(eig, states=fixed.reshape(eig.states.shape))
    return out, o_fix


def projection_step(c: CoeffVector, eig_t: EigenSet, eig_tdt: EigenSet,
                    dt: float, renormalize: bool = False) -> CoeffVector:
    """One spectral-projection step from the (gauge-fixed) eigensets."""
    if eig_t.n_states != len(c.c) or eig_tdt.n_states != eig_t.n_states:
        raise ValueError("coefficient/eigenset dimensions do not match")
    o = eig_tdt.overlap_with(eig_t)
    return _project(c, eig_t.energies, o, dt, renormalize)


def _project(c: CoeffVector, energies_t: np.ndarray, o: np.ndarray,
             dt: float, renormalize: bool = False) -> CoeffVector:
    phase = np.exp(-1j * energies_t * dt / HBAR)
    new = o @ (phase * c.c)
    if renormalize:
        new = new / np.sqrt(np.vdot(new, new).real)
    tracked = float(np.vdot(new, new).real)
    leaked = c.leaked_norm + max(0.0, 1.0 - c.leaked_norm - tracked)
    # rounding can push the tracked norm a hair above its budget
    leaked = max(leaked, -1e-12)
    return CoeffVector(c=new, leaked_norm=leaked, t=c.t + dt)


def split_step(psi: WaveFunction, ctx: HamiltonianContext,
               cfg: SplitStepConfig) -> WaveFunction:
    """One Strang step exp(-iVdt/2h) exp(-iTdt/h) exp(-iVdt/2h) |psi>."""
    ctx.spec.require_compatible(psi.spec, "wavefunction")
    half_v = np.exp(ctx.potential.values * (-0.5j * cfg.dt / HBAR))
    full_t = np.exp(ctx.kinetic * (-1j * cfg.dt / HBAR))
    out = half_v * psi.amplitudes
    out = sfft.ifftn(full_t * sfft.fftn(out, workers=_WORKERS), workers=_WORKERS)
    out *= half_v
    return WaveFunction(ctx.spec, out)


@dataclass(frozen=True)
class AffineDrive:
    """Potential family V(t) = static + sum_j weights(t)[j] * components[j].

    Device potentials always take this form: the Green's-function
    superposition makes the time dependence enter only through a handful
    of drive weights. The reduced-basis evolver exploits it.
    """

    static: np.ndarray  # (nz, ny, nx), meV
    components: np.ndarray  # (n_comp, nz, ny, nx), meV per unit weight
    weights_fn: Callable[[float], np.ndarray]

    def potential_values(self, t: float) -> np.ndarray:
        w = np.asarray(self.weights_fn(t))
        return self.static + np.tensordot(w, self.components, axes=1)


@dataclass(frozen=True)
class ReducedBasisConfig:
    """Anchored reduced-basis acceleration of the projection evolver.

    Full-grid eigensolves run only at anchor phases of the drive; their
    eigenvectors are orthonormalized into a basis Q, H(t) is projected
    onto span(Q) exactly (the affine structure makes the projected matrix
    a cheap per-step combination), and the per-step eigenproblem becomes
    dense and small. Validation solves full-grid residuals of reduced
    eigenpairs at off-anchor phases; anchors are added adaptively until
    the worst relative residual passes ``residual_tol``.
    """

    enable: bool = True
    n_anchors: int = 16
    max_anchors: int = 64
    n_track: int = 14
    residual_tol: float = 1e-3
    n_validate: int = 8
    basis_cut: float = 1e-9  # drop directions below this relative norm
    max_dim: int = 420

    def __post_init__(self):
        if self.n_anchors < 2 or self.max_anchors < self.n_anchors:
            raise ValueError("need at least two anchors")
        if self.n_track < 2:
            raise ValueError("n_track must be >= 2")


@dataclass(frozen=True)
class Scenario:
    """Everything one shuttle run needs, device-backed or synthetic.

    ``potential_fn`` maps a time in ps to the full potential (meV) on
    ``grid``; ``velocity`` is the signed conveyor x-velocity in nm/ps
    used for the initial boost; the probe indices pick the channel plane
    row scanned for the conveyor minimum. When ``affine`` is present the
    projection evolver may use the reduced-basis fast path.
    """

    grid: GridSpec
    potential_fn: Callable[[float], ScalarField]
    t_max: float
    velocity: float = 0.0
    masses: MassTensor = MassTensor()
    projection: ProjectionStepConfig = ProjectionStepConfig()
    split: SplitStepConfig = SplitStepConfig()
    sample_interval: float = 10.0  # ps
    seed: int = 0
    loss_halfwidth: float = 35.0  # nm
    probe_iy: Optional[int] = None
    probe_iz: Optional[int] = None
    descriptor_hash: str = ""
    name: str = "scenario"
    affine: Optional[AffineDrive] = None
    reduced: ReducedBasisConfig = ReducedBasisConfig()

    def potential(self, t: float) -> ScalarField:
        return self.potential_fn(t)

    def probe_indices(self) -> Tuple[int, int]:
        iy = self.probe_iy if self.probe_iy is not None else self.grid.ny // 2
        iz = self.probe_iz if self.probe_iz is not None else self.grid.nz // 2
        return iy, iz


def _sample_times(scenario: Scenario) -> np.ndarray:
    interval = scenario.sample_interval
    if interval <= 0 or interval > scenario.t_max:
        return np.array([0.0, scenario.t_max])
    n = int(np.floor(scenario.t_max / interval + 1e-9))
    times = np.arange(n + 1) * interval
    if scenario.t_max - times[-1] > 1e-9:
        times = np.append(times, scenario.t_max)
    else:
        times[-1] = scenario.t_max
    return times


class _Recorder:
    """Accumulates per-sample observables with periodic-x continuity."""

    def __init__(self, scenario: Scenario, n_levels: int, evolver: str):
        self.scenario = scenario
        self.n_levels = n_levels
        self.evolver = evolver
        self.rows = []
        self.energy_rows = []
        self.population_rows = []
        self.prev_xc = None
        self.prev_mean_x = None
        self.max_leak = 0.0

    def record(self, t, c: CoeffVector, energies, psi: WaveFunction,
               v_field: ScalarField):
        s = self.scenario
        iy, iz = s.probe_indices()
        x_centers = s.grid.axis_centers("x")
        lx = s.grid.extent[0]
        slice_x = v_field.values[iz, iy, :]
        xc = analysis.track_minimum(slice_x, x_centers, lx, prev=self.prev_xc)
        self.prev_xc = xc

        dens = psi.density() * s.grid.cell_volume
        loss = analysis.loss_probability(psi, xc, s.loss_halfwidth)
        mx = analysis.circular_mean_x(dens.sum(axis=(0, 1)), x_centers,
                                      lx, s.grid.origin[0])
        mx = analysis.unwrap_track(mx, self.prev_mean_x, lx)
        self.prev_mean_x = mx
        my = float((dens.sum(axis=(0, 2)) * s.grid.axis_centers("y")).sum()
                   / dens.sum())
        mz = float((dens.sum(axis=(1, 2)) * s.grid.axis_centers("z")).sum()
                   / dens.sum())

        fid = analysis.fidelity(c)
        sub = analysis.ground_subspace_fidelity(c, energies)
        self.max_leak = max(self.max_leak, c.leaked_norm)
        self.rows.append((t, fid, sub, loss, c.leaked_norm, mx, my, mz))
        self.energy_rows.append(np.asarray(energies[:self.n_levels], dtype=float))
        self.population_rows.append(c.populations)

    def result(self) -> "analysis.ShuttleResult":
        rows = np.array(self.rows)
        return analysis.ShuttleResult(
            t=rows[:, 0], fidelity=rows[:, 1], subspace_fidelity=rows[:, 2],
            loss=rows[:, 3], leaked=rows[:, 4], mean_x=rows[:, 5],
            mean_y=rows[:, 6], mean_z=rows[:, 7],
            energies=np.vstack(self.energy_rows),
            scenario_hash=self.scenario.descriptor_hash, evolver=self.evolver,
            populations=np.vstack(self.population_rows))


def _coeffs_from_state(psi: WaveFunction, eig: EigenSet, t: float) -> CoeffVector:
    states = eig.states.reshape(eig.n_states, -1)
    c = np.conj(states @ np.conj(psi.amplitudes.ravel())) * eig.spec.cell_volume
    return CoeffVector.from_amplitudes(c, t)


def _state_from_coeffs(c: CoeffVector, eig: EigenSet) -> WaveFunction:
    states = eig.states.reshape(eig.n_states, -1)
    psi = (c.c @ states).reshape(eig.spec.shape)
    return WaveFunction(eig.spec, psi)


def _warn_truncation(c: CoeffVector, warned: list) -> None:
    if not warned and abs(c.c[-1]) > 1e-3:
        warned.append(True)
        warnings.warn(
            "top tracked level is populated (|c_top| > 1e-3): the tracked "
            "subspace may be too small", stacklevel=2)


def run_shuttle(scenario: Scenario, evolver: str = "projection",
                resume: Optional[str] = None,
                checkpoint_dir: Optional[str] = None,
                checkpoint_at: Optional[float] = None,
                snapshot_times: Sequence[float] = (),
                snapshot_cb: Optional[Callable[[float, WaveFunction], None]] = None,
                progress: Optional[Callable[[str], None]] = None):
    """Propagate one full shuttle (t = 0 .. t_max) and record observables.

    ``resume`` continues from a checkpoint directory; ``checkpoint_at``
    writes one at the given time (projection evolver). On an eigensolver
    failure mid-run the last valid state is checkpointed before the error
    propagates, when a checkpoint directory is configured.
    """
    if evolver not in ("projection", "split"):
        raise ValueError(f"unknown evolver {evolver!r}")
    if evolver == "projection":
        return _run_projection(scenario, resume, checkpoint_dir, checkpoint_at,
                               snapshot_times, snapshot_cb, progress)
    return _run_split(scenario, resume, snapshot_times, snapshot_cb, progress)


def _event_times(scenario: Scenario, snapshot_times) -> np.ndarray:
    ts = set(float(t) for t in _sample_times(scenario))
    for t in snapshot_times:
        if 0.0 <= t <= scenario.t_max:
            ts.add(float(t))
    return np.array(sorted(ts))


def _next_step(t: float, t_max: float, dt_nominal: float,
               events: np.ndarray) -> Tuple[float, float]:
    """Step target: the nominal dt, shortened to land exactly on the next
    event time (sample, snapshot or t_max)."""
    upcoming = events[events > t + 1e-12]
    t_event = float(upcoming[0]) if len(upcoming) else t_max
    if t_event - t <= dt_nominal * (1.0 + 1e-9):
        return t_event, t_event - t
    return t + dt_nominal, dt_nominal


class _ReducedSpace:
    """Orthonormal anchor basis Q with H(t) projected onto it.

    Rows of ``q_basis`` are l2-orthonormal grid vectors; the projected
    Hamiltonian at time t is ``h_static + sum_j w_j(t) h_comp[j]``, exact
    on span(Q) because the potential family is affine in the weights.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        grid = scenario.grid
        self.shape = grid.shape
        self.m_total = grid.size
        self.sqrt_dv = np.sqrt(grid.cell_volume)
        affine = scenario.affine
        rcfg = scenario.reduced
        self.static_field = ScalarField(grid, affine.static, unit="meV")
        self.ctx_static = HamiltonianContext.build(grid, self.static_field,
                                                   scenario.masses)
        self.comp_flat = affine.components.reshape(len(affine.components), -1)
        self.weights_fn = affine.weights_fn
        self.q = 0
        self.basis = np.empty((rcfg.max_dim, self.m_total), dtype=np.complex128)
        ncomp = len(self.comp_flat)
        self.h_static = np.zeros((rcfg.max_dim, rcfg.max_dim), dtype=np.complex128)
        self.h_comp = np.zeros((ncomp, rcfg.max_dim, rcfg.max_dim),
                               dtype=np.complex128)
        self.anchors: list = []
        self.worst_residual = np.inf
        self.build_matvecs = 0

    def _append_row(self, row: np.ndarray) -> bool:
        rcfg = self.scenario.reduced
        if self.q >= rcfg.max_dim:
            return False
        v = row
        for _ in range(2):
            if self.q:
                v = v - self.basis[:self.q].T @ np.conj(
                    self.basis[:self.q] @ np.conj(v))
        nv = np.linalg.norm(v)
        if nv < rcfg.basis_cut:
            return False
        v = v / nv
        k = self.q
        self.basis[k] = v
        hv = self.ctx_static.apply_raw(v.reshape(self.shape)).ravel()
        self.build_matvecs += 1
        col = np.conj(self.basis[:k + 1] @ np.conj(hv))
        self.h_static[:k + 1, k] = col
        self.h_static[k, :k] = np.conj(col[:k])
        for j, comp in enumerate(self.comp_flat):
            cv = comp * v
            ccol = np.conj(self.basis[:k + 1] @ np.conj(cv))
            self.h_comp[j, :k + 1, k] = ccol
            self.h_comp[j, k, :k] = np.conj(ccol[:k])
        self.q = k + 1
        return True

    def _anchor_seed(self, phase: float) -> int:
        frac = phase / max(self.scenario.t_max, 1e-300)
        return self.scenario.seed ^ (0x9E3779 + int(round(frac * (1 << 20))))

    def _solve_anchor(self, phase: float, warm, progress):
        scenario = self.scenario
        lz = scenario.projection.lanczos
        values = scenario.affine.potential_values(phase)
        ctx = self.ctx_static.with_potential(
            ScalarField(scenario.grid, values, unit="meV"))
        eig = lanczos_lowest(ctx, scenario.reduced.n_track,
                             tol=max(lz.tol, 1e-7),
                             max_matvecs=lz.max_matvecs,
                             seed=self._anchor_seed(phase),
                             m_inner=lz.m_inner, n_buffer=lz.n_buffer,
                             warm_start=warm)
        self.build_matvecs += eig.matvecs
        if progress:
            progress(f"anchor t={phase:.6g} ps: {eig.matvecs} matvecs, "
                     f"e0={eig.energies[0]:.4f} meV")
        return eig

    def add_anchor(self, phase: float, warm, progress) -> np.ndarray:
        eig = self._solve_anchor(phase, warm, progress)
        flat = eig.states.reshape(eig.n_states, -1)
        for row in flat:
            self._append_row(row)
        self.anchors.append(phase)
        return flat

    def h_reduced(self, t: float) -> np.ndarray:
        w = np.asarray(self.weights_fn(t))
        h = self.h_static[:self.q, :self.q].copy()
        for j, wj in enumerate(w):
            h += wj * self.h_comp[j, :self.q, :self.q]
        return h

    def eigh(self, t: float):
        theta, y = np.linalg.eigh(self.h_reduced(t))
        return theta, y

    def full_matvec(self, t: float, phi: np.ndarray) -> np.ndarray:
        w = np.asarray(self.weights_fn(t))
        out = self.ctx_static.apply_raw(phi.reshape(self.shape)).ravel()
        out += (w @ self.comp_flat) * phi
        return out

    def validate(self, phases) -> float:
        n = self.scenario.projection.n_states
        worst = 0.0
        worst_phase = None
        for t in phases:
            theta, y = self.eigh(t)
            phi = np.ascontiguousarray(y[:, :n].T) @ self.basis[:self.q]
            for i in range(n):
                hphi = self.full_matvec(t, phi[i])
                self.build_matvecs += 1
                res = np.linalg.norm(hphi - theta[i] * phi[i])
                rel = res / max(1.0, abs(theta[i]))
                if rel > worst:
                    worst, worst_phase = rel, t
        self.worst_residual = worst
        return worst_phase

    def reconstruct(self, coords: np.ndarray) -> np.ndarray:
        """Grid amplitudes of a reduced-coordinate vector."""
        return (coords @ self.basis[:self.q]).reshape(self.shape) / self.sqrt_dv

    def project(self, psi: np.ndarray) -> np.ndarray:
        """Reduced coordinates of grid amplitudes (cell-measure ip)."""
        return np.conj(self.basis[:self.q] @ np.conj(psi.ravel())) * self.sqrt_dv


def build_reduced_space(scenario: Scenario, progress=None) -> _ReducedSpace:
    """Anchor, compress and validate the reduced basis for one scenario."""
    if scenario.affine is None:
        raise ShuttleError("scenario has no affine drive decomposition")
    rcfg = scenario.reduced
    space = _ReducedSpace(scenario)
    phases = [i * scenario.t_max / rcfg.n_anchors for i in range(rcfg.n_anchors)]
    warm = None
    for phase in phases:
        warm = space.add_anchor(phase, warm, progress)

    while True:
        anchors = sorted(space.anchors)
        mids = [0.5 * (a + b) for a, b in zip(anchors, anchors[1:])]
        mids.append(0.5 * (anchors[-1] + scenario.t_max))
        stride = max(1, len(mids) // rcfg.n_validate)
        worst_phase = space.validate(mids[::stride])
        if progress:
            progress(f"reduced basis dim={space.q} anchors={len(space.anchors)} "
                     f"worst residual={space.worst_residual:.3e}")
        if space.worst_residual <= rcfg.residual_tol:
            break
        if len(space.anchors) >= rcfg.max_anchors or space.q >= rcfg.max_dim:
            if space.worst_residual > 10 * rcfg.residual_tol:
                raise ShuttleError(
                    f"reduced basis failed to validate: worst relative "
                    f"residual {space.worst_residual:.3e} with "
                    f"{len(space.anchors)} anchors (dim {space.q})")
            warnings.warn(
                f"reduced basis residual {space.worst_residual:.3e} above "
                f"target {rcfg.residual_tol:g}; proceeding", stacklevel=2)
            break
        space.add_anchor(worst_phase, warm, progress)
    return space


def _run_projection_reduced(scenario, resume, checkpoint_dir, checkpoint_at,
                            snapshot_times, snapshot_cb, progress):
    cfg = scenario.projection
    rec = _Recorder(scenario, cfg.n_states, "projection")
    warned: list = []
    events = _event_times(scenario, snapshot_times)
    sample_set = set(float(t) for t in _sample_times(scenario))
    snap_set = set(float(t) for t in snapshot_times)
    if checkpoint_at is not None:
        events = np.array(sorted(set(events) | {float(checkpoint_at)}))

    space = build_reduced_space(scenario, progress)
    n = cfg.n_states

    def v_field(t):
        return ScalarField(scenario.grid, scenario.affine.potential_values(t),
                           unit="meV")

    def current_psi(c_vec, y_rows):
        return WaveFunction(scenario.grid, space.reconstruct(c_vec @ y_rows))

    if resume is not None:
        from .storage import load_checkpoint
        chk = load_checkpoint(resume, scenario.grid)
        if chk.scenario_hash != scenario.descriptor_hash:
            raise ShuttleError("checkpoint does not match this scenario")
        if chk.extra is None or "reduced_y" not in chk.extra:
            raise ShuttleError("checkpoint was not written by the reduced "
                               "projection evolver")
        t = chk.t
        step = chk.step
        y_rows = (np.array(chk.extra["reduced_y"]["re"])
                  + 1j * np.array(chk.extra["reduced_y"]["im"]))
        if y_rows.shape != (n, space.q):
            raise ShuttleError("checkpoint reduced basis dimension mismatch")
        energies = chk.energies
        c = CoeffVector(c=chk.c, leaked_norm=chk.leaked, t=t)
        rec.prev_xc = chk.prev_xc
        rec.prev_mean_x = chk.prev_mean_x
    else:
        t = 0.0
        step = 0
        theta, y = space.eigh(0.0)
        y_rows, _ = _gauge_fix_arrays(np.ascontiguousarray(y[:, :n].T),
                                      theta[:n], None, cfg.degeneracy_window)
        energies = theta[:n]
        phi0 = space.reconstruct(y_rows[0])
        psi0 = prepare_initial_state(
            EigenSet(spec=scenario.grid, energies=energies,
                     states=phi0[None, ...], residuals=np.zeros(1)),
            scenario.velocity, scenario.masses)
        d = space.project(psi0.amplitudes)
        c_arr = np.conj(y_rows @ np.conj(d))
        c = CoeffVector.from_amplitudes(c_arr, 0.0)
        rec.record(0.0, c, energies, psi0, v_field(0.0))
        if 0.0 in snap_set and snapshot_cb:
            snapshot_cb(0.0, psi0)

    def write_checkpoint():
        from .storage import save_checkpoint
        states_full = np.array([space.reconstruct(y_rows[i]) for i in range(n)])
        eig_like = EigenSet(spec=scenario.grid, energies=energies,
                            states=states_full, residuals=np.zeros(n))
        extra = {"reduced_y": {"re": y_rows.real.tolist(),
                               "im": y_rows.imag.tolist()}}
        return save_checkpoint(checkpoint_dir, scenario.descriptor_hash,
                               t, step, c, eig_like, prev_xc=rec.prev_xc,
                               prev_mean_x=rec.prev_mean_x, extra=extra)

    while t < scenario.t_max - 1e-12:
        t_new, dt = _next_step(t, scenario.t_max, cfg.dt, events)
        theta, y = space.eigh(t_new)
        y_new, o = _gauge_fix_arrays(np.ascontiguousarray(y[:, :n].T),
                                     theta[:n], y_rows, cfg.degeneracy_window)
        c = _project(c, energies, o, dt, cfg.renormalize)
        _warn_truncation(c, warned)
        y_rows = y_new
        energies = theta[:n]
        t = t_new
        step += 1

        if t in sample_set or t in snap_set:
            psi = current_psi(c.c, y_rows)
            if t in sample_set:
                rec.record(t, c, energies, psi, v_field(t))
                if progress:
                    progress(f"t={t:.6g}/{scenario.t_max:.6g} ps "
                             f"F={rec.rows[-1][1]:.6f} leak={c.leaked_norm:.2e}")
            if t in snap_set and snapshot_cb:
                snapshot_cb(t, psi)
        if checkpoint_at is not None and t == float(checkpoint_at) \
                and checkpoint_dir is not None:
            write_checkpoint()
    return replace(rec.result(), diagnostics={
        "reduced_dim": space.q,
        "reduced_anchors": len(space.anchors),
        "reduced_worst_residual": space.worst_residual,
        "reduced_build_matvecs": space.build_matvecs,
    })


def _run_projection(scenario, resume, checkpoint_dir, checkpoint_at,
                    snapshot_times, snapshot_cb, progress):
    if scenario.affine is not None and scenario.reduced.enable:
        return _run_projection_reduced(scenario, resume, checkpoint_dir,
                                       checkpoint_at, snapshot_times,
                                       snapshot_cb, progress)
    cfg = scenario.projection
    lz = cfg.lanczos
    rec = _Recorder(scenario, cfg.n_states, "projection")
    warned: list = []
    events = _event_times(scenario, snapshot_times)
    sample_set = set(float(t) for t in _sample_times(scenario))
    snap_set = set(float(t) for t in snapshot_times)
    if checkpoint_at is not None:
        events = np.array(sorted(set(events) | {float(checkpoint_at)}))

    v0 = scenario.potential(0.0)
    ctx = HamiltonianContext.build(scenario.grid, v0, scenario.masses)

    if resume is not None:
        from .storage import load_checkpoint
        chk = load_checkpoint(resume, scenario.grid)
        if chk.scenario_hash != scenario.descriptor_hash:
            raise ShuttleError("checkpoint does not match this scenario")
        t = chk.t
        step = chk.step
        eig = EigenSet(spec=scenario.grid, energies=chk.energies,
                       states=chk.basis, residuals=np.zeros(cfg.n_states))
        c = CoeffVector(c=chk.c, leaked_norm=chk.leaked, t=t)
        rec.prev_xc = chk.prev_xc
        rec.prev_mean_x = chk.prev_mean_x
    else:
        t = 0.0
        step = 0
        eig = lanczos_lowest(ctx, cfg.n_states, tol=lz.tol,
                             max_matvecs=lz.max_matvecs, seed=scenario.seed,
                             m_inner=lz.m_inner, n_buffer=lz.n_buffer)
        eig, _ = gauge_fix(eig, None, cfg.degeneracy_window)
        psi0 = prepare_initial_state(eig, scenario.velocity, scenario.masses)
        c = _coeffs_from_state(psi0, eig, 0.0)
        rec.record(0.0, c, eig.energies, psi0, v0)
        if 0.0 in snap_set and snapshot_cb:
            snapshot_cb(0.0, psi0)

    def write_checkpoint():
        from .storage import save_checkpoint
        return save_checkpoint(checkpoint_dir, scenario.descriptor_hash,
                               t, step, c, eig, prev_xc=rec.prev_xc,
                               prev_mean_x=rec.prev_mean_x)

    while t < scenario.t_max - 1e-12:
        t_new, dt = _next_step(t, scenario.t_max, cfg.dt, events)
        v_new = scenario.potential(t_new)
        ctx = ctx.with_potential(v_new)
        step += 1
        try:
            eig_new = lanczos_lowest(
                ctx, cfg.n_states, tol=lz.tol, max_matvecs=lz.max_matvecs,
                seed=scenario.seed ^ step, m_inner=lz.m_inner,
                n_buffer=lz.n_buffer,
                warm_start=eig.states.reshape(eig.n_states, -1))
        except LanczosError as exc:
            path = write_checkpoint() if checkpoint_dir is not None else None
            raise ShuttleError(
                f"eigensolver failed at t={t_new:.6g} ps: {exc}",
                checkpoint_path=path) from exc
        eig_new, o = gauge_fix(eig_new, eig.states, cfg.degeneracy_window)
        c = _project(c, eig.energies, o, dt, cfg.renormalize)
        _warn_truncation(c, warned)
        eig = eig_new
        t = t_new

        if t in sample_set or t in snap_set:
            psi = _state_from_coeffs(c, eig)
            if t in sample_set:
                rec.record(t, c, eig.energies, psi, v_new)
                if progress:
                    progress(f"t={t:.6g}/{scenario.t_max:.6g} ps "
                             f"F={rec.rows[-1][1]:.6f} leak={c.leaked_norm:.2e} "
                             f"matvecs={eig_new.matvecs}")
            if t in snap_set and snapshot_cb:
                snapshot_cb(t, psi)
        if checkpoint_at is not None and t == float(checkpoint_at) \
                and checkpoint_dir is not None:
            write_checkpoint()
    return rec.result()


def _run_split(scenario, resume, snapshot_times, snapshot_cb, progress):
    cfg = scenario.split
    proj_cfg = scenario.projection
    lz = proj_cfg.lanczos
    rec = _Recorder(scenario, proj_cfg.n_states, "split")
    events = _event_times(scenario, snapshot_times)
    sample_set = set(float(t) for t in _sample_times(scenario))
    snap_set = set(float(t) for t in snapshot_times)

    v0 = scenario.potential(0.0)
    ctx = HamiltonianContext.build(scenario.grid, v0, scenario.masses)

    if resume is not None:
        from .storage import load_checkpoint
        chk = load_checkpoint(resume, scenario.grid)
        if chk.scenario_hash != scenario.descriptor_hash:
            raise ShuttleError("checkpoint does not match this scenario")
        t = chk.t
        psi = WaveFunction(scenario.grid, chk.psi)
        eig_prev = None
        rec.prev_xc = chk.prev_xc
        rec.prev_mean_x = chk.prev_mean_x
    else:
        t = 0.0
        eig0 = lanczos_lowest(ctx, proj_cfg.n_states, tol=lz.tol,
                              max_matvecs=lz.max_matvecs, seed=scenario.seed,
                              m_inner=lz.m_inner, n_buffer=lz.n_buffer)
        eig0, _ = gauge_fix(eig0, None, proj_cfg.degeneracy_window)
        psi = prepare_initial_state(eig0, scenario.velocity, scenario.masses)
        c0 = _coeffs_from_state(psi, eig0, 0.0)
        rec.record(0.0, c0, eig0.energies, psi, v0)
        eig_prev = eig0
        if 0.0 in snap_set and snapshot_cb:
            snapshot_cb(0.0, psi)

    raw = psi.amplitudes.copy()
    half_v = None
    full_t = None
    dt_cached = None
    steps_since_refresh = cfg.refresh_every  # force refresh on entry

    while t < scenario.t_max - 1e-12:
        t_new, dt = _next_step(t, scenario.t_max, cfg.dt, events)
        if dt != dt_cached or steps_since_refresh >= cfg.refresh_every:
            block = min(cfg.refresh_every * cfg.dt, dt)
            v_mid = scenario.potential(t + 0.5 * max(block, dt))
            ctx = ctx.with_potential(v_mid)
            half_v = np.exp(ctx.potential.values * (-0.5j * dt / HBAR))
            full_t = np.exp(ctx.kinetic * (-1j * dt / HBAR))
            dt_cached = dt
            steps_since_refresh = 0
        raw *= half_v
        raw = sfft.ifftn(full_t * sfft.fftn(raw, workers=_WORKERS),
                         workers=_WORKERS)
        raw *= half_v
        steps_since_refresh += 1
        t = t_new

        if t in sample_set or t in snap_set:
            psi = WaveFunction(scenario.grid, raw)
            if t in sample_set:
                v_now = scenario.potential(t)
                ctx_now = ctx.with_potential(v_now)
                warm = (eig_prev.states.reshape(eig_prev.n_states, -1)
                        if eig_prev is not None else None)
                eig_now = lanczos_lowest(
                    ctx_now, proj_cfg.n_states, tol=lz.tol,
                    max_matvecs=lz.max_matvecs,
                    seed=scenario.seed ^ (1 << 20) ^ len(rec.rows),
                    m_inner=lz.m_inner, n_buffer=lz.n_buffer,
                    warm_start=warm)
                ref = eig_prev.states if eig_prev is not None else None
                eig_now, _ = gauge_fix(eig_now, ref, proj_cfg.degeneracy_window)
                c_now = _coeffs_from_state(psi, eig_now, t)
                rec.record(t, c_now, eig_now.energies, psi, v_now)
                eig_prev = eig_now
                if progress:
                    progress(f"t={t:.6g}/{scenario.t_max:.6g} ps "
                             f"F={rec.rows[-1][1]:.6f}")
            if t in snap_set and snapshot_cb:
                snapshot_cb(t, psi)
    return rec.result()


@dataclass(frozen=True)
class ComparisonReport:
    times: np.ndarray
    max_population_dev: float
    rms_population_dev: float
    projection_wall_s: float
    split_wall_s: float

    @property
    def wall_ratio(self) -> float:
        return self.split_wall_s / max(self.projection_wall_s, 1e-12)


def compare_evolvers(scenario: Scenario) -> ComparisonReport:
    """Run both evolvers and compare per-level population trajectories."""
    t0 = time.perf_counter()
    proj = run_shuttle(scenario, evolver="projection")
    t1 = time.perf_counter()
    split = run_shuttle(scenario, evolver="split")
    t2 = time.perf_counter()
    if proj.t.shape != split.t.shape or not np.allclose(proj.t, split.t):
        raise ShuttleError("evolvers sampled different time grids")
    dev = np.abs(proj.populations - split.populations)
    return ComparisonReport(
        times=proj.t, max_population_dev=float(dev.max()),
        rms_population_dev=float(np.sqrt(np.mean(dev**2))),
        projection_wall_s=t1 - t0, split_wall_s=t2 - t1)
