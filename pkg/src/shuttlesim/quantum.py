"""Matrix-free effective-mass Hamiltonian and Lanczos eigensolver.

The kinetic operator is diagonal in momentum space,
T(k) = (hbar^2/2)(kx^2/m_x + ky^2/m_y + kz^2/m_z), so one Hamiltonian
application costs a forward/inverse FFT pair plus two pointwise
products: H psi = IFFT[T * FFT[psi]] + V * psi. In-plane axes carry the
silicon transverse mass and z the longitudinal mass, the correct
assignment for +-z-valley electrons at a (001) interface. Masses are
uniform because the oxide enters as a potential barrier, not a mass
step, which is what reduces the full div(m^-1 grad) form to this
diagonal-in-k product.

The eigensolver is a thick-restart Lanczos iteration with full
reorthogonalization: each cycle extends the retained Ritz vectors with a
fresh Krylov sequence, Rayleigh-Ritz reduces the combined subspace, and
the lowest pairs are kept for the next cycle. Restart cycles repeat
until every requested residual passes the tolerance. A warm-start basis
(for example the previous timestep's eigenvectors while shuttling) makes
the per-step cost a handful of matrix applications.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft as sfft

from .constants import HBAR2_OVER_ME, ML_SI, MT_SI
from .grid import GridSpec, ScalarField, WaveFunction, wavevectors

_WORKERS = os.cpu_count() or 1


class LanczosError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


@dataclass(frozen=True)
class MassTensor:
    mx: float = MT_SI
    my: float = MT_SI
    mz: float = ML_SI  # units of m_e

    def __post_init__(self):
        if min(self.mx, self.my, self.mz) <= 0:
            raise ValueError("effective masses must be positive")


@dataclass(frozen=True)
class HamiltonianContext:
    """Grid, kinetic multiplier and the current potential (swappable)."""

    spec: GridSpec
    masses: MassTensor
    kinetic: np.ndarray = field(repr=False)  # T(k) on the FFT grid, meV
    potential: ScalarField = field(repr=False)

    def __post_init__(self):
        self.spec.require_compatible(self.potential.spec, "potential")

    @classmethod
    def build(cls, spec: GridSpec, potential: ScalarField,
              masses: MassTensor = MassTensor()) -> "HamiltonianContext":
        k = wavevectors(spec)
        t = (HBAR2_OVER_ME / 2.0) * (
            k.kx[None, None, :] ** 2 / masses.mx
            + k.ky[None, :, None] ** 2 / masses.my
            + k.kz[:, None, None] ** 2 / masses.mz
        )
        t = np.ascontiguousarray(np.broadcast_to(t, spec.shape))
        t.setflags(write=False)
        return cls(spec=spec, masses=masses, kinetic=t, potential=potential)

    def with_potential(self, potential: ScalarField) -> "HamiltonianContext":
        """Swap the potential; the kinetic multiplier is reused unchanged."""
        return HamiltonianContext(spec=self.spec, masses=self.masses,
                                  kinetic=self.kinetic, potential=potential)

    def apply_raw(self, psi: np.ndarray) -> np.ndarray:
        """H applied to a raw (nz, ny, nx) complex array."""
        out = sfft.ifftn(self.kinetic * sfft.fftn(psi, workers=_WORKERS),
                         workers=_WORKERS)
        out += self.potential.values * psi
        return out


def apply_hamiltonian(ctx: HamiltonianContext, psi: WaveFunction) -> WaveFunction:
    """H|psi> without mutating |psi>."""
    ctx.spec.require_compatible(psi.spec, "wavefunction")
    return WaveFunction(ctx.spec, ctx.apply_raw(psi.amplitudes))


@dataclass(frozen=True)
class EigenSet:
    """Lowest instantaneous eigenpairs, energies ascending.

    ``states`` holds the eigenvectors as an (n, nz, ny, nx) stack
    normalized with the cell measure (sum |phi|^2 dV = 1).
    """

    spec: GridSpec
    energies: np.ndarray
    states: np.ndarray = field(repr=False)
    residuals: np.ndarray = field(repr=False)
    matvecs: int = 0

    @property
    def n_states(self) -> int:
        return len(self.energies)

    def wavefunction(self, n: int) -> WaveFunction:
        return WaveFunction(self.spec, self.states[n])

    def overlap_with(self, other: "EigenSet") -> np.ndarray:
        """O_nm = <self_n | other_m> with the cell measure."""
        self.spec.require_compatible(other.spec, "eigensets")
        a = self.states.reshape(self.n_states, -1)
        b = other.states.reshape(other.n_states, -1)
        return np.conj(a @ np.conj(b).T) * self.spec.cell_volume


def _dots(basis: np.ndarray, w: np.ndarray) -> np.ndarray:
    # <b_i|w> for row-stacked basis without materializing conj(basis)
    return np.conj(basis @ np.conj(w))


def lanczos_lowest(ctx: HamiltonianContext, n_states: int, tol: float = 1e-8,
                   max_matvecs: int = 6000, seed: int = 0,
                   warm_start: Optional[np.ndarray] = None,
                   m_inner: int = 24, n_buffer: int = 4) -> EigenSet:
    """Lowest ``n_states`` eigenpairs of H by thick-restart Lanczos.

    Each cycle extends the retained Ritz block with an ``m_inner``-step
    fully reorthogonalized Lanczos sequence started from the worst
    residual, then Rayleigh-Ritz compresses back to the best
    ``n_states + n_buffer`` vectors. Convergence requires
    ||H phi - eps phi|| < tol * max(1, |eps|) for every requested pair,
    with residual norms taken from the actual residual vectors.

    ``warm_start`` accepts an (n, ...) stack of trial vectors (any
    normalization), typically the previous timestep's eigenvectors. The
    start vector carries a tiny seeded admixture in every cycle so that
    no symmetry sector of H is ever left unexplored: a parity-pure start
    would otherwise confine the Krylov space to its own sector.
    """
    m_total = ctx.spec.size
    if n_states < 1:
        raise ValueError("n_states must be >= 1")
    if n_states > m_total - 1:
        raise LanczosError(f"n_states={n_states} exceeds grid size {m_total}")

    shape = ctx.spec.shape
    rng = np.random.default_rng(seed)
    n_keep = min(n_states + n_buffer, m_total - 1)
    m_inner = max(4, min(m_inner, m_total - n_keep - 1))

    def random_vector():
        v = rng.standard_normal(m_total) + 1j * rng.standard_normal(m_total)
        return v / np.linalg.norm(v)

    def matvec(v):
        return ctx.apply_raw(v.reshape(shape)).ravel()

    matvecs = 0
    if warm_start is not None and len(warm_start) > 0:
        w = np.asarray(warm_start, dtype=np.complex128).reshape(len(warm_start), -1)
        if w.shape[1] != m_total:
            raise ValueError("warm_start vectors do not match the grid")
        q, _ = np.linalg.qr(w.T)
        S = np.ascontiguousarray(q.T)
    else:
        S = random_vector()[None, :]
    HS = np.empty_like(S)
    for i in range(S.shape[0]):
        HS[i] = matvec(S[i])
        matvecs += 1

    while True:
        # Rayleigh-Ritz on the retained block; residuals from true vectors
        a = np.conj(S @ np.conj(HS).T)
        a = 0.5 * (a + np.conj(a.T))
        theta, y = np.linalg.eigh(a)
        take = min(n_keep, S.shape[0])
        S = np.ascontiguousarray(y[:, :take].T @ S)
        HS = np.ascontiguousarray(y[:, :take].T @ HS)
        theta = theta[:take]
        nres = min(n_states, take)
        res_vecs = HS[:nres] - theta[:nres, None] * S[:nres]
        residuals = np.linalg.norm(res_vecs, axis=1)
        limits = tol * np.maximum(1.0, np.abs(theta[:nres]))
        if take >= n_states and np.all(residuals < limits):
            break
        if matvecs >= max_matvecs:
            raise LanczosError(
                f"eigensolver did not converge within {max_matvecs} matvecs: "
                f"residuals {residuals}", residuals=residuals)

        worst = int(np.argmax(residuals / limits))
        r = res_vecs[worst]
        nr = np.linalg.norm(r)
        # the tiny seeded admixture keeps every symmetry sector reachable
        q0 = (r / nr if nr > 1e-14 else random_vector()) + 1e-6 * random_vector()

        # fully reorthogonalized Lanczos expansion (two CGS passes/vector)
        s = S.shape[0]
        budget = max(1, min(m_inner, max_matvecs - matvecs))
        B = np.empty((s + budget, m_total), dtype=np.complex128)
        HB = np.empty_like(B)
        B[:s] = S
        HB[:s] = HS
        k = s
        v = q0 - B[:k].T @ _dots(B[:k], q0)
        v -= B[:k].T @ _dots(B[:k], v)
        nv = np.linalg.norm(v)
        if nv < 1e-12:
            v = random_vector()
            v -= B[:k].T @ _dots(B[:k], v)
            nv = np.linalg.norm(v)
        v /= nv
        for _ in range(budget):
            B[k] = v
            hv = matvec(v)
            matvecs += 1
            HB[k] = hv
            k += 1
            w = hv - B[:k].T @ _dots(B[:k], hv)
            w -= B[:k].T @ _dots(B[:k], w)
            nw = np.linalg.norm(w)
            if nw < 1e-10:
                break
            v = w / nw
        S = B[:k]
        HS = HB[:k]

    scale = 1.0 / np.sqrt(ctx.spec.cell_volume)
    states = (S[:n_states] * scale).reshape((n_states,) + shape)
    return EigenSet(spec=ctx.spec, energies=theta[:n_states].copy(),
                    states=states, residuals=residuals[:n_states].copy(),
                    matvecs=matvecs)
