"""Shuttling quality metrics, Landau-Zener diagnostics and level diagrams.

The two headline metrics of a run are the ground-state fidelity
F = |c_0(t)|^2 (degree of adiabaticity) and the charge-loss probability
P_L, defined here as the population outside a periodic window of
half-width w around the tracked conveyor minimum. The minimum is scanned
along x in the channel analysis plane (1 nm below the mean interface at
the channel center for device scenarios).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .constants import HBAR
from .grid import WaveFunction


@dataclass(frozen=True)
class ShuttleResult:
    """Per-sample time series of one shuttle run plus its final summary."""

    t: np.ndarray
    fidelity: np.ndarray
    subspace_fidelity: np.ndarray
    loss: np.ndarray
    leaked: np.ndarray
    mean_x: np.ndarray
    mean_y: np.ndarray
    mean_z: np.ndarray
    energies: np.ndarray  # (n_samples, n_levels), meV
    scenario_hash: str = ""
    evolver: str = "projection"
    populations: Optional[np.ndarray] = field(default=None, repr=False)
    diagnostics: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.t)
        for name in ("fidelity", "subspace_fidelity", "loss", "leaked",
                     "mean_x", "mean_y", "mean_z"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has wrong length")
        if self.energies.shape[0] != n:
            raise ValueError("energies table has wrong length")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("sample timestamps must be strictly increasing")
        for name in ("fidelity", "loss"):
            col = getattr(self, name)
            if np.any(col < -1e-9) or np.any(col > 1.0 + 1e-9):
                raise ValueError(f"{name} outside [0, 1]")

    @property
    def n_levels(self) -> int:
        return self.energies.shape[1]

    @property
    def final_fidelity(self) -> float:
        return float(self.fidelity[-1])

    @property
    def final_loss(self) -> float:
        return float(self.loss[-1])

    @property
    def max_leaked(self) -> float:
        return float(self.leaked.max())


def fidelity(c) -> float:
    """Ground-state population |c_0|^2."""
    arr = np.asarray(getattr(c, "c", c))
    return float(abs(arr[0]) ** 2)


def ground_subspace_fidelity(c, energies, window: float = 1e-3) -> float:
    """Population of all levels within ``window`` meV of the ground state.

    Near degeneracies the single-level fidelity can swing between two
    partners that are physically one well; this companion metric makes
    those cases interpretable.
    """
    arr = np.asarray(getattr(c, "c", c))
    energies = np.asarray(energies)
    members = energies - energies[0] <= window
    return float(np.sum(np.abs(arr[members]) ** 2))


def loss_probability(psi: WaveFunction, x_center: float, halfwidth: float) -> float:
    """P_L = 1 - (population within periodic |x - x_center| <= halfwidth)."""
    lx = psi.spec.extent[0]
    if not (0.0 < halfwidth <= 0.5 * lx):
        raise ValueError("window halfwidth must lie in (0, Lx/2]")
    x = psi.spec.axis_centers("x")
    dist = np.abs((x - x_center + 0.5 * lx) % lx - 0.5 * lx)
    inside = dist <= halfwidth
    dens_x = psi.density().sum(axis=(0, 1)) * psi.spec.cell_volume
    return float(max(0.0, 1.0 - dens_x[inside].sum()))


def circular_mean_x(weights_x: np.ndarray, x_centers: np.ndarray,
                    lx: float, x0: float) -> float:
    """First moment of a periodic x-distribution, mapped into [x0, x0+Lx)."""
    total = weights_x.sum()
    ang = 2.0 * np.pi * (x_centers - x0) / lx
    z = np.sum(weights_x * np.exp(1j * ang)) / max(total, 1e-300)
    if abs(z) < 1e-12:
        return x0 + 0.5 * lx  # uniform distribution: center of the domain
    mean_ang = math.atan2(z.imag, z.real) % (2.0 * np.pi)
    return x0 + mean_ang * lx / (2.0 * np.pi)


def unwrap_track(x: float, prev: Optional[float], lx: float) -> float:
    """Lift a periodic coordinate onto the continuous track nearest ``prev``."""
    if prev is None:
        return x
    return prev + ((x - prev + 0.5 * lx) % lx) - 0.5 * lx


def mean_position(psi: WaveFunction) -> Tuple[float, float, float]:
    """First moments of |psi|^2; x uses the periodic circular mean."""
    spec = psi.spec
    dens = psi.density() * spec.cell_volume
    total = dens.sum()
    mx = circular_mean_x(dens.sum(axis=(0, 1)), spec.axis_centers("x"),
                         spec.extent[0], spec.origin[0])
    my = float((dens.sum(axis=(0, 2)) * spec.axis_centers("y")).sum() / total)
    mz = float((dens.sum(axis=(1, 2)) * spec.axis_centers("z")).sum() / total)
    return mx, my, mz


def track_minimum(v_slice: np.ndarray, x_centers: np.ndarray, lx: float,
                  prev: Optional[float] = None) -> float:
    """x of the global minimum of a 1D potential scan, unwrapped.

    Ties (bitwise-equal minima) break toward the previous position; the
    first occurrence wins when there is no history.
    """
    vmin = v_slice.min()
    candidates = np.flatnonzero(v_slice == vmin)
    if prev is None or len(candidates) == 1:
        x = x_centers[candidates[0]]
    else:
        prev_wrapped = (prev - x_centers[0]) % lx + x_centers[0]
        dist = np.abs((x_centers[candidates] - prev_wrapped + 0.5 * lx)
                      % lx - 0.5 * lx)
        x = x_centers[candidates[int(np.argmin(dist))]]
    return unwrap_track(float(x), prev, lx)


def minimum_track(slices: np.ndarray, x_centers: np.ndarray, lx: float) -> np.ndarray:
    """Unwrapped conveyor-minimum trajectory for a sequence of x-scans."""
    out = np.empty(len(slices))
    prev = None
    for i, s in enumerate(slices):
        prev = track_minimum(np.asarray(s), x_centers, lx, prev)
        out[i] = prev
    return out


@dataclass(frozen=True)
class LZParams:
    """Avoided-crossing gap a (meV) and sweep rate alpha (meV/ps)."""

    a: float
    alpha: float

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("gap must be >= 0")


def landau_zener_pd(p: LZParams) -> float:
    """Diabatic transition probability P_D = exp(-2 pi a^2 / (hbar |alpha|))."""
    if p.alpha == 0.0:
        raise ValueError("sweep rate alpha must be nonzero")
    gamma = p.a**2 / (HBAR * abs(p.alpha))
    return math.exp(-2.0 * math.pi * gamma)


def lz_from_levels(t: np.ndarray, e_lo: np.ndarray, e_hi: np.ndarray) -> LZParams:
    """Extract (a, alpha) at the minimum of the gap e_hi - e_lo.

    alpha is the centered finite difference of the gap at its minimum.
    Diagnostic only; never fed back into the dynamics.
    """
    gap = np.asarray(e_hi) - np.asarray(e_lo)
    i = int(np.argmin(gap))
    j = min(max(i, 1), len(gap) - 2)
    alpha = (gap[j + 1] - gap[j - 1]) / (t[j + 1] - t[j - 1])
    return LZParams(a=float(gap[i]), alpha=float(alpha))


def level_diagram(scenario, n_levels: int = 10, n_samples: int = 64,
                  progress=None) -> Tuple[np.ndarray, np.ndarray]:
    """Instantaneous eigenenergies of the frozen potential over one run.

    Diagonalizes H(t) on a uniform time grid (no evolution involved) and
    returns (times, energies[n_samples, n_levels]) with each row sorted.
    Consecutive solves reuse the previous eigenbasis as a warm start.
    """
    from .quantum import HamiltonianContext, lanczos_lowest

    times = np.linspace(0.0, scenario.t_max, n_samples)
    ctx = HamiltonianContext.build(scenario.grid, scenario.potential(0.0),
                                   scenario.masses)
    lz = scenario.projection.lanczos
    energies = np.empty((n_samples, n_levels))
    warm = None
    for i, t in enumerate(times):
        ctx = ctx.with_potential(scenario.potential(float(t)))
        eig = lanczos_lowest(ctx, n_levels, tol=lz.tol,
                             max_matvecs=lz.max_matvecs,
                             seed=scenario.seed ^ (i << 8),
                             m_inner=lz.m_inner, n_buffer=lz.n_buffer,
                             warm_start=warm)
        energies[i] = eig.energies
        warm = eig.states.reshape(n_levels, -1)
        if progress:
            progress(f"sample {i + 1}/{n_samples}: e0={eig.energies[0]:.4f} meV")
    return times, energies
