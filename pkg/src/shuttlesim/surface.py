"""Self-affine rough interface synthesis and roughness statistics.

Roughness is generated spectrally: Fourier amplitudes follow the power
law |h(q)| ~ q^-(1+H) (so the PSD falls off as q^-2(1+H), H the Hurst
exponent), every mode gets a uniform random phase from a seeded
generator, Hermitian symmetry makes the inverse transform real, the DC
mode is zeroed, and the realization is rescaled to the requested RMS
exactly. Heights are periodic in both axes by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .grid import GridSpec, ScalarField


class SurfaceError(ValueError):
    pass


@dataclass(frozen=True)
class SurfaceSpec:
    hurst: float = 0.3
    rms: float = 0.0  # nm
    seed: int = 0
    nx: int = 140
    ny: int = 60
    dx: float = 1.0
    dy: float = 1.0
    q_min: Optional[float] = None  # nm^-1 band limits on |q|
    q_max: Optional[float] = None

    def __post_init__(self):
        if not (0.0 < self.hurst < 1.0):
            raise SurfaceError(f"Hurst exponent must lie in (0, 1), got {self.hurst}")
        if self.rms < 0.0:
            raise SurfaceError("rms must be >= 0")
        if self.nx < 1 or self.ny < 1:
            raise SurfaceError("grid counts must be positive")
        if self.dx <= 0 or self.dy <= 0:
            raise SurfaceError("grid spacings must be positive")
        if (self.q_min is not None and self.q_max is not None
                and self.q_min >= self.q_max):
            raise SurfaceError("empty band: q_min >= q_max suppresses all modes")


@dataclass(frozen=True)
class HeightField:
    """Periodic interface height map h(x, y) in nm, shape (ny, nx)."""

    heights: np.ndarray = field(repr=False)
    dx: float = 1.0
    dy: float = 1.0
    spec: Optional[SurfaceSpec] = None

    def __post_init__(self):
        h = np.ascontiguousarray(self.heights, dtype=np.float64)
        if h.ndim != 2:
            raise SurfaceError("heights must be a 2D (ny, nx) array")
        if not np.all(np.isfinite(h)):
            raise SurfaceError("heights contain non-finite entries")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.heights**2)))


def _q_grids(nx, ny, dx, dy):
    qx = 2.0 * np.pi * np.fft.fftfreq(nx, dx)
    qy = 2.0 * np.pi * np.fft.fftfreq(ny, dy)
    return np.hypot(qy[:, None], qx[None, :])


def generate_surface(spec: SurfaceSpec) -> HeightField:
    """Synthesize one seeded roughness realization with exact target RMS."""
    ny, nx = spec.ny, spec.nx
    if spec.rms == 0.0:
        return HeightField(np.zeros((ny, nx)), spec.dx, spec.dy, spec)

    q = _q_grids(nx, ny, spec.dx, spec.dy)
    amp = np.zeros_like(q)
    nonzero = q > 0.0
    amp[nonzero] = q[nonzero] ** (-(1.0 + spec.hurst))
    if spec.q_min is not None:
        amp[q < spec.q_min] = 0.0
    if spec.q_max is not None:
        amp[q > spec.q_max] = 0.0
    amp[0, 0] = 0.0
    if not np.any(amp > 0.0):
        raise SurfaceError("band limits suppress every Fourier mode")

    rng = np.random.default_rng(spec.seed)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(ny, nx))

    # Hermitian pairing: each mode (i, j) mirrors to (-i, -j) mod n. The
    # lexicographically smaller member keeps its drawn phase, the partner
    # gets the conjugate; self-conjugate modes are forced real with a
    # phase-derived sign.
    ii, jj = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    mi, mj = (-ii) % ny, (-jj) % nx
    canonical = (ii < mi) | ((ii == mi) & (jj <= mj))
    spectrum = amp * np.exp(1j * theta)
    spectrum = np.where(canonical, spectrum, np.conj(spectrum[mi, mj]))
    self_conj = (ii == mi) & (jj == mj)
    spectrum[self_conj] = amp[self_conj] * np.cos(theta[self_conj])

    h = np.fft.ifft2(spectrum)
    raw_rms = float(np.sqrt(np.mean(h.real**2)))
    imag_max = float(np.max(np.abs(h.imag)))
    if raw_rms == 0.0:
        raise SurfaceError("surface synthesis produced a null field")
    if imag_max > 1e-12 * raw_rms:
        raise SurfaceError(f"Hermitian symmetry violated: imag residue {imag_max:g}")
    h = h.real.copy()
    h -= h.mean()
    h *= spec.rms / np.sqrt(np.mean(h**2))
    return HeightField(h, spec.dx, spec.dy, spec)


@dataclass(frozen=True)
class SurfaceStats:
    rms: float
    mean: float
    psd_slope: Optional[float]
    psd_fit_band: Optional[Tuple[float, float]]
    acf_lags: np.ndarray = field(repr=False)
    acf: np.ndarray = field(repr=False)


def radial_psd(h: HeightField, n_bins: int = 32):
    """Radially averaged power spectrum (log-spaced |q| bins)."""
    ny, nx = h.heights.shape
    F = np.fft.fft2(h.heights)
    psd = (np.abs(F) ** 2) / (nx * ny)
    q = _q_grids(nx, ny, h.dx, h.dy)
    qpos = q[q > 0]
    if qpos.size == 0:
        return np.array([]), np.array([])
    edges = np.geomspace(qpos.min() * 0.999, qpos.max() * 1.001, n_bins + 1)
    which = np.digitize(q.ravel(), edges) - 1
    valid = (q.ravel() > 0) & (which >= 0) & (which < n_bins)
    sums = np.bincount(which[valid], weights=psd.ravel()[valid], minlength=n_bins)
    counts = np.bincount(which[valid], minlength=n_bins)
    centers = np.sqrt(edges[:-1] * edges[1:])
    filled = counts > 0
    return centers[filled], sums[filled] / counts[filled]


def fit_psd_slope(h: HeightField):
    """Least-squares slope of log PSD vs log |q|.

    The fit band [4*q_min, q_max/4] keeps clear of the DC bin and the
    Nyquist corner, where binning and aliasing distort the power law.
    """
    centers, p = radial_psd(h)
    if centers.size == 0 or np.all(p <= 0):
        return None, None
    q_lo = 4.0 * 2.0 * np.pi / max(h.heights.shape[1] * h.dx, h.heights.shape[0] * h.dy)
    q_hi = 0.25 * np.pi / max(h.dx, h.dy)
    sel = (centers >= q_lo) & (centers <= q_hi) & (p > 0)
    if np.count_nonzero(sel) < 3:
        return None, None
    slope = np.polyfit(np.log(centers[sel]), np.log(p[sel]), 1)[0]
    return float(slope), (float(q_lo), float(q_hi))


def surface_statistics(h: HeightField, acf_bins: int = 64) -> SurfaceStats:
    """Measured RMS/mean, fitted PSD slope and radially averaged ACF."""
    ny, nx = h.heights.shape
    rms = h.rms
    mean = float(np.mean(h.heights))

    # circular autocorrelation via Wiener-Khinchin; ACF(0) = mean square
    F = np.fft.fft2(h.heights)
    acf2 = np.fft.ifft2(np.abs(F) ** 2).real / (nx * ny)
    x = np.fft.fftfreq(nx, 1.0 / (nx * h.dx))
    y = np.fft.fftfreq(ny, 1.0 / (ny * h.dy))
    r = np.hypot(y[:, None], x[None, :])
    r_max = 0.5 * min(nx * h.dx, ny * h.dy)
    edges = np.linspace(0.0, r_max, acf_bins + 1)
    which = np.digitize(r.ravel(), edges) - 1
    valid = (which >= 0) & (which < acf_bins)
    sums = np.bincount(which[valid], weights=acf2.ravel()[valid], minlength=acf_bins)
    counts = np.bincount(which[valid], minlength=acf_bins)
    filled = counts > 0
    lags = 0.5 * (edges[:-1] + edges[1:])[filled]
    acf = sums[filled] / counts[filled]

    if rms == 0.0:
        slope, band = None, None
    else:
        slope, band = fit_psd_slope(h)
    return SurfaceStats(rms=rms, mean=mean, psd_slope=slope, psd_fit_band=band,
                        acf_lags=lags, acf=acf)


def as_scalar_field(h: HeightField) -> ScalarField:
    """Pack heights into the shared field container (nz = 1, unit nm)."""
    ny, nx = h.heights.shape
    spec = GridSpec(nx=nx, ny=ny, nz=1, dx=h.dx, dy=h.dy, dz=1.0)
    return ScalarField(spec, h.heights.reshape(1, ny, nx), unit="nm")


def from_scalar_field(f: ScalarField) -> HeightField:
    if f.spec.nz != 1:
        raise SurfaceError("height fields must have nz = 1")
    return HeightField(f.values[0], f.spec.dx, f.spec.dy)
