"""Uniform 3D grids, field containers and wavevector tables.

Arrays are stored C-contiguous with shape ``(nz, ny, nx)`` so that x is
the fastest axis; flattening therefore produces the row-major x-fastest
layout used by the on-disk field container. Cell i along an axis covers
``[origin + i*d, origin + (i+1)*d)`` and is sampled at its center
``origin + (i + 0.5)*d``.

Field containers are immutable values: their numpy buffers are marked
read-only at construction, and every operation returns a fresh object.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

BC_TAGS = ("periodic", "neumann", "dirichlet-zero")


class GridError(ValueError):
    """Raised for invalid grid definitions or layout-incompatible operands."""


@dataclass(frozen=True)
class GridSpec:
    """Geometry and boundary tags of a uniform rectilinear 3D grid."""

    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    bc_x: str = "periodic"
    bc_y: str = "periodic"
    bc_z: str = "periodic"

    def __post_init__(self):
        for name, n in (("nx", self.nx), ("ny", self.ny), ("nz", self.nz)):
            if int(n) != n or n <= 0:
                raise GridError(f"{name} must be a positive integer, got {n!r}")
        for name, d in (("dx", self.dx), ("dy", self.dy), ("dz", self.dz)):
            if not (d > 0):
                raise GridError(f"{name} must be > 0, got {d!r}")
        if len(self.origin) != 3:
            raise GridError("origin must be a 3-tuple (x0, y0, z0)")
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))
        for name, bc in (("bc_x", self.bc_x), ("bc_y", self.bc_y), ("bc_z", self.bc_z)):
            if bc not in BC_TAGS:
                raise GridError(f"{name} must be one of {BC_TAGS}, got {bc!r}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        """Array shape ``(nz, ny, nx)``."""
        return (self.nz, self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def extent(self) -> Tuple[float, float, float]:
        """Physical extent (Lx, Ly, Lz) in nm, derived from counts and spacings."""
        return (self.nx * self.dx, self.ny * self.dy, self.nz * self.dz)

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz

    def axis_centers(self, axis: str) -> np.ndarray:
        """Cell-center coordinates along ``'x'``, ``'y'`` or ``'z'``."""
        n, d, o = {
            "x": (self.nx, self.dx, self.origin[0]),
            "y": (self.ny, self.dy, self.origin[1]),
            "z": (self.nz, self.dz, self.origin[2]),
        }[axis]
        return o + (np.arange(n) + 0.5) * d

    def layout_compatible(self, other: "GridSpec") -> bool:
        return (
            (self.nx, self.ny, self.nz) == (other.nx, other.ny, other.nz)
            and (self.dx, self.dy, self.dz) == (other.dx, other.dy, other.dz)
            and (self.bc_x, self.bc_y, self.bc_z) == (other.bc_x, other.bc_y, other.bc_z)
        )

    def require_compatible(self, other: "GridSpec", what: str = "operands"):
        if not self.layout_compatible(other):
            raise GridError(f"{what} live on layout-incompatible grids")


def make_grid(counts, spacings, origin=(0.0, 0.0, 0.0), bcs=("periodic", "periodic", "periodic")) -> GridSpec:
    """Build a validated :class:`GridSpec` from per-axis counts and spacings."""
    nx, ny, nz = counts
    dx, dy, dz = spacings
    bx, by, bz = bcs
    return GridSpec(nx=int(nx), ny=int(ny), nz=int(nz), dx=float(dx), dy=float(dy),
                    dz=float(dz), origin=tuple(origin), bc_x=bx, bc_y=by, bc_z=bz)


def _as_grid_array(spec: GridSpec, values, dtype) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.size != spec.size:
        raise GridError(f"field has {arr.size} values, grid needs {spec.size}")
    arr = np.ascontiguousarray(arr.reshape(spec.shape))
    if not np.all(np.isfinite(arr)):
        raise GridError("field contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarField:
    """Real field on a grid, tagged with its unit ('meV', 'V', 'nm', ...)."""

    spec: GridSpec
    values: np.ndarray = field(repr=False)
    unit: str = "meV"

    def __post_init__(self):
        object.__setattr__(self, "values", _as_grid_array(self.spec, self.values, np.float64))

    def with_values(self, values) -> "ScalarField":
        return ScalarField(self.spec, values, self.unit)


@dataclass(frozen=True)
class WaveFunction:
    """Complex amplitudes on a grid, normalized with the cell measure."""

    spec: GridSpec
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "amplitudes", _as_grid_array(self.spec, self.amplitudes, np.complex128)
        )

    def norm_sq(self) -> float:
        """Sum of |psi|^2 times the cell volume."""
        a = self.amplitudes
        return float(np.vdot(a, a).real) * self.spec.cell_volume

    def normalized(self) -> "WaveFunction":
        n2 = self.norm_sq()
        if n2 <= 0.0:
            raise GridError("cannot normalize a zero wavefunction")
        return WaveFunction(self.spec, self.amplitudes / np.sqrt(n2))

    def density(self) -> np.ndarray:
        return (self.amplitudes.real**2 + self.amplitudes.imag**2)


@dataclass(frozen=True)
class WavevectorTable:
    """Per-axis angular wavenumbers in FFT ordering (rad/nm)."""

    kx: np.ndarray
    ky: np.ndarray
    kz: np.ndarray

    def __post_init__(self):
        for name in ("kx", "ky", "kz"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def _axis_wavenumbers(n: int, d: float) -> np.ndarray:
    k = 2.0 * np.pi * np.fft.fftfreq(n, d)
    if n % 2 == 0:
        k[n // 2] = abs(k[n // 2])  # single Nyquist entry, positive by convention
    return k


def wavevectors(spec: GridSpec) -> WavevectorTable:
    """Angular FFT wavenumbers k = 2*pi*f for each axis of ``spec``."""
    return WavevectorTable(
        kx=_axis_wavenumbers(spec.nx, spec.dx),
        ky=_axis_wavenumbers(spec.ny, spec.dy),
        kz=_axis_wavenumbers(spec.nz, spec.dz),
    )


def inner_product(a: WaveFunction, b: WaveFunction) -> complex:
    """<a|b> = sum conj(a_i) b_i dV over the shared grid."""
    a.spec.require_compatible(b.spec, "inner_product operands")
    return complex(np.vdot(a.amplitudes, b.amplitudes)) * a.spec.cell_volume
