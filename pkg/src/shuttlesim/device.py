"""Gate-stack geometry and the phase-shifted clavier drive.

The modeled device is a shuttling channel defined by two DC side-gate
rails (metal layer 1) and a repeating four-gate clavier unit cell whose
gates alternate between metal layers 2 (A, C) and 3 (B, D). Layer 1 metal
faces sit 15 nm above the Si/SiO2 interface and each subsequent layer
face sits 5 nm further out. The clavier gates carry 90-degree
phase-shifted sinusoids; the resulting potential minimum travels along
-x at the programmed shuttling speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .constants import EPS_SI, EPS_SIO2, NMPS_PER_MS
from .grid import GridSpec, ScalarField

# z of the metal face per layer, nm above the nominal interface
LAYER_FACE_Z = {1: 15.0, 2: 20.0, 3: 25.0}

CLAVIER_LETTERS = "ABCD"
CLAVIER_LAYERS = {"A": 2, "B": 3, "C": 2, "D": 3}


class GeometryError(ValueError):
    """Raised when a layout is dimensionally invalid or gates overlap."""


@dataclass(frozen=True)
class GateElectrode:
    gate_id: str
    layer: int
    center_x: float
    width_x: float
    y_min: float
    y_max: float
    drive_index: Optional[int] = None  # 0..3 for clavier gates, None for DC side gates

    def __post_init__(self):
        if self.width_x <= 0:
            raise GeometryError(f"gate {self.gate_id}: width_x must be > 0")
        if self.y_max <= self.y_min:
            raise GeometryError(f"gate {self.gate_id}: empty y extent")
        if self.layer not in LAYER_FACE_Z:
            raise GeometryError(f"gate {self.gate_id}: unknown layer {self.layer}")

    @property
    def z_face(self) -> float:
        return LAYER_FACE_Z[self.layer]


@dataclass(frozen=True)
class DeviceLayout:
    gates: Tuple[GateElectrode, ...]
    period: float = 140.0
    n_periods: int = 2
    channel_gap: float = 60.0
    rail_width: float = 30.0
    metal_thickness: float = 3.0
    eps_si: float = EPS_SI
    eps_ox: float = EPS_SIO2

    def __post_init__(self):
        if self.period <= 0 or self.n_periods < 1:
            raise GeometryError("period and n_periods must be positive")
        if self.channel_gap <= 0:
            raise GeometryError("side-gate channel gap must be > 0")
        if self.metal_thickness <= 0 or self.rail_width <= 0:
            raise GeometryError("metal thickness and rail width must be > 0")
        if self.eps_si <= 0 or self.eps_ox <= 0:
            raise GeometryError("permittivities must be > 0")
        _check_layer_overlaps(self.gates, self.x_span)

    @property
    def x_span(self) -> float:
        """Simulated x extent: n_periods clavier unit cells."""
        return self.period * self.n_periods

    @property
    def y_halfspan(self) -> float:
        return 0.5 * self.channel_gap + self.rail_width

    @property
    def clavier_gates(self) -> Tuple[GateElectrode, ...]:
        return tuple(g for g in self.gates if g.drive_index is not None)

    @property
    def side_gates(self) -> Tuple[GateElectrode, ...]:
        return tuple(g for g in self.gates if g.drive_index is None)

    def gate(self, gate_id: str) -> GateElectrode:
        for g in self.gates:
            if g.gate_id == gate_id:
                return g
        raise KeyError(gate_id)


def _periodic_interval(center: float, width: float, span: float):
    """Normalize a gate footprint to [0, span), possibly split by the seam."""
    lo = (center - 0.5 * width) % span
    hi = lo + width
    if hi <= span:
        return [(lo, hi)]
    return [(lo, span), (0.0, hi - span)]


def _check_layer_overlaps(gates, span):
    by_layer: dict = {}
    for g in gates:
        by_layer.setdefault(g.layer, []).append(g)
    for layer, group in by_layer.items():
        for i, ga in enumerate(group):
            segs_a = _periodic_interval(ga.center_x, ga.width_x, span)
            for gb in group[i + 1:]:
                if ga.y_min >= gb.y_max or gb.y_min >= ga.y_max:
                    continue  # side rails share x but are separated in y
                segs_b = _periodic_interval(gb.center_x, gb.width_x, span)
                for a0, a1 in segs_a:
                    for b0, b1 in segs_b:
                        if b0 < a1 and a0 < b1:
                            raise GeometryError(
                                f"gates {ga.gate_id} and {gb.gate_id} "
                                f"overlap on layer {layer}"
                            )


def build_layout(
    period: float = 140.0,
    n_periods: int = 2,
    gate_width: float = 35.0,
    channel_gap: float = 60.0,
    rail_width: float = 30.0,
    metal_thickness: float = 3.0,
    eps_si: float = EPS_SI,
    eps_ox: float = EPS_SIO2,
) -> DeviceLayout:
    """Nominal layout: abutting 35 nm clavier gates (ABCD at 17.5/52.5/87.5/122.5 nm
    per 140 nm cell, A/C on layer 2 and B/D on layer 3) plus two side rails."""
    if gate_width <= 0:
        raise GeometryError("gate_width must be > 0")
    if 4 * gate_width > period + 1e-12:
        raise GeometryError("four clavier gates do not fit in one period")
    y_half = 0.5 * channel_gap + rail_width
    gates = [
        GateElectrode("side_left", 1, 0.5 * period * n_periods, period * n_periods,
                      -y_half, -0.5 * channel_gap),
        GateElectrode("side_right", 1, 0.5 * period * n_periods, period * n_periods,
                      0.5 * channel_gap, y_half),
    ]
    pitch = period / 4.0
    for cell in range(n_periods):
        for k, letter in enumerate(CLAVIER_LETTERS):
            gid = letter if cell == 0 else f"{letter}{cell}"
            center = cell * period + (k + 0.5) * pitch
            gates.append(
                GateElectrode(gid, CLAVIER_LAYERS[letter], center, gate_width,
                              -y_half, y_half, drive_index=k)
            )
    return DeviceLayout(
        gates=tuple(gates), period=period, n_periods=n_periods,
        channel_gap=channel_gap, rail_width=rail_width,
        metal_thickness=metal_thickness, eps_si=eps_si, eps_ox=eps_ox,
    )


@dataclass(frozen=True)
class DriveParams:
    """Clavier drive amplitudes and timing. omega is always derived."""

    V_c: float = 500.0  # mV
    V_s: float = -1500.0  # mV
    v: float = 20.0  # m/s
    d: float = 140.0  # nm
    t: float = 0.0  # ps

    def __post_init__(self):
        if self.d <= 0:
            raise GeometryError("drive period d must be > 0")

    @property
    def omega(self) -> float:
        """Angular frequency 2*pi*v/d in rad/ps."""
        return 2.0 * math.pi * (self.v * NMPS_PER_MS) / self.d

    @property
    def t_period(self) -> float:
        """One full shuttling period d/v in ps."""
        return self.d / (self.v * NMPS_PER_MS)

    def at_time(self, t: float) -> "DriveParams":
        return replace(self, t=t)


def clavier_voltage(p: DriveParams, k: int) -> float:
    """Voltage V_c*sin(omega*t + (pi/2)*k) on clavier gate k at time p.t.

    Evaluated as +-sin(omega*t + (pi/2)*(k mod 2)) so that gates k and
    k+2 are in antiphase exactly, not merely to rounding.
    """
    if k not in (0, 1, 2, 3):
        raise ValueError(f"clavier gate index must be in 0..3, got {k}")
    base = p.omega * p.t + 0.5 * math.pi * (k % 2)
    sign = 1.0 if k < 2 else -1.0
    return p.V_c * sign * math.sin(base)


def gate_voltages(layout: DeviceLayout, p: DriveParams, t: float) -> np.ndarray:
    """Per-electrode voltage vector (mV) in layout gate order at time t."""
    pt = p.at_time(t)
    return np.array([
        p.V_s if g.drive_index is None else clavier_voltage(pt, g.drive_index)
        for g in layout.gates
    ])


@dataclass(frozen=True)
class MisalignmentSpec:
    width_frac: float = 0.0
    center_frac: float = 0.0
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        if self.width_frac < 0 or self.center_frac < 0:
            raise GeometryError("misalignment fractions must be >= 0")
        if self.width_frac >= 1.0:
            raise GeometryError("width_frac >= 1 can produce non-positive widths")


def apply_misalignment(layout: DeviceLayout, m: MisalignmentSpec) -> DeviceLayout:
    """Perturb clavier gate widths and centers with seeded uniform draws.

    Widths scale by (1 + u*width_frac) and centers shift by
    u'*center_frac*nominal_width, u, u' ~ U[-1, 1]. Side gates are left
    untouched. The whole draw is resampled until the layout is
    overlap-free; exceeding the retry budget is an error.
    """
    if m.width_frac == 0.0 and m.center_frac == 0.0:
        return layout
    rng = np.random.default_rng(m.seed)
    for _ in range(m.max_retries):
        gates = []
        for g in layout.gates:
            if g.drive_index is None:
                gates.append(g)
                continue
            u_w, u_c = rng.uniform(-1.0, 1.0, size=2)
            gates.append(replace(
                g,
                width_x=g.width_x * (1.0 + u_w * m.width_frac),
                center_x=g.center_x + u_c * m.center_frac * g.width_x,
            ))
        try:
            return replace(layout, gates=tuple(gates))
        except GeometryError:
            continue
    raise GeometryError(
        f"could not draw a non-overlapping layout in {m.max_retries} tries"
    )


def electrode_mask(layout: DeviceLayout, spec: GridSpec, gate: GateElectrode) -> np.ndarray:
    """Boolean mask of grid cells whose centers lie inside the gate metal."""
    x = spec.axis_centers("x") % layout.x_span
    y = spec.axis_centers("y")
    z = spec.axis_centers("z")
    in_x = np.zeros(spec.nx, dtype=bool)
    for lo, hi in _periodic_interval(gate.center_x, gate.width_x, layout.x_span):
        in_x |= (x >= lo) & (x < hi)
    in_y = (y >= gate.y_min) & (y < gate.y_max)
    in_z = (z >= gate.z_face) & (z < gate.z_face + layout.metal_thickness)
    return in_z[:, None, None] & in_y[None, :, None] & in_x[None, None, :]


def permittivity_field(layout: DeviceLayout, spec: GridSpec) -> ScalarField:
    """Relative permittivity on the grid: silicon below the nominal flat
    interface (z < 0), oxide above. Metal interiors get the oxide value;
    they are excluded from the solve by their Dirichlet masks."""
    z = spec.axis_centers("z")
    eps = np.where(z[:, None, None] < 0.0, layout.eps_si, layout.eps_ox)
    eps = np.broadcast_to(eps, spec.shape).copy()
    return ScalarField(spec, eps, unit="eps_r")
