"""Assemble runnable scenarios from validated configuration.

A device scenario wires together the gate layout (optionally
misaligned), the rough-interface realization, the defect list and the
precomputed Green's functions into a cheap time-dependent potential:
evaluating V(r, t) costs one small weighted sum over gate unit
responses plus a precomputed static part (oxide step and defects).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .constants import speed_to_nm_per_ps
from .device import (DeviceLayout, DriveParams, MisalignmentSpec,
                     apply_misalignment, build_layout, clavier_voltage)
from .electrostatics import (GreensSet, SolverConfig, compute_greens,
                             defect_potential, greens_content_hash, oxide_step)
from .evolution import (AffineDrive, LanczosParams, ProjectionStepConfig,
                        ReducedBasisConfig, Scenario, SplitStepConfig)
from .grid import GridSpec, ScalarField, make_grid
from .quantum import MassTensor
from .storage import ConfigError, ScenarioConfig
from .surface import HeightField, SurfaceSpec, generate_surface


@dataclass(frozen=True)
class GreensInputs:
    layout: DeviceLayout
    quantum: GridSpec
    defect_sites: Tuple[Tuple[float, float, float], ...]
    solver: SolverConfig
    pad_y: float
    pad_z: float

    @property
    def content_hash(self) -> str:
        return greens_content_hash(self.layout, self.quantum,
                                   self.defect_sites, self.solver,
                                   self.pad_y, self.pad_z)


def quantum_grid(config: ScenarioConfig) -> GridSpec:
    counts = config["grid.counts"]
    spacings = config["grid.spacings"]
    origin = config["grid.origin"]
    return make_grid(counts, spacings, origin,
                     bcs=("periodic", "periodic", "periodic"))


def device_layout(config: ScenarioConfig) -> DeviceLayout:
    layout = build_layout(
        period=config["device.d"],
        n_periods=config["device.n_periods"],
        gate_width=config["device.gate_width"],
        channel_gap=config["device.channel_gap"],
        rail_width=config["device.rail_width"],
        metal_thickness=config["device.metal_thickness"],
        eps_si=config["device.eps_si"],
        eps_ox=config["device.eps_ox"],
    )
    mis = config["device.misalignment"]
    if mis["width_frac"] > 0 or mis["center_frac"] > 0:
        layout = apply_misalignment(layout, MisalignmentSpec(
            width_frac=mis["width_frac"], center_frac=mis["center_frac"],
            seed=mis["seed"]))
    return layout


def greens_inputs(config: ScenarioConfig) -> GreensInputs:
    layout = device_layout(config)
    quantum = quantum_grid(config)
    lx = quantum.extent[0]
    periods = lx / layout.period
    if abs(periods - round(periods)) > 1e-9 or round(periods) < 1:
        raise ConfigError("quantum-region x extent must be a whole number of "
                          f"clavier periods (got {lx} nm vs d={layout.period} nm)")
    solver = SolverConfig(
        omega_sor=config["grid.poisson_omega"],
        tol=config["grid.poisson_tol"],
        max_sweeps=config["grid.poisson_max_sweeps"],
        ordering=config["grid.poisson_ordering"],
    )
    sites = tuple((d["x"], d["y"], d["z"]) for d in config.data["defects"])
    return GreensInputs(layout=layout, quantum=quantum, defect_sites=sites,
                        solver=solver, pad_y=config["grid.pad_y"],
                        pad_z=config["grid.pad_z"])


def scenario_surface(config: ScenarioConfig) -> Optional[HeightField]:
    rms = config["surface.rms"]
    if rms == 0.0:
        return None
    counts = config["grid.counts"]
    spacings = config["grid.spacings"]
    q_min = config["surface.q_min"] or None
    q_max = config["surface.q_max"] or None
    return generate_surface(SurfaceSpec(
        hurst=config["surface.hurst"], rms=rms, seed=config["surface.seed"],
        nx=counts[0], ny=counts[1], dx=spacings[0], dy=spacings[1],
        q_min=q_min, q_max=q_max))


def _probe_indices(quantum: GridSpec, height: Optional[HeightField]) -> Tuple[int, int]:
    # channel analysis plane: y at the channel center, z one nm below the
    # mean interface (mean height is zero by construction)
    iy = int(np.argmin(np.abs(quantum.axis_centers("y"))))
    iz = int(np.argmin(np.abs(quantum.axis_centers("z") - (-1.0))))
    return iy, iz


def build_scenario(config: ScenarioConfig, cache_dir: Optional[str] = None,
                   greens: Optional[GreensSet] = None,
                   progress=None) -> Scenario:
    """Device-backed scenario ready for :func:`shuttlesim.run_shuttle`."""
    gi = greens_inputs(config)
    if greens is None:
        greens = compute_greens(gi.layout, gi.quantum, gi.defect_sites,
                                gi.solver, gi.pad_y, gi.pad_z,
                                cache_dir=cache_dir, progress=progress)
    height = scenario_surface(config)
    defects = [((d["x"], d["y"], d["z"]), d["sign"])
               for d in config.data["defects"]]

    drive = DriveParams(V_c=config["drive.V_c"], V_s=config["drive.V_s"],
                        v=config["drive.v"], d=config["device.d"])
    layout = gi.layout
    shape = gi.quantum.shape

    # the clavier drive makes the potential affine in two weights:
    # V(t) = static + V_0(t) (G_k0 - G_k2) + V_1(t) (G_k1 - G_k3), since
    # gates k and k+2 are driven in exact antiphase
    static = oxide_step(gi.quantum, height)
    if defects:
        static = static + defect_potential(greens, defects)
    comps = np.zeros((2,) + shape)
    for g in layout.gates:
        field = greens.gate_fields[g.gate_id].values
        if g.drive_index is None:
            static = static + drive.V_s * field
        elif g.drive_index in (0, 1):
            comps[g.drive_index] += field
        else:
            comps[g.drive_index - 2] -= field

    def weights_fn(t: float) -> np.ndarray:
        pt = drive.at_time(t)
        return np.array([clavier_voltage(pt, 0), clavier_voltage(pt, 1)])

    affine = AffineDrive(static=static, components=comps, weights_fn=weights_fn)

    def potential_fn(t: float) -> ScalarField:
        return ScalarField(gi.quantum, affine.potential_values(t), unit="meV")

    iy, iz = _probe_indices(gi.quantum, height)
    ev = config.data["evolver"]
    lanczos = LanczosParams(tol=ev["lanczos_tol"],
                            max_matvecs=ev["lanczos_max_matvecs"],
                            m_inner=ev["lanczos_m_inner"])
    projection = ProjectionStepConfig(
        dt=ev["dt"], n_states=ev["n_states"], lanczos=lanczos,
        renormalize=ev["renormalize"],
        degeneracy_window=ev["degeneracy_window"])
    split = SplitStepConfig(dt=ev["split_dt"], refresh_every=ev["refresh_every"])
    reduced = ReducedBasisConfig(
        enable=ev["reduced"],
        n_anchors=ev["reduced_anchors"],
        max_anchors=ev["reduced_max_anchors"],
        n_track=max(ev["reduced_track"], ev["n_states"]),
        residual_tol=ev["reduced_residual_tol"],
        n_validate=ev["reduced_validate"])

    return Scenario(
        grid=gi.quantum,
        potential_fn=potential_fn,
        t_max=drive.t_period,
        velocity=-speed_to_nm_per_ps(drive.v),  # drive moves the minimum to -x
        masses=MassTensor(),
        projection=projection,
        split=split,
        sample_interval=config["outputs.sample_interval"],
        seed=ev["seed"],
        loss_halfwidth=config["outputs.loss_halfwidth"],
        probe_iy=iy,
        probe_iz=iz,
        descriptor_hash=config.content_hash,
        name="device",
        affine=affine,
        reduced=reduced,
    )
