"""shuttlesim: conveyor-belt electron shuttling in SiMOS quantum-dot devices.

Library layout:
    grid            uniform 3D grids, fields, wavevector tables
    device          gate stack geometry and the phase-shifted drive
    surface         self-affine rough-interface synthesis and statistics
    electrostatics  variable-permittivity Poisson / Green's functions
    quantum         matrix-free Hamiltonian and Lanczos eigensolver
    evolution       spectral-projection and split-operator propagation
    analysis        fidelity, charge loss, Landau-Zener, level diagrams
    scenario        configuration -> runnable scenario assembly
    storage         field container, config, CSV tables, caches
    cli             command-line entry points
"""

from .analysis import (LZParams, ShuttleResult, fidelity, landau_zener_pd,
                       level_diagram, loss_probability, mean_position)
from .device import (DeviceLayout, DriveParams, GateElectrode,
                     MisalignmentSpec, apply_misalignment, build_layout,
                     clavier_voltage, permittivity_field)
from .electrostatics import (GreensSet, PoissonProblem, SolverConfig,
                             assemble_gate_potential, compute_greens,
                             solve_poisson, total_potential)
from .evolution import (CoeffVector, OverlapMatrix, ProjectionStepConfig,
                        Scenario, SplitStepConfig, compare_evolvers,
                        prepare_initial_state, projection_step, run_shuttle,
                        split_step)
from .grid import (GridSpec, ScalarField, WaveFunction, WavevectorTable,
                   inner_product, make_grid, wavevectors)
from .quantum import (EigenSet, HamiltonianContext, MassTensor,
                      apply_hamiltonian, lanczos_lowest)
from .scenario import build_scenario, greens_inputs
from .storage import (ScenarioConfig, load_config, read_field,
                      read_result_csv, write_field, write_result_csv)
from .surface import (HeightField, SurfaceSpec, generate_surface,
                      surface_statistics)

__version__ = "0.1.0"
