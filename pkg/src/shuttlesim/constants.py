"""Physical constants in the simulation unit system (nm, ps, meV, mV).

These units keep every quantity in an O(1)-O(1e3) numeric range: lengths
in nm, times in ps, energies in meV, gate voltages in mV (a bias of 1 mV
shifts the electron potential energy by exactly -1 meV at unit lever arm).
All literals are CODATA-2018 values; ``tests/test_constants.py`` checks
them against :mod:`scipy.constants`.
"""

HBAR = 0.6582119569  # meV ps
HBAR2_OVER_ME = 76.19964  # meV nm^2, hbar^2 / m_e

# free-electron mass expressed in meV ps^2 / nm^2
ME = HBAR**2 / HBAR2_OVER_ME

# silicon conduction-band effective masses (units of m_e); the in-plane
# motion of a +-z valley electron carries the transverse mass and the
# out-of-plane motion the longitudinal mass
MT_SI = 0.190
ML_SI = 0.916

# relative permittivities (textbook values)
EPS_SI = 11.7
EPS_SIO2 = 3.9

# e / eps0 in V nm: couples elementary charge counts to the Poisson
# source term when lengths are in nm
E_OVER_EPS0 = 18.09512816746575

# e / (4 pi eps0) in V nm: vacuum Coulomb potential of a unit charge
COULOMB_VNM = 1.4399645468667817

# conduction-band offset of the SiO2 barrier
OXIDE_BARRIER_MEV = 3000.0

# unit conversions
MEV_PER_VOLT = 1000.0
NMPS_PER_MS = 1e-3  # 1 m/s = 1e-3 nm/ps


def speed_to_nm_per_ps(v_m_per_s: float) -> float:
    """Convert a shuttling speed given in m/s to nm/ps."""
    return v_m_per_s * NMPS_PER_MS
