"""Physical constants used throughout the package (SI units, cyclic frequencies)."""

import math

#: NV axial zero-field splitting (Hz).
ZERO_FIELD_SPLITTING = 2.87e9
#: NV electron gyromagnetic ratio (Hz/T).
GAMMA_NV = 28.03e9
#: 13C gyromagnetic ratio (Hz/T).
GAMMA_NUC = 10.7e6
#: Dipolar coupling coefficient k0 = mu0 h gamma_nv gamma_nuc / 4 pi (Hz nm^3).
K0_HZ_NM3 = 19.9e3
#: 13C number density of natural-abundance diamond (nm^-3).
C13_DENSITY_NM3 = 1.9

MU0 = 4e-7 * math.pi
PLANCK = 6.62607015e-34
BOLTZMANN = 1.380649e-23
