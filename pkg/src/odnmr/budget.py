"""Frequency-precision and readout-fidelity budgets.

Everything is SI with cyclic frequencies.  Square roots are written as
``** 0.5`` and only ``math.pi`` appears as a transcendental constant, so the
functions also accept unit-carrying symbolic quantities (the test-suite
pushes sympy quantities through them as a dimensional check).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

from .constants import BOLTZMANN, C13_DENSITY_NM3, GAMMA_NUC, MU0, PLANCK


def frequency_precision(fidelity, n_p, t2_star, duty, t):
    """Minimum detectable precession-frequency change (Hz)."""
    return 1.0 / (2.0 * math.pi * fidelity * (n_p * t2_star * duty * t) ** 0.5)


def odnmr_fidelity(visibility, eta):
    """Photon-shot-noise limited readout fidelity ``|A| sqrt(eta)``."""
    return abs(visibility) * eta ** 0.5


def duty_cycle(t2_star, t_pol, t_read):
    return t2_star / (t_pol + t_read)


def polarized_spin_count(n_nv, n_rep):
    return n_nv * n_rep


def angle_random_walk(delta_f, t=1.0):
    """Angle random walk in degrees per root second for precision ``delta_f`` over ``t``."""
    return 360.0 * delta_f * t ** 0.5


def combined_dephasing(times):
    """Harmonic combination ``(sum 1/T_i)^-1``; infinite entries drop out."""
    times = list(times)
    if not times:
        raise ValueError("need at least one time")
    rate = sum(0.0 if (isinstance(t, float) and math.isinf(t)) else 1.0 / t for t in times)
    if rate == 0:
        return math.inf
    return 1.0 / rate


def thermal_polarization(gamma, b0, temperature):
    """High-temperature spin-1/2 polarization ``gamma h B0 / (2 k_B T)``."""
    return gamma * PLANCK * b0 / (2.0 * BOLTZMANN * temperature)


@dataclass(frozen=True)
class OdnmrBudgetInputs:
    visibility: float
    eta: float
    n_nv: float
    n_rep: float
    t2_star: float
    t_pol: float
    t_read: float
    t: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive, got {v!r}")


@dataclass(frozen=True)
class CoilBudgetInputs:
    """Inductive detection chain; densities in m^-3, volume in m^3."""

    quality: float
    coil_temp: float
    bandwidth: float
    b0: float
    polarized_density: float
    gamma_nuc: float = GAMMA_NUC
    coil_volume: float = 1e-9
    geometry_factor: float = 1.0
    fill_factor: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive, got {v!r}")


def sample_magnetization(polarized_density, gamma_nuc):
    """``M0 = rho gamma h / 2`` in A/m."""
    return polarized_density * gamma_nuc * PLANCK / 2.0


def coil_snr(inputs: CoilBudgetInputs):
    """Johnson-noise limited single-shot SNR of inductive detection."""
    m0 = sample_magnetization(inputs.polarized_density, inputs.gamma_nuc)
    arg = (math.pi * MU0 * inputs.quality * inputs.gamma_nuc * inputs.b0 * inputs.coil_volume
           / (2.0 * BOLTZMANN * inputs.coil_temp * inputs.bandwidth))
    return inputs.geometry_factor * inputs.fill_factor * m0 * arg ** 0.5


def coil_precision(snr, t2_star):
    """Frequency uncertainty ``Gamma / (2 SNR)`` with ``Gamma = 1/(pi T2*)``."""
    return 1.0 / (2.0 * math.pi * t2_star * snr)


def coil_fidelity(inputs: CoilBudgetInputs):
    """``SNR / sqrt(N_p)`` with ``N_p = rho V_c``; the coil volume cancels."""
    arg = (math.pi * MU0 * inputs.quality * inputs.polarized_density * inputs.gamma_nuc ** 3
           * inputs.b0 * PLANCK ** 2 / (8.0 * BOLTZMANN * inputs.coil_temp * inputs.bandwidth))
    return inputs.geometry_factor * inputs.fill_factor * arg ** 0.5


PRESETS = {
    "paper-discussion-2025": {
        "odnmr": OdnmrBudgetInputs(visibility=3e-3, eta=7e-3, n_nv=1e14, n_rep=1e2,
                                   t2_star=2e-3, t_pol=0.2, t_read=0.2, t=1.0),
        "coil": CoilBudgetInputs(quality=100.0, coil_temp=300.0, bandwidth=1.0, b0=10e-3,
                                 polarized_density=0.05 * C13_DENSITY_NM3 * 1e27),
    },
}


def odnmr_report(inputs: OdnmrBudgetInputs) -> dict:
    """Full ODNMR chain with intermediates."""
    xi = duty_cycle(inputs.t2_star, inputs.t_pol, inputs.t_read)
    npol = polarized_spin_count(inputs.n_nv, inputs.n_rep)
    fid = odnmr_fidelity(inputs.visibility, inputs.eta)
    df = frequency_precision(fid, npol, inputs.t2_star, xi, inputs.t)
    return {
        "inputs": asdict(inputs),
        "intermediate": {"duty_cycle": xi, "n_p": npol},
        "outputs": {"fidelity": fid, "delta_f": df,
                    "angle_random_walk": angle_random_walk(df, inputs.t)},
    }


def coil_report(inputs: CoilBudgetInputs, t2_star: float) -> dict:
    snr = coil_snr(inputs)
    fid = coil_fidelity(inputs)
    return {
        "inputs": asdict(inputs),
        "intermediate": {"m0": sample_magnetization(inputs.polarized_density, inputs.gamma_nuc),
                         "snr": snr, "n_p": inputs.polarized_density * inputs.coil_volume},
        "outputs": {"fidelity": fid, "delta_f": coil_precision(snr, t2_star)},
    }


def preset_report(name: str) -> dict:
    """Budget report (ODNMR and coil chains) for a named preset."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    p = PRESETS[name]
    return {"preset": name, "odnmr": odnmr_report(p["odnmr"]),
            "coil": coil_report(p["coil"], p["odnmr"].t2_star)}


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
