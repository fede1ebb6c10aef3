"""Monte-Carlo 13C environments around a single NV center.

Spins are dropped uniformly into a ball (no lattice), each getting a
purely dipolar coupling ``A0 = k0 / r^3`` and the polar-angle dependent
secular components.

Seeding
-------
Run ``i`` of a histogram with master seed ``s`` draws from
``numpy.random.SeedSequence([s, i])``.  This rule is part of the public
contract: it does not change between versions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import C13_DENSITY_NM3, K0_HZ_NM3
from .spinpair import HyperfineCoupling, dipolar_components
from .sweepsim import SweepProtocol, hop_probabilities
from .tables import write_csv


def spin_count(radius: float, density: float) -> int:
    """Spins per run: ``round(4/3 pi R^3 rho)``."""
    return int(round(4.0 / 3.0 * math.pi * radius ** 3 * density))


def run_seed(master: int, run: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), int(run)])


@dataclass(frozen=True)
class LatticeSample:
    """One random 13C configuration (distances in nm, angles in rad, Hz)."""

    seed: object
    radius: float
    density: float
    r: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    a0: np.ndarray
    a_zz: np.ndarray
    a_zx: np.ndarray

    def __len__(self):
        return self.r.size

    @property
    def spins(self) -> list:
        """``(r, theta, a0, HyperfineCoupling)`` per spin."""
        return [(float(r), float(t), float(a),
                 HyperfineCoupling(float(zz), float(zx), a0=float(a), theta=float(t), r=float(r)))
                for r, t, a, zz, zx in zip(self.r, self.theta, self.a0, self.a_zz, self.a_zx)]


def sample_sphere(seed, radius: float = 3.0, density: float = C13_DENSITY_NM3) -> LatticeSample:
    """Place ``spin_count(radius, density)`` spins uniformly in a ball.

    ``seed`` is anything accepted by :func:`numpy.random.default_rng`.
    """
    if not radius > 0 or not density > 0:
        raise ValueError("radius and density must be positive")
    n = spin_count(radius, density)
    rng = np.random.default_rng(seed)
    u = rng.random((3, n))
    r = radius * np.cbrt(u[0])
    theta = np.arccos(1.0 - 2.0 * u[1])
    phi = 2.0 * math.pi * u[2]
    a0 = K0_HZ_NM3 / r ** 3
    a_zz, a_zx = dipolar_components(a0, theta)
    return LatticeSample(seed, float(radius), float(density), r, theta, phi, a0, a_zz, a_zx)


def shell_count_analytic(a0, delta_a, density: float = C13_DENSITY_NM3):
    """Expected spins with coupling in a width-``delta_a`` shell at ``a0`` (Hz)."""
    a0 = np.asarray(a0, dtype=float)
    if np.any(a0 <= 0):
        raise ValueError("a0 must be positive")
    out = 4.0 / 3.0 * math.pi * density * K0_HZ_NM3 * np.asarray(delta_a, dtype=float) / a0 ** 2
    return float(out) if out.ndim == 0 else out


def analytic_bin_counts(edges, radius: float, density: float) -> np.ndarray:
    """Expected counts per bin for a ball of ``radius``.

    Evaluating the shell formula at the geometric mean of each bin's edges
    integrates the ``1/A0^2`` density exactly.  The bin holding the
    smallest reachable coupling ``k0 / R^3`` is integrated from that value.
    """
    edges = np.asarray(edges, dtype=float)
    lo, hi = edges[:-1], edges[1:]
    a_min = K0_HZ_NM3 / radius ** 3
    out = np.zeros(lo.size)
    full = lo >= a_min
    out[full] = shell_count_analytic(np.sqrt(lo[full] * hi[full]), hi[full] - lo[full], density)
    cut = (lo < a_min) & (hi > a_min)
    out[cut] = 4.0 / 3.0 * math.pi * density * K0_HZ_NM3 * (1.0 / a_min - 1.0 / hi[cut])
    return out


@dataclass(frozen=True)
class HyperfineHistogram:
    bin_edges: np.ndarray
    mean_counts: np.ndarray
    std_errors: np.ndarray
    analytic_counts: np.ndarray
    run_count: int
    radius: float
    density: float
    seed: int

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def to_csv(self, path):
        return write_csv(path, {"bin_center": self.bin_centers, "mean_count": self.mean_counts,
                                "analytic_count": self.analytic_counts},
                         units={"bin_center": "Hz"})


def hyperfine_histogram(runs: int = 10_000, seed: int = 0, radius: float = 3.0,
                        density: float = C13_DENSITY_NM3, bin_width: float = 6e3,
                        a_max: float = 300e3) -> HyperfineHistogram:
    """Run-averaged histogram of ``A0`` with bins anchored at zero."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    edges = np.arange(0.0, a_max + 0.5 * bin_width, bin_width)
    total = np.zeros(edges.size - 1)
    total_sq = np.zeros(edges.size - 1)
    for i in range(runs):
        counts, _ = np.histogram(sample_sphere(run_seed(seed, i), radius, density).a0, bins=edges)
        total += counts
        total_sq += counts.astype(float) ** 2
    mean = total / runs
    var = np.maximum(total_sq / runs - mean ** 2, 0.0) * runs / max(runs - 1, 1)
    return HyperfineHistogram(edges, mean, np.sqrt(var / runs),
                              analytic_bin_counts(edges, radius, density), runs, radius, density, seed)


def power_law_slope(hist: HyperfineHistogram, min_count: float = 1.0) -> float:
    """Weighted log-log slope of mean counts against geometric bin centers.

    Only bins fully above ``k0 / R^3`` with mean count >= ``min_count``
    enter the fit.
    """
    lo, hi = hist.bin_edges[:-1], hist.bin_edges[1:]
    use = (lo >= K0_HZ_NM3 / hist.radius ** 3) & (hist.mean_counts >= min_count) \
        & (hist.std_errors > 0)
    if np.count_nonzero(use) < 2:
        raise ValueError("fewer than two well-populated bins")
    x = np.log(np.sqrt(lo[use] * hi[use]))
    y = np.log(hist.mean_counts[use])
    w = hist.mean_counts[use] / hist.std_errors[use]
    return float(np.polyfit(x, y, 1, w=w)[0])


@dataclass(frozen=True)
class EnsembleHopStats:
    """Per-spin probabilities; NaN marks spins too strongly coupled for the window."""

    probabilities: np.ndarray
    mean: float
    count_above: int
    threshold: float
    pair: tuple
    excluded: int


def ensemble_hop_statistics(sample: LatticeSample, sweep: SweepProtocol, cond, pair=(2, 3),
                            threshold: float = 0.1, threads: int = 1,
                            use_numba=None) -> EnsembleHopStats:
    """Hopping probability of every spin in ``sample`` under a common sweep.

    Spins whose couplings are too strong for the sweep window to be
    far-detuned are reported as NaN and counted in ``excluded`` rather
    than aborting the whole ensemble.
    """
    cells = [(sweep, cond, HyperfineCoupling(float(zz), float(zx)))
             for zz, zx in zip(sample.a_zz, sample.a_zx)]
    p = hop_probabilities(pair[0], pair[1], cells, threads=threads, use_numba=use_numba,
                          invalid="nan")
    ok = np.isfinite(p)
    mean = float(p[ok].mean()) if ok.any() else float("nan")
    return EnsembleHopStats(p, mean, int(np.count_nonzero(p[ok] > threshold)), float(threshold),
                            tuple(pair), int(np.count_nonzero(~ok)))
