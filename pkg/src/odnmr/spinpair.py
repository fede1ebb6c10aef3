"""NV-13C spin pair in the microwave rotating frame.

Basis order is fixed everywhere in the package as::

    0: |0,up>   1: |0,down>   2: |1,up>   3: |1,down>

with ``m_s`` the reduced NV electron level and up/down the 13C spin.  All
frequencies are cyclic (Hz); ``2 pi`` only appears in propagators.

Dressed-state labels 1..4 follow the far-detuned identification: without a
previous spectrum to chain from, label 1 is the highest eigenfrequency and
label 4 the lowest.  For a low-to-high sweep this makes psi_1 start in
``|0,down>`` and psi_2 in ``|0,up>``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .constants import GAMMA_NUC, GAMMA_NV, K0_HZ_NM3, ZERO_FIELD_SPLITTING
from .kernels import eigh_descending, hamiltonian_stack

BASIS = ("|0,up>", "|0,down>", "|1,up>", "|1,down>")

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class LabelAmbiguityError(ValueError):
    """Raised when overlap chaining cannot assign dressed labels uniquely."""


@dataclass(frozen=True)
class ExperimentConditions:
    """Static field, drive strength and the two resonance frequencies.

    ``f_plus`` defaults to ``D + gamma_nv * b0``; ``f_n`` is always
    ``gamma_nuc * b0``.
    """

    b0: float
    rabi: float = 100e3
    f_plus: float | None = None

    def __post_init__(self):
        if not self.b0 > 0:
            raise ValueError(f"b0 must be positive, got {self.b0!r}")
        if not self.rabi >= 0:
            raise ValueError(f"rabi must be non-negative, got {self.rabi!r}")
        if self.f_plus is None:
            object.__setattr__(self, "f_plus", ZERO_FIELD_SPLITTING + GAMMA_NV * self.b0)

    @property
    def f_n(self) -> float:
        return GAMMA_NUC * self.b0

    def with_field(self, b0: float) -> "ExperimentConditions":
        """Same drive at a new field, with ``f_plus`` re-derived from ``b0``."""
        return ExperimentConditions(b0=b0, rabi=self.rabi)


@dataclass(frozen=True)
class HyperfineCoupling:
    """Secular hyperfine pair; geometry fields are set only by ``from_geometry``."""

    a_zz: float
    a_zx: float
    a0: float | None = None
    theta: float | None = None
    r: float | None = None

    @classmethod
    def from_geometry(cls, theta, a0=None, r=None):
        return hyperfine_from_geometry(theta, a0=a0, r=r)


def dipolar_magnitude(r_nm):
    """A0 = k0 / r^3 in Hz for a displacement ``r_nm`` in nanometers."""
    return K0_HZ_NM3 / np.asarray(r_nm, dtype=float) ** 3


def dipolar_components(a0, theta):
    """Return ``(a_zz, a_zx)`` for dipolar magnitude ``a0`` at polar angle ``theta``.

    Vectorized over both arguments.
    """
    a0 = np.asarray(a0, dtype=float)
    two_theta = 2.0 * np.asarray(theta, dtype=float)
    a_zz = a0 * (1.0 + 3.0 * np.cos(two_theta)) / 2.0
    a_zx = 3.0 * a0 * np.sin(two_theta) / 2.0
    return a_zz, a_zx


def hyperfine_from_geometry(theta, a0=None, r=None) -> HyperfineCoupling:
    """Build the coupling from either a dipolar magnitude or a distance.

    Exactly one of ``a0`` (Hz) or ``r`` (nm) must be given.
    """
    if (a0 is None) == (r is None):
        raise ValueError("give exactly one of a0 or r")
    if r is not None:
        if not r > 0:
            raise ValueError(f"r must be positive, got {r!r}")
        a0 = float(dipolar_magnitude(r))
    a_zz, a_zx = dipolar_components(a0, theta)
    return HyperfineCoupling(float(a_zz), float(a_zx), a0=float(a0), theta=float(theta), r=r)


@dataclass(frozen=True)
class RotatingFrameHamiltonian:
    matrix: np.ndarray
    f: float

    def __post_init__(self):
        self.matrix.setflags(write=False)


def build_hamiltonian(f: float, cond: ExperimentConditions, hf: HyperfineCoupling) -> RotatingFrameHamiltonian:
    """4x4 rotating-frame Hamiltonian (Hz) at microwave frequency ``f``."""
    h = hamiltonian_stack(cond.f_n, cond.rabi, hf.a_zz, hf.a_zx, f - cond.f_plus)
    return RotatingFrameHamiltonian(h.astype(complex), float(f))


@dataclass(frozen=True)
class DressedSpectrum:
    """Eigenpairs ordered by label: ``frequencies[k]`` is nu_{k+1}.

    ``vectors[:, k]`` is psi_{k+1}; ``bare_states[k]`` is the index into
    ``BASIS`` with the largest overlap, i.e. the far-detuned identity.
    """

    frequencies: np.ndarray
    vectors: np.ndarray
    bare_states: tuple = field(default=())

    def overlaps(self) -> np.ndarray:
        """``|<bare i|psi_k>|^2`` as a (bare, label) matrix."""
        return np.abs(self.vectors) ** 2


def dressed_states(h: RotatingFrameHamiltonian, prev: DressedSpectrum | None = None) -> DressedSpectrum:
    """Diagonalize ``h`` and label the eigenpairs.

    Without ``prev`` labels follow descending eigenfrequency.  With ``prev``
    each label goes to the eigenvector with the largest overlap with the
    same label in ``prev``; an assignment whose best overlap^2 is below 0.5
    is ambiguous and raises :class:`LabelAmbiguityError`.
    """
    w, v = eigh_descending(np.asarray(h.matrix))
    if prev is not None:
        overlap = np.abs(prev.vectors.conj().T @ v) ** 2
        rows, cols = linear_sum_assignment(-overlap)
        chosen = overlap[rows, cols]
        if np.any(chosen < 0.5):
            bad = [int(r) + 1 for r in rows[chosen < 0.5]]
            raise LabelAmbiguityError(
                f"label ambiguity at f={h.f:.6g} Hz for labels {bad}: "
                f"overlap^2 {np.round(chosen, 3).tolist()}")
        w, v = w[cols], v[:, cols]
        # fix the arbitrary eigenvector sign against the previous step
        phase = np.sum(prev.vectors.conj() * v, axis=0)
        v = v * np.where(phase.real < 0, -1.0, 1.0)
    bare = tuple(int(i) for i in np.argmax(np.abs(v) ** 2, axis=0))
    return DressedSpectrum(np.asarray(w, dtype=float), v, bare)


def dressed_spectrum_scan(freqs, cond: ExperimentConditions, hf: HyperfineCoupling):
    """Eigenfrequencies at every frequency in ``freqs``, shape ``(n, 4)``.

    Columns are descending-energy labels; used for dressed-state diagrams
    and gap searches.
    """
    h = hamiltonian_stack(cond.f_n, cond.rabi, hf.a_zz, hf.a_zx, np.asarray(freqs) - cond.f_plus)
    return np.linalg.eigvalsh(h)[..., ::-1]


@dataclass(frozen=True)
class GapResult:
    gap: float
    frequency: float
    interior: bool

    def __float__(self):
        return self.gap


def _golden_min(func, lo, hi, tol):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = func(c), func(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = func(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = func(d)
    x = 0.5 * (a + b)
    return x, func(x)


def avoided_crossing_gap(j: int, k: int, cond: ExperimentConditions, hf: HyperfineCoupling,
                         scan: tuple[float, float] | None = None, step: float = 1e3,
                         tol: float = 1.0) -> GapResult:
    """Minimum of ``|nu_k(f) - nu_j(f)|`` over a frequency window.

    A ``step`` grid scan is refined by golden-section search to ``tol`` Hz.
    When the grid minimum sits on the window edge the edge value is returned
    with ``interior=False``.

    Parameters
    ----------
    j, k : int
        Dressed labels, 1-based.
    scan : (float, float), optional
        Absolute frequency window; defaults to ``f_plus +/- 4.5 MHz``.
    """
    if j == k or not (1 <= j <= 4 and 1 <= k <= 4):
        raise ValueError(f"need two distinct labels in 1..4, got {j}, {k}")
    lo, hi = scan if scan is not None else (cond.f_plus - 4.5e6, cond.f_plus + 4.5e6)
    if not lo <= cond.f_plus <= hi:
        raise ValueError("scan window must contain f_plus")
    n = max(int(math.ceil((hi - lo) / step)), 2)
    freqs = np.linspace(lo, hi, n + 1)
    nu = dressed_spectrum_scan(freqs, cond, hf)
    gaps = np.abs(nu[:, k - 1] - nu[:, j - 1])
    i = int(np.argmin(gaps))
    if i == 0 or i == n:
        return GapResult(float(gaps[i]), float(freqs[i]), False)

    def gap_at(f):
        nu_f = dressed_spectrum_scan(np.array([f]), cond, hf)[0]
        return abs(nu_f[k - 1] - nu_f[j - 1])

    f_min, g_min = _golden_min(gap_at, freqs[i - 1], freqs[i + 1], tol)
    if g_min > gaps[i]:
        f_min, g_min = freqs[i], gaps[i]
    return GapResult(float(g_min), float(f_min), True)


def with_coupling(hf: HyperfineCoupling, **changes) -> HyperfineCoupling:
    """Copy of ``hf`` with fields replaced and stale geometry dropped."""
    return replace(hf, a0=None, theta=None, r=None, **changes)
