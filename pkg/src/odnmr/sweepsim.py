"""Stepped-unitary frequency sweeps and diabatic hopping probabilities.

The microwave frequency advances in discrete steps; during each step the
Hamiltonian is held at the step midpoint and the exact propagator
``exp(-2 pi i H dt)`` is applied.  Heavy lifting happens in
:mod:`odnmr.kernels`, which batches many independent cells per call.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .kernels import eigh_descending, hamiltonian_stack
from .spinpair import (ExperimentConditions, HyperfineCoupling, avoided_crossing_gap,
                       dipolar_components, with_coupling)

AXES_1D = ("a_zx", "a_zz", "rabi", "b0", "rate")
AXES_2D = ("b0", "rabi", "rate")

# far-detuned identification thresholds
WINDOW_FACTOR = 10.0
ENDPOINT_OVERLAP = 0.99


class SweepWindowError(ValueError):
    """The sweep does not start and end far enough from the crossings."""


@dataclass(frozen=True)
class SweepProtocol:
    """Linear microwave sweep.

    Parameters
    ----------
    center : float or None
        Sweep center in Hz; ``None`` centers on ``f_plus`` of whatever
        conditions the sweep is run under.
    span : float
        Full sweep width (Hz).
    duration : float
        Time for one pass (s).
    step : float
        Frequency increment per propagation step (Hz).
    direction : {"up", "down"}
    """

    center: float | None = None
    span: float = 9e6
    duration: float = 1e-3
    step: float = 1e3
    direction: str = "up"

    def __post_init__(self):
        if self.direction not in ("up", "down"):
            raise ValueError(f"direction must be 'up' or 'down', got {self.direction!r}")
        for name in ("span", "duration", "step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.step > self.span:
            raise ValueError("step larger than span")

    @classmethod
    def from_rate(cls, rate: float, span: float = 9e6, **kw) -> "SweepProtocol":
        """Build from a sweep rate magnitude in Hz/s."""
        if rate == 0:
            raise ValueError("rate must be nonzero")
        return cls(span=span, duration=span / abs(rate), **kw)

    @property
    def rate(self) -> float:
        """Signed sweep rate (Hz/s)."""
        r = self.span / self.duration
        return r if self.direction == "up" else -r

    @property
    def n_steps(self) -> int:
        return int(round(self.span / self.step))

    @property
    def dt(self) -> float:
        return self.step / abs(self.rate)

    def with_rate(self, rate: float) -> "SweepProtocol":
        return replace(self, duration=self.span / abs(rate))

    def detunings(self, f_plus: float) -> np.ndarray:
        """Midpoint detuning from ``f_plus`` of every step, in sweep order."""
        det0, ddet = self._det_start(f_plus)
        return det0 + ddet * np.arange(self.n_steps)

    def frequencies(self, f_plus: float) -> np.ndarray:
        return f_plus + self.detunings(f_plus)

    def _det_start(self, f_plus):
        offset = 0.0 if self.center is None else self.center - f_plus
        sign = 1.0 if self.direction == "up" else -1.0
        half = 0.5 * self.n_steps * self.step
        return offset - sign * (half - 0.5 * self.step), sign * self.step


@dataclass(frozen=True)
class QuantumState:
    """Pure state amplitudes in the fixed bare basis."""

    amplitudes: np.ndarray

    def __post_init__(self):
        amp = np.asarray(self.amplitudes, dtype=complex).reshape(4)
        norm = float(np.sum(np.abs(amp) ** 2))
        if not abs(norm - 1.0) <= 1e-9:
            raise ValueError(f"state is not normalized (norm^2 = {norm!r})")
        amp.setflags(write=False)
        object.__setattr__(self, "amplitudes", amp)

    @classmethod
    def basis(cls, index: int) -> "QuantumState":
        amp = np.zeros(4, dtype=complex)
        amp[index] = 1.0
        return cls(amp)

    @property
    def populations(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2


@dataclass(frozen=True)
class SweepTrajectory:
    """Result of :func:`propagate_sweep`.

    ``populations`` and ``bare_populations`` are ``None`` unless recorded.
    Dressed populations use continuity-chained labels anchored at the
    sweep start (column ``k`` is psi_{k+1}).
    """

    times: np.ndarray
    frequencies: np.ndarray
    final_state: QuantumState
    populations: np.ndarray | None = None
    bare_populations: np.ndarray | None = None
    energies: np.ndarray | None = None


def _cell_row(sweep: SweepProtocol, cond: ExperimentConditions, hf: HyperfineCoupling):
    det0, ddet = sweep._det_start(cond.f_plus)
    return [cond.f_n, cond.rabi, hf.a_zz, hf.a_zx, det0, ddet, sweep.dt]


def propagate_sweep(initial: QuantumState, sweep: SweepProtocol, cond: ExperimentConditions,
                    hf: HyperfineCoupling, record: bool = False, use_numba=None) -> SweepTrajectory:
    """Evolve ``initial`` through ``sweep``.

    With ``record`` the per-step dressed populations, bare populations and
    dressed energies are kept.
    """
    if not isinstance(initial, QuantumState):
        initial = QuantumState(initial)
    n = sweep.n_steps
    times = (np.arange(n) + 1) * sweep.dt
    freqs = sweep.frequencies(cond.f_plus)
    row = np.array(_cell_row(sweep, cond, hf))
    if record:
        psi, _, dressed, bare, energies = kernels.trajectory(row, n, initial.amplitudes, use_numba)
        return SweepTrajectory(times, freqs, QuantumState(_renormalized(psi)), dressed, bare, energies)
    psi = kernels.propagate_batch(row[None, :], [n], initial.amplitudes[None, :], use_numba)[0]
    return SweepTrajectory(times, freqs, QuantumState(_renormalized(psi)))


def _renormalized(psi):
    # propagation is unitary to ~1e-13; this only guards the QuantumState check
    return psi / math.sqrt(float(np.sum(np.abs(psi) ** 2)))


def analytic_hop_probability(gap, rate):
    """Landau-Zener estimate ``exp(-pi^2 gap^2 / |rate|)`` (Hz, Hz/s)."""
    rate = np.asarray(rate, dtype=float)
    if np.any(rate == 0):
        raise ValueError("sweep rate must be nonzero")
    gap = np.asarray(gap, dtype=float)
    out = np.exp(-math.pi ** 2 * gap ** 2 / np.abs(rate))
    return float(out) if out.ndim == 0 else out


def electron_manifold_weight(vectors) -> np.ndarray:
    """Weight of each eigenvector inside the m_s manifold of its dominant bare state.

    ``vectors`` has eigenvectors in columns (``(..., 4, 4)``).  Hyperfine
    mixing inside the m_s = 1 manifold persists at any detuning, so the
    far-detuned test is made on the electron manifold rather than on a
    single bare state.
    """
    w = np.abs(np.asarray(vectors)) ** 2
    lower = w[..., 0, :] + w[..., 1, :]
    upper = w[..., 2, :] + w[..., 3, :]
    return np.maximum(lower, upper)


def hop_probabilities(j: int, k: int, cells, threads: int = 1, use_numba=None,
                      invalid: str = "raise") -> np.ndarray:
    """Vectorized :func:`hop_probability` over ``(sweep, cond, hf)`` cells.

    Cells are split into contiguous chunks over ``threads`` workers; every
    cell is evaluated independently so the result does not depend on the
    chunking.  With ``invalid="nan"`` cells failing the far-detuned checks
    yield NaN instead of raising.
    """
    if invalid not in ("raise", "nan"):
        raise ValueError(f"invalid must be 'raise' or 'nan', got {invalid!r}")
    if not (1 <= j <= 4 and 1 <= k <= 4):
        raise ValueError(f"labels must be in 1..4, got {j}, {k}")
    cells = list(cells)
    if not cells:
        return np.empty(0)
    rows = np.array([_cell_row(*c) for c in cells], dtype=float)
    nsteps = np.array([c[0].n_steps for c in cells], dtype=np.int64)

    det_first = rows[:, 4]
    det_last = rows[:, 4] + rows[:, 5] * (nsteps - 1)
    scale = WINDOW_FACTOR * np.max(np.abs(rows[:, :4]), axis=1)
    edge = np.minimum(np.abs(det_first), np.abs(det_last))
    narrow = edge < scale
    if invalid == "raise" and narrow.any():
        i = int(np.flatnonzero(narrow)[0])
        raise SweepWindowError(
            f"sweep edge is {edge[i]:.4g} Hz from f_plus, need at least {scale[i]:.4g} Hz "
            f"(10x the largest of rabi, |a_zz|, |a_zx|, f_n)")

    args = rows[:, :4].T
    _, v_start = eigh_descending(hamiltonian_stack(*args, det_first))
    _, v_end = eigh_descending(hamiltonian_stack(*args, det_last))
    col_start = v_start[:, :, j - 1] ** 2
    col_end = v_end[:, :, k - 1]
    bare = np.argmax(col_start, axis=1)
    weight = np.minimum(electron_manifold_weight(v_start).min(axis=1),
                        electron_manifold_weight(v_end).min(axis=1))
    mixed = weight <= ENDPOINT_OVERLAP
    if invalid == "raise" and mixed.any():
        raise SweepWindowError(
            f"dressed states at the sweep edges lie in a single m_s manifold only to "
            f"{weight.min():.4f}")
    psi0 = np.zeros((len(cells), 4), dtype=complex)
    psi0[np.arange(len(cells)), bare] = 1.0

    threads = max(1, min(int(threads), len(cells)))
    if threads == 1:
        final = kernels.propagate_batch(rows, nsteps, psi0, use_numba)
    else:
        chunks = np.array_split(np.arange(len(cells)), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(lambda idx: kernels.propagate_batch(rows[idx], nsteps[idx], psi0[idx], use_numba),
                             chunks)
            final = np.concatenate(list(parts))
    amp = np.einsum("bi,bi->b", col_end, final)
    out = np.clip(np.abs(amp) ** 2, 0.0, 1.0)
    out[narrow | mixed] = np.nan
    return out


def hop_probability(j: int, k: int, sweep: SweepProtocol, cond: ExperimentConditions,
                    hf: HyperfineCoupling, use_numba=None) -> float:
    """Probability of ending in dressed label ``k`` after starting in label ``j``.

    The start state is the bare state that dressed label ``j`` reduces to
    at the first step; the final state is projected onto label ``k`` at the
    last step, both labelled in descending energy order.

    Raises
    ------
    SweepWindowError
        If either sweep edge lies closer to ``f_plus`` than ten times the
        largest of the drive, hyperfine and Larmor frequencies, or an edge
        eigenvector overlaps its bare state by 0.99 or less.
    """
    return float(hop_probabilities(j, k, [(sweep, cond, hf)], use_numba=use_numba)[0])


@dataclass(frozen=True)
class SweepCurve:
    axis: str
    grid: np.ndarray
    simulated: np.ndarray
    analytic: np.ndarray
    gaps: np.ndarray
    pair: tuple


@dataclass(frozen=True)
class SweepMap:
    axes: tuple
    grids: tuple
    values: np.ndarray
    pair: tuple
    a0: float


def _varied_cell(axis, value, sweep, cond, hf):
    if axis == "a_zx":
        return sweep, cond, with_coupling(hf, a_zx=value)
    if axis == "a_zz":
        return sweep, cond, with_coupling(hf, a_zz=value)
    if axis == "rabi":
        return sweep, replace(cond, rabi=value), hf
    if axis == "b0":
        return sweep, cond.with_field(value), hf
    if axis == "rate":
        return sweep.with_rate(value), cond, hf
    raise ValueError(f"unknown axis {axis!r}; expected one of {AXES_1D}")


def _check_grid(name, grid, monotone=True):
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size == 0:
        raise ValueError(f"{name} grid is empty")
    if not np.all(np.isfinite(grid)):
        raise ValueError(f"{name} grid has non-finite values")
    if monotone and grid.size > 1:
        d = np.diff(grid)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError(f"{name} grid is not monotone")
    return grid


def sweep_map_1d(axis: str, grid, sweep: SweepProtocol, cond: ExperimentConditions,
                 hf: HyperfineCoupling, pair=(2, 3), threads: int = 1, analytic: bool = True,
                 use_numba=None) -> SweepCurve:
    """Hopping probability along one parameter axis.

    The analytic column evaluates the Landau-Zener formula with the gap
    found by :func:`~odnmr.spinpair.avoided_crossing_gap` over the sweep
    window; it is NaN when ``analytic`` is False.
    """
    grid = _check_grid(axis, grid)
    if axis not in AXES_1D:
        raise ValueError(f"unknown axis {axis!r}; expected one of {AXES_1D}")
    cells = [_varied_cell(axis, float(x), sweep, cond, hf) for x in grid]
    sim = hop_probabilities(pair[0], pair[1], cells, threads=threads, use_numba=use_numba)
    gaps = np.full(grid.size, np.nan)
    lz = np.full(grid.size, np.nan)
    if analytic:
        for i, (sw, c, h) in enumerate(cells):
            dets = sw.detunings(c.f_plus)
            window = (c.f_plus + dets.min(), c.f_plus + dets.max())
            gaps[i] = avoided_crossing_gap(pair[0], pair[1], c, h, scan=window).gap
            lz[i] = analytic_hop_probability(gaps[i], sw.rate)
    return SweepCurve(axis, grid, sim, lz, gaps, tuple(pair))


def default_theta_grid(n: int = 91) -> np.ndarray:
    """Polar angles on [0, pi/2]; the maps repeat with period pi/2 in |couplings|."""
    return np.linspace(0.0, 0.5 * math.pi, n)


def sweep_map_2d(axes, grids, a0: float, sweep: SweepProtocol, cond: ExperimentConditions,
                 pair=(2, 3), threads: int = 1, use_numba=None) -> SweepMap:
    """Hopping probability on a polar-angle by parameter grid.

    Parameters
    ----------
    axes : (str, str)
        ``"theta"`` and one of ``"b0"``, ``"rabi"``, ``"rate"`` in either order.
    grids : (array_like or None, array_like)
        Matching grids; a ``None`` polar-angle grid uses
        :func:`default_theta_grid`.
    a0 : float
        Dipolar magnitude (Hz) shared by all cells.

    Returns
    -------
    SweepMap
        ``values[i, j]`` belongs to ``grids[0][i]`` and ``grids[1][j]``.
    """
    axes = tuple(axes)
    if len(axes) != 2 or "theta" not in axes or not set(axes) - {"theta"} <= set(AXES_2D) \
            or axes[0] == axes[1]:
        raise ValueError(f"axes must pair 'theta' with one of {AXES_2D}, got {axes}")
    grids = list(grids)
    t_idx = axes.index("theta")
    if grids[t_idx] is None:
        grids[t_idx] = default_theta_grid()
    grids = [_check_grid(a, g, monotone=False) for a, g in zip(axes, grids)]
    other = axes[1 - t_idx]
    thetas, values = grids[t_idx], grids[1 - t_idx]
    a_zz, a_zx = dipolar_components(a0, thetas)

    cells = []
    for i in range(grids[0].size):
        for jj in range(grids[1].size):
            ti, oi = (i, jj) if t_idx == 0 else (jj, i)
            sw, c, _ = _varied_cell(other, float(values[oi]), sweep, cond, None)
            cells.append((sw, c, HyperfineCoupling(float(a_zz[ti]), float(a_zx[ti]))))
    probs = hop_probabilities(pair[0], pair[1], cells, threads=threads, use_numba=use_numba)
    return SweepMap(axes, tuple(grids), probs.reshape(grids[0].size, grids[1].size),
                    tuple(pair), float(a0))
