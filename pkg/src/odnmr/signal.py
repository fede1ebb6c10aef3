"""Synthetic ODNMR readout traces and the processing chain applied to them.

A readout trace holds one fractional fluorescence change per laser pulse.
Alternate sweep directions make the nuclear-spin signal alternate in sign,
so its information sits at the Nyquist tone of the sample cadence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fitkit
from .tables import read_csv, write_csv

DEFAULT_WINDOW = 0.060
ZERO_PAD = 4


@dataclass(frozen=True)
class ReadoutTrace:
    dt: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("trace values must be finite")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "values", v)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values.size) * self.dt

    @property
    def duration(self) -> float:
        return self.values.size * self.dt

    def to_csv(self, path):
        return write_csv(path, {"time": self.times, "value": self.values}, units={"time": "s"})

    @classmethod
    def from_csv(cls, path) -> "ReadoutTrace":
        cols, _ = read_csv(path)
        t, v = cols["time"], cols["value"]
        if t.size < 2:
            raise ValueError(f"{path}: need at least two samples")
        return cls(float(t[1] - t[0]), v)


@dataclass(frozen=True)
class EnvelopeModel:
    """Stretched-exponential readout envelope.

    ``d`` is the vertical offset of the fitted envelope (third variant) and
    is not used when synthesizing traces.
    """

    a: float
    T: float
    gamma: float = fitkit.STRETCH_F1
    c: float = 0.0
    d: float = 0.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not 0 < self.gamma <= 2:
            raise ValueError("gamma must lie in (0, 2]")

    @classmethod
    def from_e2_time(cls, a, t_e2, gamma=fitkit.STRETCH_F1, **kw) -> "EnvelopeModel":
        return cls(a, t_e2 / 2.0 ** (1.0 / gamma), gamma, **kw)

    @property
    def t_e2(self) -> float:
        return fitkit.e2_time(self.T, self.gamma)

    def gain(self, t):
        """Envelope shape ``exp(-(t/T)^gamma)`` without the amplitude."""
        return np.exp(-(np.asarray(t, dtype=float) / self.T) ** self.gamma)


@dataclass(frozen=True)
class RamseyModel:
    A: float
    delta: float
    t2_star: float
    c_offset: float = 0.0

    def __post_init__(self):
        if not self.t2_star > 0:
            raise ValueError("t2_star must be positive")

    def __call__(self, tau):
        return fitkit.damped_cosine(np.asarray(tau, dtype=float), self.A, self.delta,
                                    self.t2_star, self.c_offset)


def _alternation(n):
    return np.where(np.arange(n) % 2 == 0, 1.0, -1.0)


def synthesize_readout_trace(iz: float, env: EnvelopeModel, noise_sigma: float = 0.0, seed=None,
                             dt: float = 1e-3, duration: float = 0.4) -> ReadoutTrace:
    """Forward model of one detection period.

    ``value[n] = iz a (-1)^n exp(-(n dt / T)^gamma) + (-1)^n c + noise``.
    """
    if not -1.0 <= iz <= 1.0:
        raise ValueError("iz must lie in [-1, 1]")
    n = int(round(duration / dt))
    alt = _alternation(n)
    t = np.arange(n) * dt
    values = iz * env.a * alt * env.gain(t) + alt * env.c
    if noise_sigma > 0:
        values = values + np.random.default_rng(seed).normal(0.0, noise_sigma, n)
    return ReadoutTrace(dt, values)


def subtract_offset_oscillation(trace: ReadoutTrace, c: float) -> ReadoutTrace:
    """Remove a persistent alternating tone of amplitude ``c``."""
    return ReadoutTrace(trace.dt, trace.values - c * _alternation(trace.values.size))


def extract_envelope(trace: ReadoutTrace):
    """Every other sample (even indices) and its magnitude.

    Returns ``(times, magnitudes)``; apply to traces recorded for each
    nuclear spin state separately.
    """
    if trace.values.size < 4:
        raise ValueError("trace needs at least 4 samples")
    return trace.times[::2], np.abs(trace.values[::2])


def _window_samples(trace, window):
    m = int(round(window / trace.dt))
    if m < 4:
        raise ValueError(f"window of {window} s spans fewer than 4 samples")
    if m > trace.values.size:
        raise ValueError("window is longer than the trace")
    return trace.values[:m]


def extract_amplitude(trace: ReadoutTrace, window: float = DEFAULT_WINDOW,
                      search_bins: int = 0) -> float:
    """Signed Nyquist-tone amplitude of the first ``window`` seconds.

    The real part of the rectangular-window DFT at the alternation
    frequency, normalised by the sample count so that a pure ``a (-1)^n``
    tone returns ``a``.  With ``search_bins > 0`` the real part with the
    largest magnitude within that many bins below the alternation bin is
    returned instead, which tolerates slightly off-cadence imported data.
    """
    x = _window_samples(trace, window)
    m = x.size
    if search_bins <= 0:
        return float(np.dot(x, _alternation(m)) / m)
    spec = np.fft.rfft(x) / m
    k_alt = m / 2.0
    ks = np.arange(spec.size)
    near = np.flatnonzero(np.abs(ks - k_alt) <= search_bins)
    best = near[np.argmax(np.abs(spec.real[near]))]
    return float(spec.real[best])


def trace_spectrum(trace: ReadoutTrace, window: float = DEFAULT_WINDOW):
    """Unnormalised two-sided DFT of the windowed trace: ``(frequencies, X)``."""
    x = _window_samples(trace, window)
    return np.fft.fftfreq(x.size, trace.dt), np.fft.fft(x)


@dataclass(frozen=True)
class Interferogram:
    tau: np.ndarray
    amplitude: np.ndarray

    def to_csv(self, path):
        return write_csv(path, {"tau": self.tau, "amplitude": self.amplitude}, units={"tau": "s"})

    @classmethod
    def from_csv(cls, path) -> "Interferogram":
        cols, _ = read_csv(path)
        return cls(cols["tau"], cols["amplitude"])


def ramsey_interferogram(tau_grid, model: RamseyModel, mode: str = "analytic",
                         envelope: EnvelopeModel | None = None, noise_sigma: float = 0.0,
                         seed: int = 0, window: float = DEFAULT_WINDOW, dt: float = 1e-3,
                         duration: float = 0.4, subtract_c: bool = False) -> Interferogram:
    """Ramsey interferogram, either from the model or through synthetic traces.

    In ``"synthesis"`` mode every delay gets its own readout trace whose
    envelope amplitude is chosen so that the noiseless windowed extraction
    equals ``model(tau)``: the signed target is divided by the mean envelope
    gain over the window, and ``c_offset`` enters as a persistent tone.
    Point ``i`` draws noise from ``SeedSequence([seed, i])``.  With
    ``subtract_c`` the persistent tone is removed before extraction.
    """
    tau = np.asarray(tau_grid, dtype=float).reshape(-1)
    if tau.size == 0:
        raise ValueError("tau grid is empty")
    if mode == "analytic":
        amp = model(tau)
        if subtract_c:
            amp = amp - model.c_offset
        return Interferogram(tau, amp)
    if mode != "synthesis":
        raise ValueError(f"mode must be 'analytic' or 'synthesis', got {mode!r}")
    env = envelope or EnvelopeModel.from_e2_time(1.0, 51.4e-3)
    m = int(round(window / dt))
    gain = float(np.mean(env.gain(np.arange(m) * dt)))
    signal = fitkit.damped_cosine(tau, model.A, model.delta, model.t2_star)
    out = np.empty(tau.size)
    for i, s in enumerate(signal):
        point_env = EnvelopeModel(s / gain, env.T, env.gamma, c=model.c_offset)
        trace = synthesize_readout_trace(1.0, point_env, noise_sigma,
                                         np.random.SeedSequence([seed, i]), dt, duration)
        if subtract_c:
            trace = subtract_offset_oscillation(trace, model.c_offset)
        out[i] = extract_amplitude(trace, window)
    return Interferogram(tau, out)


@dataclass(frozen=True)
class NmrSpectrum:
    """Phased spectrum of an interferogram.

    ``frequency`` includes the reference offset; ``spectrum`` is complex
    after the zeroth-order phase correction, so its real part is the
    absorption line.
    """

    frequency: np.ndarray
    spectrum: np.ndarray
    phase: float
    peak_window: tuple
    fit: fitkit.FitResult | None

    def to_csv(self, path):
        return write_csv(path, {"frequency": self.frequency, "real": self.spectrum.real,
                                "imaginary": self.spectrum.imag}, units={"frequency": "Hz"})


def _uniform_step(tau):
    if tau.size < 4:
        raise ValueError("need at least 4 delays")
    d = np.diff(tau)
    if not np.all(d > 0) or np.max(np.abs(d - d[0])) > 1e-6 * d[0]:
        raise ValueError("tau grid must be uniform and increasing")
    return float(d[0])


def nmr_spectrum(interferogram: Interferogram, zero_pad: int = ZERO_PAD, reference: float = 0.0,
                 fit: bool = True, remove_mean: bool = False) -> NmrSpectrum:
    """Phased Fourier transform of an interferogram with a Lorentzian fit.

    The first sample is halved (trapezoidal weighting of a record starting
    at zero delay) and the record is zero-padded ``zero_pad`` times.  The
    zeroth-order phase makes the integrated complex spectrum over the peak
    window real and positive, which maximises its integrated real part.
    The peak window spans the points above half the peak magnitude, and the
    Lorentzian is fitted over three such widths either side of the peak.

    Parameters
    ----------
    reference : float
        Added to the frequency axis, e.g. a carrier the detuning is
        measured from.
    remove_mean : bool
        Subtract the record mean first, suppressing a constant offset.
    """
    tau = np.asarray(interferogram.tau, dtype=float)
    step = _uniform_step(tau)
    y = np.asarray(interferogram.amplitude, dtype=float).copy()
    if remove_mean:
        y -= y.mean()
    y[0] *= 0.5
    n = zero_pad * y.size
    spec = step * np.fft.rfft(y, n=n)
    freq = np.fft.rfftfreq(n, step)
    mag = np.abs(spec)
    # skip the lowest bins where a residual DC term would dominate
    skip = zero_pad if not remove_mean else 0
    k = skip + int(np.argmax(mag[skip:]))
    half = 0.5 * mag[k]
    lo = k
    while lo > 0 and mag[lo - 1] >= half:
        lo -= 1
    hi = k
    while hi < mag.size - 1 and mag[hi + 1] >= half:
        hi += 1
    phase = -float(np.angle(np.sum(spec[lo:hi + 1])))
    phased = spec * np.exp(1j * phase)
    result = None
    if fit:
        width = max(hi - lo, 2)
        a = max(k - 3 * width, 0)
        b = min(k + 3 * width, freq.size - 1)
        result = fitkit.fit_lorentzian(freq[a:b + 1] + reference, phased.real[a:b + 1])
    return NmrSpectrum(freq + reference, phased, phase, (float(freq[lo] + reference),
                                                         float(freq[hi] + reference)), result)
