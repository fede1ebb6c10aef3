"""Command-line front end: ``odnmr run``, ``odnmr reproduce`` and ``odnmr budget``.

Every experiment is described by a JSON configuration validated against
the schema shipped in ``odnmr/schema/run_config.schema.json``.  Physical
quantities are strings with unit suffixes.  Artifacts (tables, JSON
reports, SVG figures) go to ``--out``, else ``$ODNMR_OUT_DIR``, else the
working directory.

Exit codes: 0 success, 2 invalid input, 3 numerical non-convergence,
4 I/O failure.  Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from . import budget, ensemble, fitkit, plots, signal, sweepsim
from .constants import K0_HZ_NM3
from .spinpair import (
    BASIS,
    ExperimentConditions,
    HyperfineCoupling,
    LabelAmbiguityError,
    avoided_crossing_gap,
    dressed_spectrum_scan,
    hyperfine_from_geometry,
)
from .tables import read_table, write_csv, write_json_table
from .units import UnitError, parse_quantity

OUT_ENV = "ODNMR_OUT_DIR"
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class CliError(Exception):
    """Failure carrying an exit code and the offending config field."""

    def __init__(self, code: int, message: str, field: str | None = None):
        super().__init__(message)
        self.code = code
        self.field = field

    def to_json(self) -> str:
        kind = {EXIT_INVALID: "validation", EXIT_NUMERIC: "non-convergence", EXIT_IO: "io"}[self.code]
        doc = {"error": kind, "exit_code": self.code, "message": str(self)}
        if self.field is not None:
            doc["field"] = self.field
        return json.dumps(doc, sort_keys=True)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@lru_cache(maxsize=1)
def schema() -> dict:
    text = resources.files("odnmr").joinpath("schema/run_config.schema.json").read_text()
    return json.loads(text)


def _field_path(parts) -> str:
    return ".".join(str(p) for p in parts) or "<root>"


def validate_config(cfg) -> dict:
    """Check ``cfg`` against the schema; raise :class:`CliError` naming the field."""
    import jsonschema

    validator = jsonschema.Draft202012Validator(schema())
    errors = list(validator.iter_errors(cfg))
    if errors:
        # the deepest error points at the actual offending key
        err = max(errors, key=lambda e: (len(e.absolute_path), -len(e.context)))
        while err.context:
            err = max(err.context, key=lambda e: len(e.absolute_path))
        where = _field_path(err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            raise CliError(EXIT_INVALID, f"unknown key(s) {extra} in {where}", where)
        if err.validator == "pattern":
            raise CliError(EXIT_INVALID, f"{where}: {err.instance!r} needs a number followed by a unit, "
                                         "e.g. \"10 mT\"", where)
        raise CliError(EXIT_INVALID, f"{where}: {err.message}", where)
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INVALID, f"{path}: invalid JSON ({exc})") from None
    return validate_config(cfg)


class Params:
    """Typed access to one parameter block; errors name the dotted field."""

    def __init__(self, block: dict | None, path: str):
        self.block = block or {}
        self.path = path

    def __contains__(self, key):
        return key in self.block

    def where(self, key) -> str:
        return f"{self.path}.{key}"

    def sub(self, key) -> "Params":
        return Params(self.block.get(key), self.where(key))

    def raw(self, key, default=None):
        return self.block.get(key, default)

    def q(self, key, kind, default=None):
        if key not in self.block:
            if default is None:
                raise CliError(EXIT_INVALID, f"{self.where(key)} is required", self.where(key))
            return default
        try:
            return parse_quantity(self.block[key], kind)
        except UnitError as exc:
            raise CliError(EXIT_INVALID, f"{self.where(key)}: {exc}", self.where(key)) from None

    def grid(self, key, kind) -> np.ndarray:
        spec = self.sub(key)
        if "values" in spec:
            vals = spec.raw("values")
            if not vals:
                raise CliError(EXIT_INVALID, f"{spec.where('values')}: grid is empty", spec.where("values"))
            out = []
            for i, v in enumerate(vals):
                try:
                    out.append(parse_quantity(v, kind))
                except UnitError as exc:
                    w = f"{spec.where('values')}[{i}]"
                    raise CliError(EXIT_INVALID, f"{w}: {exc}", w) from None
            return np.array(out)
        lo, hi, n = spec.q("start", kind), spec.q("stop", kind), int(spec.raw("num"))
        if n < 1:
            raise CliError(EXIT_INVALID, f"{spec.where('num')}: grid is empty", spec.where("num"))
        if spec.raw("spacing", "linear") == "log":
            if lo <= 0 or hi <= 0:
                raise CliError(EXIT_INVALID, f"{self.where(key)}: log grid needs positive limits",
                               self.where(key))
            return np.geomspace(lo, hi, n)
        return np.linspace(lo, hi, n)


def _guard(where: str, build):
    try:
        return build()
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_INVALID, f"{where}: {exc}", where) from None


def conditions_from(p: Params) -> ExperimentConditions:
    b0 = p.q("b0", "field")
    rabi = p.q("rabi", "frequency", 100e3)
    f_plus = p.q("f_plus", "frequency") if "f_plus" in p else None
    return _guard(p.path, lambda: ExperimentConditions(b0=b0, rabi=rabi, f_plus=f_plus))


def coupling_from(p: Params) -> HyperfineCoupling:
    if "a_zz" in p:
        return HyperfineCoupling(p.q("a_zz", "frequency"), p.q("a_zx", "frequency"))
    theta = p.q("theta", "angle")
    if "a0" in p:
        a0 = p.q("a0", "frequency")
        return _guard(p.path, lambda: hyperfine_from_geometry(theta, a0=a0))
    r = p.q("r", "length_nm")
    return _guard(p.path, lambda: hyperfine_from_geometry(theta, r=r))


def sweep_from(p: Params) -> sweepsim.SweepProtocol:
    kw = {"span": p.q("span", "frequency", 9e6), "step": p.q("step", "frequency", 1e3),
          "direction": p.raw("direction", "up")}
    if "center" in p:
        kw["center"] = p.q("center", "frequency")
    if "rate" in p:
        rate = p.q("rate", "rate")
        return _guard(p.path, lambda: sweepsim.SweepProtocol.from_rate(abs(rate), **kw))
    kw["duration"] = p.q("duration", "time", 1e-3)
    return _guard(p.path, lambda: sweepsim.SweepProtocol(**kw))


# ---------------------------------------------------------------------------
# experiment outcomes
# ---------------------------------------------------------------------------

@dataclass
class Context:
    out: Path
    fmt: str = "csv"
    seed: int = 0
    threads: int = 1
    plot: bool = True
    base: Path = Path(".")

    def resolve(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.base / p


@dataclass
class Outcome:
    summary: str
    tables: dict = field(default_factory=dict)    # stem -> (columns, units)
    reports: dict = field(default_factory=dict)   # stem -> JSON-able dict
    figures: list = field(default_factory=list)   # (stem, callable(path))
    unconverged: list = field(default_factory=list)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _fit_doc(res: fitkit.FitResult) -> dict:
    return res.to_dict()


def emit(outcome: Outcome, stem: str, ctx: Context) -> list:
    """Write every artifact of ``outcome`` under ``ctx.out``; returns the paths."""
    try:
        ctx.out.mkdir(parents=True, exist_ok=True)
        written = []
        for suffix, (cols, units) in outcome.tables.items():
            name = f"{stem}{suffix}"
            if ctx.fmt == "json":
                written.append(write_json_table(ctx.out / f"{name}.json", cols, units))
            else:
                written.append(write_csv(ctx.out / f"{name}.csv", cols, units))
        for suffix, doc in outcome.reports.items():
            path = ctx.out / f"{stem}{suffix}.report.json"
            path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")
            written.append(path)
        if ctx.plot:
            for suffix, draw in outcome.figures:
                written.append(draw(ctx.out / f"{stem}{suffix}.svg"))
        return written
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write artifacts to {ctx.out}: {exc.strerror or exc}") from None


def _read_input(ctx: Context, p: Params, key: str = "input"):
    path = ctx.resolve(p.raw(key))
    try:
        return read_table(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc.strerror or exc}", p.where(key)) from None
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_INVALID, f"{path}: {exc}", p.where(key)) from None


def _column(cols, names, p: Params, key="input"):
    for n in names:
        if n in cols:
            return cols[n]
    raise CliError(EXIT_INVALID, f"{p.raw(key)}: missing column, expected one of {list(names)}",
                   p.where(key))


def _check_fit(outcome: Outcome, label: str, res: fitkit.FitResult):
    if not res.converged:
        outcome.unconverged.append(f"{label}: {res.message}")


# ---------------------------------------------------------------------------
# experiment kinds
# ---------------------------------------------------------------------------

def run_dressed(p: Params, ctx: Context) -> Outcome:
    cond, hf = conditions_from(p.sub("conditions")), coupling_from(p.sub("coupling"))
    span, step = p.q("span", "frequency", 9e6), p.q("step", "frequency", 5e3)
    n = int(round(span / step))
    freqs = cond.f_plus + np.linspace(-0.5 * span, 0.5 * span, n + 1)
    nu = dressed_spectrum_scan(freqs, cond, hf)
    window = (freqs[0], freqs[-1])
    gaps = {}
    for j, k in ((1, 2), (2, 3), (3, 4)):
        g = avoided_crossing_gap(j, k, cond, hf, scan=window)
        gaps[f"{j}{k}"] = {"gap": g.gap, "frequency": g.frequency, "interior": g.interior}
    cols = {"frequency": freqs}
    cols.update({f"nu{i + 1}": nu[:, i] for i in range(4)})
    units = {k: "Hz" for k in cols}
    det_mhz = (freqs - cond.f_plus) / 1e6

    def draw(path):
        return plots.line_plot(path, det_mhz, {f"psi{i + 1}": nu[:, i] / 1e6 for i in range(4)},
                               "f - f+ (MHz)", "dressed frequency (MHz)")

    report = {"f_plus": cond.f_plus, "f_n": cond.f_n, "a_zz": hf.a_zz, "a_zx": hf.a_zx, "gaps": gaps}
    g23 = gaps["23"]["gap"]
    return Outcome(f"dressed: {freqs.size} frequencies, gap23 = {g23 / 1e3:.2f} kHz",
                   {"": (cols, units)}, {"": report}, [("", draw)])


_INITIAL_BARE = {"0,up": 0, "0,down": 1, "1,up": 2, "1,down": 3}


def _initial_state(label: str, sweep, cond, hf) -> int:
    if label in _INITIAL_BARE:
        return _INITIAL_BARE[label]
    # dressed label at the first step -> dominant bare component
    from .kernels import eigh_descending, hamiltonian_stack

    det0 = sweep.detunings(cond.f_plus)[0]
    _, vecs = eigh_descending(hamiltonian_stack(cond.f_n, cond.rabi, hf.a_zz, hf.a_zx, det0))
    return int(np.argmax(np.abs(vecs[:, int(label[3]) - 1]) ** 2))


def run_sweep(p: Params, ctx: Context) -> Outcome:
    cond, hf = conditions_from(p.sub("conditions")), coupling_from(p.sub("coupling"))
    sweep = sweep_from(p.sub("sweep"))
    label = p.raw("initial", "psi2")
    start = _initial_state(label, sweep, cond, hf)
    traj = sweepsim.propagate_sweep(sweepsim.QuantumState.basis(start), sweep, cond, hf, record=True)
    every = int(p.raw("record_every", 10))
    idx = np.arange(0, traj.times.size, every)
    if idx[-1] != traj.times.size - 1:
        idx = np.append(idx, traj.times.size - 1)
    cols = {"time": traj.times[idx], "frequency": traj.frequencies[idx]}
    cols.update({f"psi{i + 1}": traj.populations[idx, i] for i in range(4)})
    bare_names = ["bare_0up", "bare_0down", "bare_1up", "bare_1down"]
    cols.update({n: traj.bare_populations[idx, i] for i, n in enumerate(bare_names)})
    units = {"time": "s", "frequency": "Hz"}
    final = traj.populations[-1]
    report = {"initial": label, "initial_bare_state": BASIS[start], "rate": sweep.rate,
              "steps": sweep.n_steps, "dt": sweep.dt,
              "final_populations": {f"psi{i + 1}": final[i] for i in range(4)},
              "final_bare_populations": dict(zip(bare_names, traj.bare_populations[-1])),
              "norm_drift": abs(float(np.sum(np.abs(traj.final_state.amplitudes) ** 2)) - 1.0)}
    t_ms = cols["time"] * 1e3

    def draw(path):
        return plots.line_plot(path, t_ms, {f"psi{i + 1}": cols[f"psi{i + 1}"] for i in range(4)},
                               "time (ms)", "population", title=f"start in {label}")

    pops = " ".join(f"{x:.4f}" for x in final)
    return Outcome(f"sweep: start {label}, final populations psi1..4 = {pops}",
                   {"": (cols, units)}, {"": report}, [("", draw)])


_AXIS_UNITS = {"a_zx": ("frequency", "Hz"), "a_zz": ("frequency", "Hz"), "rabi": ("frequency", "Hz"),
               "b0": ("field", "T"), "rate": ("rate", "Hz/s"), "theta": ("angle", "rad")}


def _pair(p: Params):
    pair = tuple(p.raw("pair", [2, 3]))
    if pair[0] == pair[1]:
        raise CliError(EXIT_INVALID, f"{p.where('pair')}: labels must differ", p.where("pair"))
    return pair


def run_map1d(p: Params, ctx: Context) -> Outcome:
    cond, hf = conditions_from(p.sub("conditions")), coupling_from(p.sub("coupling"))
    sweep = sweep_from(p.sub("sweep"))
    axis = p.raw("axis")
    kind, unit = _AXIS_UNITS[axis]
    grid = p.grid("grid", kind)
    pair = _pair(p)
    curve = _guard(p.path, lambda: sweepsim.sweep_map_1d(axis, grid, sweep, cond, hf, pair=pair,
                                                         threads=ctx.threads,
                                                         analytic=p.raw("analytic", True)))
    cols = {axis: curve.grid, "simulated": curve.simulated, "analytic": curve.analytic,
            "gap": curve.gaps}
    units = {axis: unit, "gap": "Hz"}
    tag = f"P{pair[0]}{pair[1]}"

    def draw(path):
        return plots.line_plot(path, curve.grid, {"simulated": curve.simulated,
                                                  "Landau-Zener": curve.analytic},
                               f"{axis} ({unit})", f"hop probability {tag}",
                               logx=axis == "rate")

    k = int(np.nanargmax(curve.simulated))
    report = {"axis": axis, "pair": list(pair), "points": int(grid.size),
              "max_simulated": float(curve.simulated[k]), "argmax": float(curve.grid[k])}
    return Outcome(f"map1d[{axis}]: {grid.size} points, max {tag} = {curve.simulated[k]:.4f} "
                   f"at {curve.grid[k]:.6g} {unit}", {"": (cols, units)}, {"": report}, [("", draw)])


def run_map2d(p: Params, ctx: Context) -> Outcome:
    a0 = p.q("a0", "frequency")
    cond = conditions_from(p.sub("conditions"))
    sweep = sweep_from(p.sub("sweep"))
    axis = p.raw("axis")
    kind, unit = _AXIS_UNITS[axis]
    grid = p.grid("grid", kind)
    thetas = p.grid("theta_grid", "angle") if "theta_grid" in p else sweepsim.default_theta_grid()
    pair = _pair(p)
    smap = _guard(p.path, lambda: sweepsim.sweep_map_2d((axis, "theta"), (grid, thetas), a0, sweep,
                                                        cond, pair=pair, threads=ctx.threads))
    values = smap.values  # rows: axis, columns: theta
    cols = {axis: grid}
    units = {axis: unit}
    for j, th in enumerate(thetas):
        name = f"theta={float(th)!r}"
        cols[name] = values[:, j]
        units[name] = "rad"
    scale = {"b0": (1e3, "mT"), "rabi": (1e-3, "kHz"), "rate": (1e-9, "MHz/ms")}[axis]

    def draw(path):
        return plots.heatmap(path, thetas, grid * scale[0], values, "polar angle (rad)",
                             f"{axis} ({scale[1]})", title=f"A0 = {a0 / 1e3:g} kHz")

    i, j = np.unravel_index(int(np.nanargmax(values)), values.shape)
    report = {"a0": a0, "axis": axis, "pair": list(pair), "shape": list(values.shape),
              "max": float(values[i, j]), "argmax": {axis: float(grid[i]), "theta": float(thetas[j])},
              "row_max": {repr(float(g)): float(np.nanmax(values[r])) for r, g in enumerate(grid)}}
    return Outcome(f"map2d[theta x {axis}]: A0 = {a0 / 1e3:g} kHz, {values.size} cells, "
                   f"max P{pair[0]}{pair[1]} = {values[i, j]:.4f}", {"": (cols, units)},
                   {"": report}, [("", draw)])


def run_ensemble(p: Params, ctx: Context) -> Outcome:
    radius = p.q("radius", "length_nm", 3.0)
    density = p.q("density", "density_nm3", 1.9)
    runs = int(p.raw("runs", 10_000))
    width, a_max = p.q("bin_width", "frequency", 6e3), p.q("a_max", "frequency", 300e3)
    hist = _guard(p.path, lambda: ensemble.hyperfine_histogram(runs, ctx.seed, radius, density,
                                                               width, a_max))
    populated = hist.std_errors > 0
    z = np.full(hist.mean_counts.size, np.nan)
    z[populated] = (hist.mean_counts[populated] - hist.analytic_counts[populated]) / hist.std_errors[populated]
    try:
        slope = ensemble.power_law_slope(hist)
    except ValueError:
        slope = float("nan")
    cols = {"bin_center": hist.bin_centers, "mean_count": hist.mean_counts,
            "std_error": hist.std_errors, "analytic_count": hist.analytic_counts}
    units = {"bin_center": "Hz"}
    report = {"runs": runs, "seed": ctx.seed, "radius_nm": radius, "density_nm3": density,
              "spin_count": ensemble.spin_count(radius, density),
              "expected_within_1p5nm": 4.0 / 3.0 * math.pi * 1.5 ** 3 * density,
              "a_min": K0_HZ_NM3 / radius ** 3, "loglog_slope": slope,
              "max_abs_z": float(np.nanmax(np.abs(z))) if populated.any() else None}
    tables = {"": (cols, units)}
    summary = f"ensemble: {runs} runs, N_tot = {report['spin_count']}, log-log slope = {slope:.3f}"
    if "hop" in p:
        hp = p.sub("hop")
        cond = conditions_from(hp.sub("conditions"))
        sweep = sweep_from(hp.sub("sweep"))
        sample = ensemble.sample_sphere(ensemble.run_seed(ctx.seed, 0), radius, density)
        stats = ensemble.ensemble_hop_statistics(sample, sweep, cond, pair=_pair(hp),
                                                 threshold=float(hp.raw("threshold", 0.1)),
                                                 threads=ctx.threads)
        tables["_hop"] = ({"r": sample.r, "theta": sample.theta, "a0": sample.a0,
                           "probability": stats.probabilities},
                          {"r": "nm", "theta": "rad", "a0": "Hz"})
        report["hop"] = {"b0": cond.b0, "mean": stats.mean, "count_above": stats.count_above,
                         "threshold": stats.threshold, "excluded": stats.excluded}
        summary += f", {stats.count_above} spins above P = {stats.threshold:g}"
    lo, hi = hist.bin_edges[:-1], hist.bin_edges[1:]
    show = hist.mean_counts > 0

    def draw(path):
        x = np.sqrt(np.maximum(lo, hist.bin_width * 0.5) * hi)
        return plots.xy_plot(path, [("Monte Carlo", x[show] / 1e3, hist.mean_counts[show], "o"),
                                    ("analytic", x[show] / 1e3, hist.analytic_counts[show], "-")],
                             "A0 (kHz)", "spins per bin", loglog=True)

    return Outcome(summary, tables, {"": report}, [("", draw)])


def _ramsey_model(p: Params) -> signal.RamseyModel:
    amp, delta, t2 = p.q("amplitude", "fraction"), p.q("delta", "frequency"), p.q("t2_star", "time")
    offset = p.q("offset", "fraction") if "offset" in p else 0.0
    return _guard(p.path, lambda: signal.RamseyModel(amp, delta, t2, offset))


def _fit_ramsey(outcome: Outcome, tau, amp, with_offset: bool, label="fit"):
    try:
        res = fitkit.fit_damped_cosine(tau, amp, with_offset=with_offset)
    except fitkit.FitError as exc:
        raise CliError(EXIT_INVALID, f"ramsey fit: {exc}") from None
    _check_fit(outcome, label, res)
    return res


def _spectrum_outputs(outcome: Outcome, ig: signal.Interferogram, reference: float, zero_pad: int,
                      remove_mean: bool, suffix: str):
    spec = _guard("spectrum", lambda: signal.nmr_spectrum(ig, zero_pad=zero_pad, reference=reference,
                                                           remove_mean=remove_mean))
    outcome.tables[suffix] = ({"frequency": spec.frequency, "real": spec.spectrum.real,
                               "imaginary": spec.spectrum.imag}, {"frequency": "Hz"})
    doc = {"phase": spec.phase, "peak_window": list(spec.peak_window), "reference": reference}
    if spec.fit is not None:
        _check_fit(outcome, "lorentzian", spec.fit)
        doc["fit"] = _fit_doc(spec.fit)
    outcome.reports[suffix] = doc
    lo, hi = spec.peak_window
    width = hi - lo
    keep = (spec.frequency > lo - 6 * width) & (spec.frequency < hi + 6 * width)

    def draw(path):
        curves = [("spectrum", spec.frequency[keep] / 1e3, spec.spectrum.real[keep], "-")]
        if spec.fit is not None:
            curves.append(("Lorentzian", spec.frequency[keep] / 1e3,
                           fitkit.evaluate(spec.fit, spec.frequency[keep]), "--"))
        return plots.xy_plot(path, curves, "frequency (kHz)", "absorption (arb.)")

    outcome.figures.append((suffix, draw))
    return spec


def _interferogram_figure(ig, res):
    def draw(path):
        fine = np.linspace(ig.tau[0], ig.tau[-1], 400)
        return plots.xy_plot(path, [("interferogram", ig.tau * 1e3, ig.amplitude * 100, "o"),
                                    ("fit", fine * 1e3, fitkit.evaluate(res, fine) * 100, "-")],
                             "tau (ms)", "amplitude (%)")
    return draw


def _ramsey_report(res) -> dict:
    doc = _fit_doc(res)
    doc["visibility"] = abs(res.params["amplitude"])
    return doc


def run_ramsey_synth(p: Params, ctx: Context) -> Outcome:
    model = _ramsey_model(p.sub("model"))
    tau = p.grid("tau", "time")
    env = None
    if "envelope" in p:
        ep = p.sub("envelope")
        env = signal.EnvelopeModel.from_e2_time(1.0, ep.q("t_e2", "time"), ep.raw("gamma", 0.3))
    ig = _guard(p.path, lambda: signal.ramsey_interferogram(
        tau, model, mode=p.raw("mode", "synthesis"), envelope=env,
        noise_sigma=p.q("noise", "fraction", 0.0) if "noise" in p else 0.0, seed=ctx.seed,
        window=p.q("window", "time", signal.DEFAULT_WINDOW), dt=p.q("dt", "time", 1e-3),
        duration=p.q("duration", "time", 0.4), subtract_c=p.raw("subtract_offset", False)))
    outcome = Outcome("")
    outcome.tables[""] = ({"tau": ig.tau, "amplitude": ig.amplitude}, {"tau": "s"})
    res = _fit_ramsey(outcome, ig.tau, ig.amplitude, p.raw("with_offset", False))
    outcome.reports["_fit"] = _ramsey_report(res)
    outcome.figures.append(("", _interferogram_figure(ig, res)))
    ref = p.q("reference", "frequency", 0.0) if "reference" in p else 0.0
    spec = _spectrum_outputs(outcome, ig, ref, signal.ZERO_PAD, False, "_spectrum")
    line = ""
    if spec.fit is not None:
        line = (f", line at {spec.fit.params['center'] / 1e3:.3f} kHz, "
                f"FWHM {spec.fit.params['fwhm']:.0f} Hz")
    outcome.summary = (f"ramsey-synth: {tau.size} delays, |A| = {abs(res.params['amplitude']) * 100:.4f} %, "
                       f"delta = {res.params['delta']:.2f} Hz, T2* = {res.params['t2_star'] * 1e3:.4f} ms"
                       + line)
    return outcome


def run_ramsey_fit(p: Params, ctx: Context) -> Outcome:
    cols, _ = _read_input(ctx, p)
    ig = signal.Interferogram(_column(cols, ["tau"], p), _column(cols, ["amplitude"], p))
    outcome = Outcome("")
    res = _fit_ramsey(outcome, ig.tau, ig.amplitude, p.raw("with_offset", False))
    outcome.reports[""] = _ramsey_report(res)
    outcome.figures.append(("", _interferogram_figure(ig, res)))
    outcome.summary = (f"ramsey-fit: {ig.tau.size} points, |A| = {abs(res.params['amplitude']) * 100:.4f} %, "
                       f"delta = {res.params['delta']:.2f} Hz, T2* = {res.params['t2_star'] * 1e3:.4f} ms")
    return outcome


def run_spectrum(p: Params, ctx: Context) -> Outcome:
    cols, _ = _read_input(ctx, p)
    ig = signal.Interferogram(_column(cols, ["tau"], p), _column(cols, ["amplitude"], p))
    outcome = Outcome("")
    ref = p.q("reference", "frequency", 0.0) if "reference" in p else 0.0
    spec = _spectrum_outputs(outcome, ig, ref, int(p.raw("zero_pad", signal.ZERO_PAD)),
                             p.raw("remove_mean", False), "")
    fit = spec.fit
    outcome.summary = (f"spectrum: {spec.frequency.size} bins, line at {fit.params['center'] / 1e3:.3f} kHz, "
                       f"FWHM {fit.params['fwhm']:.1f} Hz")
    return outcome


def run_envelope_fit(p: Params, ctx: Context) -> Outcome:
    outcome = Outcome("")
    if "synth" in p:
        sp = p.sub("synth")
        gamma = sp.raw("gamma", 0.3)
        env = _guard(sp.path, lambda: signal.EnvelopeModel.from_e2_time(
            sp.q("a", "fraction"), sp.q("t_e2", "time"), gamma,
            c=sp.q("offset", "fraction", 0.0) if "offset" in sp else 0.0))
        noise = sp.q("noise", "fraction", 0.0) if "noise" in sp else 0.0
        trace = _guard(sp.path, lambda: signal.synthesize_readout_trace(
            float(sp.raw("iz", 1.0)), env, noise, ctx.seed, sp.q("dt", "time", 1e-3),
            sp.q("duration", "time", 0.4)))
        outcome.tables["_trace"] = ({"time": trace.times, "value": trace.values}, {"time": "s"})
    else:
        cols, _ = _read_input(ctx, p)
        t = _column(cols, ["time"], p)
        if t.size < 2:
            raise CliError(EXIT_INVALID, "trace needs at least two samples", p.where("input"))
        trace = _guard(p.where("input"), lambda: signal.ReadoutTrace(float(t[1] - t[0]),
                                                                     _column(cols, ["value"], p)))
    times, mags = _guard("envelope", lambda: signal.extract_envelope(trace))
    outcome.tables[""] = ({"time": times, "envelope": mags}, {"time": "s"})
    fits = {}
    for variant in p.raw("variants", ["f1", "f2", "f3"]):
        try:
            res = fitkit.fit_stretched_exponential(times, mags, variant)
        except fitkit.FitError as exc:
            raise CliError(EXIT_INVALID, f"envelope fit {variant}: {exc}") from None
        _check_fit(outcome, variant, res)
        fits[variant] = res
    outcome.reports[""] = {v: _fit_doc(r) for v, r in fits.items()}

    def draw(path):
        curves = [("envelope", times * 1e3, mags, "o")]
        curves += [(v, times * 1e3, fitkit.evaluate(r, times), "-") for v, r in fits.items()]
        return plots.xy_plot(path, curves, "detection time (ms)", "|signal|")

    outcome.figures.append(("", draw))
    first = next(iter(fits))
    r = fits[first]
    outcome.summary = (f"envelope-fit: {times.size} points, {first}: a = {r.params['a']:.5g}, "
                       f"T_e2 = {r.derived['t_e2'] * 1e3:.3f} ms")
    return outcome


def run_buildup_fit(p: Params, ctx: Context) -> Outcome:
    outcome = Outcome("")
    if "synth" in p:
        sp = p.sub("synth")
        beta = float(sp.raw("beta"))
        a_sat, t_pol = sp.q("a_sat", "fraction"), sp.q("t_pol", "time")
        t = sp.grid("times", "time")
        y = fitkit.polarization_buildup(t, a_sat, t_pol / 2.0 ** (1.0 / beta), beta)
        if "noise" in sp:
            y = y + np.random.default_rng(ctx.seed).normal(0.0, sp.q("noise", "fraction"), t.size)
        outcome.tables["_data"] = ({"time": t, "amplitude": y}, {"time": "s"})
    else:
        cols, _ = _read_input(ctx, p)
        t, y = _column(cols, ["time"], p), _column(cols, ["amplitude"], p)
    fix = p.raw("fix_beta")
    try:
        res = fitkit.fit_polarization_buildup(t, y, fix_beta=fix)
    except fitkit.FitError as exc:
        raise CliError(EXIT_INVALID, f"buildup fit: {exc}") from None
    _check_fit(outcome, "buildup", res)
    outcome.reports["_fit"] = _fit_doc(res)

    def draw(path):
        fine = np.linspace(0.0, float(np.max(t)), 400)
        return plots.xy_plot(path, [("data", t, y * 100, "o"),
                                    ("fit", fine, fitkit.evaluate(res, fine) * 100, "-")],
                             "polarization time (s)", "amplitude (%)")

    outcome.figures.append(("", draw))
    outcome.summary = (f"buildup-fit: {t.size} points, A_sat = {res.params['a_sat'] * 100:.4f} %, "
                       f"T_pol = {res.derived['t_pol'] * 1e3:.2f} ms, beta = {res.derived['beta']:.4f}")
    return outcome


def budget_report(p: Params) -> dict:
    if "preset" in p:
        name = p.raw("preset")
        if name not in budget.PRESETS:
            raise CliError(EXIT_INVALID, f"unknown preset {name!r}; available: {sorted(budget.PRESETS)}",
                           p.where("preset"))
        return budget.preset_report(name)
    report = {}
    t2 = None
    if "odnmr" in p:
        o = p.sub("odnmr")
        inputs = _guard(o.path, lambda: budget.OdnmrBudgetInputs(
            visibility=o.q("visibility", "fraction"), eta=float(o.raw("eta")),
            n_nv=float(o.raw("n_nv")), n_rep=float(o.raw("n_rep")), t2_star=o.q("t2_star", "time"),
            t_pol=o.q("t_pol", "time"), t_read=o.q("t_read", "time"), t=o.q("t", "time", 1.0)))
        report["odnmr"] = budget.odnmr_report(inputs)
        t2 = inputs.t2_star
    if "coil" in p:
        c = p.sub("coil")
        if "t2_star" in c:
            t2 = c.q("t2_star", "time")
        if t2 is None:
            raise CliError(EXIT_INVALID, f"{c.where('t2_star')} is required without an odnmr block",
                           c.where("t2_star"))
        kw = {}
        for key, kind in (("gamma_nuc", "gyromagnetic"), ("coil_volume", "volume")):
            if key in c:
                kw[key] = c.q(key, kind)
        for key in ("geometry_factor", "fill_factor"):
            if key in c:
                kw[key] = float(c.raw(key))
        inputs = _guard(c.path, lambda: budget.CoilBudgetInputs(
            quality=float(c.raw("quality")), coil_temp=c.q("coil_temp", "temperature"),
            bandwidth=c.q("bandwidth", "frequency"), b0=c.q("b0", "field"),
            polarized_density=c.q("polarized_density", "density_m3"), **kw))
        report["coil"] = budget.coil_report(inputs, t2)
    return report


def run_budget(p: Params, ctx: Context) -> Outcome:
    report = budget_report(p)
    parts = []
    if "odnmr" in report:
        out = report["odnmr"]["outputs"]
        parts.append(f"delta_f = {out['delta_f']:.4e} Hz, ARW = {out['angle_random_walk']:.4f} deg/sqrt(s)")
    if "coil" in report:
        parts.append(f"coil fidelity = {report['coil']['outputs']['fidelity']:.4e}")
    return Outcome("budget: " + ", ".join(parts), reports={"": report})


RUNNERS = {
    "dressed": run_dressed, "sweep": run_sweep, "map1d": run_map1d, "map2d": run_map2d,
    "ensemble": run_ensemble, "ramsey-synth": run_ramsey_synth, "ramsey-fit": run_ramsey_fit,
    "spectrum": run_spectrum, "envelope-fit": run_envelope_fit, "buildup-fit": run_buildup_fit,
    "budget": run_budget,
}


def execute(cfg: dict, ctx: Context, stem: str | None = None, echo=print) -> Outcome:
    """Validate, run and emit one experiment; raises :class:`CliError` on failure."""
    validate_config(cfg)
    if ctx.seed is None:
        ctx.seed = cfg.get("seed", 0)
    ctx.plot = ctx.plot and cfg.get("plot", True)
    stem = stem or cfg.get("name") or cfg["kind"]
    try:
        outcome = RUNNERS[cfg["kind"]](Params(cfg["params"], "params"), ctx)
    except LabelAmbiguityError as exc:
        raise CliError(EXIT_NUMERIC, str(exc)) from None
    except FloatingPointError as exc:
        raise CliError(EXIT_NUMERIC, f"propagation failed: {exc}") from None
    except (ValueError, UnitError) as exc:
        raise CliError(EXIT_INVALID, str(exc)) from None
    paths = emit(outcome, stem, ctx)
    first = paths[0].name if paths else "-"
    echo(f"{outcome.summary} -> {ctx.out / first}")
    if outcome.unconverged:
        raise CliError(EXIT_NUMERIC, "fit did not converge: " + "; ".join(outcome.unconverged))
    return outcome


# ---------------------------------------------------------------------------
# built-in figure presets
# ---------------------------------------------------------------------------

_BASE_COND = {"b0": "10 mT", "rabi": "100 kHz"}
_BASE_HF = {"a_zz": "30 kHz", "a_zx": "30 kHz"}
_BASE_SWEEP = {"span": "9 MHz", "rate": "9 MHz/ms", "step": "1 kHz"}
_THETA_46 = {"start": "0 rad", "stop": f"{math.pi / 2!r} rad", "num": 46}


def _map1d(axis, grid):
    return {"kind": "map1d", "params": {"conditions": _BASE_COND, "coupling": _BASE_HF,
                                        "sweep": _BASE_SWEEP, "axis": axis, "grid": grid}}


def _map2d(a0, axis, grid, cond):
    return {"kind": "map2d", "params": {"a0": a0, "conditions": cond, "sweep": _BASE_SWEEP,
                                        "axis": axis, "grid": grid, "theta_grid": _THETA_46}}


FIGURES = {
    "fig1d": [("fig1d", {"kind": "dressed", "params": {"conditions": _BASE_COND, "coupling": _BASE_HF,
                                                        "span": "9 MHz", "step": "2 kHz"}})],
    "figA2": [("figA2", {"kind": "ensemble", "params": {"radius": "3 nm", "density": "1.9 nm^-3",
                                                         "runs": 10000, "bin_width": "6 kHz",
                                                         "a_max": "300 kHz"}})],
    "figA3": [(f"figA3_{lab}", {"kind": "sweep", "params": {"conditions": _BASE_COND, "coupling": _BASE_HF,
                                                             "sweep": _BASE_SWEEP, "initial": lab,
                                                             "record_every": 10}})
              for lab in ("psi2", "psi1")],
    "figA4": [
        ("figA4_a_zx", _map1d("a_zx", {"start": "0 kHz", "stop": "200 kHz", "num": 81})),
        ("figA4_a_zz", _map1d("a_zz", {"start": "0 kHz", "stop": "200 kHz", "num": 81})),
        ("figA4_rabi", _map1d("rabi", {"start": "10 kHz", "stop": "400 kHz", "num": 79})),
        ("figA4_b0", _map1d("b0", {"start": "1 mT", "stop": "30 mT", "num": 59})),
        ("figA4_rate", _map1d("rate", {"start": "0.5 MHz/ms", "stop": "50 MHz/ms", "num": 61,
                                       "spacing": "log"})),
    ],
    "figA5": [(f"figA5_{a0}kHz", _map2d(f"{a0} kHz", "b0", {"start": "1 mT", "stop": "20 mT", "num": 20},
                                        {"b0": "10 mT", "rabi": "100 kHz"}))
              for a0 in (10, 20, 40, 80)],
    "figA6": [
        ("figA6_rabi", _map2d("25 kHz", "rabi", {"start": "20 kHz", "stop": "400 kHz", "num": 39},
                              {"b0": "12 mT", "rabi": "100 kHz"})),
        ("figA6_rate", _map2d("25 kHz", "rate", {"start": "1 MHz/ms", "stop": "40 MHz/ms", "num": 33,
                                                 "spacing": "log"}, {"b0": "12 mT", "rabi": "100 kHz"})),
    ],
    "fig2d-synth": [("fig2d", {"kind": "ramsey-synth", "params": {
        "model": {"amplitude": "0.21 %", "delta": "863 Hz", "t2_star": "1.74 ms"},
        "tau": {"start": "0 ms", "stop": "9.75 ms", "num": 40}, "mode": "synthesis",
        "envelope": {"t_e2": "51.4 ms", "gamma": 0.3}, "reference": "128.477 kHz"}})],
    "fig3e-synth": [("fig3e", {"kind": "buildup-fit", "params": {"synth": {
        "a_sat": "0.237 %", "t_pol": "229 ms", "beta": 0.5,
        "times": {"start": "10 ms", "stop": "2 s", "num": 60}}}})],
}


def figure_configs(fig_id: str) -> list:
    if fig_id not in FIGURES:
        raise CliError(EXIT_INVALID, f"unknown figure id {fig_id!r}; available: {sorted(FIGURES)}", "id")
    return copy.deepcopy(FIGURES[fig_id])


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _out_dir(arg) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or ".")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or .)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for parameter grids")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="table format")
    common.add_argument("--no-plot", action="store_true", help="skip SVG figures")

    parser = argparse.ArgumentParser(prog="odnmr", description="NV-13C hopping, ODNMR signal and budget lab")
    sub = parser.add_subparsers(dest="verb", required=True)
    run = sub.add_parser("run", parents=[common], help="run one configuration file")
    run.add_argument("config")
    rep = sub.add_parser("reproduce", parents=[common], help="regenerate a built-in figure")
    rep.add_argument("figure", help="one of: " + ", ".join(FIGURES))
    bud = sub.add_parser("budget", parents=[common], help="sensitivity budget report")
    bud.add_argument("--preset", required=True)
    sub.add_parser("schema", help="print the configuration schema")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    if args.verb == "schema":
        print(json.dumps(schema(), indent=2))
        return EXIT_OK
    if args.threads < 1:
        print(CliError(EXIT_INVALID, "--threads must be >= 1", "threads").to_json(), file=sys.stderr)
        return EXIT_INVALID
    ctx = Context(out=_out_dir(args.out), fmt=args.format, seed=args.seed, threads=args.threads,
                  plot=not args.no_plot)
    try:
        if args.verb == "run":
            cfg = load_config(args.config)
            ctx.base = Path(args.config).resolve().parent
            jobs = [(None, cfg)]
        elif args.verb == "reproduce":
            jobs = figure_configs(args.figure)
        else:
            jobs = [(None, {"kind": "budget", "name": f"budget_{args.preset}",
                            "params": {"preset": args.preset}})]
        for stem, cfg in jobs:
            execute(cfg, copy.copy(ctx), stem)
    except CliError as exc:
        print(exc.to_json(), file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
