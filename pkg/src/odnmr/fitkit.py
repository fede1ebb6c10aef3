"""Levenberg-Marquardt least squares and the ODNMR model family.

The solver works on an internal parameter vector in which strictly
positive quantities (decay times, widths) are stored as logarithms, so
positivity never needs an active constraint.  Other bounds are enforced by
clipping the trial point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import hilbert

_EPS = np.finfo(float).eps
_FD_REL = _EPS ** (1.0 / 3.0)
_FD_FLOOR = 1e-8
FTOL = 1e-10
GTOL = 1e-10
XTOL = 1e-13
N_RESTARTS = 5
STRETCH_F1 = 0.3


class FitError(ValueError):
    """Bad fit input: too few points, non-finite data or an infeasible start."""


@dataclass
class FitResult:
    """Outcome of a least-squares fit in natural parameter units.

    ``std_errors`` are the square roots of the covariance diagonal, which
    is scaled by the reduced chi-square of the residuals.
    """

    model: str
    params: dict
    std_errors: dict
    covariance: np.ndarray
    residual_norm: float
    converged: bool
    n_iter: int = 0
    n_accepted: int = 0
    message: str = ""
    derived: dict = field(default_factory=dict)
    derived_errors: dict = field(default_factory=dict)
    flags: tuple = ()
    n_points: int = 0

    @property
    def names(self) -> tuple:
        return tuple(self.params)

    def value(self, name):
        return self.params[name] if name in self.params else self.derived[name]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "params": {k: float(v) for k, v in self.params.items()},
            "std_errors": {k: float(v) for k, v in self.std_errors.items()},
            "covariance": np.asarray(self.covariance, dtype=float).tolist(),
            "derived": {k: float(v) for k, v in self.derived.items()},
            "derived_errors": {k: float(v) for k, v in self.derived_errors.items()},
            "diagnostics": {
                "converged": bool(self.converged),
                "residual_norm": float(self.residual_norm),
                "iterations": int(self.n_iter),
                "accepted_steps": int(self.n_accepted),
                "n_points": int(self.n_points),
                "message": self.message,
                "flags": list(self.flags),
            },
        }

    def to_json(self, **kw) -> str:
        kw.setdefault("indent", 2)
        kw.setdefault("sort_keys", True)
        return json.dumps(_json_safe(self.to_dict()), **kw)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

class _Transform:
    """Map between natural parameters and the solver's internal vector."""

    def __init__(self, names, positive, bounds):
        self.names = tuple(names)
        self.log = np.array([n in positive for n in self.names])
        lo = np.full(len(self.names), -np.inf)
        hi = np.full(len(self.names), np.inf)
        for i, n in enumerate(self.names):
            if n in bounds:
                lo[i], hi[i] = bounds[n]
        self.lo, self.hi = lo, hi
        with np.errstate(divide="ignore"):
            self.ulo = np.where(self.log, np.log(np.maximum(lo, 0.0)), lo)
            self.uhi = np.where(self.log, np.log(np.where(hi > 0, hi, np.nan)), hi)
        self.uhi = np.where(np.isnan(self.uhi), -np.inf, self.uhi)

    def to_internal(self, p):
        p = np.asarray(p, dtype=float)
        if np.any(self.log & (p <= 0)):
            bad = [n for n, lg, v in zip(self.names, self.log, p) if lg and v <= 0]
            raise FitError(f"parameters {bad} must start positive")
        if np.any(p < self.lo) or np.any(p > self.hi):
            bad = [n for n, v, lo, hi in zip(self.names, p, self.lo, self.hi) if not lo <= v <= hi]
            raise FitError(f"initial values of {bad} violate their bounds")
        return np.where(self.log, np.log(np.where(self.log, p, 1.0)), p)

    def to_natural(self, u):
        return np.where(self.log, np.exp(np.where(self.log, u, 0.0)), u)

    def clip(self, u):
        return np.clip(u, self.ulo, self.uhi)

    def natural_jacobian(self, u):
        """d(natural)/d(internal), diagonal."""
        return np.where(self.log, np.exp(np.where(self.log, u, 0.0)), 1.0)


def _central(fun, u, i, h):
    up, dn = u.copy(), u.copy()
    up[i] += h
    dn[i] -= h
    return (fun(up) - fun(dn)) / (up[i] - dn[i])


def _jacobian(fun, u, step_scale: float = 1.0):
    """Central differences with one Richardson step (error ~ h^4)."""
    h = step_scale * _FD_REL * np.maximum(np.abs(u), _FD_FLOOR)
    cols = []
    for i in range(u.size):
        coarse = _central(fun, u, i, h[i])
        fine = _central(fun, u, i, 0.5 * h[i])
        cols.append((4.0 * fine - coarse) / 3.0)
    return np.column_stack(cols)


def _lm(fun, u0, transform, max_iter, data_cost):
    """Core iteration; ``data_cost`` (half the weighted sum of y^2) sets the
    floor below which the residual counts as exactly zero."""
    u = transform.clip(u0.copy())
    r = fun(u)
    cost = 0.5 * float(r @ r)
    lam = 1e-3
    n_iter = n_acc = 0
    message = "maximum iterations reached"
    converged = False
    zero_cost = 1e-28 * data_cost
    jac = _jacobian(fun, u)
    for n_iter in range(1, max_iter + 1):
        g = jac.T @ r
        colnorm = np.sqrt(np.sum(jac ** 2, axis=0))
        rnorm = math.sqrt(2.0 * cost)
        if cost <= zero_cost:
            converged, message = True, "zero residual"
            break
        denom = colnorm * rnorm
        cosines = np.abs(g) / np.where(denom > 0, denom, np.inf)
        if np.max(cosines, initial=0.0) < GTOL:
            converged, message = True, "gradient below tolerance"
            break
        d = np.where(colnorm > 0, colnorm, 1.0)
        accepted = False
        while lam < 1e16:
            aug = np.vstack([jac, math.sqrt(lam) * np.diag(d)])
            rhs = np.concatenate([-r, np.zeros(u.size)])
            step = np.linalg.lstsq(aug, rhs, rcond=None)[0]
            trial = transform.clip(u + step)
            r_new = fun(trial)
            cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            converged, message = True, "no further decrease possible"
            break
        n_acc += 1
        rel = (cost - cost_new) / max(cost, _EPS)
        moved = np.linalg.norm(trial - u)
        u, r, cost = trial, r_new, cost_new
        lam = max(lam / 5.0, 1e-12)
        if rel < FTOL:
            converged, message = True, "relative cost change below tolerance"
            break
        if moved < XTOL * (np.linalg.norm(u) + XTOL):
            converged, message = True, "step below tolerance"
            break
        jac = _jacobian(fun, u)
    if converged and cost > zero_cost:
        # one undamped Gauss-Newton step removes the residual damping bias
        jac = _jacobian(fun, u)
        trial = transform.clip(u + np.linalg.lstsq(jac, -r, rcond=None)[0])
        r_new = fun(trial)
        # near the minimum the cost is flat to rounding, so ties are accepted
        if np.all(np.isfinite(r_new)) and 0.5 * float(r_new @ r_new) <= cost * (1.0 + 8.0 * _EPS):
            u, r, cost = trial, r_new, 0.5 * float(r_new @ r_new)
    return u, r, cost, converged, n_iter, n_acc, message


def least_squares(model, x, y, init: dict, sigma=None, bounds: dict | None = None,
                  positive=(), fixed: dict | None = None, max_iter: int = 500,
                  name: str = "custom", restarts: int = N_RESTARTS, seed: int = 0) -> FitResult:
    """Fit ``y ~ model(x, **params)`` by Levenberg-Marquardt.

    Parameters
    ----------
    model : callable
        ``model(x, **params) -> ndarray``.
    init : dict
        Starting values; the key order fixes the parameter order.
    sigma : array_like, optional
        Per-point uncertainties used as weights.  Reported errors are still
        scaled by the reduced chi-square.
    bounds : dict, optional
        ``name -> (lo, hi)`` in natural units, enforced by clipping.
    positive : iterable of str
        Parameters optimized in log space.
    fixed : dict, optional
        Parameters held constant and passed to ``model`` unchanged.
    restarts : int
        Jittered restarts tried when the first run does not converge.

    Returns
    -------
    FitResult
        ``converged`` is False when the normal equations are singular at
        the solution or no run met the tolerances.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    fixed = dict(fixed or {})
    names = [n for n in init if n not in fixed]
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise FitError("data contain non-finite values")
    if y.size < len(names):
        raise FitError(f"{y.size} points cannot determine {len(names)} parameters")
    w = np.ones_like(y) if sigma is None else 1.0 / np.broadcast_to(np.asarray(sigma, float), y.shape)
    tf = _Transform(names, set(positive), bounds or {})

    def fun(u):
        p = dict(zip(names, tf.to_natural(u)))
        return (model(x, **p, **fixed) - y) * w

    u0 = tf.to_internal([init[n] for n in names])
    data_cost = 0.5 * float(np.sum((y * w) ** 2))
    best = _lm(fun, u0, tf, max_iter, data_cost)
    if not best[3] and restarts:
        rng = np.random.default_rng(seed)
        for _ in range(restarts):
            jitter = np.where(tf.log, rng.normal(0.0, 0.2, u0.size),
                              u0 * rng.normal(0.0, 0.2, u0.size))
            cand = _lm(fun, tf.clip(u0 + jitter), tf, max_iter, data_cost)
            if (cand[3], -cand[2]) > (best[3], -best[2]):
                best = cand
    u, r, cost, converged, n_iter, n_acc, message = best

    jac = _jacobian(fun, u)
    jtj = jac.T @ jac
    flags = []
    dof = y.size - len(names)
    s2 = 2.0 * cost / dof if dof > 0 else np.nan
    colnorm = np.sqrt(np.diag(jtj))
    scaled = jtj / np.outer(np.where(colnorm > 0, colnorm, 1.0), np.where(colnorm > 0, colnorm, 1.0))
    if np.any(colnorm == 0) or np.linalg.cond(scaled) > 1e14:
        cov_u = np.linalg.pinv(jtj) * s2
        flags.append("singular_normal_equations")
        converged = False
        message = f"{message}; normal equations singular"
    else:
        cov_u = np.linalg.inv(jtj) * s2
    dn = tf.natural_jacobian(u)
    cov = cov_u * np.outer(dn, dn)
    p = tf.to_natural(u)
    err = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return FitResult(name, dict(zip(names, map(float, p))), dict(zip(names, map(float, err))),
                     cov, float(np.linalg.norm(r / w)), bool(converged), n_iter, n_acc, message,
                     flags=tuple(flags), n_points=int(y.size))


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def damped_cosine(t, amplitude, delta, t2_star, offset=0.0):
    return amplitude * np.cos(2.0 * np.pi * delta * t) * np.exp(-t / t2_star) + offset


def stretched_exponential(t, a, T, gamma=STRETCH_F1, d=0.0):
    return a * np.exp(-(np.asarray(t) / T) ** gamma) + d


def lorentzian(f, center, fwhm, amplitude, baseline=0.0):
    hw = 0.5 * fwhm
    return amplitude * hw ** 2 / ((f - center) ** 2 + hw ** 2) + baseline


def exponential_decay(t, amplitude, T):
    return amplitude * np.exp(-t / T)


def polarization_buildup(t, a_sat, t_p, beta):
    return a_sat * (1.0 - np.exp(-(np.asarray(t) / t_p) ** beta))


def e2_time(T, gamma):
    """1/e^2 time of a stretched exponential, ``2**(1/gamma) * T``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return 2.0 ** (1.0 / gamma) * T


# ---------------------------------------------------------------------------
# initial guesses
# ---------------------------------------------------------------------------

def _dominant_frequency(t, y):
    dt = t[1] - t[0]
    n = 8 * t.size
    spec = np.abs(np.fft.rfft(y - y.mean(), n=n))
    k = int(np.argmax(spec))
    # parabolic interpolation on the zero-padded magnitude
    if 0 < k < spec.size - 1:
        a, b, c = spec[k - 1], spec[k], spec[k + 1]
        den = a - 2 * b + c
        k = k + (0.5 * (a - c) / den if den != 0 else 0.0)
    return k / (n * dt)


def _envelope_decay_time(t, y):
    env = np.abs(hilbert(y))
    use = env > 0.1 * env.max()
    if np.count_nonzero(use) < 3:
        return (t[-1] - t[0]) / 3.0
    slope = np.polyfit(t[use], np.log(env[use]), 1)[0]
    return -1.0 / slope if slope < 0 else (t[-1] - t[0])


def _crossing_time(t, y, level):
    """First time a decreasing/increasing curve passes ``level``."""
    s = np.sign(y - level)
    idx = np.flatnonzero(s[1:] != s[:-1])
    if idx.size == 0:
        return None
    i = idx[0]
    y0, y1 = y[i], y[i + 1]
    frac = 0.0 if y1 == y0 else (level - y0) / (y1 - y0)
    return float(t[i] + frac * (t[i + 1] - t[i]))


# ---------------------------------------------------------------------------
# model fits
# ---------------------------------------------------------------------------

def _xy(x, y, min_points):
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape != y.shape:
        raise FitError("x and y lengths differ")
    if x.size < min_points:
        raise FitError(f"need at least {min_points} points, got {x.size}")
    order = np.argsort(x, kind="stable")
    return x[order], y[order]


def fit_damped_cosine(x, y, with_offset: bool = False, sigma=None, init: dict | None = None) -> FitResult:
    """Fit ``A cos(2 pi delta t) exp(-t / T2*) [+ c]``.

    The cosine is even in ``delta`` so only ``|delta|`` is reported.  When
    the fitted detuning is indistinguishable from zero the result carries
    the ``delta_sign_unidentifiable`` flag.  If it completes less than a
    thousandth of a cycle over the record the cosine is flat, so the fit is
    redone with ``delta`` pinned at zero (its error is then NaN).
    """
    t, y = _xy(x, y, 4 if with_offset else 3)
    c0 = float(np.median(y[-max(3, y.size // 10):])) if with_offset else 0.0
    delta0 = _dominant_frequency(t, y - c0)
    guess = {"amplitude": float(y[0] - c0) or float(np.max(np.abs(y - c0))),
             "delta": float(delta0), "t2_star": float(_envelope_decay_time(t, y - c0))}
    if with_offset:
        guess["offset"] = c0
    if init:
        guess.update(init)
    name = "damped_cosine" + ("_offset" if with_offset else "")
    res = least_squares(damped_cosine, t, y, guess, sigma=sigma, positive=("t2_star",), name=name)
    flags = list(res.flags)
    if abs(res.params["delta"]) * (t[-1] - t[0]) < 1e-3:
        # delta collapsed to zero: the cosine is flat and its sign undefined
        fixed_guess = {k: v for k, v in res.params.items() if k != "delta"}
        res = least_squares(damped_cosine, t, y, fixed_guess, sigma=sigma, positive=("t2_star",),
                            fixed={"delta": 0.0}, name=name)
        res = _insert_param(res, "delta", 0.0, float("nan"), after="amplitude")
        flags = list(res.flags) + ["delta_sign_unidentifiable"]
    elif abs(res.params["delta"]) < 2.0 * res.std_errors["delta"]:
        flags.append("delta_sign_unidentifiable")
    if res.params["delta"] < 0:
        res.params["delta"] = -res.params["delta"]
        i = res.names.index("delta")
        res.covariance[i, :] *= -1
        res.covariance[:, i] *= -1
    res.flags = tuple(flags)
    return res


def _insert_param(res: FitResult, name, value, err, after):
    names = list(res.params)
    pos = names.index(after) + 1
    new_names = names[:pos] + [name] + names[pos:]
    cov = np.full((len(new_names), len(new_names)), np.nan)
    keep = [new_names.index(n) for n in names]
    cov[np.ix_(keep, keep)] = res.covariance
    params = {n: (value if n == name else res.params[n]) for n in new_names}
    errs = {n: (err if n == name else res.std_errors[n]) for n in new_names}
    res.params, res.std_errors, res.covariance = params, errs, cov
    return res


def fit_stretched_exponential(x, y, variant: str = "f1", sigma=None, init: dict | None = None) -> FitResult:
    """Envelope fit ``a exp(-(t/T)^gamma) [+ d]``.

    ``f1`` holds ``gamma`` at 0.3, ``f2`` frees it and ``f3`` additionally
    fits the offset ``d``.  ``derived["t_e2"]`` is the 1/e^2 time.
    """
    if variant not in ("f1", "f2", "f3"):
        raise ValueError(f"variant must be f1, f2 or f3, got {variant!r}")
    t, y = _xy(x, y, {"f1": 2, "f2": 3, "f3": 4}[variant])
    d0 = float(np.min(y)) * 0.5 if variant == "f3" else 0.0
    a0 = float(y[0] - d0) if t[0] == 0 else float(np.max(y) - d0)
    T0 = _crossing_time(t, y - d0, a0 / math.e) or (t[-1] - t[0]) / 3.0
    guess = {"a": a0, "T": max(T0, _EPS)}
    fixed = None
    if variant == "f1":
        fixed = {"gamma": STRETCH_F1}
    else:
        guess["gamma"] = STRETCH_F1 if variant == "f2" else 0.5
    if variant == "f3":
        guess["d"] = d0
    if init:
        guess.update({k: v for k, v in init.items() if not (fixed and k in fixed)})
    res = least_squares(stretched_exponential, t, y, guess, sigma=sigma, positive=("T", "gamma"),
                        bounds={"gamma": (0.0, 2.0)}, fixed=fixed, name=f"stretched_{variant}")
    gamma = res.params.get("gamma", STRETCH_F1)
    res.derived["t_e2"] = e2_time(res.params["T"], gamma)
    res.derived["gamma"] = gamma
    # delta method on T_e2 = 2^(1/gamma) T
    names = res.names
    grad = np.zeros(len(names))
    grad[names.index("T")] = 2.0 ** (1.0 / gamma)
    if "gamma" in names:
        grad[names.index("gamma")] = -res.derived["t_e2"] * math.log(2.0) / gamma ** 2
    res.derived_errors["t_e2"] = float(math.sqrt(max(grad @ res.covariance @ grad, 0.0)))
    return res


def fit_lorentzian(x, y, sigma=None, init: dict | None = None) -> FitResult:
    """Fit ``amplitude (w/2)^2 / ((f - center)^2 + (w/2)^2) + baseline``."""
    f, y = _xy(x, y, 4)
    base = float(np.median(np.concatenate([y[: max(2, y.size // 10)], y[-max(2, y.size // 10):]])))
    k = int(np.argmax(y - base))
    amp = float(y[k] - base)
    above = np.flatnonzero(y - base >= 0.5 * amp)
    width = float(f[above[-1]] - f[above[0]]) if above.size > 1 else float(f[1] - f[0]) * 2
    guess = {"center": float(f[k]), "fwhm": max(width, float(f[1] - f[0])), "amplitude": amp,
             "baseline": base}
    if init:
        guess.update(init)
    return least_squares(lorentzian, f, y, guess, sigma=sigma, positive=("fwhm",), name="lorentzian")


def fit_exponential_decay(x, y, sigma=None, init: dict | None = None) -> FitResult:
    """Fit ``amplitude exp(-t / T)``; the start comes from a log-linear fit."""
    t, y = _xy(x, y, 2)
    pos = y > 0
    if np.count_nonzero(pos) >= 2:
        slope, icpt = np.polyfit(t[pos], np.log(y[pos]), 1)
        T0 = -1.0 / slope if slope < 0 else (t[-1] - t[0])
        guess = {"amplitude": float(math.exp(icpt)), "T": float(T0)}
    else:
        guess = {"amplitude": float(y[0]), "T": float((t[-1] - t[0]) / 3.0)}
    if init:
        guess.update(init)
    return least_squares(exponential_decay, t, y, guess, sigma=sigma, positive=("T",),
                         name="exponential_decay")


def fit_polarization_buildup(x, y, fix_beta: float | None = None, sigma=None,
                             init: dict | None = None) -> FitResult:
    """Fit ``a_sat (1 - exp(-(t / t_p)^beta))``; ``derived["t_pol"]`` is ``2**(1/beta) t_p``."""
    t, y = _xy(x, y, 2 if fix_beta is not None else 3)
    a0 = float(np.max(y)) * 1.1 if np.max(y) > 0 else float(np.min(y)) * 1.1
    tp0 = _crossing_time(t, y, a0 * (1.0 - 1.0 / math.e)) or float(np.median(t[t > 0]) if np.any(t > 0) else 1.0)
    guess = {"a_sat": a0, "t_p": max(tp0, _EPS)}
    fixed = None
    if fix_beta is None:
        guess["beta"] = 0.5
    else:
        fixed = {"beta": float(fix_beta)}
    if init:
        guess.update({k: v for k, v in init.items() if not (fixed and k in fixed)})
    res = least_squares(polarization_buildup, t, y, guess, sigma=sigma, positive=("t_p", "beta"),
                        bounds={"beta": (0.0, 4.0)}, fixed=fixed, name="polarization_buildup")
    beta = res.params.get("beta", fix_beta)
    res.derived["beta"] = beta
    res.derived["t_pol"] = 2.0 ** (1.0 / beta) * res.params["t_p"]
    names = res.names
    grad = np.zeros(len(names))
    grad[names.index("t_p")] = 2.0 ** (1.0 / beta)
    if "beta" in names:
        grad[names.index("beta")] = -res.derived["t_pol"] * math.log(2.0) / beta ** 2
    res.derived_errors["t_pol"] = float(math.sqrt(max(grad @ res.covariance @ grad, 0.0)))
    return res


MODELS = {
    "damped_cosine": damped_cosine,
    "damped_cosine_offset": damped_cosine,
    "stretched_f1": stretched_exponential,
    "stretched_f2": stretched_exponential,
    "stretched_f3": stretched_exponential,
    "lorentzian": lorentzian,
    "exponential_decay": exponential_decay,
    "polarization_buildup": polarization_buildup,
}


def evaluate(result: FitResult, x):
    """Evaluate the fitted model of ``result`` at ``x``."""
    func = MODELS[result.model]
    extra = {}
    if result.model == "stretched_f1":
        extra["gamma"] = STRETCH_F1
    if result.model == "polarization_buildup" and "beta" not in result.params:
        extra["beta"] = result.derived["beta"]
    params = {k: v for k, v in result.params.items() if math.isfinite(v)}
    return func(np.asarray(x, dtype=float), **params, **extra)
