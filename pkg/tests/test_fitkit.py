import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odnmr import fitkit
from odnmr.fitkit import FitError
from odnmr.signal import EnvelopeModel, Interferogram, RamseyModel, nmr_spectrum, ramsey_interferogram
from oracles import ols_line

TAU = np.arange(40) * 0.25e-3
T_ENV = np.arange(200) * 2e-3
T_BUILD = np.linspace(0.02, 2.0, 30)

# noise levels chosen so the reported standard errors match the quoted uncertainties
SIGMA_FIG4D = 1.67e-4
SIGMA_HAHN = 0.066
SIGMA_WAHUHA = 0.075
SIGMA_TABLE_A2 = 6.7e-3
SIGMA_FIG2E = 1e-4
SIGMA_TABLE_A3 = 3.3e-5


def noisy(y, sigma, seed):
    return y + np.random.default_rng(seed).normal(0.0, sigma, np.shape(y))


CASES = {
    "damped_cosine": (lambda x, **p: fitkit.damped_cosine(x, **p), TAU,
                      {"amplitude": 2.1e-3, "delta": 863.0, "t2_star": 1.74e-3},
                      lambda x, y: fitkit.fit_damped_cosine(x, y)),
    "damped_cosine_offset": (lambda x, **p: fitkit.damped_cosine(x, **p), TAU,
                             {"amplitude": 2.1e-3, "delta": 863.0, "t2_star": 1.74e-3, "offset": 2e-4},
                             lambda x, y: fitkit.fit_damped_cosine(x, y, with_offset=True)),
    "stretched_f1": (lambda x, **p: fitkit.stretched_exponential(x, **p), T_ENV,
                     {"a": 1.08, "T": 51.4e-3 / 2 ** (1 / 0.3)},
                     lambda x, y: fitkit.fit_stretched_exponential(x, y, "f1")),
    "stretched_f2": (lambda x, **p: fitkit.stretched_exponential(x, **p), T_ENV,
                     {"a": 1.76, "T": 20e-3 / 2 ** (1 / 0.24), "gamma": 0.24},
                     lambda x, y: fitkit.fit_stretched_exponential(x, y, "f2")),
    "stretched_f3": (lambda x, **p: fitkit.stretched_exponential(x, **p), T_ENV,
                     {"a": 0.26, "T": 133e-3 / 2 ** (1 / 0.65), "gamma": 0.65, "d": 0.019},
                     lambda x, y: fitkit.fit_stretched_exponential(x, y, "f3")),
    "lorentzian": (lambda x, **p: fitkit.lorentzian(x, **p), np.linspace(128e3, 130.5e3, 120),
                   {"center": 129.34e3, "fwhm": 224.0, "amplitude": 3e-3, "baseline": 1e-5},
                   lambda x, y: fitkit.fit_lorentzian(x, y)),
    "exponential_decay": (lambda x, **p: fitkit.exponential_decay(x, **p), np.linspace(0, 6e-3, 30),
                          {"amplitude": 1.0, "T": 1.5e-3}, lambda x, y: fitkit.fit_exponential_decay(x, y)),
    "polarization_buildup": (lambda x, **p: fitkit.polarization_buildup(x, **p), T_BUILD,
                             {"a_sat": 0.237e-2, "t_p": 0.229 / 4, "beta": 0.5},
                             lambda x, y: fitkit.fit_polarization_buildup(x, y)),
}


@pytest.mark.parametrize("name", list(CASES))
def test_noiseless_recovery(name):
    model, x, truth, fit = CASES[name]
    res = fit(x, model(x, **truth))
    assert res.converged
    for k, v in truth.items():
        assert res.params[k] == pytest.approx(v, rel=1e-6, abs=1e-15)


@pytest.mark.parametrize("name", list(CASES))
def test_refit_from_truth_is_idempotent(name):
    model, x, truth, _ = CASES[name]
    positive = [k for k in truth if k in ("t2_star", "T", "fwhm", "t_p", "gamma", "beta")]
    res = fitkit.least_squares(model, x, model(x, **truth), truth, positive=positive)
    assert res.n_accepted == 0 and res.converged
    for k, v in truth.items():
        assert res.params[k] == pytest.approx(v, rel=1e-12)


@pytest.mark.parametrize("name", list(CASES))
def test_scale_equivariance(name):
    model, x, truth, fit = CASES[name]
    y = noisy(model(x, **truth), 1e-3 * np.max(np.abs(model(x, **truth))), 1)
    a = fit(x, y)
    b = fit(x, 7.5 * y)
    amplitude_like = {"amplitude", "a", "a_sat", "offset", "d", "baseline"}
    for k in a.params:
        scale = 7.5 if k in amplitude_like else 1.0
        assert b.params[k] == pytest.approx(scale * a.params[k], rel=1e-5, abs=1e-12)


def test_linear_model_matches_ols():
    rng = np.random.default_rng(0)
    x = np.linspace(-2, 5, 50)
    y = 1.7 * x - 0.3 + rng.normal(0, 0.2, x.size)
    res = fitkit.least_squares(lambda x, a, b: a * x + b, x, y, {"a": 0.0, "b": 0.0})
    slope, icpt = ols_line(x, y)
    s2 = np.sum((y - slope * x - icpt) ** 2) / (x.size - 2)
    sxx = np.sum((x - x.mean()) ** 2)
    se_slope = math.sqrt(s2 / sxx)
    se_icpt = math.sqrt(s2 * (1 / x.size + x.mean() ** 2 / sxx))
    assert res.params["a"] == pytest.approx(slope, abs=1e-10)
    assert res.params["b"] == pytest.approx(icpt, abs=1e-10)
    assert res.std_errors["a"] == pytest.approx(se_slope, rel=1e-6)
    assert res.std_errors["b"] == pytest.approx(se_icpt, rel=1e-6)


def test_cost_does_not_increase():
    # a poor start forces several accepted steps
    x = TAU
    y = noisy(fitkit.damped_cosine(x, 2.1e-3, 863.0, 1.74e-3), 5e-5, 2)
    costs = []

    def model(t, **p):
        return fitkit.damped_cosine(t, **p)

    for it in (1, 2, 4, 8, 16, 64):
        r = fitkit.least_squares(model, x, y, {"amplitude": 1e-3, "delta": 800.0, "t2_star": 3e-3},
                                 positive=("t2_star",), max_iter=it, restarts=0)
        costs.append(r.residual_norm)
    assert all(b <= a + 1e-18 for a, b in zip(costs, costs[1:]))


def test_standard_error_coverage():
    truth = {"amplitude": 2.1e-3, "delta": 863.0, "t2_star": 1.74e-3}
    y0 = fitkit.damped_cosine(TAU, **truth)
    hits = {k: 0 for k in truth}
    for seed in range(200):
        res = fitkit.fit_damped_cosine(TAU, noisy(y0, 1e-4, seed))
        for k, v in truth.items():
            hits[k] += abs(res.params[k] - v) <= res.std_errors[k]
    for k, n in hits.items():
        assert abs(n / 200 - 0.68) <= 0.07, (k, n)


def test_errors_shrink_as_inverse_root_n():
    truth = {"amplitude": 1.0, "T": 1.5e-3}
    se = []
    for n in (50, 200, 800):
        x = np.linspace(0, 6e-3, n)
        se.append(np.mean([fitkit.fit_exponential_decay(x, noisy(fitkit.exponential_decay(x, **truth), 0.02, s))
                           .std_errors["T"] for s in range(10)]))
    assert se[0] / se[1] == pytest.approx(2.0, rel=0.2)
    assert se[1] / se[2] == pytest.approx(2.0, rel=0.2)


def test_fig2d_recovery():
    res = fitkit.fit_damped_cosine(TAU, fitkit.damped_cosine(TAU, 2.1e-3, 863.0, 1.74e-3))
    assert res.params["amplitude"] == pytest.approx(2.1e-3, rel=0.01)
    assert res.params["delta"] == pytest.approx(863.0, rel=0.01)
    assert res.params["t2_star"] == pytest.approx(1.74e-3, rel=0.01)
    assert "delta_sign_unidentifiable" not in res.flags


def test_negative_amplitude_reported_with_positive_detuning():
    res = fitkit.fit_damped_cosine(TAU, fitkit.damped_cosine(TAU, -2.1e-3, 863.0, 1.74e-3))
    assert res.params["amplitude"] == pytest.approx(-2.1e-3, rel=1e-6)
    assert res.params["delta"] == pytest.approx(863.0, rel=1e-6)


def test_zero_detuning_is_flagged():
    y = fitkit.damped_cosine(TAU, 2e-3, 0.0, 2e-3)
    res = fitkit.fit_damped_cosine(TAU, noisy(y, 1e-6, 0))
    assert res.converged
    assert "delta_sign_unidentifiable" in res.flags
    assert abs(res.params["delta"]) * TAU[-1] < 1e-2
    assert res.params["t2_star"] == pytest.approx(2e-3, rel=0.01)


def test_fig4d_dephasing_time_within_two_sigma():
    tau = np.linspace(0, 5e-3, 50)
    res = fitkit.fit_damped_cosine(tau, noisy(fitkit.damped_cosine(tau, 2e-3, 1e3, 1.1e-3), SIGMA_FIG4D, 4))
    assert res.std_errors["t2_star"] == pytest.approx(0.1e-3, rel=0.25)
    assert abs(res.params["t2_star"] - 1.1e-3) < 2 * res.std_errors["t2_star"]


def test_hahn_echo_decay_within_two_sigma():
    t = np.linspace(0, 6e-3, 30)
    res = fitkit.fit_exponential_decay(t, noisy(fitkit.exponential_decay(t, 1.0, 1.5e-3), SIGMA_HAHN, 5))
    assert res.std_errors["T"] == pytest.approx(0.1e-3, rel=0.3)
    assert abs(res.params["T"] - 1.5e-3) < 2 * res.std_errors["T"]


def test_wahuha_decay_within_two_sigma():
    t = np.linspace(0, 10e-3, 50)
    res = fitkit.fit_damped_cosine(t, noisy(fitkit.damped_cosine(t, 1.0, 400.0, 2.5e-3), SIGMA_WAHUHA, 2))
    assert res.std_errors["t2_star"] == pytest.approx(0.2e-3, rel=0.3)
    assert abs(res.params["t2_star"] - 2.5e-3) < 2 * res.std_errors["t2_star"]


def test_e2_time_identity():
    assert fitkit.e2_time(1.0, 0.3) == 2 ** (10 / 3)
    assert fitkit.e2_time(1.0, 0.3) == pytest.approx(10.079, abs=1e-3)
    with pytest.raises(ValueError):
        fitkit.e2_time(1.0, 0.0)


@pytest.mark.parametrize("a,t_e2", [(1.08, 51.4e-3), (0.63, 72e-3)])
def test_table_a2_first_variant(a, t_e2):
    env = EnvelopeModel.from_e2_time(a, t_e2)
    y = a * env.gain(T_ENV)
    res = fitkit.fit_stretched_exponential(T_ENV, y)
    assert res.params["a"] == pytest.approx(a, rel=0.01)
    assert res.derived["t_e2"] == pytest.approx(t_e2, rel=0.01)
    assert res.derived["t_e2"] == pytest.approx(2 ** (1 / 0.3) * res.params["T"], rel=1e-12)
    noisy_res = fitkit.fit_stretched_exponential(T_ENV, noisy(y, SIGMA_TABLE_A2, 7))
    assert abs(noisy_res.derived["t_e2"] - t_e2) < 2 * noisy_res.derived_errors["t_e2"]
    assert "gamma" not in noisy_res.params


def test_free_stretch_shows_time_exponent_correlation():
    env = EnvelopeModel.from_e2_time(1.08, 51.4e-3)
    y = noisy(1.08 * env.gain(T_ENV), SIGMA_TABLE_A2, 8)
    res = fitkit.fit_stretched_exponential(T_ENV, y, "f2")
    i, j = res.names.index("T"), res.names.index("gamma")
    corr = res.covariance[i, j] / math.sqrt(res.covariance[i, i] * res.covariance[j, j])
    assert abs(corr) > 0.8
    assert abs(res.params["gamma"] - 0.3) < 3 * res.std_errors["gamma"]
    assert abs(res.derived["t_e2"] - 51.4e-3) < 3 * res.derived_errors["t_e2"]
    assert res.derived["t_e2"] == pytest.approx(2 ** (1 / res.params["gamma"]) * res.params["T"], rel=1e-12)


def test_variant_checked():
    with pytest.raises(ValueError):
        fitkit.fit_stretched_exponential(T_ENV, np.ones(T_ENV.size), "f4")


def test_lorentzian_from_fig2d_spectrum():
    spec = nmr_spectrum(ramsey_interferogram(TAU, RamseyModel(2.1e-3, 863.0, 1.74e-3)))
    assert spec.fit.params["fwhm"] == pytest.approx(1 / (math.pi * 1.74e-3), rel=0.05)


def test_fwhm_error_scale_at_paper_noise():
    clean = ramsey_interferogram(TAU, RamseyModel(2.1e-3, 863.0, 1.74e-3))
    errs = [nmr_spectrum(Interferogram(TAU, noisy(clean.amplitude, SIGMA_FIG2E, s))).fit.std_errors["fwhm"]
            for s in range(10)]
    assert 3.0 < np.mean(errs) < 30.0


def test_buildup_limit():
    assert fitkit.polarization_buildup(np.array([1e12]), 0.237e-2, 0.057, 0.5)[0] == pytest.approx(0.237e-2)
    assert fitkit.polarization_buildup(np.array([0.0]), 0.237e-2, 0.057, 0.5)[0] == 0.0


def test_fig3e_recovery():
    t = np.linspace(0.01, 2.0, 60)
    res = fitkit.fit_polarization_buildup(t, fitkit.polarization_buildup(t, 0.237e-2, 0.229 / 4, 0.5))
    assert res.params["a_sat"] == pytest.approx(0.237e-2, rel=0.01)
    assert res.derived["t_pol"] == pytest.approx(0.229, rel=0.01)
    assert res.derived["t_pol"] == pytest.approx(2 ** (1 / res.params["beta"]) * res.params["t_p"], rel=1e-12)
    fixed = fitkit.fit_polarization_buildup(t, fitkit.polarization_buildup(t, 0.237e-2, 0.229 / 4, 0.5),
                                            fix_beta=0.5)
    assert "beta" not in fixed.params and fixed.derived["t_pol"] == pytest.approx(0.229, rel=1e-6)


def test_table_a3_free_exponent():
    y = noisy(fitkit.polarization_buildup(T_BUILD, 0.237e-2, 0.226 / 4, 0.5), SIGMA_TABLE_A3, 9)
    res = fitkit.fit_polarization_buildup(T_BUILD, y)
    assert res.std_errors["beta"] == pytest.approx(0.02, rel=0.3)
    assert abs(res.params["beta"] - 0.5) < 2 * res.std_errors["beta"]


@pytest.mark.parametrize("name", list(CASES))
def test_jacobian_stable_under_step_halving(name):
    model, x, truth, _ = CASES[name]
    rng = np.random.default_rng(sum(map(ord, name)))
    names = list(truth)
    for _ in range(5):
        p = np.array([truth[k] for k in names]) * rng.uniform(0.8, 1.2, len(names))

        def fun(v):
            return model(x, **dict(zip(names, v)))

        j1 = fitkit._jacobian(fun, p)
        j2 = fitkit._jacobian(fun, p, step_scale=0.5)
        scale = np.max(np.abs(j2), axis=0)
        assert np.max(np.abs(j1 - j2) / scale) < 1e-5


def test_singular_problem_is_flagged():
    x = np.linspace(0, 1, 20)
    res = fitkit.least_squares(lambda x, a, b: (a + b) * x, x, 2 * x, {"a": 0.5, "b": 0.5})
    assert not res.converged
    assert "singular_normal_equations" in res.flags


def test_bad_inputs():
    x = np.linspace(0, 1, 10)
    with pytest.raises(FitError):
        fitkit.least_squares(lambda x, a: a * x, x, x, {"a": 2.0}, bounds={"a": (0.0, 1.0)})
    with pytest.raises(FitError):
        fitkit.least_squares(lambda x, T: np.exp(-x / T), x, x, {"T": -1.0}, positive=("T",))
    with pytest.raises(FitError):
        fitkit.fit_exponential_decay(x, np.where(x > 0.5, np.nan, 1.0))
    with pytest.raises(FitError):
        fitkit.fit_damped_cosine(x[:2], x[:2])
    with pytest.raises(FitError):
        fitkit.fit_lorentzian(x, x[:-1])


def test_json_export_roundtrip():
    model, x, truth, fit = CASES["polarization_buildup"]
    res = fit(x, noisy(model(x, **truth), 1e-5, 0))
    doc = json.loads(res.to_json())
    assert set(doc) == {"model", "params", "std_errors", "covariance", "derived", "derived_errors", "diagnostics"}
    assert doc["params"]["beta"] == res.params["beta"]
    assert doc["diagnostics"]["converged"] is True
    assert np.allclose(doc["covariance"], res.covariance)
    assert fitkit.evaluate(res, x) == pytest.approx(model(x, **res.params))


@settings(max_examples=20)
@given(st.floats(0.5e-3, 5e-3), st.floats(300, 1800), st.floats(0.6e-3, 3e-3))
def test_damped_cosine_recovers_random_truths(a, delta, t2):
    tau = np.arange(60) * min(t2 / 10, 1 / (6 * delta))
    res = fitkit.fit_damped_cosine(tau, fitkit.damped_cosine(tau, a, delta, t2))
    assert res.params["delta"] == pytest.approx(delta, rel=1e-6)
    assert res.params["t2_star"] == pytest.approx(t2, rel=1e-6)
    assert all(v >= 0 for v in res.std_errors.values())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lm_matches_scipy_curve_fit_on_noisy_lorentzian(seed):
    from scipy.optimize import curve_fit

    f = np.linspace(-40e3, 40e3, 161)
    truth = (1.5e3, 8e3, 2e-3, 1e-4)
    y = noisy(fitkit.lorentzian(f, *truth), 5e-5, seed)
    ours = fitkit.least_squares(fitkit.lorentzian, f, y,
                                {"center": 1e3, "fwhm": 10e3, "amplitude": 1.5e-3, "baseline": 0.0})
    popt, pcov = curve_fit(fitkit.lorentzian, f, y, p0=(1e3, 10e3, 1.5e-3, 0.0), method="lm")
    p = np.array(list(ours.params.values()))
    e = np.array(list(ours.std_errors.values()))
    assert ours.converged
    np.testing.assert_allclose(p, popt, rtol=1e-6, atol=1e-12)
    np.testing.assert_allclose(e, np.sqrt(np.diag(pcov)), rtol=1e-3)
