import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from ensprecip.core import EnsembleForecast
from ensprecip.emos import (
    CensoredGev,
    EmosParams,
    EmosPredictors,
    compute_predictors,
    crps_censored_gev,
    fit_emos,
    gev_cdf,
    gev_pdf,
    mean_abs_difference,
    predict_emos,
)
from ensprecip.errors import DegenerateTrainingError, DataError, InfiniteMeanError

from oracles import crps_censored_gev_quadrature


def test_predictor_hand_example(site, window):
    f = EnsembleForecast.from_values(site, window, [0, 0, 2, 2])
    p = compute_predictors(f)
    assert (p.frac_zero, p.ens_mean, p.mean_diff) == (0.5, 1.0, 1.0)
    assert p.hres is None and p.cnt is None
    same = compute_predictors(EnsembleForecast.from_values(site, window, [3, 3, 3]))
    assert same.mean_diff == 0


def test_predictor_routing(site, window):
    f = EnsembleForecast.from_values(site, window, [1, 2, 3], hres=5, cnt=3)
    p = compute_predictors(f)
    assert (p.hres, p.cnt, p.ens_mean) == (5.0, 3.0, 2.0)
    assert p.frac_zero == 0.0


def test_single_member_flag(site, window):
    with pytest.warns(UserWarning):
        p = compute_predictors(EnsembleForecast.from_values(site, window, [4.0]))
    assert p.single_member and p.mean_diff == 0


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=40))
def test_mean_abs_difference_brute(values):
    x = np.asarray(values)
    brute = np.abs(x[:, None] - x[None, :]).sum() / x.size**2
    assert mean_abs_difference(values) == pytest.approx(brute, rel=1e-9, abs=1e-9)


def test_crps_matches_quadrature_example():
    assert crps_censored_gev(10, 5, 0.2, 12) == pytest.approx(crps_censored_gev_quadrature(10, 5, 0.2, 12), rel=1e-6)


@given(st.floats(-10, 30), st.floats(0.3, 20), st.floats(-0.25, 0.5), st.floats(0, 80))
def test_crps_matches_quadrature(mu, sigma, xi, y):
    ref = crps_censored_gev_quadrature(mu, sigma, xi, y)
    assert crps_censored_gev(mu, sigma, xi, y) == pytest.approx(ref, rel=1e-6, abs=1e-9)


def test_crps_vectorized_equals_scalar():
    rng = np.random.default_rng(4)
    mu, s, xi, y = rng.uniform(-5, 20, 50), rng.uniform(1, 9, 50), rng.uniform(-0.2, 0.4, 50), rng.gamma(1, 5, 50)
    vec = crps_censored_gev(mu, s, xi, y)
    np.testing.assert_allclose(vec, [crps_censored_gev(*a) for a in zip(mu, s, xi, y)], rtol=1e-12)
    xi[:5] = 0.0
    vec = crps_censored_gev(mu, s, xi, y)
    np.testing.assert_allclose(vec, [crps_censored_gev(*a) for a in zip(mu, s, xi, y)], rtol=1e-12)


@pytest.mark.parametrize("mu,sigma,y", [(5, 3, 0), (5, 3, 4), (-2, 4, 7), (20, 6, 1)])
def test_gumbel_limit_continuity(mu, sigma, y):
    c0 = crps_censored_gev(mu, sigma, 0.0, y)
    for eps in (1e-8, -1e-8, 1e-6, -1e-6):
        assert crps_censored_gev(mu, sigma, eps, y) == pytest.approx(c0, abs=1e-5)


def test_point_mass_limit():
    assert crps_censored_gev(7.0, 1e-6, 0.1, 7.0) < 1e-5


def test_extreme_tails_finite():
    assert np.isfinite(crps_censored_gev(1.0, 0.5, 1e-3, 500.0))
    assert crps_censored_gev(-300.0, 1.0, 0.1, 4.0) == pytest.approx(4.0)
    # bounded GEV with the observation above its upper endpoint
    ref = crps_censored_gev_quadrature(5.0, 2.0, -0.25, 40.0)
    assert crps_censored_gev(5.0, 2.0, -0.25, 40.0) == pytest.approx(ref, rel=1e-6)


def test_infinite_mean_rejected():
    with pytest.raises(InfiniteMeanError):
        crps_censored_gev(1, 1, 1.0, 1)
    with pytest.raises(ValueError):
        crps_censored_gev(1, 0, 0.1, 1)


@given(st.floats(-5, 20), st.floats(0.5, 10), st.floats(-0.2, 0.4), st.floats(0, 40), st.floats(0.1, 10))
def test_positive_homogeneity(mu, sigma, xi, y, c):
    assert crps_censored_gev(c * mu, c * sigma, xi, c * y) == pytest.approx(c * crps_censored_gev(mu, sigma, xi, y),
                                                                          rel=1e-9, abs=1e-10)


@pytest.mark.parametrize("mu,sigma,xi", [(10, 5, 0.2), (-1, 3, 0.4), (4, 2, -0.2), (2, 1, 0.0)])
def test_censored_gev_mass_balance(mu, sigma, xi):
    d = CensoredGev(mu, sigma, xi)
    # point mass equals the GEV CDF at zero, cross-checked by integrating the density
    below = integrate.quad(lambda x: gev_pdf(x, mu, sigma, xi), -np.inf, 0, limit=200)[0]
    assert d.prob_zero == pytest.approx(below, abs=1e-7)
    assert d.prob_zero == pytest.approx(gev_cdf(0.0, mu, sigma, xi))
    upper = mu - sigma / xi if xi < 0 else np.inf
    mass = integrate.quad(d.pdf, 0, upper, limit=200)[0]
    assert mass == pytest.approx(1.0 - d.prob_zero, abs=1e-6)
    pop_q = 1.0 - d.prob_zero - integrate.quad(d.pdf, 0, 0.2)[0]
    assert d.pop() == pytest.approx(pop_q, abs=1e-8)


def test_predict_identity_wiring():
    params = EmosParams(0, 0, 0, 1, 0, 1, 0, 0.0)
    d = predict_emos(params, EmosPredictors(ens_mean=7.0, frac_zero=0.0, mean_diff=3.0))
    assert (d.mu, d.sigma, d.xi) == (7.0, 1.0, 0.0)
    full = EmosParams(1, 2, 3, 4, 5, 1, 0.5, 0.1, use_hres=True, use_cnt=True)
    p = EmosPredictors(ens_mean=1.0, frac_zero=0.5, mean_diff=2.0, hres=1.0, cnt=1.0)
    assert predict_emos(full, p).mu == pytest.approx(1 + 2 + 3 + 4 + 2.5)
    reduced = EmosPredictors(ens_mean=1.0, frac_zero=0.5, mean_diff=2.0)
    assert predict_emos(full, reduced).mu == pytest.approx(1 + 4 + 2.5)
    floor = predict_emos(EmosParams(0, 0, 0, 1, 0, -5, 0, 0.0), reduced)
    assert floor.sigma == 0.01


def test_params_json_roundtrip():
    p = EmosParams(1, 2, 3, 4, 5, 1, 0.5, 0.1, use_hres=True, use_cnt=False, mean_crps=1.5, n_train=40)
    d = json.loads(p.to_json())
    assert d["method"] == "emos" and d["a_ens"] == 4
    assert EmosParams.from_dict(d) == p
    with pytest.raises(ValueError):
        EmosParams(0, 0, 0, 1, 0, 1, 0, 1.5)


def _synthetic_training(n, seed, a=(4.0, 0.8, -4.0), b=(2.0, 1.0), xi=0.1):
    rng = np.random.default_rng(seed)
    ens = rng.gamma(2.0, 4.0, n)
    frac = rng.uniform(0, 1, n)
    md = rng.exponential(3.0, n)
    mu = a[0] + a[1] * ens + a[2] * frac
    sigma = b[0] + b[1] * md
    u = rng.random(n)
    y = mu + sigma * ((-np.log(u)) ** (-xi) - 1) / xi
    preds = [EmosPredictors(ens_mean=e, frac_zero=f, mean_diff=m) for e, f, m in zip(ens, frac, md)]
    return preds, np.maximum(y, 0.0)


def test_fit_improves_and_trace_nonincreasing():
    preds, y = _synthetic_training(400, 1)
    fit = fit_emos(preds, y)
    assert fit.params.mean_crps <= fit.initial_crps
    assert all(b <= a + 1e-12 for a, b in zip(fit.trace, fit.trace[1:]))
    assert fit.params.n_train == 400 and not fit.params.use_hres


def test_fit_from_previous_and_single_start():
    preds, y = _synthetic_training(400, 2)
    full = fit_emos(preds, y)
    quick = fit_emos(preds, y, previous=full.params, n_starts=1)
    assert quick.params.mean_crps <= full.params.mean_crps + 1e-6


def test_fit_duplication_invariance():
    preds, y = _synthetic_training(300, 3)
    a = fit_emos(preds, y).params
    b = fit_emos(preds + preds, np.concatenate([y, y])).params
    assert b.mean_crps == pytest.approx(a.mean_crps, rel=1e-4)
    assert b.a_ens == pytest.approx(a.a_ens, rel=0.05, abs=0.02)


def test_perfect_predictor_beats_climatology():
    rng = np.random.default_rng(5)
    ens = rng.gamma(2.0, 4.0, 200)
    preds = [EmosPredictors(ens_mean=e, frac_zero=0.0, mean_diff=0.0) for e in ens]
    fit = fit_emos(preds, ens)
    clim = float(np.mean([crps_censored_gev(ens.mean(), ens.std(), 0.0, v) for v in ens]))
    assert fit.params.mean_crps < 0.1 * clim


def test_fit_guards():
    preds, y = _synthetic_training(50, 4)
    with pytest.raises(DataError):
        fit_emos(preds[:20], y[:20])
    with pytest.raises(DegenerateTrainingError):
        fit_emos(preds, np.zeros(50))
    with pytest.raises(DataError):
        fit_emos(preds, y[:-1])


def test_iteration_cap_warns():
    preds, y = _synthetic_training(200, 6)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        fit = fit_emos(preds, y, maxiter=2)
    assert not fit.converged
    assert any("iteration cap" in str(w.message) for w in rec)


def test_hres_terms_used_when_present(site, window):
    rng = np.random.default_rng(7)
    fs, ys = [], []
    for _ in range(120):
        base = rng.gamma(1.5, 4)
        fs.append(EnsembleForecast.from_values(site, window, np.maximum(base + rng.normal(0, 2, 10), 0),
                                               hres=base, cnt=max(base + rng.normal(0, 1), 0)))
        ys.append(max(base + rng.normal(0, 2), 0))
    fit = fit_emos([compute_predictors(f) for f in fs], ys)
    assert fit.params.use_hres and fit.params.use_cnt


def test_predictions_are_valid_distributions():
    preds, y = _synthetic_training(300, 8)
    params = fit_emos(preds, y).params
    grid = np.linspace(0, 500, 1000)
    for p in preds[:50]:
        d = predict_emos(params, p)
        c = d.cdf(grid)
        assert np.all(np.diff(c) >= 0) and 0 <= d.prob_zero <= 1 and c[-1] <= 1
