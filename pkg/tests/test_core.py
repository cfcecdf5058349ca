import itertools
from datetime import date, datetime, timezone

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ensprecip.core import (
    AccumulationWindow,
    EmpiricalEnsemble,
    EnsembleForecast,
    ForecastCase,
    Member,
    MemberTag,
    Observation,
    Region,
    Site,
    SiteKind,
    cdf,
    pop,
    quantile,
)
from ensprecip.bma import BmaMixture
from ensprecip.emos import CensoredGev
from ensprecip.errors import DataError


def test_site_validation():
    Site("a", 180.0, -90.0)
    with pytest.raises(DataError):
        Site("a", 181.0, 0.0)
    with pytest.raises(DataError):
        Site("a", 0.0, 91.0)
    with pytest.raises(DataError):
        Site("a", 0.0, 0.0, kind=SiteKind.GRIDBOX)
    with pytest.raises(DataError):
        Site("a", 0.0, 0.0, box_extent=(1.0, 1.0))
    box = Site("b", 0.0, 0.0, Region.GUINEA_COAST, SiteKind.GRIDBOX, (1.0, 1.0))
    assert box.region is Region.GUINEA_COAST
    assert Site("c", 0, 0, "EastSahel").region is Region.EAST_SAHEL


def test_window_conventions():
    w = AccumulationWindow(datetime(2010, 7, 1, 6), 3)
    assert w.valid_start.tzinfo is timezone.utc
    assert w.valid_end == datetime(2010, 7, 4, 6, tzinfo=timezone.utc)
    assert w.obs_days == [date(2010, 7, 2), date(2010, 7, 3), date(2010, 7, 4)]
    assert AccumulationWindow.ending_on(date(2010, 7, 4), 3) == w
    with pytest.raises(DataError):
        AccumulationWindow(datetime(2010, 7, 1, 0), 1)
    with pytest.raises(DataError):
        AccumulationWindow(datetime(2010, 7, 1, 6), 6)


def test_ensemble_forecast_invariants(site, window):
    f = EnsembleForecast.from_values(site, window, [1.0, 2.0], hres=5.0, cnt=3.0)
    assert [m.tag for m in f.members] == [MemberTag.HRES, MemberTag.CNT, MemberTag.ENS, MemberTag.ENS]
    assert f.tagged(MemberTag.ENS).tolist() == [1.0, 2.0]
    with pytest.raises(DataError):
        EnsembleForecast(site, window, ())
    with pytest.raises(DataError):
        EnsembleForecast.from_values(site, window, [-1.0])
    with pytest.raises(DataError):
        EnsembleForecast.from_values(site, window, [float("nan")])
    with pytest.raises(DataError):
        EnsembleForecast(site, window, (Member(MemberTag.HRES, 1.0), Member(MemberTag.HRES, 2.0)))


def test_member_tag_parse():
    assert MemberTag.parse("hres") is MemberTag.HRES
    assert MemberTag.parse("CNT") is MemberTag.CNT
    assert MemberTag.parse("ENS07") is MemberTag.ENS
    assert MemberTag.parse("pf12") is MemberTag.ENS


def test_observation_range(site, window):
    Observation(site, window, 1825.0)
    with pytest.raises(DataError):
        Observation(site, window, 1825.5)
    with pytest.raises(DataError):
        Observation(site, window, -0.1)
    long = AccumulationWindow(window.valid_start, 2)
    Observation(site, long, 3000.0)


def test_forecast_case_alignment(site, window):
    f = EnsembleForecast.from_values(site, window, [1.0])
    obs = Observation(site, window, 0.0)
    assert isinstance(ForecastCase(f, obs, 2010).distribution, EmpiricalEnsemble)
    other = Observation(Site("S2", 0, 0), window, 0.0)
    with pytest.raises(DataError):
        ForecastCase(f, other, 2010)


def test_empirical_examples():
    assert cdf(EmpiricalEnsemble([1, 2, 3]), 2) == pytest.approx(2 / 3)
    assert quantile(EmpiricalEnsemble([0, 0, 4, 8]), 0.5) == 0.0
    assert pop(EmpiricalEnsemble([0, 0.1, 0.5, 3])) == 0.5
    assert pop(EmpiricalEnsemble([0, 0, 0])) == 0.0
    assert pop(EmpiricalEnsemble([0.2])) == 1.0  # the event is >= 0.2 mm
    with pytest.raises(ValueError):
        EmpiricalEnsemble([1.0]).quantile(1.0)


def test_quantile_below_point_mass():
    d = CensoredGev(mu=-1.0, sigma=2.0, xi=0.1)
    assert d.prob_zero > 0.2
    assert d.quantile(0.2) == 0.0


def test_empirical_cdf_exhaustive_small_multisets():
    values = [0.0, 0.5, 1.0, 2.0]
    grid = np.array([-1.0, 0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0])
    for m in range(1, 9):
        for ms in itertools.combinations_with_replacement(values, m):
            e = EmpiricalEnsemble(ms)
            brute = np.array([sum(v <= x for v in ms) / m for x in grid])
            np.testing.assert_array_equal(e.cdf(grid), brute)


def _distributions(seed):
    rng = np.random.default_rng(seed)
    k = 5
    return [
        EmpiricalEnsemble(np.round(rng.gamma(0.7, 8.0, 20) * (rng.random(20) > 0.4), 1)),
        CensoredGev(rng.uniform(-5, 20), rng.uniform(0.5, 15), rng.uniform(-0.25, 0.5)),
        BmaMixture(np.full(k, 1 / k), rng.uniform(0, 0.9, k), rng.uniform(0.3, 4, k), rng.uniform(0.2, 2, k)),
    ]


@given(st.integers(0, 10_000))
def test_cdf_monotone_and_quantile_consistent(seed):
    grid = np.linspace(0, 500, 1000)
    for d in _distributions(seed):
        c = d.cdf(grid)
        assert np.all(np.diff(c) >= -1e-15)
        assert 0.0 <= d.prob_zero <= 1.0
        assert d.cdf(-1.0) == 0.0
        for p in (0.01, 0.1, 0.37, 0.5, 0.9, 0.99):
            q = d.quantile(p)
            assert d.cdf(q) >= p - 1e-12
            if q > 0:
                assert d.cdf(q - 1e-9 * (1 + q)) < p + 1e-12
