from datetime import date, datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ensprecip.core import AccumulationWindow, Region, Site
from ensprecip.errors import (
    DataError,
    EmptyBoxError,
    GapError,
    InconsistentAccumulationError,
    MissingLeadError,
    OutOfDomainError,
)
from ensprecip.ingest import (
    GriddedField,
    GridSpec,
    RawForecastRecord,
    StationSeries,
    aggregate_spatial,
    aggregate_temporal,
    check_monotone,
    derive_window_forecast,
    lead_pair,
    monsoon_days,
    nearest_neighbor,
    quality_control,
    read_forecast_csv,
    read_grid,
    read_sites_csv,
    read_station_csv,
    read_window_csv,
    window_forecast_from_records,
    write_forecast_csv,
    write_grid,
    write_sites_csv,
    write_station_csv,
    write_window_csv,
)

UTC = timezone.utc
SITE = Site("S1", 2.0, 13.0, Region.WEST_SAHEL)


def _records(init, table, source="ECMWF"):
    """table: member -> {lead: accumulation}"""
    return [RawForecastRecord(source, init, lead, 2.0, 13.0, tag, v)
            for tag, leads in table.items() for lead, v in leads.items()]


def test_lead_pairs():
    assert lead_pair(0, 1) == (6, 30)
    assert lead_pair(12, 1) == (18, 42)
    assert lead_pair(6, 1) == (0, 24)
    assert lead_pair(0, 5) == (6, 126)


def test_difference_00utc():
    init = datetime(2010, 7, 1, 0, tzinfo=UTC)
    recs = _records(init, {"HRES": {6: 2.0, 30: 12.0}, "ENS01": {6: 0.0, 30: 3.5}})
    f = derive_window_forecast(recs, AccumulationWindow(datetime(2010, 7, 1, 6), 1), SITE)
    assert f.values.tolist() == [10.0, 3.5]
    assert f.members[0].tag.value == "HRES"


def test_difference_12utc_and_06utc():
    init = datetime(2010, 6, 30, 12, tzinfo=UTC)
    recs = _records(init, {"ENS01": {18: 1.0, 42: 4.0}})
    f = derive_window_forecast(recs, AccumulationWindow(datetime(2010, 7, 1, 6), 1), SITE)
    assert f.values.tolist() == [3.0]
    init6 = datetime(2010, 7, 1, 6, tzinfo=UTC)
    f6 = derive_window_forecast(_records(init6, {"ENS01": {24: 7.0}}), AccumulationWindow(init6, 1), SITE)
    assert f6.values.tolist() == [7.0]


def test_five_day_window_hand_table():
    init = datetime(2010, 7, 1, 0, tzinfo=UTC)
    acc = {6: 1.0, 30: 3.0, 54: 3.0, 78: 8.0, 102: 8.5, 126: 20.0}
    recs = _records(init, {"ENS01": acc})
    f5 = derive_window_forecast(recs, AccumulationWindow(datetime(2010, 7, 1, 6), 5), SITE)
    assert f5.values.tolist() == [19.0]


def test_multi_day_is_sum_of_daily_differences():
    rng = np.random.default_rng(0)
    init = datetime(2010, 7, 1, 0, tzinfo=UTC)
    leads = [6 + 24 * k for k in range(6)]
    table = {f"ENS{j:02d}": dict(zip(leads, np.cumsum(rng.gamma(0.5, 4, 6)).round(3))) for j in range(5)}
    recs = _records(init, table)
    start = datetime(2010, 7, 1, 6, tzinfo=UTC)
    for k in range(1, 6):
        fk = derive_window_forecast(recs, AccumulationWindow(start, k), SITE)
        daily = sum(np.array([table[t][leads[d + 1]] - table[t][leads[d]] for t in sorted(table)]) for d in range(k))
        np.testing.assert_allclose(fk.values, daily, atol=1e-9)


def test_negative_noise_and_errors():
    init = datetime(2010, 7, 1, 0, tzinfo=UTC)
    w = AccumulationWindow(datetime(2010, 7, 1, 6), 1)
    f = derive_window_forecast(_records(init, {"E": {6: 5.0, 30: 4.97}}), w, SITE)
    assert f.values.tolist() == [0.0]
    with pytest.raises(InconsistentAccumulationError):
        derive_window_forecast(_records(init, {"E": {6: 5.0, 30: 4.5}}), w, SITE)
    with pytest.raises(MissingLeadError):
        derive_window_forecast(_records(init, {"E": {6: 5.0}}), w, SITE)
    with pytest.raises(MissingLeadError):
        derive_window_forecast(_records(init, {"E": {6: 1.0, 30: 2.0}}),
                               AccumulationWindow(datetime(2010, 7, 3, 6), 1), SITE)
    with pytest.raises(InconsistentAccumulationError):
        check_monotone(_records(init, {"E": {6: 5.0, 30: 1.0}}))
    with pytest.raises(DataError):
        RawForecastRecord("X", init, 0, 0, 0, "E", 1.0)


def test_forecast_csv_roundtrip(tmp_path):
    init = datetime(2010, 7, 1, 0, tzinfo=UTC)
    recs = _records(init, {"HRES": {6: 2.0, 30: 12.0}, "ENS01": {6: 0.0, 30: 3.5}})
    write_forecast_csv(tmp_path / "f.csv", recs)
    assert read_forecast_csv(tmp_path / "f.csv") == recs
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        read_forecast_csv(tmp_path / "bad.csv")


def test_window_csv_roundtrip(tmp_path):
    init = datetime(2010, 7, 1, 0, tzinfo=UTC)
    f = derive_window_forecast(_records(init, {"HRES": {6: 2.0, 30: 12.0}, "CNT": {6: 0, 30: 1.0}}),
                               AccumulationWindow(datetime(2010, 7, 1, 6), 1), SITE)
    write_window_csv(tmp_path / "w.csv", [f])
    g = window_forecast_from_records(read_window_csv(tmp_path / "w.csv"), SITE)
    assert g.values.tolist() == f.values.tolist() and g.window == f.window


def test_nearest_neighbor_rules():
    g = GridSpec(0.125, 10.125, 0.25, 0.25, 8, 4)
    assert nearest_neighbor(g, Site("c", 0.625, 10.375)) == (2, 1)
    # edge midpoint between cells 1 and 2 in lon: lower index wins
    assert nearest_neighbor(g, Site("e", 0.5, 10.125)) == (1, 0)
    with pytest.raises(OutOfDomainError):
        nearest_neighbor(g, Site("o", 5.0, 10.125))


@given(st.floats(-0.1, 2.1), st.floats(10.0, 11.1))
def test_nearest_neighbor_matches_brute_force(lon, lat):
    g = GridSpec(0.125, 10.125, 0.25, 0.25, 8, 4)
    s = Site("r", lon, lat)
    if not g.contains(lon, lat):
        with pytest.raises(OutOfDomainError):
            nearest_neighbor(g, s)
        return
    ix, iy = nearest_neighbor(g, s)
    d = (g.lons[:, None] - lon) ** 2 + (g.lats[None, :] - lat) ** 2
    assert d[ix, iy] == pytest.approx(d.min(), abs=1e-12)


def test_grid_from_points():
    g = GridSpec.from_points([0.125, 0.625, 0.375], [5.125, 5.125, 5.375])
    assert (g.nx, g.ny, g.dlon, g.dlat) == (3, 2, 0.25, 0.25)


def _field(values, start=datetime(2010, 7, 1, 6, tzinfo=UTC), step=3):
    v = np.asarray(values, dtype=float)
    return GriddedField(GridSpec(0.125, 0.125, 0.25, 0.25, v.shape[2], v.shape[1]), step, start, v)


def test_temporal_aggregation_examples():
    w = AccumulationWindow(datetime(2010, 7, 1, 6), 1)
    assert aggregate_temporal(_field(np.ones((9, 1, 1))), w)[0, 0] == 8.0
    assert aggregate_temporal(_field(np.zeros((9, 1, 1))), w)[0, 0] == 0.0
    one = np.zeros((9, 1, 1))
    one[4] = 5.0
    assert aggregate_temporal(_field(one), w)[0, 0] == 5.0
    ends = np.zeros((9, 1, 1))
    ends[0], ends[8] = 2.0, 4.0
    assert aggregate_temporal(_field(ends), w)[0, 0] == 3.0


@given(st.integers(1, 5), st.floats(0, 50))
def test_temporal_aggregation_constant(days, c):
    w = AccumulationWindow(datetime(2010, 7, 1, 6), days)
    out = aggregate_temporal(_field(np.full((8 * days + 1, 2, 2), c)), w)
    np.testing.assert_allclose(out, 8 * days * c, rtol=1e-12)


def test_temporal_gap_inventory():
    v = np.ones((9, 1, 1))
    v[3] = np.nan
    with pytest.raises(GapError) as err:
        aggregate_temporal(_field(v), AccumulationWindow(datetime(2010, 7, 1, 6), 1))
    assert err.value.missing == ["2010-07-01T15:00:00Z"]
    with pytest.raises(GapError):
        aggregate_temporal(_field(np.ones((5, 1, 1))), AccumulationWindow(datetime(2010, 7, 1, 6), 1))


def test_spatial_aggregation():
    g = GridSpec(0.125, 0.125, 0.25, 0.25, 40, 20)
    assert aggregate_spatial(np.full((20, 40), 3.0), g, (0.0, 0.0, 1.0, 1.0)) == pytest.approx(3.0)
    two = np.zeros((20, 40))
    two[0, 0], two[0, 1] = 2.0, 4.0
    assert aggregate_spatial(two, g, (0.0, 0.0, 0.5, 0.25)) == pytest.approx(3.0)
    rng = np.random.default_rng(0)
    v = rng.gamma(0.5, 3, (20, 40))
    sel = [v[iy, ix] for iy in range(20) for ix in range(40)
           if 0 < g.lons[ix] < 5 and 0 < g.lats[iy] < 2]
    assert aggregate_spatial(v, g, (0.0, 0.0, 5.0, 2.0)) == pytest.approx(np.mean(sel), abs=1e-12)
    with pytest.raises(EmptyBoxError):
        aggregate_spatial(v, g, (20.0, 20.0, 1.0, 1.0))
    with pytest.raises(DataError):
        aggregate_spatial(v, g, (0.1, 0.0, 1.0, 1.0))


def test_grid_roundtrip(tmp_path):
    v = np.random.default_rng(1).gamma(0.5, 2, (9, 2, 3)).round(4)
    v[2, 1, 1] = np.nan
    f = _field(v)
    write_grid(tmp_path / "trmm.grd.csv", f)
    g = read_grid(tmp_path / "trmm.grd.csv")
    assert g.grid == f.grid and g.start_time == f.start_time
    np.testing.assert_array_equal(np.isnan(g.values), np.isnan(v))
    np.testing.assert_allclose(np.nan_to_num(g.values), np.nan_to_num(v))


def test_station_and_sites_io(tmp_path):
    data = {"A": {date(2010, 5, 1): 0.0, date(2010, 5, 2): 12.5}}
    write_station_csv(tmp_path / "s.csv", data)
    assert read_station_csv(tmp_path / "s.csv") == data
    (tmp_path / "m.csv").write_text("station_id,date,precip_mm\nA,2010-05-01,\nA,2010-05-02,nan\nA,2010-05-03,1\n")
    assert read_station_csv(tmp_path / "m.csv") == {"A": {date(2010, 5, 3): 1.0}}
    (tmp_path / "n.csv").write_text("station_id,date,precip_mm\nA,2010-05-01,-1\n")
    with pytest.raises(DataError):
        read_station_csv(tmp_path / "n.csv")
    write_sites_csv(tmp_path / "sites.csv", [SITE])
    assert read_sites_csv(tmp_path / "sites.csv") == {"S1": SITE}


def _series(values_by_day):
    return StationSeries(SITE, dict(values_by_day))


def _full_season(year, rng):
    return {d: float(rng.gamma(0.6, 10) * (rng.random() < 0.5)) for d in monsoon_days(year)}


def test_monsoon_season_length():
    assert len(monsoon_days(2010)) == 168


def test_qc_good_station_passes():
    rng = np.random.default_rng(0)
    rep = quality_control(_series(_full_season(2010, rng)), [2010])
    assert rep.passed and rep.as_dict()["passed"]


def test_qc_failure_fixtures():
    rng = np.random.default_rng(1)
    days = _full_season(2010, rng)
    days[date(2010, 7, 1)] = 2000.0
    assert not quality_control(_series(days), [2010]).range_ok
    days = _full_season(2010, rng)
    for d in monsoon_days(2010)[: int(0.3 * 168)]:
        del days[d]
    rep = quality_control(_series(days), [2010])
    assert not rep.availability_ok and rep.availability[2010] < 0.8 and not rep.passed
    symmetric = {d: float(k % 3) for k, d in enumerate(monsoon_days(2010))}  # 0,1,2 repeating
    rep = quality_control(_series(symmetric), [2010])
    assert rep.median == rep.mean and not rep.skewness_ok and not rep.passed
    wet = {d: 1.0 + (k % 5) ** 2 for k, d in enumerate(monsoon_days(2010))}
    assert not quality_control(_series(wet), [2010]).point_mass_ok


@given(st.randoms(use_true_random=False))
def test_qc_order_independent(rnd):
    rng = np.random.default_rng(5)
    items = list(_full_season(2011, rng).items())
    shuffled = items[:]
    rnd.shuffle(shuffled)
    assert quality_control(_series(items), [2011]) == quality_control(_series(shuffled), [2011])
