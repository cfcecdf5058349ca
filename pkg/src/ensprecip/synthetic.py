"""Synthetic monsoon scenarios with known climatology and tunable ensemble pathologies.

Each site has a seasonally varying climatology: a dry-day probability plus a
Gamma distribution of wet-day amounts. A latent standard normal Z drives each
day's observation through the climatological quantile transform,

    Z_obs = rho * S + sqrt(1 - rho^2) * E_0,

and ensemble members share the predictable part S with shrunken noise,

    Z_j = rho * S + sqrt(1 - rho^2) * d * E_j,   x_j = F^-1(Phi(Z_j + shift)),

with ``bias`` mm added to the wet members. With d = 1 and no bias or shift,
members and observation are exchangeable and the raw ensemble is
calibrated; d < 1 gives underdispersion, bias and shift a wet bias.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import special, stats

from .core import AccumulationWindow, EnsembleForecast, Member, MemberTag, Region, Site
from .ingest import (
    RawForecastRecord,
    lead_pair,
    write_forecast_csv,
    write_sites_csv,
    write_station_csv,
)

ARCHIVE_START = (4, 20)  # archive days kept per year; covers the season with margin
ARCHIVE_END = (10, 31)
SEASON_START = (5, 1)
SEASON_END = (10, 15)

_REGION_BOXES = {
    Region.WEST_SAHEL: (-16.0, 12.0),
    Region.EAST_SAHEL: (-4.0, 12.0),
    Region.GUINEA_COAST: (-2.0, 6.0),
}


@dataclass(frozen=True)
class SyntheticScenario:
    regions: tuple = ("WestSahel", "EastSahel")
    sites_per_region: int = 4
    first_season: int = 2007
    n_seasons: int = 8
    history_years: int = 30
    n_members: int = 20
    hres: bool = True
    cnt: bool = True
    wet_fraction: float = 0.45  # peak-season probability of a wet day
    wet_mean: float = 9.0  # mm, mean wet-day amount
    gamma_shape: float = 0.75
    seasonality: float = 0.65  # amplitude of the seasonal wet-probability cycle, 0 for none
    correlation: float = 0.35  # latent correlation between predictable signal and observation
    dispersion: float = 0.3
    bias: float = 2.0  # mm added to wet members
    wet_shift: float = 0.3  # latent shift raising the members' wet-day frequency
    source: str = "SYN"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.wet_fraction < 1:
            raise ValueError("wet_fraction must be in (0, 1)")
        if not 0 <= self.correlation < 1:
            raise ValueError("correlation must be in [0, 1)")
        if not 0 <= self.seasonality < 1:
            raise ValueError("seasonality must be in [0, 1)")
        if self.dispersion < 0 or self.n_members < 1 or self.sites_per_region < 1:
            raise ValueError("invalid scenario size or dispersion")

    @property
    def seasons(self) -> list[int]:
        return list(range(self.first_season, self.first_season + self.n_seasons))


def monsoon_scenario(seed: int = 0, **overrides) -> SyntheticScenario:
    """The packaged demonstration scenario: one region of 16 stations over 8 seasons.

    Ensembles are strongly underdispersed and wet-biased. Sixteen stations
    give 320 pairs per 20-day training window, enough to keep the rolling
    EMOS fits stable.
    """
    kw = dict(regions=("WestSahel",), sites_per_region=16, n_seasons=8, seed=seed)
    kw.update(overrides)
    return SyntheticScenario(**kw)


@dataclass
class SiteClimate:
    wet_scale: float
    amount_scale: float
    phase: float

    def wet_probability(self, days: np.ndarray, peak: float, amplitude: float = 0.65) -> np.ndarray:
        """Wet-day probability over the year; peaks in late July."""
        doy = np.array([d.timetuple().tm_yday for d in days], dtype=float)
        shape = 1.0 - amplitude + amplitude * np.clip(np.sin(np.pi * (doy - 110.0 + self.phase) / 200.0), 0, 1) ** 2
        return np.clip(peak * self.wet_scale * shape, 0.02, 0.95)


@dataclass
class SyntheticData:
    scenario: SyntheticScenario
    sites: dict
    stations: dict  # site id -> {date: mm}
    forecasts: dict  # (site id, valid_start) -> EnsembleForecast
    climates: dict = field(default_factory=dict)


def site_seed(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed] + [zlib.crc32(str(k).encode()) for k in keys])


def climatological_quantile(u, wet_prob, shape, scale):
    """Quantile of a point mass at zero plus Gamma wet amounts."""
    u = np.asarray(u, dtype=float)
    dry = 1.0 - wet_prob
    q = np.clip((u - dry) / wet_prob, 0.0, 1.0 - 1e-12)
    amount = stats.gamma.ppf(q, shape, scale=scale)
    return np.where(u <= dry, 0.0, np.round(amount, 1))


def _archive_days(year: int) -> list[date]:
    a, b = date(year, *ARCHIVE_START), date(year, *ARCHIVE_END)
    return [a + timedelta(days=k) for k in range((b - a).days + 1)]


def _in_season(d: date) -> bool:
    return date(d.year, *SEASON_START) <= d <= date(d.year, *SEASON_END)


def make_sites(sc: SyntheticScenario) -> list[Site]:
    sites = []
    for r in sc.regions:
        region = Region(r)
        lon0, lat0 = _REGION_BOXES.get(region, (10.0, 10.0))
        for k in range(sc.sites_per_region):
            # stations sit on 0.25 degree cell centers
            lon = lon0 + 0.125 + 0.5 * (k % 4)
            lat = lat0 + 0.125 + 0.5 * (k // 4)
            sites.append(Site(f"{region.value[:2].upper()}{k:02d}", lon, lat, region))
    return sites


def generate_synthetic(sc: SyntheticScenario) -> SyntheticData:
    sites = make_sites(sc)
    stations, forecasts, climates = {}, {}, {}
    years = range(sc.first_season - sc.history_years, sc.first_season + sc.n_seasons)
    rho = sc.correlation
    noise = np.sqrt(1.0 - rho**2)
    for site in sites:
        rng = np.random.default_rng(site_seed(sc.seed, "site", site.id))
        clim = SiteClimate(
            wet_scale=float(rng.uniform(0.8, 1.2)),
            amount_scale=float(rng.uniform(0.8, 1.25)),
            phase=float(rng.uniform(-10, 10)),
        )
        climates[site.id] = clim
        scale = sc.wet_mean * clim.amount_scale / sc.gamma_shape
        days = [d for y in years for d in _archive_days(y)]
        wet = clim.wet_probability(np.array(days), sc.wet_fraction, sc.seasonality)
        s = rng.standard_normal(len(days))
        e0 = rng.standard_normal(len(days))
        z_obs = rho * s + noise * e0
        obs = climatological_quantile(special.ndtr(z_obs), wet, sc.gamma_shape, scale)
        stations[site.id] = dict(zip(days, obs.tolist()))

        fc_idx = [i for i, d in enumerate(days) if d.year >= sc.first_season and _in_season(d)]
        n_ens = sc.n_members + int(sc.hres) + int(sc.cnt)
        e = rng.standard_normal((len(fc_idx), n_ens))
        z = rho * s[fc_idx, None] + noise * sc.dispersion * e
        x = climatological_quantile(special.ndtr(z + sc.wet_shift), wet[fc_idx, None], sc.gamma_shape, scale)
        x = np.where(x > 0, np.maximum(x + sc.bias, 0.0), 0.0)
        tags = [MemberTag.HRES] * int(sc.hres) + [MemberTag.CNT] * int(sc.cnt) + [MemberTag.ENS] * sc.n_members
        for row, i in enumerate(fc_idx):
            window = AccumulationWindow.ending_on(days[i], 1)
            members = tuple(Member(t, float(v)) for t, v in zip(tags, np.round(x[row], 2)))
            forecasts[(site.id, window.valid_start)] = EnsembleForecast(site, window, members, sc.source)
    return SyntheticData(sc, {s.id: s for s in sites}, stations, forecasts, climates)


def forecast_records(data: SyntheticData, init_hour: int = 0) -> list[RawForecastRecord]:
    """Raw accumulations from initialization for every synthetic window forecast.

    The accumulation before the window start is a small deterministic spin-up
    amount so that differencing is exercised.
    """
    out = []
    for (sid, start), f in sorted(data.forecasts.items()):
        lower, upper = lead_pair(init_hour, f.window.length_days)
        init = start - timedelta(hours=lower)
        site = f.site
        for j, m in enumerate(f.members):
            tag = m.tag.value if m.tag is not MemberTag.ENS else f"ENS{j:02d}"
            spin = round(0.05 * m.value, 2)
            if lower > 0:
                out.append(RawForecastRecord(f.source, init, lower, site.longitude, site.latitude, tag, spin))
            out.append(RawForecastRecord(f.source, init, upper, site.longitude, site.latitude, tag,
                                         round(spin + m.value, 2)))
    return out


def write_synthetic(data: SyntheticData, outdir) -> dict:
    """Write sites, stations and raw forecasts; returns the written paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "sites": outdir / "sites.csv",
        "stations": outdir / "stations.csv",
        "forecasts": outdir / "forecasts.csv",
        "scenario": outdir / "scenario.json",
    }
    write_sites_csv(paths["sites"], data.sites.values())
    write_station_csv(paths["stations"], data.stations)
    write_forecast_csv(paths["forecasts"], forecast_records(data))
    import json

    paths["scenario"].write_text(json.dumps(asdict(data.scenario), indent=2, sort_keys=True) + "\n")
    return paths


# ---------------------------------------------------------------- RMM scenario


def generate_rmm_inputs(
    n_days: int = 400,
    sources: tuple = ("ECMWF", "UKMO", "NCEP", "CMA", "JMA", "KMA", "CPTEC"),
    best: str = "UKMO",
    n_members: int = 10,
    seed: int = 0,
    site: Optional[Site] = None,
) -> tuple[list[list[EnsembleForecast]], np.ndarray]:
    """Sub-ensembles for RMM tests; ``best`` tracks the observation most closely.

    Returns per-day lists of sub-ensembles and the observations.
    """
    site = site or Site("RMM00", 2.125, 13.125, Region.WEST_SAHEL)
    rng = np.random.default_rng(site_seed(seed, "rmm", site.id))
    wet, shape, scale = 0.5, 0.75, 12.0
    z_obs = rng.standard_normal(n_days)
    obs = climatological_quantile(special.ndtr(z_obs), wet, shape, scale)
    days = []
    start = datetime(2010, 5, 1, 6, tzinfo=timezone.utc)
    for t in range(n_days):
        window = AccumulationWindow(start + timedelta(days=t), 1)
        subs = []
        for src in sources:
            rho = 0.95 if src == best else 0.3
            k = n_members + 1 + int(src == "ECMWF")
            z = rho * z_obs[t] + np.sqrt(1 - rho**2) * rng.standard_normal(k)
            x = climatological_quantile(special.ndtr(z), wet, shape, scale)
            tags = ([MemberTag.HRES] if src == "ECMWF" else []) + [MemberTag.CNT] + [MemberTag.ENS] * n_members
            subs.append(EnsembleForecast(site, window, tuple(Member(g, float(v)) for g, v in zip(tags, x)), src))
        days.append(subs)
    return days, obs
