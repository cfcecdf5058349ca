"""Rolling-window training, prediction and scoring over a forecast corpus."""

from __future__ import annotations

import bisect
import logging
import warnings
import zlib
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Mapping, Optional, Sequence

import numpy as np

from .bma import BmaParams, fit_bma_em, predict_bma
from .climatology import build_epc
from .core import AccumulationWindow, EmpiricalEnsemble, EnsembleForecast, PredictiveDistribution, Site
from .emos import EmosParams, compute_predictors, fit_emos, predict_emos
from .errors import ConvergenceWarning, DataError
from .ingest import lead_pair
from .verify import CaseScore, ScoreReport, score_case

log = logging.getLogger(__name__)

METHODS = ("raw", "epc", "emos", "bma")


@dataclass(frozen=True)
class PipelineConfig:
    season_start: tuple = (5, 1)
    season_end: tuple = (10, 15)
    training_days: int = 20
    accumulation_days: int = 1
    init_hour: int = 0
    methods: tuple = METHODS
    history_years: int = 30
    day_window: int = 2
    min_pairs: int = 30
    em_tol: float = 1e-5  # relative log-likelihood change ending BMA EM
    emos_starts: int = 1  # EMOS starts optimized, best-ranked first
    seed: int = 0

    def __post_init__(self):
        if self.training_days < 1:
            raise ValueError("training_days must be >= 1")
        if not self.methods:
            raise ValueError("method list is empty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if not 1 <= self.accumulation_days <= 5:
            raise ValueError("accumulation_days must be in 1..5")

    @classmethod
    def from_mapping(cls, d: Mapping) -> "PipelineConfig":
        kw = dict(d)
        for key in ("season_start", "season_end", "methods"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def in_season(self, day: date) -> bool:
        return date(day.year, *self.season_start) <= day <= date(day.year, *self.season_end)

    def init_time(self, window: AccumulationWindow) -> datetime:
        lower, _ = lead_pair(self.init_hour, window.length_days)
        return window.valid_start - timedelta(hours=lower)


@dataclass
class Dataset:
    sites: dict  # id -> Site
    stations: dict  # id -> {date: mm}
    forecasts: dict  # (id, valid_start) -> EnsembleForecast

    def observation(self, site_id: str, window: AccumulationWindow) -> Optional[float]:
        days = self.stations.get(site_id, {})
        vals = [days.get(d) for d in window.obs_days]
        if any(v is None or not np.isfinite(v) for v in vals):
            return None
        return float(sum(vals))


@dataclass
class CasePrediction:
    case_id: str
    site: Site
    window: AccumulationWindow
    season: int
    observation: float
    distributions: dict  # method -> PredictiveDistribution


@dataclass
class RunOutput:
    config: PipelineConfig
    cases: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (region, window start, reason)
    emos_params: dict = field(default_factory=dict)  # (region, window start) -> EmosParams
    bma_params: dict = field(default_factory=dict)


def case_seed(master: int, site_id: str, day: date, method: str = "") -> np.random.SeedSequence:
    """Per-case randomization seed independent of processing order."""
    return np.random.SeedSequence([master, zlib.crc32(site_id.encode()), day.toordinal(), zlib.crc32(method.encode())])


def aggregate_forecast(forecasts: Mapping, site_id: str, window: AccumulationWindow) -> Optional[EnsembleForecast]:
    """k-day forecast as the member-wise sum of consecutive 1-day window forecasts."""
    if window.length_days == 1:
        return forecasts.get((site_id, window.valid_start))
    parts = []
    for k in range(window.length_days):
        f = forecasts.get((site_id, window.valid_start + timedelta(days=k)))
        if f is None:
            return None
        parts.append(f)
    first = parts[0]
    if any(len(p.members) != len(first.members) for p in parts):
        return None
    members = tuple(
        type(m)(m.tag, float(sum(p.members[i].value for p in parts)), m.label) for i, m in enumerate(first.members)
    )
    return EnsembleForecast(first.site, window, members, first.source)


def _training_pairs(config: PipelineConfig, data: Dataset, region: str):
    """All (window, site, forecast, observation) pairs of a region, by window start."""
    pairs = defaultdict(list)
    k = config.accumulation_days
    starts = sorted({s for (sid, s) in data.forecasts if data.sites[sid].region.value == region})
    for start in starts:
        window = AccumulationWindow(start, k)
        for sid in sorted(data.sites):
            if data.sites[sid].region.value != region:
                continue
            f = aggregate_forecast(data.forecasts, sid, window)
            if f is None:
                continue
            y = data.observation(sid, window)
            if y is None:
                continue
            pairs[start].append((sid, f, y))
    return dict(sorted(pairs.items()))


def rolling_train_predict(config: PipelineConfig, data: Dataset, regions: Optional[Sequence[str]] = None,
                          jobs: int = 1) -> RunOutput:
    """Fit per region on the n most recent usable days and predict each verification day.

    A training day is usable for a verification window when its observation
    window has closed by the forecast initialization time. Days count only
    if the region has at least one forecast-observation pair on them.
    Regions are independent, so ``jobs > 1`` runs them in worker processes;
    the merged output does not depend on the number of workers.
    """
    all_regions = sorted({s.region.value for s in data.sites.values()})
    regions = all_regions if regions is None else [r for r in all_regions if r in set(regions)]
    if jobs > 1 and len(regions) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(regions))) as pool:
            parts = list(pool.map(_run_region, [config] * len(regions), [data] * len(regions), regions))
    else:
        parts = [_run_region(config, data, r) for r in regions]
    out = RunOutput(config)
    for part in parts:
        out.cases.extend(part.cases)
        out.skipped.extend(part.skipped)
        out.emos_params.update(part.emos_params)
        out.bma_params.update(part.bma_params)
    out.cases.sort(key=lambda c: c.case_id)
    return out


def _run_region(config: PipelineConfig, data: Dataset, region: str) -> RunOutput:
    out = RunOutput(config)
    need_emos = "emos" in config.methods
    need_bma = "bma" in config.methods
    pairs = _training_pairs(config, data, region)
    starts = list(pairs)
    ends = [AccumulationWindow(s, config.accumulation_days).valid_end for s in starts]
    predictors = {(sid, s): compute_predictors(f) for s in starts for sid, f, _ in pairs[s]} if need_emos else {}
    prev_emos: Optional[EmosParams] = None
    prev_bma: Optional[BmaParams] = None
    for start in starts:
        window = AccumulationWindow(start, config.accumulation_days)
        if not config.in_season(window.first_day):
            continue
        init = config.init_time(window)
        n_usable = bisect.bisect_right(ends, init)
        # ends are sorted with starts since the window length is fixed
        if n_usable < config.training_days:
            out.skipped.append((region, start, f"cold start: {n_usable} of {config.training_days} training days"))
            continue
        train_starts = starts[n_usable - config.training_days:n_usable]
        for ts in train_starts:
            tw = AccumulationWindow(ts, config.accumulation_days)
            assert tw.valid_end <= init and tw.valid_end <= window.valid_start, "training window leaks"
        train = [p + (ts,) for ts in train_starts for p in pairs[ts]]
        ys = [y for _, _, y, _ in train]
        fitted = {}
        try:
            if need_emos:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ConvergenceWarning)
                    fit = fit_emos([predictors[(sid, ts)] for sid, _, _, ts in train], ys,
                                   previous=prev_emos, min_pairs=config.min_pairs,
                                   n_starts=config.emos_starts)
                prev_emos = fit.params
                fitted["emos"] = fit.params
            if need_bma:
                fitted["bma"] = fit_bma_em([f for _, f, _, _ in train], ys, min_pairs=config.min_pairs,
                                           tol=config.em_tol, init=prev_bma).params
                prev_bma = fitted["bma"]
        except DataError as exc:
            out.skipped.append((region, start, f"training failed: {exc}"))
            continue
        if "emos" in fitted:
            out.emos_params[(region, start)] = fitted["emos"]
        if "bma" in fitted:
            out.bma_params[(region, start)] = fitted["bma"]
        for sid, f, y in pairs[start]:
            site = data.sites[sid]
            try:
                dists = predict_case(config, data, site, window, f, fitted,
                                     predictors.get((sid, start)))
            except DataError as exc:
                out.skipped.append((region, start, f"{sid}: {exc}"))
                continue
            out.cases.append(CasePrediction(
                case_id=f"{sid}/{window.first_day.isoformat()}/{window.length_days}",
                site=site, window=window, season=window.first_day.year, observation=y,
                distributions=dists,
            ))
    return out


def predict_case(config: PipelineConfig, data: Dataset, site: Site, window: AccumulationWindow,
                 forecast: EnsembleForecast, fitted: Mapping, predictors=None) -> dict:
    dists: dict = {}
    for method in config.methods:
        if method == "raw":
            dists[method] = forecast.as_distribution()
        elif method == "epc":
            dists[method] = build_epc(data.stations[site.id], site, window,
                                      config.history_years, config.day_window).as_distribution()
        elif method == "emos":
            dists[method] = predict_emos(fitted["emos"], predictors or compute_predictors(forecast))
        elif method == "bma":
            dists[method] = predict_bma(fitted["bma"], forecast)
    return dists


def score_run(run: RunOutput, seed: Optional[int] = None) -> ScoreReport:
    seed = run.config.seed if seed is None else seed
    report = ScoreReport()
    for case in run.cases:
        for method, dist in case.distributions.items():
            rng = np.random.default_rng(case_seed(seed, case.site.id, case.window.first_day, method))
            report.add(score_case(
                dist, case.observation, rng, case_id=case.case_id, site=case.site.id,
                region=case.site.region.value, season=case.season, method=method,
            ))
    return report


def run_pipeline(config: PipelineConfig, data: Dataset, jobs: int = 1) -> tuple[RunOutput, ScoreReport]:
    run = rolling_train_predict(config, data, jobs=jobs)
    return run, score_run(run)
