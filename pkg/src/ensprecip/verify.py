"""Scoring rules and calibration diagnostics.

CRPS, absolute error of the median, Brier score, elementary scores and
Murphy curves, unified PIT (uPIT) values and histograms, reliability
diagrams, and the season sign test used for stability marks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import integrate, stats

from .core import EmpiricalEnsemble, EnsembleForecast, PredictiveDistribution, as_distribution
from .errors import AlignmentError, EmptyInputError

UPIT_BINS = 20
RELIABILITY_BINS = 10
HISTOGRAM_CUT = 3.0


# ----------------------------------------------------------------------- CRPS


def crps_ensemble(members, y: float) -> float:
    """Exact CRPS of the empirical distribution of ``members``.

    ``mean|x_i - y| - (1 / 2m^2) sum_ij |x_i - x_j|``; the double sum is
    evaluated from the order statistics.
    """
    x = np.sort(np.asarray(members, dtype=float))
    m = x.size
    i = np.arange(1, m + 1)
    spread = 2.0 * np.sum((2 * i - m - 1) * x)
    return float(np.mean(np.abs(x - y)) - spread / (2.0 * m * m))


def crps_quadrature(dist: PredictiveDistribution, y: float, epsabs: float = 1e-6) -> float:
    """Generic CRPS by adaptive quadrature of the defining integral."""
    lo = integrate.quad(lambda x: dist.cdf(x) ** 2, 0.0, y, epsabs=epsabs, limit=400)[0] if y > 0 else 0.0
    hi = integrate.quad(lambda x: (1.0 - dist.cdf(x)) ** 2, y, np.inf, epsabs=epsabs, limit=400)[0]
    return lo + hi


def crps(dist, y: float) -> float:
    if isinstance(dist, EnsembleForecast):
        return crps_ensemble(dist.values, y)
    if isinstance(dist, EmpiricalEnsemble):
        return crps_ensemble(dist.members, y)
    own = getattr(dist, "crps", None)
    if own is not None:
        return float(own(y))
    return crps_quadrature(dist, y)


def absolute_error_median(dist, y: float) -> float:
    return abs(as_distribution(dist).quantile(0.5) - y)


# ------------------------------------------------------------- binary events


def brier(pop, occurred):
    p = np.asarray(pop, dtype=float)
    o = np.asarray(occurred, dtype=float)
    out = (p - o) ** 2
    return float(out) if out.ndim == 0 else out


def elementary_score(theta, pop, occurred):
    """Cost-loss elementary score S_theta for a probability forecast.

    ``theta * [p > theta] * [no event] + (1 - theta) * [p <= theta] * [event]``.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any((theta <= 0) | (theta >= 1)):
        raise ValueError("theta must lie in (0, 1)")
    p = np.asarray(pop, dtype=float)
    o = np.asarray(occurred, dtype=bool)
    out = theta * ((p > theta) & ~o) + (1.0 - theta) * ((p <= theta) & o)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class MurphyCurve:
    thetas: np.ndarray
    values: np.ndarray
    area: float
    breakpoints: np.ndarray
    n: int


def _mean_elementary(thetas, p, o):
    t = np.asarray(thetas)[:, None]
    return np.mean(t * ((p > t) & ~o) + (1.0 - t) * ((p <= t) & o), axis=1)


def murphy_curve(pops, occurred, thetas: Optional[Sequence[float]] = None, grid: int = 199) -> MurphyCurve:
    """Mean elementary score over theta, with the exact area under the curve.

    The mean score is linear in theta between consecutive forecast values, so
    the area is integrated exactly segment by segment.
    """
    p = np.asarray(pops, dtype=float).ravel()
    o = np.asarray(occurred, dtype=bool).ravel()
    if p.size == 0:
        raise EmptyInputError("Murphy curve needs at least one case")
    inner = np.unique(p[(p > 0) & (p < 1)])
    knots = np.concatenate([[0.0], inner, [1.0]])
    mids = 0.5 * (knots[:-1] + knots[1:])
    area = float(np.sum(np.diff(knots) * _mean_elementary(mids, p, o)))
    if thetas is None:
        thetas = np.linspace(0.0, 1.0, grid + 2)[1:-1]
    thetas = np.unique(np.concatenate([np.asarray(thetas, dtype=float), inner]))
    return MurphyCurve(thetas, _mean_elementary(thetas, p, o), area, inner, int(p.size))


# ---------------------------------------------------------------------- uPIT


@dataclass(frozen=True)
class UpitSample:
    value: float
    randomized: bool
    seed: Optional[tuple] = None


def upit(forecast, y: float, rng: np.random.Generator, seed: Optional[tuple] = None) -> UpitSample:
    """Unified PIT of one forecast case.

    Ensembles (and empirical climatologies): the observation's rank among the
    m members defines the interval ``((i-1)/(m+1), i/(m+1))``; ties, including
    y = 0 with k dry members, widen it to cover every tied rank. CDF
    forecasts: ``F(y)`` for y > 0, uniform on ``[0, F(0)]`` for y = 0.
    """
    dist = as_distribution(forecast)
    if isinstance(dist, EmpiricalEnsemble):
        x = dist.members
        m = x.size
        below = int(np.searchsorted(x, y, side="left"))
        ties = int(np.searchsorted(x, y, side="right")) - below
        lo, hi = below / (m + 1), (below + ties + 1) / (m + 1)
        return UpitSample(float(rng.uniform(lo, hi)), True, seed)
    if y > 0:
        return UpitSample(float(dist.cdf(y)), False, seed)
    return UpitSample(float(rng.uniform(0.0, dist.prob_zero)), True, seed)


@dataclass(frozen=True)
class UpitHistogram:
    edges: np.ndarray
    heights: np.ndarray  # density scale, uniform = 1
    counts: np.ndarray
    max_height: float
    cut: float = HISTOGRAM_CUT


def _values(samples) -> np.ndarray:
    return np.array([s.value if isinstance(s, UpitSample) else s for s in samples], dtype=float)


def upit_histogram(samples, bins: int = UPIT_BINS) -> UpitHistogram:
    v = _values(samples)
    if v.size == 0:
        raise EmptyInputError("uPIT histogram needs samples")
    counts, edges = np.histogram(v, bins=bins, range=(0.0, 1.0))
    heights = counts / (v.size / bins)
    return UpitHistogram(edges, heights, counts, float(heights.max()))


def uniformity_pvalue(samples, bins: int = UPIT_BINS) -> float:
    """Chi-square goodness-of-fit p-value of the binned uPIT values."""
    counts = upit_histogram(samples, bins).counts
    return float(stats.chisquare(counts).pvalue)


# --------------------------------------------------------------- reliability


@dataclass(frozen=True)
class ReliabilityBin:
    lower: float
    upper: float
    mean_forecast: float
    observed_frequency: float
    count: int


@dataclass(frozen=True)
class ReliabilityDiagram:
    bins: list
    n: int

    @property
    def forecast_frequencies(self) -> np.ndarray:
        """Relative frequency of forecasts per bin (the sharpness histogram)."""
        return np.array([b.count for b in self.bins], dtype=float) / self.n


def reliability(pops, occurred, bins=RELIABILITY_BINS) -> ReliabilityDiagram:
    p = np.asarray(pops, dtype=float).ravel()
    o = np.asarray(occurred, dtype=float).ravel()
    edges = np.linspace(0.0, 1.0, bins + 1) if np.isscalar(bins) else np.asarray(bins, dtype=float)
    if edges[0] > 0 or edges[-1] < 1:
        raise ValueError("reliability bin edges must cover [0, 1]")
    idx = np.clip(np.searchsorted(edges, p, side="right") - 1, 0, edges.size - 2)
    out = []
    for k in range(edges.size - 1):
        sel = idx == k
        n = int(sel.sum())
        out.append(ReliabilityBin(
            float(edges[k]), float(edges[k + 1]),
            float(p[sel].mean()) if n else float("nan"),
            float(o[sel].mean()) if n else float("nan"),
            n,
        ))
    return ReliabilityDiagram(out, int(p.size))


# ------------------------------------------------------------------ stability


@dataclass(frozen=True)
class Stability:
    skill: float
    mark: str
    p_value: float
    n_better: int
    n_worse: int
    n_seasons: int
    season_skill: dict = field(default_factory=dict)


def sign_test_pvalue(k: int, n: int) -> float:
    """P(at least k of n fair coin flips), i.e. orderings at least as extreme / 2^n."""
    if k <= 0:
        return 1.0
    return sum(math.comb(n, j) for j in range(k, n + 1)) / 2**n


def stability_mark(n_better: int, n_worse: int, n_seasons: int) -> str:
    if n_seasons == 0:
        return "0"
    if n_better == n_seasons:
        return "++"
    if n_worse == n_seasons:
        return "--"
    if n_seasons >= 2 and n_better == n_seasons - 1 and n_better > n_worse:
        return "+"
    if n_seasons >= 2 and n_worse == n_seasons - 1 and n_worse > n_better:
        return "-"
    return "0"


def skill_and_stability(method: Mapping, reference: Mapping) -> Stability:
    """Skill score against the reference and the season stability mark.

    ``method`` and ``reference`` map season -> per-case scores (negatively
    oriented) on identical case sets. Skill is ``1 - S / S_ref`` on the pooled
    means; the mark counts seasons with a strictly better/worse mean.
    """
    if set(method) != set(reference):
        raise AlignmentError("method and reference cover different seasons")
    better = worse = 0
    tot_m = tot_r = 0.0
    n = 0
    season_skill = {}
    for season in sorted(method):
        sm = np.asarray(method[season], dtype=float)
        sr = np.asarray(reference[season], dtype=float)
        if sm.shape != sr.shape:
            raise AlignmentError(f"season {season}: {sm.size} vs {sr.size} cases")
        mm, mr = sm.mean(), sr.mean()
        better += int(mm < mr)
        worse += int(mm > mr)
        season_skill[season] = float(1.0 - mm / mr) if mr > 0 else 0.0
        tot_m += sm.sum()
        tot_r += sr.sum()
        n += sm.size
    S = len(method)
    skill = float(1.0 - tot_m / tot_r) if tot_r > 0 else 0.0
    return Stability(skill, stability_mark(better, worse, S), sign_test_pvalue(max(better, worse), S),
                     better, worse, S, season_skill)


# ---------------------------------------------------------------- per case


@dataclass(frozen=True)
class CaseScore:
    case_id: str
    site: str
    region: str
    season: int
    method: str
    crps: float
    ae: float
    bs: float
    pop: float
    occurred: bool
    upit: float


def score_case(dist, y: float, rng: np.random.Generator, *, case_id="", site="", region="", season=0,
               method="", threshold: Optional[float] = None) -> CaseScore:
    d = as_distribution(dist)
    thr = d.pop_threshold if threshold is None else threshold
    p = d.pop()
    occurred = bool(y >= thr)
    return CaseScore(
        case_id=case_id, site=site, region=region, season=season, method=method,
        crps=crps(d, y), ae=absolute_error_median(d, y), bs=brier(p, occurred),
        pop=p, occurred=occurred, upit=upit(d, y, rng).value,
    )


@dataclass
class ScoreReport:
    """Per-case scores with aggregation helpers."""

    records: list = field(default_factory=list)

    def add(self, rec: CaseScore):
        self.records.append(rec)

    def methods(self) -> list[str]:
        return sorted({r.method for r in self.records})

    def regions(self) -> list[str]:
        return sorted({r.region for r in self.records})

    def seasons(self) -> list[int]:
        return sorted({r.season for r in self.records})

    def select(self, method=None, region=None, season=None) -> list[CaseScore]:
        return [
            r for r in self.records
            if (method is None or r.method == method)
            and (region is None or r.region == region)
            and (season is None or r.season == season)
        ]

    def mean(self, score: str, **sel) -> float:
        rs = self.select(**sel)
        return float(np.mean([getattr(r, score) for r in rs])) if rs else float("nan")

    def by_season(self, score: str, method: str, region=None) -> dict:
        out: dict = {}
        for r in sorted(self.select(method=method, region=region), key=lambda r: r.case_id):
            out.setdefault(r.season, []).append(getattr(r, score))
        return out

    def stability(self, score: str, method: str, reference: str = "epc", region=None) -> Stability:
        m = {r.case_id: r for r in self.select(method=method, region=region)}
        ref = {r.case_id: r for r in self.select(method=reference, region=region)}
        if set(m) != set(ref):
            raise AlignmentError(f"{method} and {reference} were scored on different cases")
        ms: dict = {}
        rs: dict = {}
        for cid in sorted(m):
            ms.setdefault(m[cid].season, []).append(getattr(m[cid], score))
            rs.setdefault(m[cid].season, []).append(getattr(ref[cid], score))
        return skill_and_stability(ms, rs)
