"""Domain types and the predictive-distribution abstraction.

Every forecast handed to the verification code is a ``PredictiveDistribution``:
a CDF on ``[0, inf)`` that may carry a point mass at zero. Raw ensembles and
the climatological benchmark are represented by ``EmpiricalEnsemble``.
"""

from __future__ import annotations

import enum
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DataError

POP_THRESHOLD = 0.2  # mm, rainfall occurrence
MAX_DAILY_PRECIP = 1825.0  # mm, global range test for 1-day totals
OBS_HOUR = 6  # observation days end at 06 UTC


class Region(str, enum.Enum):
    WEST_SAHEL = "WestSahel"
    EAST_SAHEL = "EastSahel"
    GUINEA_COAST = "GuineaCoast"
    OTHER = "Other"


class SiteKind(str, enum.Enum):
    STATION = "Station"
    GRIDBOX = "GridBox"


class MemberTag(str, enum.Enum):
    HRES = "HRES"
    CNT = "CNT"
    ENS = "ENS"
    MEAN = "MEAN"

    @classmethod
    def parse(cls, text: str) -> "MemberTag":
        """Map a free-form member label to a tag; unknown labels are ENS."""
        head = text.strip().upper()
        for tag in (cls.HRES, cls.CNT, cls.MEAN):
            if head.startswith(tag.value):
                return tag
        return cls.ENS


@dataclass(frozen=True)
class Site:
    id: str
    longitude: float
    latitude: float
    region: Region = Region.OTHER
    kind: SiteKind = SiteKind.STATION
    box_extent: Optional[tuple[float, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "region", Region(self.region))
        object.__setattr__(self, "kind", SiteKind(self.kind))
        if not -180.0 <= self.longitude <= 180.0:
            raise DataError(f"site {self.id}: longitude {self.longitude} out of range")
        if not -90.0 <= self.latitude <= 90.0:
            raise DataError(f"site {self.id}: latitude {self.latitude} out of range")
        if self.kind is SiteKind.GRIDBOX and self.box_extent is None:
            raise DataError(f"site {self.id}: grid box requires box_extent")
        if self.kind is SiteKind.STATION and self.box_extent is not None:
            raise DataError(f"site {self.id}: station must not have box_extent")


@dataclass(frozen=True, order=True)
class AccumulationWindow:
    """Accumulation period starting at 06 UTC and lasting ``length_days``."""

    valid_start: datetime
    length_days: int = 1

    def __post_init__(self):
        start = self.valid_start
        if start.tzinfo is None:
            start = start.replace(tzinfo=timezone.utc)
            object.__setattr__(self, "valid_start", start)
        if start.hour != OBS_HOUR or start.minute or start.second:
            raise DataError(f"window must start at 06 UTC, got {start.isoformat()}")
        if not 1 <= self.length_days <= 5:
            raise DataError(f"length_days must be in 1..5, got {self.length_days}")

    @classmethod
    def ending_on(cls, obs_day: date, length_days: int = 1) -> "AccumulationWindow":
        """Window whose last observation day (06 UTC ending) is ``obs_day``."""
        first = obs_day - timedelta(days=length_days)
        start = datetime(first.year, first.month, first.day, OBS_HOUR, tzinfo=timezone.utc)
        return cls(start, length_days)

    @property
    def valid_end(self) -> datetime:
        return self.valid_start + timedelta(days=self.length_days)

    @property
    def obs_days(self) -> list[date]:
        """Observation days (dated by their 06 UTC end) summed into this window."""
        first = self.valid_start.date() + timedelta(days=1)
        return [first + timedelta(days=k) for k in range(self.length_days)]

    @property
    def first_day(self) -> date:
        return self.obs_days[0]


@dataclass(frozen=True)
class Member:
    tag: MemberTag
    value: float
    label: Optional[str] = None

    @property
    def group(self) -> str:
        """Exchangeable group key; labelled members form their own group."""
        return self.label if self.label else self.tag.value


@dataclass(frozen=True)
class EnsembleForecast:
    site: Site
    window: AccumulationWindow
    members: tuple[Member, ...]
    source: str = "ECMWF"

    def __post_init__(self):
        members = tuple(
            m if isinstance(m, Member) else Member(MemberTag(m[0]), float(m[1]), *m[2:])
            for m in self.members
        )
        object.__setattr__(self, "members", members)
        if not members:
            raise DataError("ensemble needs at least one member")
        for m in members:
            if not math.isfinite(m.value) or m.value < 0:
                raise DataError(f"invalid member value {m.value}")
        for tag in (MemberTag.HRES, MemberTag.CNT):
            labels = [m.label for m in members if m.tag is tag]
            if len(labels) > 1 and len(set(labels)) < len(labels):
                raise DataError(f"at most one {tag.value} member per contributor")

    @classmethod
    def from_values(cls, site, window, values, source="ECMWF", hres=None, cnt=None):
        members = [Member(MemberTag.ENS, float(v)) for v in values]
        if cnt is not None:
            members.insert(0, Member(MemberTag.CNT, float(cnt)))
        if hres is not None:
            members.insert(0, Member(MemberTag.HRES, float(hres)))
        return cls(site, window, tuple(members), source)

    @property
    def values(self) -> np.ndarray:
        return np.array([m.value for m in self.members], dtype=float)

    def tagged(self, tag: MemberTag) -> np.ndarray:
        return np.array([m.value for m in self.members if m.tag is tag], dtype=float)

    def as_distribution(self) -> "EmpiricalEnsemble":
        return EmpiricalEnsemble(self.values)


class ObservationSource(str, enum.Enum):
    GAUGE = "Gauge"
    SATELLITE = "Satellite"


@dataclass(frozen=True)
class Observation:
    site: Site
    window: AccumulationWindow
    amount: float
    source: ObservationSource = ObservationSource.GAUGE

    def __post_init__(self):
        limit = MAX_DAILY_PRECIP * self.window.length_days
        if not (math.isfinite(self.amount) and 0.0 <= self.amount <= limit):
            raise DataError(f"observation {self.amount} outside [0, {limit}]")


class PredictiveDistribution(ABC):
    """CDF on the nonnegative half line, possibly with a point mass at zero."""

    pop_threshold: float = POP_THRESHOLD

    @abstractmethod
    def cdf(self, x):
        """P(Y <= x); zero for x < 0."""

    def cdf_left(self, x):
        """Left limit P(Y < x)."""
        return self.cdf(np.nextafter(np.asarray(x, dtype=float), -np.inf))

    @property
    def prob_zero(self) -> float:
        return float(self.cdf(0.0))

    def pop(self) -> float:
        """Probability of the event ``Y >= pop_threshold``."""
        return float(1.0 - self.cdf_left(self.pop_threshold))

    def quantile(self, p: float) -> float:
        if not 0.0 < p < 1.0:
            raise ValueError(f"quantile level must be in (0, 1), got {p}")
        if p <= self.prob_zero:
            return 0.0
        return self._positive_quantile(p)

    def median(self) -> float:
        return self.quantile(0.5)

    def _positive_quantile(self, p: float) -> float:
        """Generalized inverse by bisection; returns the upper bracket."""
        hi = 1.0
        while self.cdf(hi) < p:
            hi *= 2.0
            if hi > 1e9:
                raise ValueError("quantile search diverged")
        lo = 0.0
        while hi - lo > 1e-13 * (1.0 + hi):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if self.cdf(mid) >= p:
                hi = mid
            else:
                lo = mid
        return hi


class EmpiricalEnsemble(PredictiveDistribution):
    """Empirical CDF of a finite set of members (raw ensemble or EPC)."""

    def __init__(self, members: Sequence[float], pop_threshold: float = POP_THRESHOLD):
        values = np.sort(np.asarray(members, dtype=float).ravel())
        if values.size == 0:
            raise DataError("empirical ensemble needs at least one member")
        if not np.all(np.isfinite(values)) or values[0] < 0:
            raise DataError("ensemble members must be finite and nonnegative")
        values.setflags(write=False)
        self.members = values
        self.pop_threshold = pop_threshold

    def __len__(self):
        return self.members.size

    def __repr__(self):
        return f"EmpiricalEnsemble(m={self.members.size})"

    def cdf(self, x):
        counts = np.searchsorted(self.members, x, side="right")
        out = counts / self.members.size
        return float(out) if np.ndim(out) == 0 else out

    def cdf_left(self, x):
        counts = np.searchsorted(self.members, x, side="left")
        out = counts / self.members.size
        return float(out) if np.ndim(out) == 0 else out

    def _positive_quantile(self, p):
        m = self.members.size
        k = max(1, math.ceil(p * m))
        while k > 1 and (k - 1) / m >= p:
            k -= 1
        while k / m < p:
            k += 1
        return float(self.members[k - 1])


Forecast = Union[PredictiveDistribution, EnsembleForecast]


@dataclass(frozen=True)
class ForecastCase:
    forecast: Forecast
    observation: Observation
    season: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        fc = self.forecast
        if isinstance(fc, EnsembleForecast):
            if fc.site.id != self.observation.site.id or fc.window != self.observation.window:
                raise DataError("forecast and observation must share site and window")

    @property
    def distribution(self) -> PredictiveDistribution:
        fc = self.forecast
        return fc.as_distribution() if isinstance(fc, EnsembleForecast) else fc


def as_distribution(forecast: Forecast) -> PredictiveDistribution:
    if isinstance(forecast, EnsembleForecast):
        return forecast.as_distribution()
    return forecast


def cdf(dist: Forecast, x):
    return as_distribution(dist).cdf(x)


def quantile(dist: Forecast, p: float) -> float:
    return as_distribution(dist).quantile(p)


def pop(dist: Forecast) -> float:
    return as_distribution(dist).pop()
