"""Extended probabilistic climatology (EPC) benchmark."""

from __future__ import annotations

import calendar
import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Iterable, Mapping, Optional

import numpy as np

from .core import AccumulationWindow, EmpiricalEnsemble, Site
from .errors import InsufficientHistoryError

EPC_HEADER = ["station_id", "valid_start", "length_days", "value_mm"]


@dataclass(frozen=True)
class EpcForecast:
    site: Site
    window: AccumulationWindow
    members: tuple
    history_years: Optional[int]
    day_window: int
    n_dropped: int = 0  # candidate sums lost to missing days

    def __post_init__(self):
        if any(m < 0 for m in self.members):
            raise ValueError("EPC members must be nonnegative")

    def as_distribution(self) -> EmpiricalEnsemble:
        return EmpiricalEnsemble(self.members)


def _daily(archive) -> Mapping:
    return archive.days if hasattr(archive, "days") else archive


def _same_day(year: int, month: int, day: int) -> Optional[date]:
    if month == 2 and day == 29 and not calendar.isleap(year):
        return None
    return date(year, month, day)


def build_epc(
    archive,
    site: Site,
    window: AccumulationWindow,
    history_years: Optional[int] = 30,
    day_window: int = 2,
) -> EpcForecast:
    """Historical k-day totals starting within ``day_window`` days of the window's calendar day.

    ``archive`` is a StationSeries or a plain ``{date: mm}`` mapping. With
    ``history_years`` set, only the preceding years are used; with ``None``
    every archived year except the verification year contributes (the
    satellite-period convention). Sums that touch the verification year or a
    missing day are dropped.
    """
    if day_window < 0:
        raise ValueError("day_window must be >= 0")
    days = _daily(archive)
    target = window.first_day
    year = target.year
    k = window.length_days
    if history_years is None:
        years = sorted({d.year for d in days} - {year})
    else:
        if history_years < 1:
            raise ValueError("history_years must be >= 1")
        years = list(range(year - history_years, year))
    members, dropped = [], 0
    for y in years:
        center = _same_day(y, target.month, target.day)
        if center is None:
            continue
        for off in range(-day_window, day_window + 1):
            start = center + timedelta(days=off)
            span = [start + timedelta(days=j) for j in range(k)]
            if any(d.year == year for d in span):
                dropped += 1
                continue
            vals = [days.get(d) for d in span]
            if any(v is None or not math.isfinite(v) for v in vals):
                dropped += 1
                continue
            members.append(float(sum(vals)))
    if not members:
        raise InsufficientHistoryError(f"no historical observations for {site.id} around {target.isoformat()}")
    return EpcForecast(site, window, tuple(members), history_years, day_window, dropped)


def epc_as_distribution(epc: EpcForecast) -> EmpiricalEnsemble:
    return epc.as_distribution()


def write_epc_csv(path, forecasts: Iterable[EpcForecast]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPC_HEADER)
        for f in forecasts:
            start = f.window.valid_start.strftime("%Y-%m-%dT%H:%M:%SZ")
            for m in f.members:
                w.writerow([f.site.id, start, f.window.length_days, f"{m:.4f}"])


def read_epc_csv(path) -> dict:
    """(station_id, valid_start iso, length_days) -> member array."""
    out = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[(row["station_id"], row["valid_start"], int(row["length_days"]))].append(float(row["value_mm"]))
    return {k: np.asarray(v) for k, v in out.items()}
