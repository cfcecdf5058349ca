"""Reading forecasts and observations, preprocessing, and quality control.

File formats
------------
forecast CSV     ``source,init_time,lead_hours,lon,lat,member_tag,accum_mm``
                 (accumulation from initialization to lead)
window CSV       ``source,valid_start,length_days,lon,lat,member_tag,value_mm``
                 (already differenced window totals, e.g. RMM output)
station CSV      ``station_id,date,precip_mm`` (date = day ending 06 UTC)
sites CSV        ``station_id,lon,lat,region``
gridded field    ``<name>.grd.csv`` with ``step,iy,ix,precip_mm`` plus a
                 ``<name>.grd.json`` sidecar holding ``origin_lon, origin_lat,
                 dlon, dlat, nx, ny, step_hours, start_time``. The origin is
                 the center of cell (0, 0).
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import (
    MAX_DAILY_PRECIP,
    AccumulationWindow,
    EnsembleForecast,
    Member,
    MemberTag,
    Region,
    Site,
)
from .errors import (
    DataError,
    EmptyBoxError,
    GapError,
    InconsistentAccumulationError,
    MissingLeadError,
    OutOfDomainError,
)

FORECAST_HEADER = ["source", "init_time", "lead_hours", "lon", "lat", "member_tag", "accum_mm"]
WINDOW_HEADER = ["source", "valid_start", "length_days", "lon", "lat", "member_tag", "value_mm"]
STATION_HEADER = ["station_id", "date", "precip_mm"]
SITES_HEADER = ["station_id", "lon", "lat", "region"]
GRID_HEADER = ["step", "iy", "ix", "precip_mm"]
NEGATIVE_TOLERANCE = 0.05  # mm of accumulation-difference noise floored to zero
SEASON_START = (5, 1)
SEASON_END = (10, 15)


def parse_time(text: str) -> datetime:
    t = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    return t if t.tzinfo else t.replace(tzinfo=timezone.utc)


def format_time(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# ------------------------------------------------------------------ forecasts


@dataclass(frozen=True)
class RawForecastRecord:
    source: str
    init_time: datetime
    lead_hours: int
    lon: float
    lat: float
    member_tag: str
    accumulated_value: float

    def __post_init__(self):
        if self.lead_hours <= 0:
            raise DataError(f"lead_hours must be positive, got {self.lead_hours}")
        if not (math.isfinite(self.accumulated_value) and self.accumulated_value >= 0):
            raise DataError(f"invalid accumulation {self.accumulated_value}")


def lead_pair(init_hour: int, length_days: int) -> tuple[int, int]:
    """Lead hours bracketing a 06-06 UTC window of ``length_days``.

    00 UTC runs use (6, 30), 12 UTC runs (18, 42), 06 UTC runs (0, 24); the
    upper lead grows by 24 h per extra day.
    """
    lower = (6 - init_hour) % 24
    return lower, lower + 24 * length_days


def _member_key(tag: str):
    return tag.strip()


def check_monotone(records: Iterable[RawForecastRecord]) -> None:
    """Accumulations must not decrease with lead for a fixed member."""
    series = defaultdict(list)
    for r in records:
        series[(r.source, r.init_time, r.lon, r.lat, r.member_tag)].append((r.lead_hours, r.accumulated_value))
    for key, vals in series.items():
        vals.sort()
        for (l0, v0), (l1, v1) in zip(vals, vals[1:]):
            if v1 < v0 - NEGATIVE_TOLERANCE:
                raise InconsistentAccumulationError(f"{key}: accumulation drops from {v0} at {l0} h to {v1} at {l1} h")


def derive_window_forecast(
    records: Sequence[RawForecastRecord],
    window: AccumulationWindow,
    site: Site,
    init_policy: Callable[[int, int], tuple[int, int]] = lead_pair,
) -> EnsembleForecast:
    """Window totals as differences of accumulations from one run.

    Chooses the run whose lower lead lands on the window start. Differences
    down to -0.05 mm are treated as encoding noise and floored at zero.
    """
    if not records:
        raise MissingLeadError("no forecast records")
    runs = sorted({r.init_time for r in records}, reverse=True)
    chosen = None
    for init in runs:
        lower, upper = init_policy(init.hour, window.length_days)
        if init + timedelta(hours=lower) == window.valid_start:
            chosen = (init, lower, upper)
            break
    if chosen is None:
        raise MissingLeadError(f"no run whose lead pair covers window starting {window.valid_start.isoformat()}")
    init, lower, upper = chosen
    by_member: dict = defaultdict(dict)
    sources = set()
    for r in records:
        if r.init_time == init:
            by_member[_member_key(r.member_tag)][r.lead_hours] = r.accumulated_value
            sources.add(r.source)
    members = []
    for tag, leads in by_member.items():
        if upper not in leads or (lower > 0 and lower not in leads):
            raise MissingLeadError(f"member {tag}: need leads {lower} and {upper} h, have {sorted(leads)}")
        diff = leads[upper] - (leads[lower] if lower > 0 else 0.0)
        if diff < -NEGATIVE_TOLERANCE:
            raise InconsistentAccumulationError(f"member {tag}: negative window total {diff:.3f} mm")
        members.append((tag, max(diff, 0.0)))
    members.sort(key=lambda t: (MemberTag.parse(t[0]).value != "HRES", MemberTag.parse(t[0]).value != "CNT", t[0]))
    built = tuple(Member(MemberTag.parse(tag), v) for tag, v in members)
    return EnsembleForecast(site, window, built, source=sorted(sources)[0])


def read_forecast_csv(path) -> list[RawForecastRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FORECAST_HEADER:
            raise DataError(f"{path}: expected header {','.join(FORECAST_HEADER)}")
        for row in reader:
            out.append(RawForecastRecord(
                row["source"], parse_time(row["init_time"]), int(row["lead_hours"]),
                float(row["lon"]), float(row["lat"]), row["member_tag"], float(row["accum_mm"]),
            ))
    return out


def write_forecast_csv(path, records: Iterable[RawForecastRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FORECAST_HEADER)
        for r in records:
            w.writerow([r.source, format_time(r.init_time), r.lead_hours, f"{r.lon:.4f}", f"{r.lat:.4f}",
                        r.member_tag, f"{r.accumulated_value:.4f}"])


@dataclass(frozen=True)
class WindowRecord:
    source: str
    valid_start: datetime
    length_days: int
    lon: float
    lat: float
    member_tag: str
    value: float


def read_window_csv(path) -> list[WindowRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != WINDOW_HEADER:
            raise DataError(f"{path}: expected header {','.join(WINDOW_HEADER)}")
        for row in reader:
            v = float(row["value_mm"])
            if not (math.isfinite(v) and v >= 0):
                raise DataError(f"{path}: invalid value {v}")
            out.append(WindowRecord(row["source"], parse_time(row["valid_start"]), int(row["length_days"]),
                                    float(row["lon"]), float(row["lat"]), row["member_tag"], v))
    return out


def write_window_csv(path, forecasts: Iterable[EnsembleForecast], points: Optional[Mapping] = None) -> None:
    """Write window forecasts; ``points`` maps site id to (lon, lat) of the grid cell."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WINDOW_HEADER)
        for f in forecasts:
            lon, lat = points[f.site.id] if points else (f.site.longitude, f.site.latitude)
            for m in f.members:
                w.writerow([f.source, format_time(f.window.valid_start), f.window.length_days,
                            f"{lon:.4f}", f"{lat:.4f}", m.label or m.tag.value, f"{m.value:.4f}"])


def window_forecast_from_records(records: Sequence[WindowRecord], site: Site) -> EnsembleForecast:
    first = records[0]
    members = []
    for r in records:
        tag = MemberTag.parse(r.member_tag.split(":")[-1])
        label = r.member_tag if ":" in r.member_tag else None
        members.append(Member(tag, r.value, label))
    return EnsembleForecast(site, AccumulationWindow(first.valid_start, first.length_days), tuple(members), first.source)


# ----------------------------------------------------------------------- grid


@dataclass(frozen=True)
class GridSpec:
    origin_lon: float
    origin_lat: float
    dlon: float
    dlat: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.dlon <= 0 or self.dlat <= 0:
            raise DataError("grid resolution must be positive")
        if self.nx < 1 or self.ny < 1:
            raise DataError("grid needs at least one cell")

    @property
    def lons(self) -> np.ndarray:
        return self.origin_lon + self.dlon * np.arange(self.nx)

    @property
    def lats(self) -> np.ndarray:
        return self.origin_lat + self.dlat * np.arange(self.ny)

    def contains(self, lon: float, lat: float) -> bool:
        eps = 1e-9
        return (
            self.origin_lon - self.dlon / 2 - eps <= lon <= self.origin_lon + (self.nx - 0.5) * self.dlon + eps
            and self.origin_lat - self.dlat / 2 - eps <= lat <= self.origin_lat + (self.ny - 0.5) * self.dlat + eps
        )

    @classmethod
    def from_points(cls, lons: Sequence[float], lats: Sequence[float]) -> "GridSpec":
        """Smallest regular grid whose cell centers include the given points."""
        ulon, ulat = np.unique(np.round(lons, 6)), np.unique(np.round(lats, 6))

        def step(u):
            if u.size < 2:
                return 1.0
            d = np.diff(u)
            return float(np.min(d))

        dlon, dlat = step(ulon), step(ulat)
        nx = int(round((ulon[-1] - ulon[0]) / dlon)) + 1
        ny = int(round((ulat[-1] - ulat[0]) / dlat)) + 1
        return cls(float(ulon[0]), float(ulat[0]), dlon, dlat, nx, ny)


def nearest_neighbor(grid: GridSpec, site: Site) -> tuple[int, int]:
    """Index (ix, iy) of the grid cell whose center is nearest to the site.

    On a regular grid the Euclidean nearest center is the per-axis nearest
    center. Equidistant candidates resolve to the smaller index.
    """
    if not grid.contains(site.longitude, site.latitude):
        raise OutOfDomainError(f"site {site.id} at ({site.longitude}, {site.latitude}) outside grid")
    ix = int(np.argmin(np.abs(grid.lons - site.longitude)))
    iy = int(np.argmin(np.abs(grid.lats - site.latitude)))
    return ix, iy


@dataclass(frozen=True)
class GriddedField:
    grid: GridSpec
    step_hours: int
    start_time: datetime
    values: np.ndarray  # (n_steps, ny, nx), mm per step, NaN = missing

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[1:] != (self.grid.ny, self.grid.nx):
            raise DataError(f"field shape {v.shape} does not match grid {self.grid.ny}x{self.grid.nx}")
        if np.any(v[np.isfinite(v)] < 0):
            raise DataError("gridded values must be nonnegative")
        object.__setattr__(self, "values", v)

    def time(self, step: int) -> datetime:
        return self.start_time + timedelta(hours=self.step_hours * step)


def aggregate_temporal(field: GriddedField, window: AccumulationWindow) -> np.ndarray:
    """Window total per cell from time-stamped step values.

    Steps stamped at the window start and end each get weight 0.5, all steps
    strictly inside get weight 1, matching the 06-06 UTC gauge day.
    """
    span = (window.valid_end - window.valid_start).total_seconds() / 3600.0
    if span % field.step_hours:
        raise DataError("step length does not divide the window")
    offset = (window.valid_start - field.start_time).total_seconds() / 3600.0
    if offset % field.step_hours:
        raise DataError("window start is not on a step boundary")
    first = int(offset // field.step_hours)
    n = int(span // field.step_hours) + 1
    steps = np.arange(first, first + n)
    missing = [format_time(field.time(int(s))) for s in steps
               if s < 0 or s >= field.values.shape[0] or not np.all(np.isfinite(field.values[s]))]
    if missing:
        raise GapError(f"{len(missing)} missing steps in window", missing)
    block = field.values[steps]
    weights = np.ones(n)
    weights[0] = weights[-1] = 0.5
    return np.tensordot(weights, block, axes=1)


def aggregate_spatial(values: np.ndarray, grid: GridSpec, box: tuple[float, float, float, float]) -> np.ndarray:
    """Areal mean over the cells of an aligned box ``(lon_min, lat_min, width, height)``.

    ``values`` has the grid in its last two axes (ny, nx).
    """
    lon0, lat0, width, height = box
    tol = 1e-6
    for edge, origin, d in ((lon0, grid.origin_lon, grid.dlon), (lon0 + width, grid.origin_lon, grid.dlon),
                            (lat0, grid.origin_lat, grid.dlat), (lat0 + height, grid.origin_lat, grid.dlat)):
        k = (edge - (origin - d / 2)) / d
        if abs(k - round(k)) > tol:
            raise DataError(f"box edge {edge} is not aligned to the grid")
    inx = (grid.lons > lon0) & (grid.lons < lon0 + width)
    iny = (grid.lats > lat0) & (grid.lats < lat0 + height)
    if not inx.any() or not iny.any():
        raise EmptyBoxError(f"box {box} contains no grid cells")
    sub = np.asarray(values, dtype=float)[..., iny, :][..., inx]
    return sub.mean(axis=(-2, -1))


def read_grid(csv_path) -> GriddedField:
    csv_path = Path(csv_path)
    meta_path = csv_path.with_name(csv_path.name.replace(".grd.csv", ".grd.json"))
    meta = json.loads(meta_path.read_text())
    grid = GridSpec(meta["origin_lon"], meta["origin_lat"], meta["dlon"], meta["dlat"], meta["nx"], meta["ny"])
    rows = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    n_steps = int(rows[:, 0].max()) + 1 if rows.size else 0
    values = np.full((n_steps, grid.ny, grid.nx), np.nan)
    values[rows[:, 0].astype(int), rows[:, 1].astype(int), rows[:, 2].astype(int)] = rows[:, 3]
    return GriddedField(grid, int(meta["step_hours"]), parse_time(meta["start_time"]), values)


def write_grid(csv_path, field: GriddedField) -> None:
    csv_path = Path(csv_path)
    g = field.grid
    meta = {"origin_lon": g.origin_lon, "origin_lat": g.origin_lat, "dlon": g.dlon, "dlat": g.dlat,
            "nx": g.nx, "ny": g.ny, "step_hours": field.step_hours, "start_time": format_time(field.start_time)}
    csv_path.with_name(csv_path.name.replace(".grd.csv", ".grd.json")).write_text(json.dumps(meta, indent=2))
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_HEADER)
        for s, iy, ix in zip(*np.nonzero(np.isfinite(field.values))):
            w.writerow([s, iy, ix, f"{field.values[s, iy, ix]:.4f}"])


# ------------------------------------------------------------------- stations


def monsoon_days(year: int) -> list[date]:
    start = date(year, *SEASON_START)
    end = date(year, *SEASON_END)
    return [start + timedelta(days=k) for k in range((end - start).days + 1)]


@dataclass
class StationSeries:
    site: Site
    days: dict = field(default_factory=dict)  # date -> mm; absent = missing

    def availability(self, year: int) -> float:
        season = monsoon_days(year)
        have = sum(1 for d in season if d in self.days and math.isfinite(self.days[d]))
        return have / len(season)

    def values(self) -> np.ndarray:
        """Finite values in date order, so summaries do not depend on insertion order."""
        return np.array([self.days[d] for d in sorted(self.days) if math.isfinite(self.days[d])], dtype=float)

    def window_total(self, first_day: date, length_days: int) -> Optional[float]:
        total = 0.0
        for k in range(length_days):
            v = self.days.get(first_day + timedelta(days=k))
            if v is None or not math.isfinite(v):
                return None
            total += v
        return total


def read_station_csv(path) -> dict:
    """station id -> {date: mm}."""
    out: dict = defaultdict(dict)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != STATION_HEADER:
            raise DataError(f"{path}: expected header {','.join(STATION_HEADER)}")
        for row in reader:
            text = row["precip_mm"].strip()
            if text == "" or text.lower() == "nan":
                continue
            v = float(text)
            if v < 0:
                raise DataError(f"{path}: negative precipitation {v} at {row['station_id']} {row['date']}")
            out[row["station_id"]][date.fromisoformat(row["date"])] = v
    return dict(out)


def write_station_csv(path, series: Mapping) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATION_HEADER)
        for sid in sorted(series):
            for d in sorted(series[sid]):
                w.writerow([sid, d.isoformat(), f"{series[sid][d]:.1f}"])


def read_sites_csv(path) -> dict:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SITES_HEADER:
            raise DataError(f"{path}: expected header {','.join(SITES_HEADER)}")
        for row in reader:
            out[row["station_id"]] = Site(row["station_id"], float(row["lon"]), float(row["lat"]), Region(row["region"]))
    return out


def write_sites_csv(path, sites: Iterable[Site]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SITES_HEADER)
        for s in sites:
            w.writerow([s.id, f"{s.longitude:.4f}", f"{s.latitude:.4f}", s.region.value])


# ------------------------------------------------------------------------- QC


@dataclass(frozen=True)
class QcReport:
    station_id: str
    range_ok: bool
    availability_ok: bool
    skewness_ok: bool
    point_mass_ok: bool
    availability: dict
    median: float
    mean: float

    @property
    def passed(self) -> bool:
        return self.range_ok and self.availability_ok and self.skewness_ok and self.point_mass_ok

    def as_dict(self) -> dict:
        return {
            "station_id": self.station_id, "passed": self.passed, "range": self.range_ok,
            "availability": self.availability_ok, "skewness": self.skewness_ok,
            "point_mass": self.point_mass_ok,
            "season_availability": {str(k): round(v, 4) for k, v in self.availability.items()},
            "median": self.median, "mean": self.mean,
        }


def quality_control(series: StationSeries, seasons: Sequence[int], min_availability: float = 0.8) -> QcReport:
    """Range, seasonal availability, right-skewness and dry-day tests."""
    v = series.values()
    range_ok = bool(v.size == 0 or (v.min() >= 0 and v.max() <= MAX_DAILY_PRECIP))
    avail = {int(y): series.availability(y) for y in sorted(seasons)}
    availability_ok = all(a >= min_availability for a in avail.values())
    med = float(np.median(v)) if v.size else float("nan")
    mean = float(np.mean(v)) if v.size else float("nan")
    skew_ok = bool(v.size > 0 and med < mean)
    point_mass_ok = bool(np.any(v == 0))
    return QcReport(series.site.id, range_ok, availability_ok, skew_ok, point_mass_ok, avail, med, mean)
