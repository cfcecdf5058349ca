"""Command-line interface.

Exit status: 0 on success, 2 on data errors, 3 on convergence failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bma import BmaParams, build_rmm, fit_bma_em, predict_bma
from .climatology import build_epc, write_epc_csv
from .core import AccumulationWindow, EnsembleForecast, Member, MemberTag, Site
from .emos import EmosParams, compute_predictors, fit_emos, predict_emos
from .errors import ConvergenceError, DataError
from .ingest import (
    FORECAST_HEADER,
    WINDOW_HEADER,
    GridSpec,
    StationSeries,
    aggregate_temporal,
    check_monotone,
    derive_window_forecast,
    format_time,
    lead_pair,
    nearest_neighbor,
    parse_time,
    quality_control,
    read_forecast_csv,
    read_grid,
    read_sites_csv,
    read_station_csv,
    read_window_csv,
    window_forecast_from_records,
    write_station_csv,
    write_window_csv,
)
from .pipeline import Dataset, PipelineConfig, rolling_train_predict, score_run
from .report import read_case_scores, write_case_scores, write_report
from .synthetic import generate_synthetic, monsoon_scenario, write_synthetic

log = logging.getLogger("ensprecip")

PAIRS_HEADER = ["station_id", "region", "valid_start", "length_days", "member_tag", "value_mm", "obs_mm"]


# ------------------------------------------------------------------- config


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    return json.loads(p.read_text())


def pipeline_config(args, cfg: dict) -> PipelineConfig:
    section = dict(cfg.get("pipeline", {}))
    section.setdefault("seed", args.seed)
    if getattr(args, "methods", None):
        section["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if getattr(args, "days", None):
        section["accumulation_days"] = args.days
    if getattr(args, "training_days", None):
        section["training_days"] = args.training_days
    try:
        return PipelineConfig.from_mapping(section)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid pipeline configuration: {exc}") from exc


# -------------------------------------------------------------- data loading


def _grid_of(lons, lats) -> GridSpec:
    return GridSpec.from_points(np.asarray(lons), np.asarray(lats))


def load_window_forecasts(paths: Sequence[Path], sites: dict, init_hour: int = 0) -> dict:
    """(site id, valid_start) -> 1-day EnsembleForecast from raw or window CSVs.

    Each site takes the forecast grid cell nearest to it.
    """
    out = {}
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
        if header == FORECAST_HEADER:
            records = read_forecast_csv(path)
            check_monotone(records)
            by_cell = defaultdict(lambda: defaultdict(list))
            for r in records:
                by_cell[(round(r.lon, 6), round(r.lat, 6))][(r.source, r.init_time)].append(r)
            cells = list(by_cell)
            grid = _grid_of([c[0] for c in cells], [c[1] for c in cells])
            for site in sites.values():
                ix, iy = nearest_neighbor(grid, site)
                key = (round(float(grid.lons[ix]), 6), round(float(grid.lats[iy]), 6))
                for (source, init), recs in sorted(by_cell.get(key, {}).items()):
                    lower, _ = lead_pair(init.hour, 1)
                    window = AccumulationWindow(init + timedelta(hours=lower), 1)
                    out[(site.id, window.valid_start)] = derive_window_forecast(recs, window, site)
        elif header == WINDOW_HEADER:
            rows = [r for r in read_window_csv(path) if r.length_days == 1]
            by_cell = defaultdict(lambda: defaultdict(list))
            for r in rows:
                by_cell[(round(r.lon, 6), round(r.lat, 6))][(r.source, r.valid_start)].append(r)
            cells = list(by_cell)
            grid = _grid_of([c[0] for c in cells], [c[1] for c in cells])
            for site in sites.values():
                ix, iy = nearest_neighbor(grid, site)
                key = (round(float(grid.lons[ix]), 6), round(float(grid.lats[iy]), 6))
                for (_, start), recs in sorted(by_cell.get(key, {}).items()):
                    out[(site.id, start)] = window_forecast_from_records(recs, site)
        else:
            raise DataError(f"{path}: unrecognized header {','.join(header)}")
    return out


def _forecast_files(path: str) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(q for q in p.glob("*.csv") if q.name not in ("sites.csv", "stations.csv"))
        if not files:
            raise DataError(f"no forecast CSV files in {p}")
        return files
    return [p]


def load_dataset(forecasts: str, stations: str, sites: str, init_hour: int = 0) -> Dataset:
    site_map = read_sites_csv(sites)
    obs = read_station_csv(stations)
    missing = sorted(set(site_map) - set(obs))
    if missing:
        log.warning("no observations for sites %s", ", ".join(missing))
    fc = load_window_forecasts(_forecast_files(forecasts), site_map, init_hour)
    return Dataset(site_map, obs, fc)


def write_pairs_csv(path, data: Dataset, days: int = 1) -> int:
    from .pipeline import aggregate_forecast

    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIRS_HEADER)
        for (sid, start) in sorted(data.forecasts):
            window = AccumulationWindow(start, days)
            f = aggregate_forecast(data.forecasts, sid, window)
            y = data.observation(sid, window) if f is not None else None
            if y is None:
                continue
            n += 1
            for m in f.members:
                w.writerow([sid, data.sites[sid].region.value, format_time(start), days,
                            m.label or m.tag.value, f"{m.value:.4f}", f"{y:.4f}"])
    return n


def read_pairs_csv(path) -> list[tuple[EnsembleForecast, float, str]]:
    """Training pairs as (forecast, observation, region), ordered by window start."""
    groups: dict = defaultdict(list)
    obs: dict = {}
    regions: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PAIRS_HEADER:
            raise DataError(f"{path}: expected header {','.join(PAIRS_HEADER)}")
        for row in reader:
            key = (row["valid_start"], row["station_id"], int(row["length_days"]))
            tag = row["member_tag"]
            label = tag if ":" in tag else None
            groups[key].append(Member(MemberTag.parse(tag.split(":")[-1]), float(row["value_mm"]), label))
            obs[key] = float(row["obs_mm"])
            regions[key] = row["region"]
    out = []
    for key in sorted(groups):
        start, sid, days = key
        site = Site(sid, 0.0, 0.0, regions[key])
        f = EnsembleForecast(site, AccumulationWindow(parse_time(start), days), tuple(groups[key]))
        out.append((f, obs[key], regions[key]))
    return out


def _select_training(pairs, region: Optional[str], window_days: int, end: Optional[str]):
    if region:
        pairs = [p for p in pairs if p[2] == region]
    if end:
        limit = parse_time(end)
        pairs = [p for p in pairs if p[0].window.valid_end <= limit]
    starts = sorted({p[0].window.valid_start for p in pairs})[-window_days:] if window_days else None
    if starts is not None:
        keep = set(starts)
        pairs = [p for p in pairs if p[0].window.valid_start in keep]
    if not pairs:
        raise DataError("no training pairs selected")
    return pairs


# ----------------------------------------------------------------- commands


def cmd_synth(args, cfg):
    section = dict(cfg.get("scenario", {}))
    for key in ("n_seasons", "sites_per_region", "dispersion", "bias", "correlation", "n_members"):
        val = getattr(args, key, None)
        if val is not None:
            section[key] = val
    if args.regions:
        section["regions"] = tuple(args.regions.split(","))
    section["seed"] = args.seed
    if "regions" in section:
        section["regions"] = tuple(section["regions"])
    try:
        scenario = monsoon_scenario(**section)
    except TypeError as exc:
        raise DataError(f"invalid scenario configuration: {exc}") from exc
    paths = write_synthetic(generate_synthetic(scenario), args.out)
    for name, p in paths.items():
        print(f"{name}: {p}")


def cmd_ingest(args, cfg):
    if not args.forecasts and not args.grids:
        raise DataError("ingest needs --forecasts and/or --grids")
    sites = read_sites_csv(args.sites)
    if args.grids:
        series = _grid_observations(args.grids, sites)
        out = Path(args.grid_out)
        write_station_csv(out, series)
        print(f"gridded observations: {out}")
    if args.forecasts:
        fc = load_window_forecasts(_forecast_files(args.forecasts), sites, args.init_hour)
        if args.out:
            write_window_csv(args.out, [fc[k] for k in sorted(fc)])
            print(f"window forecasts: {args.out} ({len(fc)} forecasts)")
        if args.stations and args.pairs_out:
            data = Dataset(sites, read_station_csv(args.stations), fc)
            n = write_pairs_csv(args.pairs_out, data, args.days)
            print(f"training pairs: {args.pairs_out} ({n} pairs)")
    if args.stations and args.qc_report:
        _write_qc(sites, read_station_csv(args.stations), None, args.qc_report)


def _grid_observations(grid_paths, sites) -> dict:
    """Daily 06-06 UTC totals at the grid cell nearest each site."""
    series: dict = defaultdict(dict)
    for gp in grid_paths:
        fld = read_grid(gp)
        cells = {sid: nearest_neighbor(fld.grid, s) for sid, s in sites.items()}
        start = fld.start_time
        first = datetime(start.year, start.month, start.day, 6, tzinfo=timezone.utc)
        if first < start:
            first += timedelta(days=1)
        end = fld.time(fld.values.shape[0] - 1)
        w = first
        while w + timedelta(days=1) <= end:
            window = AccumulationWindow(w, 1)
            try:
                totals = aggregate_temporal(fld, window)
            except DataError as exc:
                log.info("skipping %s: %s", w.date(), exc)
            else:
                for sid, (ix, iy) in cells.items():
                    series[sid][window.first_day] = float(totals[iy, ix])
            w += timedelta(days=1)
    return dict(series)


def _write_qc(sites, obs, seasons, path):
    reports = []
    for sid in sorted(obs):
        if sid not in sites:
            continue
        days = obs[sid]
        yrs = seasons or sorted({d.year for d in days})
        reports.append(quality_control(StationSeries(sites[sid], days), yrs).as_dict())
    Path(path).write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    n_pass = sum(r["passed"] for r in reports)
    print(f"QC: {n_pass} of {len(reports)} stations pass; report {path}")
    return reports


def _parse_seasons(text: Optional[str]) -> Optional[list[int]]:
    if not text:
        return None
    if "-" in text:
        a, b = text.split("-")
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in text.split(",")]


def cmd_qc(args, cfg):
    sites = read_sites_csv(args.sites)
    _write_qc(sites, read_station_csv(args.stations), _parse_seasons(args.seasons), args.out)


def cmd_epc(args, cfg):
    sites = read_sites_csv(args.sites)
    archive = read_station_csv(args.archive)
    first, last = date.fromisoformat(args.start), date.fromisoformat(args.end)
    ids = args.site.split(",") if args.site else sorted(sites)
    out = []
    for sid in ids:
        if sid not in sites:
            raise DataError(f"unknown site {sid}")
        d = first
        while d <= last:
            window = AccumulationWindow.ending_on(d + timedelta(days=args.days - 1), args.days)
            out.append(build_epc(archive.get(sid, {}), sites[sid], window, args.years, args.day_window))
            d += timedelta(days=1)
    write_epc_csv(args.out, out)
    print(f"EPC: {len(out)} forecasts written to {args.out}")


def cmd_fit(args, cfg):
    pairs = _select_training(read_pairs_csv(args.train), args.region, args.window_days, args.end)
    fcs = [p[0] for p in pairs]
    ys = [p[1] for p in pairs]
    if args.model == "emos":
        fit = fit_emos([compute_predictors(f) for f in fcs], ys)
        text = fit.params.to_json()
    else:
        if args.groups != "auto":
            keep = set(args.groups.split(","))
            fcs = [EnsembleForecast(f.site, f.window, tuple(m for m in f.members if m.group in keep), f.source)
                   for f in fcs]
        fit = fit_bma_em(fcs, ys)
        text = fit.params.to_json()
        if args.weights_out:
            with open(args.weights_out, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["group", "weight"])
                for g, wt in fit.params.weights.items():
                    w.writerow([g, f"{wt:.6f}"])
    Path(args.out).write_text(text + "\n")
    print(f"{args.model} parameters from {len(ys)} pairs: {args.out}")


def _load_params(path):
    d = json.loads(Path(path).read_text())
    if "weights" in d:
        return "bma", BmaParams.from_dict(d)
    return "emos", EmosParams.from_dict(d)


def cmd_predict(args, cfg):
    kind, params = _load_params(args.params)
    pairs = read_pairs_csv(args.forecasts)
    levels = (0.1, 0.25, 0.5, 0.75, 0.9)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "valid_start", "length_days", "method", "prob_zero", "pop"]
                   + [f"q{int(100 * q):02d}" for q in levels])
        for f, _, _ in pairs:
            dist = predict_emos(params, compute_predictors(f)) if kind == "emos" else predict_bma(params, f)
            w.writerow([f.site.id, format_time(f.window.valid_start), f.window.length_days, kind,
                        f"{dist.prob_zero:.6f}", f"{dist.pop():.6f}"]
                       + [f"{dist.quantile(q):.4f}" for q in levels])
    print(f"{len(pairs)} {kind} predictions: {args.out}")


def cmd_rmm(args, cfg):
    files = _forecast_files(args.inputs)
    keyed: dict = defaultdict(list)
    sources = set()
    for path in files:
        rows = read_window_csv(path)
        by_key = defaultdict(list)
        for r in rows:
            by_key[(r.valid_start, r.length_days, round(r.lon, 6), round(r.lat, 6), r.source)].append(r)
        for (start, days, lon, lat, source), recs in by_key.items():
            site = Site(f"{lon:.4f}_{lat:.4f}", lon, lat)
            keyed[(start, days, lon, lat)].append(window_forecast_from_records(recs, site))
            sources.add(source)
    out = []
    for key in sorted(keyed):
        subs = sorted(keyed[key], key=lambda f: f.source)
        if len(subs) != len(sources):
            log.info("skipping %s: %d of %d sources", key, len(subs), len(sources))
            continue
        out.append(build_rmm(subs, args.hres_source))
    if not out:
        raise DataError("no window is covered by every sub-ensemble")
    write_window_csv(args.out, out)
    print(f"RMM: {len(out)} forecasts with {len(out[0].members)} members: {args.out}")


def cmd_verify(args, cfg):
    config = pipeline_config(args, cfg)
    data = load_dataset(args.forecasts, args.obs, args.sites, config.init_hour)
    run = rolling_train_predict(config, data, jobs=args.jobs)
    report = score_run(run)
    if not report.records:
        raise DataError("no verification cases (training windows never filled)")
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    scores_path = out.with_name(out.stem + "_cases.csv")
    write_case_scores(report, scores_path)
    outdir = Path(args.diagrams) if args.diagrams else out.parent
    written = write_report(report, outdir, seed=config.seed, diagrams=bool(args.diagrams))
    summary = json.loads((outdir / "report.json").read_text())
    summary["skipped"] = len(run.skipped)
    summary["config"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(config).items()}
    out.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print((outdir / "scores.txt").read_text(), end="")
    print(f"report: {out}; case scores: {scores_path}; {len(written)} files in {outdir}")


def cmd_report(args, cfg):
    report = read_case_scores(args.scores)
    written = write_report(report, args.out, reference=args.reference, seed=args.seed)
    print((Path(args.out) / "scores.txt").read_text(), end="")
    print(f"{len(written)} files in {args.out}")


def cmd_consistency(args, cfg):
    """Two-dimensional histogram of paired daily totals from two station-format files."""
    a, b = read_station_csv(args.x), read_station_csv(args.y)
    xs, ys = [], []
    for sid in sorted(set(a) & set(b)):
        for d in sorted(set(a[sid]) & set(b[sid])):
            xs.append(a[sid][d])
            ys.append(b[sid][d])
    if not xs:
        raise DataError("no matching station-days")
    edges = np.array([float(e) for e in args.edges.split(",")])
    xs_c = np.clip(xs, edges[0], edges[-1])
    ys_c = np.clip(ys, edges[0], edges[-1])
    hist, _, _ = np.histogram2d(xs_c, ys_c, bins=[edges, edges])
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_lower", "x_upper", "y_lower", "y_upper", "count"])
        for i in range(len(edges) - 1):
            for j in range(len(edges) - 1):
                w.writerow([edges[i], edges[i + 1], edges[j], edges[j + 1], int(hist[i, j])])
    print(f"{len(xs)} paired days binned: {args.out}")


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ensprecip", description="Ensemble precipitation postprocessing and verification")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--config", help="TOML or JSON file with [pipeline] and [scenario] sections")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (regions run in parallel)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the synthetic monsoon scenario (options override its defaults)")
    s.add_argument("--out", required=True)
    s.add_argument("--n-seasons", dest="n_seasons", type=int)
    s.add_argument("--sites-per-region", dest="sites_per_region", type=int)
    s.add_argument("--regions", help="comma-separated region names")
    s.add_argument("--members", dest="n_members", type=int)
    s.add_argument("--dispersion", type=float)
    s.add_argument("--bias", type=float)
    s.add_argument("--correlation", type=float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="derive window forecasts, gridded observations and QC")
    s.add_argument("--forecasts", help="raw forecast CSV or directory")
    s.add_argument("--stations", help="station CSV")
    s.add_argument("--sites", required=True, help="sites CSV")
    s.add_argument("--grids", nargs="*", help=".grd.csv gridded observation files")
    s.add_argument("--grid-out", default="gridded_obs.csv", help="station-format output for --grids")
    s.add_argument("--qc-report", help="QC report JSON path")
    s.add_argument("--out", help="window forecast CSV")
    s.add_argument("--pairs-out", help="training pairs CSV (needs --stations)")
    s.add_argument("--days", type=int, default=1, help="accumulation days for --pairs-out")
    s.add_argument("--init-hour", type=int, default=0)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("qc", help="station quality control")
    s.add_argument("--stations", required=True)
    s.add_argument("--sites", required=True)
    s.add_argument("--seasons", help="e.g. 2007-2014 or 2007,2009")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_qc)

    s = sub.add_parser("epc", help="extended probabilistic climatology")
    s.add_argument("--archive", required=True, help="station CSV")
    s.add_argument("--sites", required=True)
    s.add_argument("--site", help="comma-separated site ids (default all)")
    s.add_argument("--start", required=True, help="first observation day (YYYY-MM-DD)")
    s.add_argument("--end", required=True, help="last observation day")
    s.add_argument("--days", type=int, default=1)
    s.add_argument("--years", type=int, default=30)
    s.add_argument("--day-window", dest="day_window", type=int, default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_epc)

    s = sub.add_parser("fit", help="fit EMOS or BMA on training pairs")
    s.add_argument("model", choices=("emos", "bma"))
    s.add_argument("--train", required=True, help="pairs CSV")
    s.add_argument("--region")
    s.add_argument("--window-days", dest="window_days", type=int, default=20)
    s.add_argument("--end", help="use windows ending no later than this time")
    s.add_argument("--groups", default="auto", help="BMA member groups, 'auto' or comma list")
    s.add_argument("--weights-out", dest="weights_out")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", help="predictive quantiles from fitted parameters")
    s.add_argument("--params", required=True)
    s.add_argument("--forecasts", required=True, help="pairs CSV")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("rmm", help="reduced multi-model ensemble from sub-ensemble window CSVs")
    s.add_argument("--inputs", required=True)
    s.add_argument("--hres-source", dest="hres_source", default="ECMWF")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rmm)

    s = sub.add_parser("verify", help="rolling training, prediction and verification")
    s.add_argument("--forecasts", required=True, help="forecast CSV or directory")
    s.add_argument("--obs", required=True, help="station CSV")
    s.add_argument("--sites", required=True)
    s.add_argument("--methods", default="raw,epc,emos,bma")
    s.add_argument("--days", type=int)
    s.add_argument("--training-days", dest="training_days", type=int)
    s.add_argument("--report", required=True, help="report JSON path")
    s.add_argument("--diagrams", help="directory for tables and diagrams")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("report", help="tables and diagrams from per-case scores")
    s.add_argument("--scores", required=True, help="case score CSV written by verify")
    s.add_argument("--reference", default="epc")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("consistency", help="2-D histogram of paired daily totals")
    s.add_argument("--x", required=True, help="station-format CSV")
    s.add_argument("--y", required=True, help="station-format CSV")
    s.add_argument("--edges", default="0,0.2,1,2,5,10,20,50,100,1825")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_consistency)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
