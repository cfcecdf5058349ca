"""Score tables, skill series and diagnostic diagrams written to disk.

Figures are static SVG files rendered with matplotlib's object API (no pyplot
state), with a fixed hash salt and no timestamp so identical inputs give
byte-identical files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .errors import DataError
from .verify import (
    HISTOGRAM_CUT,
    UPIT_BINS,
    ScoreReport,
    murphy_curve,
    reliability,
    upit_histogram,
    uniformity_pvalue,
)

SCORES = ("bs", "crps", "ae")
SCORE_LABELS = {"bs": "BS", "crps": "CRPS", "ae": "MAE"}
METHOD_LABELS = {"raw": "Raw ensemble", "epc": "EPC", "emos": "EMOS", "bma": "BMA"}

matplotlib.rcParams["svg.hashsalt"] = "ensprecip"


def _save(fig: Figure, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


@dataclass(frozen=True)
class TableRow:
    region: str
    method: str
    n: int
    means: dict  # score -> mean
    skill: dict  # score -> skill vs reference
    marks: dict  # score -> stability mark
    p_values: dict


def score_table(report: ScoreReport, reference: str = "epc", regions: Optional[Sequence[str]] = None) -> list[TableRow]:
    rows = []
    for region in regions or report.regions():
        for method in report.methods():
            recs = report.select(method=method, region=region)
            if not recs:
                continue
            means = {s: report.mean(s, method=method, region=region) for s in SCORES}
            if reference in report.methods():
                stab = {s: report.stability(s, method, reference, region=region) for s in SCORES}
                skill = {s: stab[s].skill for s in SCORES}
                marks = {s: stab[s].mark for s in SCORES}
                pvals = {s: stab[s].p_value for s in SCORES}
            else:
                skill = {s: float("nan") for s in SCORES}
                marks = {s: "" for s in SCORES}
                pvals = dict(skill)
            rows.append(TableRow(region, method, len(recs), means, skill, marks, pvals))
    return rows


def write_table_csv(rows: Sequence[TableRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "method", "n"]
                   + [f"mean_{s}" for s in SCORES] + [f"skill_{s}" for s in SCORES]
                   + [f"mark_{s}" for s in SCORES] + [f"p_{s}" for s in SCORES])
        for r in rows:
            w.writerow([r.region, r.method, r.n]
                       + [f"{r.means[s]:.6f}" for s in SCORES] + [f"{r.skill[s]:.6f}" for s in SCORES]
                       + [r.marks[s] for s in SCORES] + [f"{r.p_values[s]:.6f}" for s in SCORES])


def format_table(rows: Sequence[TableRow]) -> str:
    """Aligned plain-text table: mean score with its stability mark, per region."""
    header = ["Region", "Method", "n"] + [SCORE_LABELS[s] for s in SCORES] + [f"skill {SCORE_LABELS[s]}" for s in SCORES]
    body = []
    for r in rows:
        body.append([r.region, METHOD_LABELS.get(r.method, r.method), str(r.n)]
                    + [f"{r.means[s]:.3f} {r.marks[s]:<2}".rstrip() for s in SCORES]
                    + [f"{r.skill[s]:+.3f}" for s in SCORES])
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for line in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip())
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------- skill series


def skill_series(report: ScoreReport, score: str, method: str, reference: str = "epc", region=None) -> dict:
    """Per-season skill 1 - S/S_ref."""
    stab = report.stability(score, method, reference, region=region)
    return stab.season_skill


def write_skill_series(report: ScoreReport, outdir: Path, reference: str = "epc") -> list[Path]:
    methods = [m for m in report.methods() if m != reference]
    written = []
    csv_path = outdir / "skill_series.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "method", "score", "season", "skill"])
        for region in report.regions():
            for m in methods:
                for s in SCORES:
                    for season, val in sorted(skill_series(report, s, m, reference, region).items()):
                        w.writerow([region, m, s, season, f"{val:.6f}"])
    written.append(csv_path)
    for region in report.regions():
        fig = Figure(figsize=(9, 3))
        axes = fig.subplots(1, len(SCORES), sharex=True)
        for ax, s in zip(axes, SCORES):
            for m in methods:
                ser = skill_series(report, s, m, reference, region)
                seasons = sorted(ser)
                ax.plot(seasons, [ser[k] for k in seasons], marker="o", ms=3, lw=1, label=METHOD_LABELS.get(m, m))
            ax.axhline(0.0, color="k", ls="--", lw=0.8)
            ax.set_title(f"{SCORE_LABELS[s]} skill")
            ax.set_xlabel("season")
        axes[0].legend(fontsize=7, frameon=False)
        fig.suptitle(region)
        fig.tight_layout()
        path = outdir / f"skill_{region}.svg"
        _save(fig, path)
        written.append(path)
    return written


# ------------------------------------------------------------------ diagrams


def _upit_figure(hist, title: str) -> Figure:
    fig = Figure(figsize=(3.2, 2.6))
    ax = fig.subplots()
    heights = np.minimum(hist.heights, HISTOGRAM_CUT)
    ax.bar(hist.edges[:-1], heights, width=np.diff(hist.edges), align="edge", color="0.6", edgecolor="0.2", lw=0.5)
    ax.axhline(1.0, color="k", ls=":", lw=0.8)
    ax.set_ylim(0, HISTOGRAM_CUT)
    ax.set_xlim(0, 1)
    ax.set_title(title, fontsize=9)
    ax.set_xlabel("uPIT")
    fig.tight_layout()
    return fig


def _reliability_figure(diag, title: str) -> Figure:
    fig = Figure(figsize=(3.2, 3.2))
    ax = fig.subplots()
    used = [b for b in diag.bins if b.count > 0]
    ax.plot([0, 1], [0, 1], color="k", lw=0.8)
    ax.plot([b.mean_forecast for b in used], [b.observed_frequency for b in used], marker="o", ms=3, lw=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("forecast probability")
    ax.set_ylabel("observed frequency")
    ax.set_title(title, fontsize=9)
    inset = ax.inset_axes([0.08, 0.62, 0.32, 0.3])
    freq = diag.forecast_frequencies
    inset.bar(np.arange(len(freq)), freq, color="0.6", width=0.9)
    inset.set_xticks([])
    inset.tick_params(labelsize=6)
    fig.tight_layout()
    return fig


def _murphy_figure(curves: dict, title: str) -> Figure:
    fig = Figure(figsize=(3.6, 2.8))
    ax = fig.subplots()
    for label, mc in curves.items():
        ax.plot(mc.thetas, mc.values, lw=1, label=label)
    ax.set_xlim(0, 1)
    ax.set_xlabel(r"$\theta$")
    ax.set_ylabel("mean elementary score")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return fig


def write_diagrams(report: ScoreReport, outdir: Path, bins: int = UPIT_BINS) -> list[Path]:
    """uPIT histograms, reliability and Murphy diagrams per region, as CSV and SVG."""
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    upit_rows, rel_rows, murphy_rows = [], [], []
    for region in report.regions():
        curves = {}
        for m in report.methods():
            recs = sorted(report.select(method=m, region=region), key=lambda r: r.case_id)
            if not recs:
                continue
            label = METHOD_LABELS.get(m, m)
            u = np.array([r.upit for r in recs])
            hist = upit_histogram(u, bins)
            pval = uniformity_pvalue(u, bins)
            for k in range(bins):
                upit_rows.append([region, m, f"{hist.edges[k]:.4f}", f"{hist.edges[k + 1]:.4f}",
                                  int(hist.counts[k]), f"{hist.heights[k]:.6f}", f"{pval:.6g}"])
            path = outdir / f"upit_{region}_{m}.svg"
            _save(_upit_figure(hist, f"{region} {label}"), path)
            written.append(path)

            pops = np.array([r.pop for r in recs])
            occ = np.array([r.occurred for r in recs])
            diag = reliability(pops, occ)
            for b in diag.bins:
                rel_rows.append([region, m, f"{b.lower:.2f}", f"{b.upper:.2f}", f"{b.mean_forecast:.6f}",
                                 f"{b.observed_frequency:.6f}", b.count])
            path = outdir / f"reliability_{region}_{m}.svg"
            _save(_reliability_figure(diag, f"{region} {label}"), path)
            written.append(path)

            mc = murphy_curve(pops, occ)
            curves[label] = mc
            for th, v in zip(mc.thetas, mc.values):
                murphy_rows.append([region, m, f"{th:.6f}", f"{v:.8f}"])
        path = outdir / f"murphy_{region}.svg"
        _save(_murphy_figure(curves, region), path)
        written.append(path)

    for name, header, rows in (
        ("upit.csv", ["region", "method", "lower", "upper", "count", "height", "chi2_p"], upit_rows),
        ("reliability.csv", ["region", "method", "lower", "upper", "mean_pop", "obs_freq", "count"], rel_rows),
        ("murphy.csv", ["region", "method", "theta", "mean_score"], murphy_rows),
    ):
        path = outdir / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        written.append(path)
    return written


def report_summary(report: ScoreReport, reference: str = "epc", seed: Optional[int] = None) -> dict:
    rows = score_table(report, reference)
    return {
        "seed": seed,
        "reference": reference,
        "n_cases": len({r.case_id for r in report.records}),
        "table": [
            {"region": r.region, "method": r.method, "n": r.n, "mean": r.means, "skill": r.skill,
             "mark": r.marks, "p_value": r.p_values}
            for r in rows
        ],
    }


def write_report(report: ScoreReport, outdir, reference: str = "epc", seed: Optional[int] = None,
                 diagrams: bool = True) -> list[Path]:
    """Tables (CSV, text, JSON), skill series and, optionally, diagrams."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = score_table(report, reference)
    written = []
    path = outdir / "scores.csv"
    write_table_csv(rows, path)
    written.append(path)
    path = outdir / "scores.txt"
    path.write_text(format_table(rows), encoding="utf-8")
    written.append(path)
    path = outdir / "report.json"
    path.write_text(json.dumps(report_summary(report, reference, seed), indent=2, sort_keys=True) + "\n")
    written.append(path)
    if reference in report.methods() and len(report.methods()) > 1:
        written += write_skill_series(report, outdir, reference)
    if diagrams:
        written += write_diagrams(report, outdir / "diagrams")
    return written


def write_case_scores(report: ScoreReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "site", "region", "season", "method", "crps", "ae", "bs", "pop", "occurred", "upit"])
        for r in sorted(report.records, key=lambda r: (r.case_id, r.method)):
            # shortest round-trip repr so tables rebuilt from this file match exactly
            w.writerow([r.case_id, r.site, r.region, r.season, r.method, repr(float(r.crps)), repr(float(r.ae)),
                        repr(float(r.bs)), repr(float(r.pop)), int(r.occurred), repr(float(r.upit))])


def read_case_scores(path) -> ScoreReport:
    from .verify import CaseScore

    rep = ScoreReport()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"case_id", "method", "crps", "upit"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path} is not a case score file (missing {', '.join(sorted(missing))})")
        for row in reader:
            rep.add(CaseScore(
                case_id=row["case_id"], site=row["site"], region=row["region"], season=int(row["season"]),
                method=row["method"], crps=float(row["crps"]), ae=float(row["ae"]), bs=float(row["bs"]),
                pop=float(row["pop"]), occurred=bool(int(row["occurred"])), upit=float(row["upit"]),
            ))
    return rep
