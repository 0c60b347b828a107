"""Render figures from kpzlab output files.

Figures display values taken from the input files; nothing statistical is
recomputed here (single source of truth).  In particular a printed slope
is the slope stored in the sweep CSV's fit row, and the printed
total-variation distance is the one the statistics harness wrote.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SWEEP_HEADER = ["eps", "rho", "t_macro", "n_replicas", "estimator", "value", "stderr"]
HIST_HEADER = ["bin_center_macro", "density", "count"]
KINDS = ("loglog-var", "loglog-diffusivity", "s-histogram", "identity-dashboard")

PNG_METADATA = {"Software": "kpzlab-plot"}  # pin bytes across renders


class PlotError(ValueError):
    """Bad plot spec or malformed input file."""


@dataclass
class PlotSpec:
    kind: str
    out: str
    sweep: str | None = None
    histogram: str | None = None
    report: str | None = None
    expected_slope: float | None = None
    t_macro: float | None = None  # selects rows when several grid times exist

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlotError(f"unknown figure kind {self.kind!r}; choose from {KINDS}")

    @classmethod
    def from_json(cls, path: str | Path) -> "PlotSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise PlotError(f"spec is not valid JSON: {exc}") from exc
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise PlotError(f"unknown spec keys: {sorted(unknown)}")
        if "kind" not in raw or "out" not in raw:
            raise PlotError("spec must name 'kind' and 'out'")
        return cls(**raw)


def _read_csv(path: str, header: list[str]) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise PlotError(f"input file does not exist: {p}")
    with p.open() as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != header:
            raise PlotError(
                f"{p.name}: expected columns {header}, found {reader.fieldnames}"
            )
        rows = list(reader)
    if not rows:
        raise PlotError(f"{p.name}: no data rows")
    return rows


def _series(rows: list[dict], estimator: str) -> list[tuple[float, float, float]]:
    pts = [
        (float(r["t_macro"]), float(r["value"]), float(r["stderr"]))
        for r in rows
        if r["estimator"] == estimator and r["t_macro"]
    ]
    if not pts:
        raise PlotError(f"no rows for estimator {estimator!r}")
    return sorted(pts)


def _fit_row(rows: list[dict], name: str) -> tuple[float, float]:
    for r in rows:
        if r["estimator"] == f"fit_slope:{name}":
            return float(r["value"]), float(r["stderr"])
    raise PlotError(f"sweep CSV has no FitResult row for {name!r}")


def _loglog(spec: PlotSpec, estimator: str, default_guide: float) -> dict:
    if not spec.sweep:
        raise PlotError(f"{spec.kind} needs a sweep CSV input")
    rows = _read_csv(spec.sweep, SWEEP_HEADER)
    pts = _series(rows, estimator)
    slope, slope_se = _fit_row(rows, estimator)
    t = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    se = np.array([p[2] for p in pts])

    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    ax.errorbar(t, y, yerr=se, fmt="o", capsize=3, label=estimator)
    # guide line with the stored fitted slope, anchored at the data centroid
    anchor_t = math.exp(np.log(t).mean())
    anchor_y = math.exp(np.log(y).mean())
    tt = np.array([t.min(), t.max()])
    ax.plot(tt, anchor_y * (tt / anchor_t) ** slope, "-",
            label=f"fit slope {slope:.3f} ± {slope_se:.3f}")
    guide = spec.expected_slope if spec.expected_slope is not None else default_guide
    ax.plot(tt, anchor_y * (tt / anchor_t) ** guide, "--", color="gray",
            label=f"reference slope {guide:.3g}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel(estimator)
    ax.legend()
    fig.tight_layout()
    fig.savefig(spec.out, dpi=120, metadata=PNG_METADATA)
    plt.close(fig)
    print(f"{spec.kind}: slope={slope!r} stderr={slope_se!r} points={len(pts)}")
    return {"slope": slope, "slope_stderr": slope_se, "points": len(pts)}


def _s_histogram(spec: PlotSpec) -> dict:
    if not spec.histogram:
        raise PlotError("s-histogram needs a histogram CSV input")
    rows = _read_csv(spec.histogram, HIST_HEADER)
    centers = np.array([float(r["bin_center_macro"]) for r in rows])
    density = np.array([float(r["density"]) for r in rows])
    width = float(np.min(np.diff(np.sort(centers)))) if centers.size > 1 else 1.0

    tv = None
    if spec.sweep:
        sweep_rows = _read_csv(spec.sweep, SWEEP_HEADER)
        tv_rows = [
            r for r in sweep_rows
            if r["estimator"] == "tv_symmetry"
            and (spec.t_macro is None or float(r["t_macro"]) == spec.t_macro)
        ]
        if spec.t_macro is None and len(tv_rows) > 1:
            raise PlotError("several tv_symmetry rows; select one with t_macro")
        if tv_rows:
            tv = float(tv_rows[0]["value"])

    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    ax.bar(centers, density, width=width * 0.9, label="estimated density")
    ax.step(-centers, density, where="mid", color="crimson", label="reflection")
    ax.set_xlabel("x")
    ax.set_ylabel("density")
    title = "rescaled correlation histogram"
    if tv is not None:
        title += f" (TV to reflection: {tv:.4f})"
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(spec.out, dpi=120, metadata=PNG_METADATA)
    plt.close(fig)
    if tv is None:
        print(f"{spec.kind}: bins={centers.size}")
    else:
        print(f"{spec.kind}: bins={centers.size} tv={tv!r}")
    return {"bins": int(centers.size), "tv": tv}


def _identity_dashboard(spec: PlotSpec) -> dict:
    if not spec.report:
        raise PlotError("identity-dashboard needs a report JSON input")
    p = Path(spec.report)
    if not p.exists():
        raise PlotError(f"input file does not exist: {p}")
    try:
        report = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise PlotError(f"report is not valid JSON: {exc}") from exc
    checks = report.get("checks")
    if not checks:
        raise PlotError("report has no checks to display")
    k = float(report.get("tolerance_k", 3.0))
    names = [c["check_name"] for c in checks]
    zs = np.array([c["z_score"] for c in checks])
    passed = np.array([bool(c["pass"]) for c in checks])
    zs_clip = np.clip(zs, -2 * k, 2 * k)

    fig, ax = plt.subplots(figsize=(7.0, max(3.0, 0.22 * len(names))))
    ypos = np.arange(len(names))
    ax.barh(ypos[passed], zs_clip[passed], color="seagreen", label="pass")
    if (~passed).any():
        ax.barh(ypos[~passed], zs_clip[~passed], color="firebrick", label="fail")
    ax.axvline(-k, color="gray", ls="--", lw=1)
    ax.axvline(k, color="gray", ls="--", lw=1)
    ax.set_yticks(ypos)
    ax.set_yticklabels(names, fontsize=5)
    ax.invert_yaxis()
    ax.set_xlabel(f"z-score (band at ±{k:g})")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(spec.out, dpi=120, metadata=PNG_METADATA)
    plt.close(fig)
    n_fail = int((~passed).sum())
    print(f"{spec.kind}: checks={len(names)} failures={n_fail}")
    return {"checks": len(names), "failures": n_fail}


def render(spec: PlotSpec) -> dict:
    """Write the figure for ``spec`` and return the printed summary values."""
    out_dir = Path(spec.out).parent
    if str(out_dir) and not out_dir.exists():
        out_dir.mkdir(parents=True, exist_ok=True)
    if spec.kind == "loglog-var":
        return _loglog(spec, "var_h0", default_guide=2.0 / 3.0)
    if spec.kind == "loglog-diffusivity":
        return _loglog(spec, "diffusivity", default_guide=1.0 / 3.0)
    if spec.kind == "s-histogram":
        return _s_histogram(spec)
    return _identity_dashboard(spec)
