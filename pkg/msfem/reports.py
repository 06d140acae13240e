from __future__ import annotations

import csv
import json
import logging
import os
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .doctor import diagnose_environment
from .errors import ConfigError
from .study import CSV_COLUMNS, REGIMES, RateFit, SweepRow, r_eps_fit

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
GUIDE_SLOPES = (0.5, 1.0, 2.0)
GUIDE_STYLES = {0.5: "k:", 1.0: "k-.", 2.0: "k--"}


def write_rows_csv(rows: Sequence[SweepRow], path: str) -> str:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_values())
    return path


def read_rows_csv(path: str) -> List[SweepRow]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise ConfigError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
            return [
                SweepRow(
                    problem=r["problem"],
                    comparison=r["comparison"],
                    norm=r["norm"],
                    epsilon=float(r["epsilon"]),
                    h=float(r["h"]),
                    error=float(r["error"]),
                    backend_meta=r["backend_meta"] or "",
                )
                for r in reader
            ]
    except OSError as exc:
        raise ConfigError(f"cannot read rows from {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed rows in {path}: {exc}") from exc


def summarize(
    rows: Sequence[SweepRow],
    fits: Sequence[RateFit],
    failures: Sequence[Dict[str, Any]] = (),
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    r_eps = r_eps_fit(fits)
    summary: Dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "rows": len(rows),
        "fits": [f.as_dict() for f in fits],
        "failures": list(failures),
        "regimes": dict(REGIMES),
        "r_eps": r_eps.as_dict() if r_eps else None,
        "environment": diagnose_environment(),
    }
    if extra:
        summary.update(extra)
    return summary


def _plot_comparison(comparison: str, rows: Sequence[SweepRow], fits: Sequence[RateFit], path: str) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # stable ids so reruns produce identical bytes
    matplotlib.rcParams["svg.hashsalt"] = "msfem"
    fig, axes = plt.subplots(1, 2, figsize=(12, 5), squeeze=False)
    for ax, variable in zip(axes[0], ("h", "epsilon")):
        series: Dict[str, Dict[float, List[float]]] = {}
        for row in rows:
            if not (np.isfinite(row.error) and row.error > 0):
                continue
            x = row.h if variable == "h" else row.epsilon
            other = row.epsilon if variable == "h" else row.h
            label = f"{row.norm} ({'eps' if variable == 'h' else 'h'}={other:.4g})"
            series.setdefault(label, {}).setdefault(x, []).append(row.error)
        xs_all: List[float] = []
        for label, points in sorted(series.items()):
            if len(points) < 2:
                logger.debug("%s: skipping single-point series %s against %s", comparison, label, variable)
                continue
            xs = np.array(sorted(points))
            ys = np.array([points[x][0] for x in xs])
            ax.loglog(xs, ys, "o-", linewidth=1.2, markersize=4, label=label)
            xs_all.extend(xs.tolist())
        if xs_all:
            x_ref = np.array([min(xs_all), max(xs_all)])
            errors = [r.error for r in rows if np.isfinite(r.error) and r.error > 0]
            anchor = float(np.median(errors)) if errors else 1.0
            for slope in GUIDE_SLOPES:
                ax.loglog(x_ref, anchor * (x_ref / x_ref[-1]) ** slope, GUIDE_STYLES[slope], linewidth=0.8, label=f"slope {slope:g}")
        ax.set_xlabel(variable)
        ax.set_ylabel("error")
        ax.grid(True, alpha=0.3, which="both")
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=6, loc="best")
    slopes = ", ".join(f"{f.norm}/{f.variable}: {f.slope:.2f}" for f in fits[:6])
    fig.suptitle(f"{comparison}" + (f"  [{slopes}]" if slopes else ""), fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_reports(
    rows: Sequence[SweepRow],
    fits: Sequence[RateFit],
    out_dir: str,
    failures: Sequence[Dict[str, Any]] = (),
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """Write rows.csv, summary.json and one SVG per comparison with fits.

    Returns the paths written.
    """
    if not rows:
        raise ConfigError("no rows to report")
    written: Dict[str, Any] = {"plots": []}
    try:
        os.makedirs(out_dir, exist_ok=True)
        written["csv"] = write_rows_csv(rows, os.path.join(out_dir, "rows.csv"))
        summary_path = os.path.join(out_dir, "summary.json")
        with open(summary_path, "w", encoding="utf-8") as f:
            json.dump(summarize(rows, fits, failures, extra), f, ensure_ascii=False, indent=2)
            f.write("\n")
        written["summary"] = summary_path
        for comparison in _ordered(r.comparison for r in rows):
            group_fits = [f for f in fits if f.comparison == comparison]
            if not group_fits:
                continue
            path = os.path.join(out_dir, f"{comparison}.svg")
            _plot_comparison(comparison, [r for r in rows if r.comparison == comparison], group_fits, path)
            written["plots"].append(path)
    except OSError as exc:
        raise ConfigError(f"cannot write reports to {out_dir}: {exc}") from exc
    logger.info("wrote %d row(s), %d fit(s), %d plot(s) to %s", len(rows), len(fits), len(written["plots"]), out_dir)
    return written


def _ordered(values: Iterable[str]) -> List[str]:
    seen: Dict[str, None] = {}
    for v in values:
        seen.setdefault(v, None)
    return list(seen)
