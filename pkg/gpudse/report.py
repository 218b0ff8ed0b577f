"""Result emitters: CSV, JSON, plot data and console tables.

Every emitter is a pure function of its input, so the same result always
renders to the same bytes. CSV cells keep full float precision; tables and
plot-data files print slowdowns with 6 significant digits.
"""
import csv
import json
import logging
from pathlib import Path
from typing import Union

import pandas as pd
from rich.table import Table

from gpudse.arch_model import KB, PARAM_AXES
from gpudse.dse import (
    BASE_POINT,
    PAIRED,
    SINGLE,
    ParamClassification,
    SetupComparison,
    SweepResult,
    figure,
    point_axis,
    point_value,
)
from gpudse.errors import SweepDataError

log = logging.getLogger(__name__)

NA = "NA"
CSV_HEADER = ["axis", "value", "workload", "cycles", "slowdown"]
SETUPS_HEADER = ["setup", "workload", "cycles", "slowdown", "area_units", "area_delta"]


def _full(x) -> str:
    return NA if x is None else repr(float(x))


def _short(x) -> str:
    return NA if x is None else f"{x:.6g}"


def _int(x) -> str:
    return NA if x is None else str(int(x))


def format_value(param: str, value) -> str:
    """Axis value for humans: byte sizes in KB."""
    if value is None:
        return "-"
    if PARAM_AXES[param].is_bytes and value % KB == 0:
        return f"{value // KB}KB"
    return str(value)


def _plot_value(param: str, value) -> str:
    return str(value // KB) if PARAM_AXES[param].is_bytes and value % KB == 0 else str(value)


def csv_rows(result: SweepResult) -> list[list[str]]:
    """Data rows of the sweep CSV, ordered by axis, numeric value, then workload."""
    keyed = []
    for point in result.points:
        for w in result.workloads:
            sort_key = (point_axis(point), tuple(v for _, v in point), w)
            row = [
                point_axis(point),
                point_value(point),
                w,
                _int(result.cycles.get((point, w))),
                _full(result.entries.get((point, w))),
            ]
            keyed.append((sort_key, row))
    keyed.sort(key=lambda kr: kr[0])
    return [row for _, row in keyed]


def emit_csv(result: SweepResult, fname: Union[str, Path]) -> Path:
    fname = Path(fname)
    with open(fname, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(csv_rows(result))
    log.info("wrote %s", fname)
    return fname


def read_csv(fname: Union[str, Path]) -> pd.DataFrame:
    """Read a sweep CSV back; NA cells become missing values."""
    frame = pd.read_csv(
        fname,
        float_precision="round_trip",
        na_values=[NA],
        keep_default_na=False,
        dtype={"axis": str, "value": str, "workload": str},
    )
    if list(frame.columns) != CSV_HEADER:
        raise SweepDataError(f"{fname}: unexpected header {list(frame.columns)}")
    frame["cycles"] = frame["cycles"].astype("Int64")
    return frame


def write_json(result: SweepResult, fname: Union[str, Path]) -> Path:
    fname = Path(fname)
    fname.write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    log.info("wrote %s", fname)
    return fname


def read_sweep_json(fname: Union[str, Path]) -> SweepResult:
    try:
        data = json.loads(Path(fname).read_text())
    except json.JSONDecodeError as e:
        raise SweepDataError(f"{fname}:{e.lineno}: {e.msg}") from None
    return SweepResult.from_dict(data)


def figure_points(result: SweepResult, figure_id: str) -> list:
    """Points of a result that make up the x axis of a figure."""
    fig = figure(figure_id)
    if fig.kind not in (SINGLE, PAIRED):
        raise SweepDataError(f"figure {figure_id} plots setup comparisons, not a sweep")
    points = result.points_for(fig.params)
    if not points:
        raise SweepDataError(f"result has no sweep over {'+'.join(fig.params)} for figure {figure_id}")
    return points


def figure_lines(result: SweepResult, figure_id: str) -> list[str]:
    fig = figure(figure_id)
    points = figure_points(result, figure_id)
    lines = [
        f"# {fig.figure_id} {fig.title} ({fig.platform})",
        "# " + " ".join(["+".join(fig.params), *result.workloads, "geomean"]),
    ]
    for point in points:
        x = "+".join(_plot_value(p, v) for p, v in point)
        cells = [_short(result.entries.get((point, w))) for w in result.workloads]
        lines.append(" ".join([x, *cells, _short(result.geomean.get(point))]))
    return lines


def emit_figure_data(result: SweepResult, figure_id: str, fname: Union[str, Path]) -> Path:
    """Plot data of one figure: x value, one column per workload, geomean last.

    Byte-sized axes are written in KB; cells without a value are written as NA.
    """
    lines = figure_lines(result, figure_id)
    fname = Path(fname)
    fname.write_text("\n".join(lines) + "\n")
    return fname


def emit_setups_csv(comparison: SetupComparison, fname: Union[str, Path]) -> Path:
    fname = Path(fname)
    with open(fname, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SETUPS_HEADER)
        for row in comparison.rows:
            for w in comparison.workloads:
                writer.writerow(
                    [row.name, w, _int(row.cycles[w]), _full(row.slowdown[w]),
                     _full(row.area_units), _full(row.area_delta)]
                )
            writer.writerow([row.name, "geomean", NA, _full(row.geomean), _full(row.area_units), _full(row.area_delta)])
    return fname


def emit_setups_figure_data(comparison: SetupComparison, fname: Union[str, Path]) -> Path:
    """Normalized execution time per setup, in the shape of the improved-setup figures."""
    figure_id = "fig8" if comparison.platform == "tx2" else "fig9"
    lines = [
        f"# {figure_id} {figure(figure_id).title}",
        "# " + " ".join(["setup", *comparison.workloads, "geomean"]),
    ]
    for row in comparison.rows:
        cells = [_short(row.slowdown[w]) for w in comparison.workloads]
        lines.append(" ".join([row.name, *cells, _short(row.geomean)]))
    fname = Path(fname)
    fname.write_text("\n".join(lines) + "\n")
    return fname


def classification_table(classes: list[ParamClassification], epsilon: float) -> Table:
    table = Table(title=f"Parameter classification (epsilon={epsilon:g})")
    table.add_column("Parameter")
    table.add_column("Category", justify="right")
    table.add_column("Limit", justify="right")
    table.add_column("Knee", justify="right")
    for c in classes:
        table.add_row(PARAM_AXES[c.param].title, str(c.category), format_value(c.param, c.limit),
                      format_value(c.param, c.knee))
    return table


def comparison_table(comparison: SetupComparison) -> Table:
    table = Table(title=f"Improved setups, {comparison.platform} (normalized execution time)")
    table.add_column("Setup")
    for w in comparison.workloads:
        table.add_column(w, justify="right")
    table.add_column("Geomean", justify="right")
    table.add_column("Area delta", justify="right")
    for row in comparison.rows:
        table.add_row(row.name, *[_short(row.slowdown[w]) for w in comparison.workloads], _short(row.geomean),
                      f"{row.area_delta:+.6g}")
    return table


def sweep_summary(result: SweepResult) -> str:
    """One deterministic line describing a sweep result."""
    values = [g for p, g in result.geomean.items() if p != BASE_POINT and g is not None]
    span = f"geomean {min(values):.6g}..{max(values):.6g}" if values else "geomean 1"
    return (
        f"sweep {result.mode}: {len(result.points)} points x {len(result.workloads)} workloads, "
        f"{len(result.flags)} flagged, {span}"
    )
