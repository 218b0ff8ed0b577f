import pandas as pd
import pytest
from scipy.stats import gmean

from gpudse.arch_model import KB
from gpudse.dse import Axis, SweepPlan, classify_all, compare_setups, run_sweep
from gpudse.errors import SweepDataError
from gpudse.report import (
    CSV_HEADER,
    NA,
    classification_table,
    comparison_table,
    csv_rows,
    emit_csv,
    emit_figure_data,
    emit_setups_csv,
    emit_setups_figure_data,
    format_value,
    read_csv,
    read_sweep_json,
    sweep_summary,
    write_json,
)

L1_GRID = (16 * KB, 32 * KB, 48 * KB, 96 * KB, 192 * KB)


@pytest.fixture
def workloads(make_compute_kernel):
    return (
        make_compute_kernel(grid_blocks=4, threads_per_block=256, n_instr=8, label="b-short"),
        make_compute_kernel(grid_blocks=2, threads_per_block=64, n_instr=12, shmem=16 * KB, label="a-shmem"),
    )


@pytest.fixture
def l1_sweep(tx2, workloads):
    return run_sweep(SweepPlan(tx2, (Axis("l1_size", L1_GRID),), workloads))


@pytest.fixture
def shmem_sweep(tx2, workloads):
    return run_sweep(SweepPlan(tx2, (Axis("shmem", (8 * KB, 32 * KB)), Axis("num_sms", (1, 4))), workloads))


def test_format_value():
    assert format_value("l1_size", 49152) == "48KB"
    assert format_value("num_sms", 4) == "4"
    assert format_value("l2_size", None) == "-"


def test_empty_axes_csv(tmp_path, tx2, workloads):
    result = run_sweep(SweepPlan(tx2, (), workloads))
    fname = emit_csv(result, tmp_path / "sweep.csv")
    assert fname.read_text().splitlines() == [
        "axis,value,workload,cycles,slowdown",
        f"baseline,-,a-shmem,{result.baseline_cycles['a-shmem']},1.0",
        f"baseline,-,b-short,{result.baseline_cycles['b-short']},1.0",
    ]


def test_csv_deterministic(tmp_path, l1_sweep):
    a = emit_csv(l1_sweep, tmp_path / "a.csv").read_bytes()
    b = emit_csv(l1_sweep, tmp_path / "b.csv").read_bytes()
    assert a == b
    assert a.decode().splitlines()[0] == ",".join(CSV_HEADER)


def test_csv_row_order(l1_sweep):
    rows = csv_rows(l1_sweep)
    assert [r[1] for r in rows[2::2]] == [str(v) for v in L1_GRID]
    assert [r[2] for r in rows[:2]] == ["a-shmem", "b-short"]


def test_csv_flagged(tmp_path, shmem_sweep):
    frame = read_csv(emit_csv(shmem_sweep, tmp_path / "sweep.csv"))
    flagged = frame[(frame["axis"] == "shmem") & (frame["value"] == str(8 * KB)) & (frame["workload"] == "a-shmem")]
    assert len(flagged) == 1
    assert pd.isna(flagged["slowdown"].iloc[0])
    assert pd.isna(flagged["cycles"].iloc[0])
    raw = (tmp_path / "sweep.csv").read_text()
    assert f"shmem,{8 * KB},a-shmem,{NA},{NA}" in raw


def test_csv_round_trip(tmp_path, shmem_sweep):
    frame = read_csv(emit_csv(shmem_sweep, tmp_path / "sweep.csv"))
    assert len(frame) == len(shmem_sweep.points) * 2
    by_key = {(r.axis, r.value, r.workload): r for r in frame.itertuples()}
    for point in shmem_sweep.points:
        axis = "+".join(p for p, _ in point) or "baseline"
        value = "+".join(str(v) for _, v in point) or "-"
        for w in shmem_sweep.workloads:
            row = by_key[(axis, value, w)]
            expected = shmem_sweep.slowdown(point, w)
            if expected is None:
                assert pd.isna(row.slowdown)
            else:
                assert row.slowdown == expected
                assert row.cycles == shmem_sweep.cycles[(point, w)]


def test_read_csv_header(tmp_path):
    fname = tmp_path / "bad.csv"
    fname.write_text("axis,value,workload,slowdown\n")
    with pytest.raises(SweepDataError):
        read_csv(fname)


def test_json_round_trip(tmp_path, shmem_sweep):
    again = read_sweep_json(write_json(shmem_sweep, tmp_path / "sweep.json"))
    assert again.to_dict() == shmem_sweep.to_dict()
    (tmp_path / "broken.json").write_text("{\n")
    with pytest.raises(SweepDataError):
        read_sweep_json(tmp_path / "broken.json")


def test_figure_data(tmp_path, l1_sweep):
    lines = emit_figure_data(l1_sweep, "fig3a", tmp_path / "fig3a.dat").read_text().splitlines()
    assert lines[0].startswith("# fig3a L1 size")
    assert lines[1] == "# l1_size b-short a-shmem geomean"
    rows = [line.split() for line in lines[2:]]
    assert [r[0] for r in rows] == ["16", "32", "48", "96", "192"]
    for r in rows:
        assert len(r) == len(l1_sweep.workloads) + 2
        assert float(r[-1]) == pytest.approx(gmean([float(x) for x in r[1:-1]]), rel=1e-5)


def test_figure_data_flagged(tmp_path, shmem_sweep):
    lines = emit_figure_data(shmem_sweep, "fig3g", tmp_path / "fig3g.dat").read_text().splitlines()
    rows = [line.split() for line in lines[2:]]
    assert rows[0] == ["8", rows[0][1], NA, rows[0][1]]
    assert rows[1][0] == "32"


def test_figure_errors(tmp_path, l1_sweep):
    with pytest.raises(SweepDataError, match="fig99"):
        emit_figure_data(l1_sweep, "fig99", tmp_path / "x.dat")
    with pytest.raises(SweepDataError):
        emit_figure_data(l1_sweep, "fig3c", tmp_path / "x.dat")
    with pytest.raises(SweepDataError):
        emit_figure_data(l1_sweep, "fig8", tmp_path / "x.dat")


def test_setups_outputs(tmp_path, workloads):
    comparison = compare_setups("tx2", workloads)
    lines = emit_setups_csv(comparison, tmp_path / "setups.csv").read_text().splitlines()
    assert lines[0] == "setup,workload,cycles,slowdown,area_units,area_delta"
    assert len(lines) == 1 + 4 * (len(workloads) + 1)
    assert lines[1].startswith("baseline,b-short,")
    assert lines[3].startswith("baseline,geomean,NA,1.0,")

    data = emit_setups_figure_data(comparison, tmp_path / "fig8.dat").read_text().splitlines()
    assert data[0] == "# fig8 Improved setups, TX2"
    assert data[2] == "baseline 1 1 1"
    assert [line.split()[0] for line in data[2:]] == ["baseline", "reduced_die", "increased_perf_a", "increased_perf_b"]
    assert comparison_table(comparison).row_count == 4


def test_classification_table(l1_sweep):
    classes = classify_all(l1_sweep)
    table = classification_table(classes, 0.02)
    assert table.row_count == 1
    assert table.title == "Parameter classification (epsilon=0.02)"


def test_sweep_summary(l1_sweep, shmem_sweep):
    assert sweep_summary(l1_sweep) == sweep_summary(l1_sweep)
    assert sweep_summary(l1_sweep).startswith("sweep single: 6 points x 2 workloads, 0 flagged, geomean 1..1")
    assert "1 flagged" in sweep_summary(shmem_sweep)
