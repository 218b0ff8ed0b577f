import pytest
from rich.console import Console

from gpudse.archive import SweepArchive
from gpudse.arch_model import KB
from gpudse.dse import Axis, SweepPlan, run_sweep
from gpudse.errors import SweepDataError


@pytest.fixture
def result(tx2, make_compute_kernel):
    workloads = (
        make_compute_kernel(grid_blocks=2, threads_per_block=128, n_instr=8, label="plain"),
        make_compute_kernel(threads_per_block=64, shmem=16 * KB, label="greedy"),
    )
    return run_sweep(SweepPlan(tx2, (Axis("shmem", (8 * KB, 16 * KB)),), workloads))


def test_save_and_load(tmp_path, result):
    archive = SweepArchive(tmp_path / "sweeps.h5")
    assert archive.names() == []
    archive.save("single", result, note="shmem sweep")
    archive.save("again", result)
    assert archive.names() == ["again", "single"]
    loaded = archive.load("single")
    assert loaded.to_dict() == result.to_dict()
    assert loaded.flags == result.flags


def test_overwrite(tmp_path, result):
    archive = SweepArchive(tmp_path / "sweeps.h5")
    archive.save("single", result)
    archive.save("single", result)
    assert archive.names() == ["single"]


def test_missing_sweep(tmp_path, result):
    archive = SweepArchive(tmp_path / "sweeps.h5")
    archive.save("single", result)
    with pytest.raises(SweepDataError, match="nope"):
        archive.load("nope")
    with pytest.raises(SweepDataError):
        SweepArchive(tmp_path / "absent.h5").load("single")


def test_tree(tmp_path, result):
    archive = SweepArchive(tmp_path / "sweeps.h5")
    archive.save("single", result, note="shmem sweep")
    console = Console(record=True, width=120)
    console.print(archive.tree())
    text = console.export_text()
    assert "single" in text
    assert "note: shmem sweep" in text
    assert "slowdown (3, 2)" in text
