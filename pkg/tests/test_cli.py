import json

import pytest

from gpudse.arch_model import config_to_dict, preset, read_config
from gpudse.cli import main
from gpudse.workload import read_kernel, write_kernel


@pytest.fixture
def kernel_file(tmp_path, make_compute_kernel):
    fname = tmp_path / "compute.json"
    write_kernel(make_compute_kernel(grid_blocks=3, threads_per_block=128, n_instr=16, label="compute"), fname)
    return fname


def _plan(tmp_path, kernel_file, **fields):
    data = {"base": "tx2", "mode": "single",
            "axes": [{"param": "l1_size", "values": [16384, 32768, 98304]}],
            "workloads": [kernel_file.name]}
    data.update(fields)
    fname = tmp_path / "plan.json"
    fname.write_text(json.dumps(data))
    return fname


def test_config(tmp_path, capsys):
    out = tmp_path / "tx2.json"
    assert main(["config", "--preset", "tx2", "--out", str(out)]) == 0
    assert read_config(out) == preset("tx2")
    assert "config tx2: 2 SMs x 128 CUDA cores" in capsys.readouterr().out
    assert main(["config", "--check", str(out)]) == 0
    assert main(["config", "--preset", "tx2", "--set", "l2_size=262144", "--out", str(out)]) == 0
    assert read_config(out).l2.size_bytes == 262144
    assert main(["config", "--list"]) == 0


def test_config_errors(tmp_path, capsys):
    assert main(["config", "--preset", "tx2", "--set", "l1_assoc=5"]) == 1
    assert "sm.l1.size_bytes" in capsys.readouterr().err
    assert main(["config", "--check", str(tmp_path / "missing.json")]) == 1
    assert "missing.json" in capsys.readouterr().err
    assert main(["config", "--preset", "tx2", "--set", "l3=1"]) == 2
    assert main(["config"]) == 2


def test_gen_workload(tmp_path):
    assert main(["gen-workload", "--suite", "--out-dir", str(tmp_path), "--seed", "4"]) == 0
    files = sorted(p.name for p in tmp_path.glob("*.json"))
    assert len(files) == 5
    assert "graph_traversal-tiny-s4.json" in files
    out = tmp_path / "dla.json"
    assert main(["gen-workload", "--archetype", "dense_linear_algebra", "--threads-per-block", "64",
                 "--out", str(out)]) == 0
    assert read_kernel(out).threads_per_block == 64


def test_ignored_options_rejected(tmp_path, kernel_file, capsys):
    plan = _plan(tmp_path, kernel_file)
    out_dir = tmp_path / "out"
    assert main(["sweep", "--plan", str(plan), "--out-dir", str(out_dir), "--scale", "small"]) == 2
    assert "--scale only apply to --builtin" in capsys.readouterr().err
    assert main(["sweep", "--plan", str(plan), "--out-dir", str(out_dir), "--seed", "0"]) == 2
    assert main(["gen-workload", "--suite", "--out", str(tmp_path / "k.json")]) == 2
    assert "--out applies to --archetype only" in capsys.readouterr().err
    assert main(["simulate", "--config", "tx2", "--kernel", str(kernel_file), "--seed", "3"]) == 2
    assert main(["setups", "--platform", "tx2", "--workloads", str(kernel_file), "--out-dir", str(out_dir),
                 "--scale", "tiny"]) == 2
    assert not out_dir.exists()
    assert not (tmp_path / "k.json").exists()


def test_simulate(tmp_path, kernel_file, capsys):
    config = tmp_path / "tx2.json"
    assert main(["config", "--preset", "tx2", "--out", str(config)]) == 0
    out = tmp_path / "result.json"
    assert main(["simulate", "--config", str(config), "--kernel", str(kernel_file), "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert data["blocks_executed"] == 3
    assert data["kernel_label"] == "compute"
    assert f"total_cycles={data['total_cycles']}" in capsys.readouterr().out


def test_simulate_trace(tmp_path):
    trace = tmp_path / "trace.txt"
    assert main(["simulate", "--config", "tx2", "--archetype", "structured_grid", "--trace", str(trace)]) == 0
    first = trace.read_text().splitlines()[0].split()
    assert first[2] == "L1"
    assert first[4] in ("hit", "miss")


def test_simulate_errors(tmp_path, kernel_file, capsys, make_compute_kernel):
    assert main(["simulate", "--config", "tx2", "--kernel", str(tmp_path / "nope.json")]) == 1
    assert "nope.json" in capsys.readouterr().err
    huge = tmp_path / "huge.json"
    write_kernel(make_compute_kernel(threads_per_block=1024, regs=255, label="huge"), huge)
    assert main(["simulate", "--config", "tx2", "--kernel", str(huge)]) == 1
    assert main(["simulate", "--config", "tx2", "--kernel", str(kernel_file), "--cycle-cap", "5"]) == 1
    assert main(["simulate", "--config", "tx2", "--kernel", str(kernel_file), "--policy", "fastest"]) == 2


def test_sweep_and_classify(tmp_path, kernel_file, capsys):
    plan = _plan(tmp_path, kernel_file)
    out_dir = tmp_path / "out"
    h5 = tmp_path / "sweeps.h5"
    assert main(["--quiet", "sweep", "--plan", str(plan), "--out-dir", str(out_dir), "--hdf5", str(h5)]) == 0
    assert (out_dir / "sweep.csv").read_text().startswith("axis,value,workload,cycles,slowdown\n")
    assert (out_dir / "sweep.json").exists()
    assert (out_dir / "fig3a.dat").exists()
    assert h5.exists()
    assert "sweep single: 4 points x 1 workloads" in capsys.readouterr().out

    assert main(["classify", "--results", str(out_dir), "--epsilon", "0.05"]) == 0
    assert "classify: 1 axes, 1 category 1, 0 category 2" in capsys.readouterr().out
    assert main(["classify", "--results", str(h5), "--epsilon", "0.05"]) == 0
    assert "classify: 1 axes, 1 category 1, 0 category 2" in capsys.readouterr().out


def test_sweep_deterministic(tmp_path, kernel_file):
    plan = _plan(tmp_path, kernel_file)
    assert main(["--quiet", "sweep", "--plan", str(plan), "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["--quiet", "sweep", "--plan", str(plan), "--out-dir", str(tmp_path / "b"), "--jobs", "2"]) == 0
    for name in ("sweep.csv", "sweep.json", "fig3a.dat"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_sweep_invalid_base(tmp_path, kernel_file, capsys):
    base = config_to_dict(preset("tx2"))
    base["num_sms"] = 3
    base["sms_per_cluster"] = 2
    plan = _plan(tmp_path, kernel_file, base=base)
    assert main(["sweep", "--plan", str(plan), "--out-dir", str(tmp_path / "out")]) == 1
    assert "sms_per_cluster" in capsys.readouterr().err


def test_classify_usage(tmp_path):
    assert main(["classify", "--results", str(tmp_path), "--epsilon", "-1"]) == 2
    assert main(["classify", "--results", str(tmp_path), "--epsilon", "zero"]) == 2
    assert main(["classify", "--results", str(tmp_path), "--bogus"]) == 2
    assert main(["classify", "--results", str(tmp_path)]) == 1


def test_setups(tmp_path, kernel_file, capsys):
    out_dir = tmp_path / "setups"
    assert main(["--quiet", "setups", "--platform", "tx2", "--workloads", str(kernel_file),
                 "--out-dir", str(out_dir), "--software-study"]) == 0
    lines = (out_dir / "setups.csv").read_text().splitlines()
    assert len(lines) == 1 + 4 * 2
    assert (out_dir / "fig8.dat").exists()
    assert (out_dir / "software_study.csv").exists()
    assert "setups tx2: baseline=1," in capsys.readouterr().out
