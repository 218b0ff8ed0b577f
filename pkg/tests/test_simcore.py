import io
from dataclasses import replace

import numpy as np
import pytest

from gpudse.arch_model import KB, SmConfig, apply_override
from gpudse.errors import ConfigError, SimulationAbortedError, SweepDataError, UnschedulableKernelError
from gpudse.simcore import ROUND_ROBIN, SimOptions, max_blocks_per_sm, simulate, speedup
from gpudse.workload import BlockProgram, WarpInstr, dynamic_instructions, synthetic_suite


def pack_blocks(sm, kernel):
    """Add blocks to an empty SM one at a time until a resource runs out."""
    threads = regs = shmem = blocks = 0
    thread_cap = min(sm.max_threads, sm.max_warps * 32)
    while True:
        threads += kernel.threads_per_block
        regs += kernel.threads_per_block * kernel.regs_per_thread
        shmem += kernel.shmem_per_block
        if threads > thread_cap or regs > sm.regfile_regs or shmem > sm.shmem_bytes or blocks + 1 > sm.max_blocks:
            return blocks
        blocks += 1


def test_occupancy_example(tx2, make_compute_kernel):
    report = max_blocks_per_sm(tx2.sm, make_compute_kernel(threads_per_block=256, regs=32, shmem=4 * KB))
    assert (report.limit_threads, report.limit_registers, report.limit_shmem, report.limit_blockcap) == (8, 8, 16, 32)
    assert report.blocks_per_sm == 8


def test_occupancy_without_shmem(tx2, make_compute_kernel):
    report = max_blocks_per_sm(tx2.sm, make_compute_kernel(threads_per_block=64, regs=16, shmem=0))
    assert report.limit_shmem == tx2.sm.max_blocks
    assert report.blocks_per_sm == 32


def test_binding_limit(tx2, make_compute_kernel):
    report = max_blocks_per_sm(tx2.sm, make_compute_kernel(threads_per_block=256, regs=64))
    assert report.blocks_per_sm == 4
    assert report.binding_limit == "registers"


def test_unschedulable(tx2, make_compute_kernel):
    kernel = make_compute_kernel(threads_per_block=1024, regs=255)
    with pytest.raises(UnschedulableKernelError) as e:
        max_blocks_per_sm(tx2.sm, kernel)
    assert e.value.limit == "registers"
    with pytest.raises(UnschedulableKernelError):
        simulate(tx2, kernel)


def test_occupancy_matches_packing(tx2, make_compute_kernel):
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        max_warps = int(rng.integers(1, 65))
        sm = replace(
            tx2.sm,
            max_warps=max_warps,
            max_threads=32 * int(rng.integers(1, max_warps + 1)),
            max_blocks=int(rng.integers(1, 33)),
            regfile_regs=int(rng.choice([8192, 16384, 32768, 65536, 131072])),
            shmem_bytes=int(rng.choice([0, 8, 16, 48, 64, 96])) * KB,
        )
        kernel = make_compute_kernel(
            threads_per_block=32 * int(rng.integers(1, 33)),
            regs=int(rng.integers(0, 256)),
            shmem=int(rng.choice([0, 1, 4, 12, 32, 70])) * KB,
        )
        expected = pack_blocks(sm, kernel)
        if expected == 0:
            with pytest.raises(UnschedulableKernelError):
                max_blocks_per_sm(sm, kernel)
        else:
            assert max_blocks_per_sm(sm, kernel).blocks_per_sm == expected


def test_single_compute(tx2, make_compute_kernel):
    kernel = make_compute_kernel()
    result = simulate(tx2, kernel)
    # launch pipeline of 4 cycles, then one ALU cycle
    assert result.total_cycles == 5
    assert result.instructions_issued == 1
    assert result.blocks_executed == 1
    assert simulate(tx2, kernel) == result


def test_compute_occupies_alu(tx2, make_compute_kernel):
    narrow = apply_override(tx2, "cores_per_smb", 8)
    assert simulate(narrow, make_compute_kernel()).total_cycles == 4 + 4
    assert simulate(tx2, make_compute_kernel(issue_cycles=6)).total_cycles == 4 + 6


def test_shmem_and_barrier(tx2, make_compute_kernel):
    kernel = make_compute_kernel()
    shmem = replace(kernel, program=BlockProgram((WarpInstr.shmem(24),)))
    assert simulate(tx2, shmem).total_cycles == 4 + 24

    barrier = replace(kernel, threads_per_block=64,
                      program=BlockProgram((WarpInstr.compute(1), WarpInstr.barrier())))
    result = simulate(tx2, barrier)
    assert result.total_cycles == 6
    assert result.instructions_issued == 4


def test_symmetry(tx2, make_compute_kernel):
    one = apply_override(tx2, "num_sms", 1)
    a = simulate(tx2, make_compute_kernel(grid_blocks=2, threads_per_block=128, n_instr=16))
    b = simulate(one, make_compute_kernel(grid_blocks=1, threads_per_block=128, n_instr=16))
    assert a.total_cycles == b.total_cycles
    assert [s.blocks_executed for s in a.per_sm] == [1, 1]


@pytest.mark.parametrize("tpb", [32, 256])
def test_linearity(tx2, make_compute_kernel, tpb):
    overhead = SimOptions().launch_cycles
    short = simulate(tx2, make_compute_kernel(threads_per_block=tpb, n_instr=8, iterations=10))
    long = simulate(tx2, make_compute_kernel(threads_per_block=tpb, n_instr=8, iterations=20))
    assert long.total_cycles - overhead == pytest.approx(2 * (short.total_cycles - overhead), rel=0.01)


@pytest.mark.parametrize("kernel", synthetic_suite("tiny", 1), ids=lambda k: k.label)
def test_work_conservation(tx2, kernel):
    result = simulate(tx2, kernel)
    assert result.instructions_issued == dynamic_instructions(kernel)
    assert result.blocks_executed == kernel.grid_blocks
    assert sum(s.blocks_executed for s in result.per_sm) == kernel.grid_blocks
    assert result.total_cycles > 0
    assert result.wall_time_estimate == pytest.approx(result.total_cycles / 1.1e9)


@pytest.mark.parametrize("kernel", synthetic_suite("tiny", 3), ids=lambda k: k.label)
def test_determinism(xavier, kernel):
    assert simulate(xavier, kernel) == simulate(xavier, kernel)


def test_round_robin_policy(tx2):
    kernel = synthetic_suite("tiny", 1)[0]
    rr = simulate(tx2, kernel, SimOptions(scheduler_policy=ROUND_ROBIN))
    assert rr.instructions_issued == dynamic_instructions(kernel)


def test_more_sms_never_slower(tx2, make_compute_kernel):
    kernel = make_compute_kernel(grid_blocks=8, threads_per_block=256, n_instr=16, iterations=4)
    cycles = [simulate(apply_override(tx2, "num_sms", n), kernel).total_cycles for n in (1, 2, 4, 8, 16)]
    assert cycles == sorted(cycles, reverse=True)


@pytest.mark.parametrize("kernel", synthetic_suite("small", 1), ids=lambda k: k.label)
def test_more_sms_on_memory_kernels(tx2, kernel):
    cycles = {n: simulate(apply_override(tx2, "num_sms", n), kernel).total_cycles for n in (1, 2, 4, 8, 16)}
    # shared L2 and DRAM contention reorders with block placement, never by more than 2%
    for fewer, more in [(1, 2), (2, 4), (4, 8), (8, 16)]:
        assert cycles[more] <= 1.02 * cycles[fewer], cycles
    assert cycles[16] < cycles[1]


def test_dispatch_width(tx2, make_compute_kernel):
    one = apply_override(tx2, "warp_schedulers", 1)
    kernel = make_compute_kernel(threads_per_block=64, n_instr=16)
    # two warps on one scheduler: side by side, or one after the other
    assert simulate(one, kernel).total_cycles == 4 + 16
    assert simulate(one, kernel, SimOptions(dispatch_width=1)).total_cycles == 4 + 32
    assert simulate(tx2, kernel).total_cycles == 4 + 16


def test_cycle_cap(tx2):
    kernel = synthetic_suite("tiny", 1)[0]
    with pytest.raises(SimulationAbortedError):
        simulate(tx2, kernel, SimOptions(cycle_cap=10))


def test_options(monkeypatch):
    with pytest.raises(ConfigError):
        SimOptions(scheduler_policy="youngest")
    with pytest.raises(ConfigError):
        SimOptions(cycle_cap=0)
    with pytest.raises(ConfigError):
        SimOptions(dispatch_width=0)
    monkeypatch.setenv("GPU_DSE_CYCLE_CAP", "123")
    assert SimOptions.from_env().cycle_cap == 123
    assert SimOptions.from_env(cycle_cap=7).cycle_cap == 7
    monkeypatch.setenv("GPU_DSE_CYCLE_CAP", "lots")
    with pytest.raises(ConfigError):
        SimOptions.from_env()


def test_trace(tx2):
    kernel = synthetic_suite("tiny", 1)[1]
    sink = io.StringIO()
    result = simulate(tx2, kernel, trace=sink)
    lines = sink.getvalue().splitlines()
    assert len(lines) == result.l1_stats.accesses + result.l2_stats.accesses
    assert simulate(tx2, kernel) == result


def test_speedup(tx2, make_compute_kernel):
    base = simulate(tx2, make_compute_kernel())
    assert speedup(base, base) == 1.0
    assert speedup(base, replace(base, total_cycles=2 * base.total_cycles)) == 2.0
    assert speedup(replace(base, total_cycles=1000), replace(base, total_cycles=900)) == 0.9
    with pytest.raises(SweepDataError):
        speedup(base, replace(base, kernel_label="other"))
