import pytest

from gpudse.arch_model import preset
from gpudse.workload import BlockProgram, KernelSpec, WarpInstr


def compute_kernel(grid_blocks=1, threads_per_block=32, n_instr=1, issue_cycles=1, iterations=1,
                   regs=32, shmem=0, label="compute"):
    """Compute-only kernel with no memory traffic."""
    return KernelSpec(
        grid_blocks=grid_blocks,
        threads_per_block=threads_per_block,
        regs_per_thread=regs,
        shmem_per_block=shmem,
        program=BlockProgram(tuple(WarpInstr.compute(issue_cycles) for _ in range(n_instr)), iterations),
        footprint_bytes=4096,
        label=label,
    )


@pytest.fixture
def tx2():
    return preset("tx2")


@pytest.fixture
def xavier():
    return preset("xavier")


@pytest.fixture
def make_compute_kernel():
    return compute_kernel
