"""Synthetic GPU kernels.

A KernelSpec stands in for a CUDA kernel: grid/block geometry, per-thread
resource usage, and one warp-level program that every warp of the grid runs.
Memory instructions carry an AccessPattern that is expanded into 32 lane
addresses on demand, so a kernel file stays small no matter how big the grid is.

The five archetypes follow the problem types of the Rodinia kernels
(dense linear algebra, structured grid, graph traversal, dynamic programming,
unstructured grid). Only their memory/compute mix is modelled.
"""
import copy
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Union

import numpy as np

from gpudse.arch_model import KB, WARP_SIZE
from gpudse.errors import KernelFormatError, ValidationError, Violation

log = logging.getLogger(__name__)

DEFAULT_LINE_BYTES = 64

COMPUTE = "compute"
LOAD = "load"
STORE = "store"
SHMEM = "shmem"
BARRIER = "barrier"
INSTR_KINDS = (COMPUTE, LOAD, STORE, SHMEM, BARRIER)

COALESCED = "coalesced_stride"
STRIDED = "strided"
RANDOM = "random_uniform"
PATTERN_MODES = (COALESCED, STRIDED, RANDOM)

ARCHETYPES = (
    "dense_linear_algebra",
    "structured_grid",
    "graph_traversal",
    "dynamic_programming",
    "unstructured_grid",
)
SCALES = ("tiny", "small", "medium")

FOOTPRINT = {"tiny": 64 * KB, "small": 1024 * KB, "medium": 8192 * KB}
THREADS_PER_BLOCK = {"tiny": 128, "small": 256, "medium": 256}

_MASK64 = (1 << 64) - 1
_LANES = np.arange(WARP_SIZE, dtype=np.int64)
_LANES_U64 = _LANES.astype(np.uint64)


@dataclass(frozen=True)
class AccessPattern:
    mode: str
    base_offset: int
    stride_bytes: int
    region_bytes: int


@dataclass(frozen=True)
class WarpInstr:
    kind: str
    issue_cycles: int = 0
    latency: int = 0
    pattern: AccessPattern | None = None

    @classmethod
    def compute(cls, issue_cycles: int = 1) -> "WarpInstr":
        return cls(COMPUTE, issue_cycles=issue_cycles)

    @classmethod
    def load(cls, pattern: AccessPattern) -> "WarpInstr":
        return cls(LOAD, pattern=pattern)

    @classmethod
    def store(cls, pattern: AccessPattern) -> "WarpInstr":
        return cls(STORE, pattern=pattern)

    @classmethod
    def shmem(cls, latency: int = 24) -> "WarpInstr":
        return cls(SHMEM, latency=latency)

    @classmethod
    def barrier(cls) -> "WarpInstr":
        return cls(BARRIER)

    @property
    def is_memory(self) -> bool:
        return self.kind in (LOAD, STORE)


@dataclass(frozen=True)
class BlockProgram:
    instructions: tuple
    iterations: int = 1

    def __len__(self) -> int:
        return len(self.instructions)


@dataclass(frozen=True)
class KernelSpec:
    grid_blocks: int
    threads_per_block: int
    regs_per_thread: int
    shmem_per_block: int
    program: BlockProgram
    footprint_bytes: int
    seed: int = 0
    label: str = "kernel"

    @property
    def warps_per_block(self) -> int:
        return self.threads_per_block // WARP_SIZE

    @property
    def total_threads(self) -> int:
        return self.grid_blocks * self.threads_per_block


@dataclass(frozen=True)
class Archetype:
    name: str
    scale: str = "tiny"


def dynamic_instructions(kernel: KernelSpec) -> int:
    """Warp instructions the whole grid issues."""
    return kernel.grid_blocks * kernel.warps_per_block * len(kernel.program) * kernel.program.iterations


def validate_kernel(kernel: KernelSpec, line_bytes: int = DEFAULT_LINE_BYTES) -> list[Violation]:
    """List the violated invariants of a kernel; empty means valid.

    Parameters:
    kernel: the kernel to check
    line_bytes: cache line size, the smallest footprint allowed

    Returns:
    list of Violation(path, message); instruction fields use paths such as
    'program.instructions[3].pattern.region_bytes'
    """
    out = []
    if kernel.threads_per_block < WARP_SIZE or kernel.threads_per_block % WARP_SIZE != 0:
        out.append(
            Violation("threads_per_block", f"must be a positive multiple of {WARP_SIZE}, got {kernel.threads_per_block}")
        )
    if kernel.grid_blocks < 1:
        out.append(Violation("grid_blocks", f"must be >= 1, got {kernel.grid_blocks}"))
    if kernel.regs_per_thread < 0:
        out.append(Violation("regs_per_thread", f"must be >= 0, got {kernel.regs_per_thread}"))
    if kernel.shmem_per_block < 0:
        out.append(Violation("shmem_per_block", f"must be >= 0, got {kernel.shmem_per_block}"))
    if kernel.footprint_bytes < line_bytes:
        out.append(Violation("footprint_bytes", f"must be >= the line size {line_bytes}, got {kernel.footprint_bytes}"))
    program = kernel.program
    if not program.instructions:
        out.append(Violation("program.instructions", "must not be empty"))
    if program.iterations < 1:
        out.append(Violation("program.iterations", f"must be >= 1, got {program.iterations}"))
    for i, instr in enumerate(program.instructions):
        path = f"program.instructions[{i}]"
        if instr.kind not in INSTR_KINDS:
            out.append(Violation(f"{path}.kind", f"unknown instruction kind '{instr.kind}'"))
        elif instr.kind == COMPUTE and instr.issue_cycles < 1:
            out.append(Violation(f"{path}.issue_cycles", f"must be >= 1, got {instr.issue_cycles}"))
        elif instr.kind == SHMEM and instr.latency < 1:
            out.append(Violation(f"{path}.latency", f"must be >= 1, got {instr.latency}"))
        elif instr.is_memory:
            p = instr.pattern
            if p is None:
                out.append(Violation(f"{path}.pattern", "memory instruction without an access pattern"))
                continue
            if p.mode not in PATTERN_MODES:
                out.append(Violation(f"{path}.pattern.mode", f"unknown mode '{p.mode}'"))
            if p.stride_bytes < 4:
                out.append(Violation(f"{path}.pattern.stride_bytes", f"must be >= 4, got {p.stride_bytes}"))
            if p.region_bytes < 4 or p.base_offset < 0:
                out.append(Violation(f"{path}.pattern.region_bytes", "region must be at least one word at offset >= 0"))
            elif p.base_offset + p.region_bytes > kernel.footprint_bytes:
                out.append(
                    Violation(
                        f"{path}.pattern.region_bytes",
                        f"[{p.base_offset}, {p.base_offset + p.region_bytes}) exceeds footprint {kernel.footprint_bytes}",
                    )
                )
    return out


def check_kernel(kernel: KernelSpec) -> KernelSpec:
    violations = validate_kernel(kernel)
    if violations:
        raise ValidationError(f"kernel '{kernel.label}'", violations)
    return kernel


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def warp_addresses(pattern: AccessPattern, warp_index: int, instr_ordinal: int, seed: int) -> np.ndarray:
    """Byte addresses of all 32 lanes of one dynamic memory instruction.

    warp_index is the grid-wide warp number, instr_ordinal the position of the
    instruction in the warp's dynamic instruction stream.
    """
    match pattern.mode:
        case "coalesced_stride":
            index = warp_index * WARP_SIZE + _LANES
        case "strided":
            # sliding window: each later instruction reads the next warp's slice
            index = (warp_index + instr_ordinal) * WARP_SIZE + _LANES
        case "random_uniform":
            x = np.full(WARP_SIZE, seed & _MASK64, dtype=np.uint64)
            x = _splitmix64(x ^ np.uint64(warp_index & _MASK64))
            x = _splitmix64(x ^ _LANES_U64)
            x = _splitmix64(x ^ np.uint64(instr_ordinal & _MASK64))
            words = np.uint64(pattern.region_bytes // 4)
            return pattern.base_offset + (x % words).astype(np.int64) * 4
        case _:
            raise ValueError(f"unknown access pattern mode '{pattern.mode}'")
    return pattern.base_offset + (index * pattern.stride_bytes) % pattern.region_bytes


def expand_addresses(pattern: AccessPattern, warp_index: int, lane: int, instr_ordinal: int, seed: int) -> int:
    if not 0 <= lane < WARP_SIZE:
        raise ValueError(f"lane must be in [0, {WARP_SIZE}), got {lane}")
    return int(warp_addresses(pattern, warp_index, instr_ordinal, seed)[lane])


def regranularize(kernel: KernelSpec, new_threads_per_block: int) -> KernelSpec:
    """Redistribute the same total work over blocks of a different size.

    Total threads, the per-thread program and the footprint stay the same;
    shared memory per block scales with the block size so the grid-wide total
    is conserved. Warps keep their grid-wide index, so address streams match.

    Parameters:
    kernel: the kernel to reshape
    new_threads_per_block: multiple of 32 that divides the total thread count

    Returns:
    the reshaped KernelSpec, or kernel itself if the block size is unchanged.
    Raises ValidationError if the block size is not a multiple of 32, does not
    divide the grid, or would need a fractional shared-memory size per block.

    Example:

    fine = regranularize(coarse, 128)  # 2 x 1024 threads -> 16 x 128 threads

    """
    if new_threads_per_block == kernel.threads_per_block:
        return kernel
    violations = []
    if new_threads_per_block < WARP_SIZE or new_threads_per_block % WARP_SIZE != 0:
        violations.append(
            Violation("threads_per_block", f"must be a positive multiple of {WARP_SIZE}, got {new_threads_per_block}")
        )
    elif kernel.total_threads % new_threads_per_block != 0:
        violations.append(
            Violation(
                "threads_per_block",
                f"{kernel.total_threads} threads do not divide into blocks of {new_threads_per_block}",
            )
        )
    elif (kernel.shmem_per_block * new_threads_per_block) % kernel.threads_per_block != 0:
        violations.append(
            Violation("shmem_per_block", f"{kernel.shmem_per_block}B does not scale to {new_threads_per_block} threads")
        )
    if violations:
        raise ValidationError(f"regranularization of '{kernel.label}'", violations)
    return replace(
        kernel,
        grid_blocks=kernel.total_threads // new_threads_per_block,
        threads_per_block=new_threads_per_block,
        shmem_per_block=kernel.shmem_per_block * new_threads_per_block // kernel.threads_per_block,
        label=f"{kernel.label}/tpb{new_threads_per_block}",
    )


def _computes(rng: np.random.Generator, count: int, choices=(1, 1, 1, 2)) -> list:
    return [WarpInstr.compute(int(c)) for c in rng.choice(choices, size=count)]


def _dense_linear_algebra(rng, footprint, tpb, scale):
    half = footprint // 2
    warps = {"tiny": 16, "small": 64, "medium": 256}[scale]
    body = [
        WarpInstr.load(AccessPattern(COALESCED, 0, 4, half)),
        WarpInstr.load(AccessPattern(COALESCED, half, 4, half)),
        WarpInstr.shmem(24),
        WarpInstr.barrier(),
        *_computes(rng, int(rng.integers(64, 97))),
        WarpInstr.store(AccessPattern(COALESCED, 0, 4, half)),
    ]
    return warps, body, 64, tpb * 8, {"tiny": 6, "small": 6, "medium": 8}[scale]


def _structured_grid(rng, footprint, tpb, scale):
    # hot plane of one line per lane, revisited every iteration
    plane = footprint // 4
    warps = plane // (WARP_SIZE * DEFAULT_LINE_BYTES)
    body = [
        WarpInstr.load(AccessPattern(COALESCED, 0, DEFAULT_LINE_BYTES, plane)),
        WarpInstr.load(AccessPattern(STRIDED, 0, DEFAULT_LINE_BYTES, plane)),
        *_computes(rng, int(rng.integers(2, 5))),
        WarpInstr.store(AccessPattern(COALESCED, footprint // 2, 4, footprint // 4)),
    ]
    return warps, body, 32, 0, 4


def _graph_traversal(rng, footprint, tpb, scale):
    eighth = footprint // 8
    warps = {"tiny": 16, "small": 64, "medium": 256}[scale]
    body = [
        WarpInstr.load(AccessPattern(COALESCED, 0, 4, eighth)),
        WarpInstr.load(AccessPattern(RANDOM, eighth, 4, 4 * eighth)),
        *_computes(rng, int(rng.integers(1, 3))),
        WarpInstr.load(AccessPattern(RANDOM, 5 * eighth, 4, 2 * eighth)),
        *_computes(rng, int(rng.integers(1, 3))),
        WarpInstr.store(AccessPattern(RANDOM, 7 * eighth, 4, eighth)),
    ]
    return warps, body, 24, 0, {"tiny": 2, "small": 3, "medium": 4}[scale]


def _dynamic_programming(rng, footprint, tpb, scale):
    half = footprint // 2
    warps = {"tiny": 16, "small": 64, "medium": 256}[scale]
    body = [WarpInstr.load(AccessPattern(COALESCED, 0, 4, half))]
    for _ in range(int(rng.integers(3, 5))):
        body += [WarpInstr.shmem(24), WarpInstr.barrier(), *_computes(rng, int(rng.integers(1, 4)))]
    body.append(WarpInstr.store(AccessPattern(COALESCED, half, 4, half)))
    shmem = {"tiny": 8 * KB, "small": 16 * KB, "medium": 16 * KB}[scale]
    return warps, body, 32, shmem, {"tiny": 4, "small": 6, "medium": 8}[scale]


def _unstructured_grid(rng, footprint, tpb, scale):
    quarter = footprint // 4
    warps = {"tiny": 16, "small": 64, "medium": 256}[scale]
    body = [
        WarpInstr.load(AccessPattern(COALESCED, 0, 4, quarter)),
        WarpInstr.load(AccessPattern(RANDOM, quarter, 4, quarter)),
        *_computes(rng, int(rng.integers(4, 8))),
        WarpInstr.shmem(24),
        WarpInstr.barrier(),
        WarpInstr.load(AccessPattern(STRIDED, 2 * quarter, 8, quarter)),
        *_computes(rng, 2),
        WarpInstr.store(AccessPattern(COALESCED, 3 * quarter, 4, quarter)),
    ]
    return warps, body, 48, tpb * 4, {"tiny": 3, "small": 4, "medium": 6}[scale]


_GENERATORS = {
    "dense_linear_algebra": _dense_linear_algebra,
    "structured_grid": _structured_grid,
    "graph_traversal": _graph_traversal,
    "dynamic_programming": _dynamic_programming,
    "unstructured_grid": _unstructured_grid,
}


def gen_archetype(archetype: Archetype, seed: int) -> KernelSpec:
    """Generate the synthetic kernel of an archetype; a pure function of (archetype, seed).

    Parameters:
    archetype: one of ARCHETYPES at a scale in SCALES
    seed: picks the instruction mix and the random address streams

    Returns:
    a validated KernelSpec labelled '<name>-<scale>-s<seed>'
    """
    if archetype.name not in _GENERATORS:
        raise ValueError(f"unknown archetype '{archetype.name}', expected one of {', '.join(ARCHETYPES)}")
    if archetype.scale not in SCALES:
        raise ValueError(f"unknown scale '{archetype.scale}', expected one of {', '.join(SCALES)}")
    rng = np.random.default_rng(
        [seed & _MASK64, ARCHETYPES.index(archetype.name), SCALES.index(archetype.scale)]
    )
    footprint = FOOTPRINT[archetype.scale]
    tpb = THREADS_PER_BLOCK[archetype.scale]
    warps, body, regs, shmem, iterations = _GENERATORS[archetype.name](rng, footprint, tpb, archetype.scale)
    grid = max(1, warps // (tpb // WARP_SIZE))
    kernel = KernelSpec(
        grid_blocks=grid,
        threads_per_block=tpb,
        regs_per_thread=regs,
        shmem_per_block=shmem,
        program=BlockProgram(tuple(body), iterations),
        footprint_bytes=footprint,
        seed=seed,
        label=f"{archetype.name}-{archetype.scale}-s{seed}",
    )
    return check_kernel(kernel)


def synthetic_suite(scale: str = "tiny", seed: int = 1) -> list[KernelSpec]:
    """One kernel per archetype, in archetype order."""
    return [gen_archetype(Archetype(name, scale), seed) for name in ARCHETYPES]


def _instr_to_dict(instr: WarpInstr) -> dict:
    match instr.kind:
        case "compute":
            args = {"issue_cycles": instr.issue_cycles}
        case "shmem":
            args = {"latency": instr.latency}
        case "barrier":
            args = {}
        case _:
            p = instr.pattern
            args = {
                "mode": p.mode,
                "base_offset": p.base_offset,
                "stride_bytes": p.stride_bytes,
                "region_bytes": p.region_bytes,
            }
    return {"kind": instr.kind, "args": args}


def kernel_to_dict(kernel: KernelSpec) -> dict:
    return {
        "label": kernel.label,
        "grid_blocks": kernel.grid_blocks,
        "threads_per_block": kernel.threads_per_block,
        "regs_per_thread": kernel.regs_per_thread,
        "shmem_per_block": kernel.shmem_per_block,
        "footprint_bytes": kernel.footprint_bytes,
        "seed": kernel.seed,
        "program": {
            "iterations": kernel.program.iterations,
            "instructions": [_instr_to_dict(i) for i in kernel.program.instructions],
        },
    }


def write_kernel(kernel: KernelSpec, fname: Union[str, Path]) -> None:
    check_kernel(kernel)
    Path(fname).write_text(json.dumps(kernel_to_dict(kernel), indent=1) + "\n")


class _Reader:
    """Field access over a parsed kernel file that reports the line of a bad field."""

    def __init__(self, fname: str, text: str, skip: int = 0):
        self.fname = fname
        self.lines = text.splitlines()
        self.skip = skip

    def line_of(self, field: str, skip: int | None = None) -> int | None:
        """1-based line of the first mention of field after the first `skip` lines."""
        skip = self.skip if skip is None else skip
        key = f'"{field}"'
        for n, line in enumerate(self.lines[skip:], start=skip + 1):
            if key in line:
                return n
        return None

    def for_instruction(self, index: int) -> "_Reader":
        """Reader whose lookups start at the "kind" entry of instruction `index`."""
        n = self.line_of("instructions") or 0
        for _ in range(index + 1):
            found = self.line_of("kind", n)
            if found is None:
                break
            n = found
        sub = copy.copy(self)
        sub.skip = max(n - 1, 0)
        return sub

    def get(self, data: dict, field: str, kind=int):
        if not isinstance(data, dict) or field not in data:
            raise KernelFormatError(self.fname, "missing field", field=field)
        value = data[field]
        ok = isinstance(value, kind) and not isinstance(value, bool)
        if not ok:
            raise KernelFormatError(
                self.fname, f"expected {kind.__name__}, got {value!r}", line=self.line_of(field), field=field
            )
        return value


def _instr_from_dict(r: _Reader, entry: dict, index: int) -> WarpInstr:
    r = r.for_instruction(index)
    kind = r.get(entry, "kind", str)
    args = entry.get("args", {}) if isinstance(entry, dict) else {}
    match kind:
        case "compute":
            return WarpInstr.compute(r.get(args, "issue_cycles"))
        case "shmem":
            return WarpInstr.shmem(r.get(args, "latency"))
        case "barrier":
            return WarpInstr.barrier()
        case "load" | "store":
            pattern = AccessPattern(
                mode=r.get(args, "mode", str),
                base_offset=r.get(args, "base_offset"),
                stride_bytes=r.get(args, "stride_bytes"),
                region_bytes=r.get(args, "region_bytes"),
            )
            return WarpInstr(kind, pattern=pattern)
        case _:
            raise KernelFormatError(
                r.fname, f"unknown instruction kind '{kind}' at index {index}", line=r.line_of("kind"), field="kind"
            )


def kernel_from_dict(data: dict, fname: str = "<kernel>", text: str = "") -> KernelSpec:
    r = _Reader(fname, text)
    program = r.get(data, "program", dict)
    instructions = r.get(program, "instructions", list)
    kernel = KernelSpec(
        grid_blocks=r.get(data, "grid_blocks"),
        threads_per_block=r.get(data, "threads_per_block"),
        regs_per_thread=r.get(data, "regs_per_thread"),
        shmem_per_block=r.get(data, "shmem_per_block"),
        program=BlockProgram(
            tuple(_instr_from_dict(r, e, i) for i, e in enumerate(instructions)),
            r.get(program, "iterations"),
        ),
        footprint_bytes=r.get(data, "footprint_bytes"),
        seed=r.get(data, "seed"),
        label=r.get(data, "label", str),
    )
    return check_kernel(kernel)


def read_kernel(fname: Union[str, Path]) -> KernelSpec:
    """Parse and validate a kernel file written by write_kernel."""
    text = Path(fname).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise KernelFormatError(str(fname), e.msg, line=e.lineno) from None
    if not isinstance(data, dict):
        raise KernelFormatError(str(fname), "top level must be an object", line=1)
    return kernel_from_dict(data, str(fname), text)
