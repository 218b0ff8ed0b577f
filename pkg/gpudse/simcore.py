"""Timing simulation of one kernel on one GPU.

The simulator steps a global cycle counter but skips every cycle in which
nothing can happen. Each simulated cycle runs, in order:

1. retire warps whose last instruction completed, freeing SM block slots,
2. dispatch pending blocks round-robin over SMs (ascending id),
3. let every warp scheduler issue up to dispatch_width instructions, each from
   its own warp to its own SMB; an SMB takes one instruction per cycle.

Timing of memory instructions is resolved at issue by gpudse.memhier.
"""
import heapq
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import IO

from gpudse.arch_model import WARP_SIZE, GpuConfig, SmConfig, check
from gpudse.errors import (
    ConfigError,
    SimulationAbortedError,
    SweepDataError,
    UnschedulableKernelError,
    ValidationError,
)
from gpudse.memhier import MemoryHierarchy, MemStats, coalesce
from gpudse.workload import BARRIER, COMPUTE, SHMEM, STORE, KernelSpec, validate_kernel, warp_addresses

log = logging.getLogger(__name__)

OLDEST = "oldest"
ROUND_ROBIN = "round_robin"
POLICIES = (OLDEST, ROUND_ROBIN)

CYCLE_CAP_ENV = "GPU_DSE_CYCLE_CAP"


@dataclass(frozen=True)
class SimOptions:
    """Simulator knobs that are not part of the machine description.

    launch_cycles is the fixed pipeline delay between block dispatch and the
    first issue of its warps. dispatch_width is the number of instructions a
    warp scheduler may issue per cycle, from different warps to different SMBs.
    """

    cycle_cap: int = 10**9
    max_outstanding_misses: int = 32
    scheduler_policy: str = OLDEST
    launch_cycles: int = 4
    dispatch_width: int = 2

    def __post_init__(self):
        if self.scheduler_policy not in POLICIES:
            raise ConfigError(f"unknown scheduler policy '{self.scheduler_policy}', expected one of {POLICIES}")
        if (self.cycle_cap < 1 or self.max_outstanding_misses < 1 or self.launch_cycles < 0
                or self.dispatch_width < 1):
            raise ConfigError(f"invalid simulator options: {self}")

    @classmethod
    def from_env(cls, **kwargs) -> "SimOptions":
        """Defaults, with the cycle cap taken from GPU_DSE_CYCLE_CAP when set."""
        value = os.environ.get(CYCLE_CAP_ENV)
        if value is not None and "cycle_cap" not in kwargs:
            try:
                kwargs["cycle_cap"] = int(value)
            except ValueError:
                raise ConfigError(f"{CYCLE_CAP_ENV} must be an integer, got '{value}'") from None
        return cls(**kwargs)


@dataclass(frozen=True)
class OccupancyReport:
    limit_threads: int
    limit_registers: int
    limit_shmem: int
    limit_blockcap: int
    blocks_per_sm: int

    @property
    def binding_limit(self) -> str:
        limits = {
            "threads": self.limit_threads,
            "registers": self.limit_registers,
            "shared_memory": self.limit_shmem,
            "block_cap": self.limit_blockcap,
        }
        return min(limits, key=limits.get)


def max_blocks_per_sm(sm: SmConfig, kernel: KernelSpec) -> OccupancyReport:
    """Blocks of a kernel that fit on one SM at the same time.

    Raises UnschedulableKernelError if not even one block fits.
    """
    tpb = kernel.threads_per_block
    limit_threads = min(sm.max_threads, sm.max_warps * WARP_SIZE) // tpb
    if kernel.regs_per_thread > 0:
        limit_registers = sm.regfile_regs // (kernel.regs_per_thread * tpb)
    else:
        limit_registers = sm.max_blocks
    if kernel.shmem_per_block > 0:
        limit_shmem = sm.shmem_bytes // kernel.shmem_per_block
    else:
        limit_shmem = sm.max_blocks
    report = OccupancyReport(
        limit_threads=limit_threads,
        limit_registers=limit_registers,
        limit_shmem=limit_shmem,
        limit_blockcap=sm.max_blocks,
        blocks_per_sm=min(limit_threads, limit_registers, limit_shmem, sm.max_blocks),
    )
    if report.blocks_per_sm == 0:
        raise UnschedulableKernelError(kernel.label, report.binding_limit)
    return report


@dataclass(frozen=True)
class SmStats:
    busy_cycles: int = 0
    stall_cycles_mem: int = 0
    stall_cycles_issue: int = 0
    instructions_issued: int = 0
    blocks_executed: int = 0


@dataclass(frozen=True)
class SimResult:
    kernel_label: str
    config_label: str
    total_cycles: int
    wall_time_estimate: float
    instructions_issued: int
    per_sm: tuple
    l1_stats: MemStats
    l2_stats: MemStats
    blocks_executed: int
    occupancy: OccupancyReport = field(compare=False, default=None)

    @property
    def ipc(self) -> float:
        return self.instructions_issued / self.total_cycles if self.total_cycles else 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_sm"] = [asdict(s) for s in self.per_sm]
        out["ipc"] = self.ipc
        return out


def speedup(baseline: SimResult, variant: SimResult) -> float:
    """Slowdown of variant against baseline; below 1.0 means the variant is faster."""
    if baseline.kernel_label != variant.kernel_label:
        raise SweepDataError(
            f"cannot compare runs of different kernels: '{baseline.kernel_label}' vs '{variant.kernel_label}'"
        )
    return variant.total_cycles / baseline.total_cycles


class _Warp:
    __slots__ = ("block", "gid", "age", "pc", "iteration", "ready_at", "parked")

    def __init__(self, block, gid, age, ready_at):
        self.block = block
        self.gid = gid
        self.age = age
        self.pc = 0
        self.iteration = 0
        self.ready_at = ready_at
        self.parked = False


class _Block:
    __slots__ = ("sm", "live", "size", "arrived")

    def __init__(self, sm, size):
        self.sm = sm
        self.size = size
        self.live = size
        self.arrived = []


class _Scheduler:
    __slots__ = ("smbs", "warps", "smb_next", "warp_next")

    def __init__(self, smbs):
        self.smbs = smbs
        self.warps = []
        self.smb_next = 0
        self.warp_next = 0


def _scheduler_smbs(schedulers: int, smbs: int) -> list[list[int]]:
    if schedulers >= smbs:
        return [[i % smbs] for i in range(schedulers)]
    return [list(range(i, smbs, schedulers)) for i in range(schedulers)]


class _Sm:
    def __init__(self, sm_id: int, config: SmConfig):
        self.id = sm_id
        self.schedulers = [_Scheduler(s) for s in _scheduler_smbs(config.warp_schedulers, config.smb_per_sm)]
        self.alu_free = [0] * config.smb_per_sm
        self.last_issue = [-1] * config.smb_per_sm
        self.resident = 0
        self.next_scheduler = 0
        self.mem_pending = []
        self.busy = 0
        self.stall_mem = 0
        self.stall_issue = 0
        self.issued = 0
        self.blocks = 0


class Simulator:
    """Single-use simulation of one (config, kernel) pair."""

    def __init__(self, config: GpuConfig, kernel: KernelSpec, options: SimOptions | None = None,
                 trace: IO | None = None):
        self.config = check(config)
        violations = validate_kernel(kernel, config.sm.l1.line_bytes)
        if violations:
            raise ValidationError(f"kernel '{kernel.label}'", violations)
        self.kernel = kernel
        self.options = options or SimOptions.from_env()
        self.occupancy = max_blocks_per_sm(config.sm, kernel)
        self.mem = MemoryHierarchy(config, self.options.max_outstanding_misses, trace)
        self.sms = [_Sm(i, config.sm) for i in range(config.num_sms)]
        self.instructions = kernel.program.instructions
        self.alu_cycles = math.ceil(WARP_SIZE / config.sm.cores_per_smb)
        self.line_bytes = config.sm.l1.line_bytes
        self._finishing = []
        self._next_block = 0
        self._age = 0
        self._wake = math.inf

    def _dispatch(self, now: int) -> None:
        kernel = self.kernel
        limit = self.occupancy.blocks_per_sm
        wpb = kernel.warps_per_block
        progress = True
        while progress and self._next_block < kernel.grid_blocks:
            progress = False
            for sm in self.sms:
                if self._next_block >= kernel.grid_blocks:
                    break
                if sm.resident >= limit:
                    continue
                block = _Block(sm, wpb)
                for w in range(wpb):
                    warp = _Warp(block, self._next_block * wpb + w, self._age, now + self.options.launch_cycles)
                    self._age += 1
                    sm.schedulers[sm.next_scheduler].warps.append(warp)
                    sm.next_scheduler = (sm.next_scheduler + 1) % len(sm.schedulers)
                sm.resident += 1
                self._next_block += 1
                self._wake = min(self._wake, now + self.options.launch_cycles)
                progress = True

    def _retire(self, now: int) -> int:
        retired = 0
        while self._finishing and self._finishing[0][0] <= now:
            _, _, warp = heapq.heappop(self._finishing)
            block = warp.block
            block.live -= 1
            if block.live == 0:
                block.sm.resident -= 1
                block.sm.blocks += 1
                retired += 1
        return retired

    def _advance(self, sched: _Scheduler, warp: _Warp) -> None:
        warp.pc += 1
        if warp.pc == len(self.instructions):
            warp.pc = 0
            warp.iteration += 1
            if warp.iteration == self.kernel.program.iterations:
                sched.warps.remove(warp)
                if not warp.parked:
                    self._finish(warp, warp.ready_at)

    def _finish(self, warp: _Warp, cycle: int) -> None:
        heapq.heappush(self._finishing, (cycle, warp.age, warp))
        self._wake = min(self._wake, cycle)

    def _free_smb(self, sm: _Sm, sched: _Scheduler, now: int, need_alu: bool):
        """First SMB of the scheduler, in rotation order, able to take an instruction now."""
        n = len(sched.smbs)
        for k in range(n):
            b = sched.smbs[(sched.smb_next + k) % n]
            if sm.last_issue[b] == now:
                continue
            if need_alu and sm.alu_free[b] > now:
                continue
            sched.smb_next = (sched.smb_next + k + 1) % n
            return b
        return None

    def _hazard_wake(self, sm: _Sm, sched: _Scheduler, now: int, need_alu: bool) -> int:
        if not need_alu:
            return now + 1
        return max(now + 1, min(sm.alu_free[b] for b in sched.smbs))

    def _try_issue(self, sm: _Sm, sched: _Scheduler, warp: _Warp, now: int):
        """Issue the warp's next instruction. Returns None on success, else the cycle to retry."""
        instr = self.instructions[warp.pc]
        kind = instr.kind
        if kind == BARRIER:
            block = warp.block
            warp.parked = True
            block.arrived.append(warp)
            self._advance(sched, warp)
            if len(block.arrived) == block.size:
                for w in block.arrived:
                    w.parked = False
                    w.ready_at = now + 1
                    if w.iteration == self.kernel.program.iterations:
                        # barrier closed the program
                        self._finish(w, now + 1)
                block.arrived = []
                self._wake = min(self._wake, now + 1)
            return None

        if kind == COMPUTE:
            b = self._free_smb(sm, sched, now, need_alu=True)
            if b is None:
                return self._hazard_wake(sm, sched, now, need_alu=True)
            sm.alu_free[b] = now + self.alu_cycles
            warp.ready_at = now + max(instr.issue_cycles, self.alu_cycles)
        elif kind == SHMEM:
            b = self._free_smb(sm, sched, now, need_alu=False)
            if b is None:
                return now + 1
            warp.ready_at = now + instr.latency
        else:
            mshr = self.mem.mshr[sm.id]
            if mshr.full():
                return max(now + 1, mshr.next_release())
            b = self._free_smb(sm, sched, now, need_alu=False)
            if b is None:
                return now + 1
            ordinal = warp.iteration * len(self.instructions) + warp.pc
            addresses = warp_addresses(instr.pattern, warp.gid, ordinal, self.kernel.seed)
            done, misses = self.mem.access_lines(sm.id, coalesce(addresses, self.line_bytes), kind == STORE, now)
            mshr.track(misses)
            warp.ready_at = max(done, now + 1)
            heapq.heappush(sm.mem_pending, warp.ready_at)
        sm.last_issue[b] = now
        self._advance(sched, warp)
        return None

    def _issue(self, sm: _Sm, sched: _Scheduler, now: int) -> bool:
        warps = sched.warps
        if not warps:
            return False
        if self.options.scheduler_policy == ROUND_ROBIN:
            start = sched.warp_next % len(warps)
            order = warps[start:] + warps[:start]
        else:
            order = list(warps)
        width = self.options.dispatch_width
        issued = 0
        for i, warp in enumerate(order):
            if warp.parked:
                continue
            if warp.ready_at > now:
                self._wake = min(self._wake, warp.ready_at)
                continue
            if issued == width:
                self._wake = min(self._wake, now + 1)
                continue
            retry = self._try_issue(sm, sched, warp, now)
            if retry is None:
                issued += 1
                sm.issued += 1
                if not warp.parked and warp in warps:
                    self._wake = min(self._wake, warp.ready_at)
                if self.options.scheduler_policy == ROUND_ROBIN:
                    sched.warp_next = (start + i + 1) % len(warps) if warps else 0
            else:
                self._wake = min(self._wake, retry)
        return issued > 0

    def _account(self, sm: _Sm, now: int, span: int, issued: bool) -> None:
        while sm.mem_pending and sm.mem_pending[0] <= now:
            heapq.heappop(sm.mem_pending)
        if issued:
            sm.busy += 1
            span -= 1
        if span <= 0:
            return
        if sm.mem_pending:
            sm.stall_mem += span
        elif sm.resident:
            sm.stall_issue += span

    def run(self) -> SimResult:
        kernel = self.kernel
        cap = self.options.cycle_cap
        log.debug("simulating %s on %s (%d blocks, %d per SM)", kernel.label, self.config.label,
                  kernel.grid_blocks, self.occupancy.blocks_per_sm)
        done = 0
        now = 0
        while True:
            done += self._retire(now)
            if done == kernel.grid_blocks:
                break
            if now > cap:
                raise SimulationAbortedError(kernel.label, cap)
            self._wake = math.inf
            for tracker in self.mem.mshr:
                tracker.release(now)
            self._dispatch(now)
            issued = [any([self._issue(sm, sched, now) for sched in sm.schedulers]) for sm in self.sms]
            if self._finishing:
                self._wake = min(self._wake, self._finishing[0][0])
            if self._wake == math.inf:
                raise RuntimeError(f"simulation of '{kernel.label}' stalled at cycle {now}")
            nxt = max(self._wake, now + 1)
            for sm, sm_issued in zip(self.sms, issued):
                self._account(sm, now, nxt - now, sm_issued)
            now = nxt

        per_sm = tuple(
            SmStats(sm.busy, sm.stall_mem, sm.stall_issue, sm.issued, sm.blocks) for sm in self.sms
        )
        result = SimResult(
            kernel_label=kernel.label,
            config_label=self.config.label,
            total_cycles=now,
            wall_time_estimate=now / (self.config.clock_ghz * 1e9),
            instructions_issued=sum(s.instructions_issued for s in per_sm),
            per_sm=per_sm,
            l1_stats=self.mem.l1_stats,
            l2_stats=replace(self.mem.l2_stats),
            blocks_executed=done,
            occupancy=self.occupancy,
        )
        log.debug("%s on %s: %d cycles", kernel.label, self.config.label, now)
        return result


def simulate(config: GpuConfig, kernel: KernelSpec, options: SimOptions | None = None,
             trace: IO | None = None) -> SimResult:
    """Run one kernel to completion on one machine.

    A pure function of (config, kernel, options): two calls give identical results.
    With trace set, every cache access is written to it as `cycle sm level line hit|miss`.
    """
    return Simulator(config, kernel, options, trace).run()
