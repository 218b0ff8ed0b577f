"""Memory hierarchy timing.

Per-SM private L1s, one shared banked L2 and a bandwidth/latency DRAM model.
Both cache levels are set-associative LRU, write-back and write-allocate.
Timing is resolved when a warp instruction issues: every coalesced line walks
L1 -> L2 -> DRAM right away and the caller gets the cycle at which the last
line is back. Contention shows up through the booking calendars of the
per-cluster L2 request ports, the L2 banks and the DRAM channels, which serve
requests by the cycle they arrive at, whatever SM they come from.
"""
import bisect
import heapq
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import IO, NamedTuple

import numpy as np

from gpudse.arch_model import CacheGeometry, DramConfig, GpuConfig

log = logging.getLogger(__name__)

L1 = "L1"
L2 = "L2"


@dataclass
class MemStats:
    accesses: int = 0
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    writebacks: int = 0
    dram_bytes: int = 0

    def __add__(self, other: "MemStats") -> "MemStats":
        return MemStats(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    @property
    def miss_rate(self) -> float:
        return self.misses / self.accesses if self.accesses else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class MemRequest(NamedTuple):
    line_address: int
    is_write: bool
    sm_id: int
    ready_cycle: int


class AccessResult(NamedTuple):
    hit: bool
    evicted_line: int | None = None
    writeback: bool = False


_HIT = AccessResult(True)

# float slack when comparing service times
_EPS = 1e-9


class CacheState:
    """Tag store of one cache.

    Each set is an OrderedDict of tag -> dirty bit, least recently used first.
    """

    def __init__(self, geometry: CacheGeometry):
        self.geometry = geometry
        self.num_sets = geometry.num_sets
        self.sets = [OrderedDict() for _ in range(self.num_sets)]
        self.stats = MemStats()

    def contains(self, line: int) -> bool:
        index = line // self.geometry.line_bytes
        return index // self.num_sets in self.sets[index % self.num_sets]

    def occupancy(self) -> int:
        return sum(len(s) for s in self.sets)


def cache_access(state: CacheState, line: int, is_write: bool = False) -> AccessResult:
    """Look up one line, update LRU order and stats, allocate on a miss."""
    line_bytes = state.geometry.line_bytes
    index = line // line_bytes
    set_index = index % state.num_sets
    tag = index // state.num_sets
    ways = state.sets[set_index]
    stats = state.stats
    stats.accesses += 1
    if tag in ways:
        stats.hits += 1
        ways.move_to_end(tag)
        if is_write:
            ways[tag] = True
        return _HIT
    stats.misses += 1
    evicted = None
    dirty = False
    if len(ways) >= state.geometry.associativity:
        old_tag, dirty = ways.popitem(last=False)
        evicted = (old_tag * state.num_sets + set_index) * line_bytes
        stats.evictions += 1
        if dirty:
            stats.writebacks += 1
    ways[tag] = is_write
    return AccessResult(False, evicted, dirty)


def coalesce(addresses, line_bytes: int) -> list[int]:
    """Unique line addresses touched by a warp's lane addresses, ascending."""
    a = np.asarray(addresses, dtype=np.int64)
    return np.unique(a - a % line_bytes).tolist()


class SlotCalendar:
    """Bookings of a resource that serves one request per `spacing` cycles.

    A request takes the earliest service time at or after the cycle it asks
    for that keeps `spacing` from every booking already made. Requests are
    thus served in the order of the cycles they ask for, not the order the
    simulator happens to process them in, and a booking never moves.
    """

    def __init__(self, spacing: float = 1):
        self.spacing = spacing
        self._times = []

    def __len__(self) -> int:
        return len(self._times)

    def book(self, cycle: float) -> float:
        times, gap = self._times, self.spacing - _EPS
        t = cycle
        while True:
            i = bisect.bisect_right(times, t)
            if i > 0 and t - times[i - 1] < gap:
                t = times[i - 1] + self.spacing
            elif i < len(times) and times[i] - t < gap:
                t = times[i] + self.spacing
            else:
                break
        times.insert(i, t)
        return t

    def forget_before(self, cycle: float) -> None:
        """Drop bookings that can no longer conflict with a request at or after cycle."""
        del self._times[:bisect.bisect_left(self._times, cycle - self.spacing)]


class DramChannel:
    """Fixed latency, and completions at least one line-transfer time apart."""

    def __init__(self, latency_cycles: int, cycles_per_line: float):
        self.latency_cycles = latency_cycles
        self.cycles_per_line = cycles_per_line
        self.slots = SlotCalendar(cycles_per_line)

    def complete(self, issue_cycle: int) -> int:
        return math.ceil(self.slots.book(issue_cycle + self.latency_cycles) - _EPS)


def _channels(dram: DramConfig, line_bytes: int) -> list[DramChannel]:
    per_channel = dram.bandwidth_bytes_per_cycle / dram.channels
    return [DramChannel(dram.latency_cycles, line_bytes / per_channel) for _ in range(dram.channels)]


def dram_service(requests, current_cycle: int, dram: DramConfig, line_bytes: int = 64) -> list[int]:
    """Completion cycle of every request of a queue served by idle channels.

    A request is issued at max(current_cycle, ready_cycle); requests are taken in
    queue order and a line's channel is its line index modulo the channel count.
    """
    channels = _channels(dram, line_bytes)
    out = []
    for req in requests:
        channel = channels[(req.line_address // line_bytes) % dram.channels]
        out.append(channel.complete(max(current_cycle, req.ready_cycle)))
    return out


class MissTracker:
    """Outstanding L1 misses of one SM, released when their fill returns."""

    def __init__(self, limit: int):
        self.limit = limit
        self._pending = []

    def __len__(self) -> int:
        return len(self._pending)

    def release(self, now: int) -> None:
        while self._pending and self._pending[0] <= now:
            heapq.heappop(self._pending)

    def full(self) -> bool:
        return len(self._pending) >= self.limit

    def track(self, release_cycles) -> None:
        for c in release_cycles:
            heapq.heappush(self._pending, c)

    def next_release(self) -> int | None:
        return self._pending[0] if self._pending else None


class MemoryHierarchy:
    """All caches and DRAM of one simulated GPU. Owned by a single simulation."""

    # cycles between two sweeps of stale calendar bookings
    FORGET_INTERVAL = 1024

    def __init__(self, config: GpuConfig, max_outstanding_misses: int = 32, trace: IO | None = None):
        self.config = config
        self.line_bytes = config.sm.l1.line_bytes
        self.l1 = [CacheState(config.sm.l1) for _ in range(config.num_sms)]
        self.l2 = CacheState(config.l2)
        self.channels = _channels(config.dram, self.line_bytes)
        self.mshr = [MissTracker(max_outstanding_misses) for _ in range(config.num_sms)]
        self.banks = [SlotCalendar() for _ in range(config.dram.l2_banks)]
        self.ports = [SlotCalendar() for _ in range(config.num_clusters)]
        self._trace = trace
        self._forgotten = 0

    @property
    def l1_stats(self) -> MemStats:
        return sum((c.stats for c in self.l1), MemStats())

    @property
    def l2_stats(self) -> MemStats:
        return self.l2.stats

    def _log(self, cycle, sm_id, level, line, hit):
        self._trace.write(f"{cycle} {sm_id} {level} {line} {'hit' if hit else 'miss'}\n")

    def _dram(self, line: int, cycle: int) -> int:
        self.l2.stats.dram_bytes += self.line_bytes
        return self.channels[(line // self.line_bytes) % len(self.channels)].complete(cycle)

    def _l2_access(self, sm_id: int, line: int, is_write: bool, cycle: int) -> int:
        grant = self.ports[sm_id // self.config.sms_per_cluster].book(cycle)
        grant = self.banks[(line // self.line_bytes) % len(self.banks)].book(grant)

        res = cache_access(self.l2, line, is_write)
        if self._trace is not None:
            self._log(grant, sm_id, L2, line, res.hit)
        done = grant + self.config.l2.hit_latency
        if res.writeback:
            self._dram(res.evicted_line, grant)
        if not res.hit:
            done = self._dram(line, done)
        return done

    def _forget(self, cycle: int) -> None:
        if cycle - self._forgotten < self.FORGET_INTERVAL:
            return
        for calendar in self.ports + self.banks + [c.slots for c in self.channels]:
            calendar.forget_before(cycle)
        self._forgotten = cycle

    def access_lines(self, sm_id: int, lines, is_write: bool, cycle: int) -> tuple[int, list[int]]:
        """Send one warp's coalesced lines through the hierarchy.

        Calls must come with nondecreasing cycles. Returns the cycle the last
        line completes and the completion cycles of the L1 misses, which the
        caller holds as outstanding until then.
        """
        self._forget(cycle)
        l1 = self.l1[sm_id]
        l1_latency = self.config.sm.l1.hit_latency
        done = cycle
        miss_done = []
        for line in lines:
            res = cache_access(l1, line, is_write)
            if self._trace is not None:
                self._log(cycle, sm_id, L1, line, res.hit)
            if res.hit:
                done = max(done, cycle + l1_latency)
                continue
            if res.writeback:
                # the warp does not wait for the victim
                self._l2_access(sm_id, res.evicted_line, True, cycle + l1_latency)
            fill = self._l2_access(sm_id, line, False, cycle + l1_latency)
            miss_done.append(fill)
            done = max(done, fill)
        return done, miss_done
