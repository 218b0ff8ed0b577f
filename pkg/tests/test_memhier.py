import io
import itertools

import numpy as np
import pytest

from gpudse.arch_model import KB, CacheGeometry, DramConfig
from gpudse.dse import DEFAULT_GRIDS
from gpudse.memhier import (
    CacheState,
    MemoryHierarchy,
    MemRequest,
    MemStats,
    MissTracker,
    SlotCalendar,
    cache_access,
    coalesce,
    dram_service,
)


class NaiveLru:
    """Reference LRU: one list of tags per set, most recent last."""

    def __init__(self, size, assoc, line=64):
        self.assoc = assoc
        self.line = line
        self.nsets = size // (assoc * line)
        self.sets = [[] for _ in range(self.nsets)]

    def access(self, address):
        index = address // self.line
        ways = self.sets[index % self.nsets]
        tag = index // self.nsets
        if tag in ways:
            ways.remove(tag)
            ways.append(tag)
            return True, None
        victim = None
        if len(ways) == self.assoc:
            victim = (ways.pop(0) * self.nsets + index % self.nsets) * self.line
        ways.append(tag)
        return False, victim


def _trace(rng, lines, n, line=64):
    return (rng.integers(0, lines, size=n) * line).tolist()


def test_coalesce_examples():
    assert coalesce(list(range(0, 128, 4)), 64) == [0, 64]
    assert coalesce([4096] * 32, 64) == [4096]
    assert coalesce(list(range(0, 32 * 64, 64)), 64) == list(range(0, 32 * 64, 64))
    assert coalesce([130, 5, 70], 64) == [0, 64, 128]


def test_cache_cold_and_hit():
    state = CacheState(CacheGeometry(4 * KB, 4))
    assert not cache_access(state, 640).hit
    assert cache_access(state, 640).hit
    assert cache_access(state, 660 - 660 % 64).hit
    assert state.stats == MemStats(accesses=3, hits=2, misses=1)


def test_direct_mapped_conflict():
    state = CacheState(CacheGeometry(128, 1))
    assert [cache_access(state, a).hit for a in (0, 128, 0)] == [False, False, False]
    assert state.stats.evictions == 2


def test_dirty_eviction():
    state = CacheState(CacheGeometry(128, 1))
    cache_access(state, 0, is_write=True)
    res = cache_access(state, 128)
    assert res.evicted_line == 0
    assert res.writeback
    res = cache_access(state, 0)
    assert res.evicted_line == 128
    assert not res.writeback
    assert state.stats.writebacks == 1


def _default_geometries():
    l1 = itertools.product(DEFAULT_GRIDS["l1_size"], DEFAULT_GRIDS["l1_assoc"])
    l2 = itertools.product(DEFAULT_GRIDS["l2_size"], DEFAULT_GRIDS["l2_assoc"])
    return [*l1, *l2]


@pytest.mark.parametrize("size,assoc", _default_geometries())
def test_matches_reference_lru(size, assoc):
    rng = np.random.default_rng(size * 16 + assoc)
    lines = 2 * size // 64
    state = CacheState(CacheGeometry(size, assoc))
    ref = NaiveLru(size, assoc)
    for address in _trace(rng, lines, 10**5):
        res = cache_access(state, address)
        assert (res.hit, res.evicted_line) == ref.access(address)
    assert state.occupancy() == sum(len(s) for s in ref.sets)


def test_lru_stack_property():
    rng = np.random.default_rng(5)
    nsets = 16
    for _ in range(100):
        trace = _trace(rng, int(rng.integers(nsets, 20 * nsets)), 2000)
        misses = []
        for assoc in (1, 2, 4, 8):
            state = CacheState(CacheGeometry(nsets * assoc * 64, assoc))
            for address in trace:
                cache_access(state, address)
            misses.append(state.stats.misses)
        assert misses == sorted(misses, reverse=True)


def test_dram_service():
    dram = DramConfig(bandwidth_bytes_per_cycle=32.0, latency_cycles=220)
    assert dram_service([MemRequest(0, False, 0, 0)], 0, dram) == [220]
    assert dram_service([MemRequest(0, False, 0, 0), MemRequest(64, False, 1, 0)], 0, dram) == [220, 222]
    assert dram_service([], 0, dram) == []


def test_dram_service_ready_and_channels():
    dram = DramConfig(bandwidth_bytes_per_cycle=32.0, latency_cycles=100, channels=2)
    requests = [MemRequest(0, False, 0, 0), MemRequest(64, False, 0, 0), MemRequest(128, True, 0, 50)]
    # line 1 goes to its own channel; line 2 shares channel 0 but issues late
    assert dram_service(requests, 10, dram) == [110, 110, 150]


def test_slot_calendar_serves_by_request_cycle():
    slots = SlotCalendar(2)
    assert slots.book(100) == 100
    # an earlier request booked later is not queued behind the future one
    assert slots.book(50) == 50
    assert slots.book(99) == 102
    assert slots.book(51) == 52
    assert slots.book(96) == 96
    assert slots.book(97) == 98
    assert slots.book(97) == 104
    assert len(slots) == 7
    slots.forget_before(99)
    assert len(slots) == 4
    assert slots.book(105) == 106


def test_miss_tracker():
    tracker = MissTracker(2)
    tracker.track([5, 3])
    assert tracker.full()
    assert tracker.next_release() == 3
    tracker.release(3)
    assert len(tracker) == 1
    assert not tracker.full()
    tracker.release(10)
    assert tracker.next_release() is None


def test_hierarchy_latencies(tx2):
    mem = MemoryHierarchy(tx2)
    done, misses = mem.access_lines(0, [0], False, 0)
    # L1 hit latency, then L2 hit latency, then DRAM latency
    assert done == 28 + 120 + 220
    assert misses == [done]
    done, misses = mem.access_lines(0, [0], False, 400)
    assert (done, misses) == (428, [])
    done, _ = mem.access_lines(1, [0], False, 400)
    assert done == 400 + 28 + 120
    assert mem.l1_stats.accesses == 3
    assert mem.l2_stats.hits == 1


def test_hierarchy_bank_conflicts(tx2):
    # 16 banks: every line below maps to bank 0
    lines = [i * 64 * 16 for i in range(4)]
    mem = MemoryHierarchy(tx2)
    for line in lines:
        mem.access_lines(0, [line], False, 0)
    done, _ = mem.access_lines(1, lines, False, 1000)
    assert done == 1000 + 28 + 3 + 120

    cold, _ = MemoryHierarchy(tx2).access_lines(1, lines, False, 1000)
    assert cold > done


def test_dram_bytes_conservation(tx2):
    rng = np.random.default_rng(11)
    mem = MemoryHierarchy(tx2)
    cycle = 0
    for _ in range(3000):
        lines = sorted(set(_trace(rng, 40000, 4)))
        mem.access_lines(int(rng.integers(0, 2)), lines, bool(rng.integers(0, 2)), cycle)
        cycle += 3
    l2 = mem.l2_stats
    assert l2.dram_bytes == (l2.misses + l2.writebacks) * 64
    assert l2.accesses == mem.l1_stats.misses + mem.l1_stats.writebacks


def test_trace_lines(tx2):
    sink = io.StringIO()
    mem = MemoryHierarchy(tx2, trace=sink)
    mem.access_lines(1, [128], False, 7)
    mem.access_lines(1, [128], False, 500)
    assert sink.getvalue().splitlines() == ["7 1 L1 128 miss", "35 1 L2 128 miss", "500 1 L1 128 hit"]
