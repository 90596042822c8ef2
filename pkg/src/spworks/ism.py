"""Insert-sort-merge workspace runtime.

A workspace run streams (coordinate, value) pairs into a bounded accumulate
array. When the array fills up, its contents are sorted by coordinate and
merged into a growing sorted-unique all array; at the end the all array holds
the deduplicated result in coordinate order, ready to compress into any
sorted output format.

Coordinates are linearized row-major into unsigned 64-bit keys, which makes
key order identical to lexicographic coordinate order. Counters track the
abstract cost of each stage: comparison sorts are charged n*ceil(log2 n),
merges n+m, chain scans and dedup sweeps their actual lengths.
"""

from __future__ import annotations

import enum
import math
import queue
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

KEY_DTYPE = np.uint64
VAL_DTYPE = np.float64
_ELEMENT_BYTES = 16  # one uint64 key plus one float64 value


class IsmError(RuntimeError):
    pass


class AccFullError(IsmError):
    """Raised by AccArray.insert when the array is at capacity."""


class Policy(enum.Enum):
    """Sorting policy for the accumulate array.

    BUCKET chains inserts by leading output coordinate and sorts each chain
    at drain time; HASH chains by a hash of the full coordinate and does one
    full sort at drain time; COORD appends blindly and defers both sorting
    and deduplication to the drain.
    """

    BUCKET = "bucket"
    HASH = "hash"
    COORD = "coord"

    @property
    def label(self) -> str:
        return self.value.capitalize()

    @classmethod
    def from_name(cls, name: str) -> "Policy":
        try:
            return cls(name.strip().lower())
        except ValueError:
            options = ", ".join(p.value for p in cls)
            raise IsmError(f"unknown policy {name!r}; choose one of {options}") from None


def ceil_log2(n: int) -> int:
    return (n - 1).bit_length() if n > 1 else 0


def hash_default_l(nnz: int) -> int:
    """Default hash bucket count: smallest power of two at or above nnz."""
    if nnz <= 1:
        return 1
    return 1 << (nnz - 1).bit_length()


def grow_capacity(capacity: int) -> int:
    """Next capacity on growth: x2 while small, x1.5 mid-range, x1.25 large."""
    if capacity < 2 ** 16:
        return max(1, capacity * 2)
    if capacity < 2 ** 22:
        return capacity * 3 // 2
    return capacity * 5 // 4


@dataclass
class Counters:
    """Cost model counters; producer-side and worker-side fields are disjoint
    so the pipelined mode needs no locking."""

    inserts: int = 0
    drains: int = 0
    merges: int = 0
    insert_comparisons: int = 0
    sort_comparisons: int = 0
    merge_comparisons: int = 0
    insert_dedups: int = 0
    drain_dedups: int = 0
    merge_dedups: int = 0
    peak_bytes: int = 0

    @property
    def comparisons(self) -> int:
        return self.insert_comparisons + self.sort_comparisons + self.merge_comparisons

    @property
    def dedups(self) -> int:
        return self.insert_dedups + self.drain_dedups + self.merge_dedups

    def merge(self, other: "Counters") -> None:
        """Fold another counter set into this one; peaks take the maximum."""
        self.inserts += other.inserts
        self.drains += other.drains
        self.merges += other.merges
        self.insert_comparisons += other.insert_comparisons
        self.sort_comparisons += other.sort_comparisons
        self.merge_comparisons += other.merge_comparisons
        self.insert_dedups += other.insert_dedups
        self.drain_dedups += other.drain_dedups
        self.merge_dedups += other.merge_dedups
        self.peak_bytes = max(self.peak_bytes, other.peak_bytes)

    def as_dict(self) -> dict[str, int]:
        return {
            "inserts": self.inserts,
            "drains": self.drains,
            "merges": self.merges,
            "comparisons": self.comparisons,
            "dedups": self.dedups,
            "peak_bytes": self.peak_bytes,
        }


class AccArray:
    """Bounded unsorted accumulate array with a policy-specific insert path."""

    def __init__(self, capacity: int, policy: Policy, lead_stride: int,
                 hash_l: int | None, counters: Counters) -> None:
        if capacity < 1:
            raise IsmError("accumulate array capacity must be at least 1")
        self.capacity = capacity
        self.policy = policy
        self.lead_stride = lead_stride
        if policy is Policy.HASH:
            if hash_l is None or hash_l < 1:
                raise IsmError("hash policy requires a positive bucket count")
            self.hash_l = hash_l
        else:
            self.hash_l = 0
        self.counters = counters
        self.keys: list[int] = []
        self.vals: list[float] = []
        self._chains: dict[int, list[int]] = {}

    @property
    def size(self) -> int:
        return len(self.keys)

    @property
    def full(self) -> bool:
        return len(self.keys) == self.capacity

    def grow(self, capacity: int) -> None:
        if capacity <= self.capacity:
            raise IsmError("grow must increase the capacity")
        self.capacity = capacity

    def insert(self, key: int, val: float) -> None:
        """Add one pair. Bucket and hash chains deduplicate in place; a full
        array rejects the insert before touching anything."""
        keys = self.keys
        if self.policy is Policy.COORD:
            if len(keys) == self.capacity:
                raise AccFullError
            keys.append(key)
            self.vals.append(val)
            return
        if self.policy is Policy.BUCKET:
            bucket = key // self.lead_stride
        else:
            bucket = key % self.hash_l
        chain = self._chains.get(bucket)
        if chain is not None:
            scanned = 0
            for pos in chain:
                scanned += 1
                if keys[pos] == key:
                    self.counters.insert_comparisons += scanned
                    self.counters.insert_dedups += 1
                    self.vals[pos] += val
                    return
            self.counters.insert_comparisons += scanned
        if len(keys) == self.capacity:
            raise AccFullError
        if chain is None:
            self._chains[bucket] = [len(keys)]
        else:
            chain.append(len(keys))
        keys.append(key)
        self.vals.append(val)

    def drain(self) -> tuple[np.ndarray, np.ndarray]:
        """Sort the contents by key and return them; the array keeps its
        contents until clear() is called."""
        n = len(self.keys)
        c = self.counters
        if n == 0:
            return np.empty(0, KEY_DTYPE), np.empty(0, VAL_DTYPE)
        if self.policy is Policy.BUCKET:
            out_k: list[int] = []
            out_v: list[float] = []
            keys, vals = self.keys, self.vals
            for bucket in sorted(self._chains):
                chain = self._chains[bucket]
                if len(chain) > 1:
                    c.sort_comparisons += len(chain) * ceil_log2(len(chain))
                    chain = sorted(chain, key=keys.__getitem__)
                for pos in chain:
                    out_k.append(keys[pos])
                    out_v.append(vals[pos])
            return np.array(out_k, KEY_DTYPE), np.array(out_v, VAL_DTYPE)
        karr = np.array(self.keys, KEY_DTYPE)
        varr = np.array(self.vals, VAL_DTYPE)
        order = np.argsort(karr, kind="stable")
        ks, vs = karr[order], varr[order]
        c.sort_comparisons += n * ceil_log2(n)
        if self.policy is Policy.HASH:
            return ks, vs
        # coord: one adjacent-dedup sweep over the sorted run
        c.sort_comparisons += n - 1
        starts_mask = np.empty(n, bool)
        starts_mask[0] = True
        np.not_equal(ks[1:], ks[:-1], out=starts_mask[1:])
        starts = np.flatnonzero(starts_mask)
        c.drain_dedups += n - len(starts)
        return ks[starts], np.add.reduceat(vs, starts)

    def clear(self) -> None:
        self.keys = []
        self.vals = []
        self._chains = {}


class AllArray:
    """Sorted-unique accumulator the drains merge into.

    With double buffering the pre-merge arrays survive each merge (the merge
    writes fresh arrays and keeps a reference to the old generation), so a
    reader may hold the previous snapshot while the next merge runs.
    """

    def __init__(self, counters: Counters, double_buffer: bool = False) -> None:
        self.counters = counters
        self.double_buffer = double_buffer
        self.keys = np.empty(0, KEY_DTYPE)
        self.vals = np.empty(0, VAL_DTYPE)
        self.prev_keys: np.ndarray | None = None
        self.prev_vals: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.keys)

    def merge(self, new_keys: np.ndarray, new_vals: np.ndarray) -> None:
        """Two-way merge of a sorted-unique batch; equal keys add their values
        (existing value first, so summation order is deterministic)."""
        c = self.counters
        old_keys, old_vals = self.keys, self.vals
        c.merges += 1
        c.merge_comparisons += len(new_keys) + len(old_keys)
        pos = np.searchsorted(old_keys, new_keys)
        match = np.zeros(len(new_keys), dtype=bool)
        if old_keys.size:
            in_range = pos < old_keys.size
            match[in_range] = old_keys[pos[in_range]] == new_keys[in_range]
        c.merge_dedups += int(match.sum())
        vals = old_vals.copy() if self.double_buffer else old_vals
        vals[pos[match]] += new_vals[match]
        fresh = ~match
        self.keys = np.insert(old_keys, pos[fresh], new_keys[fresh])
        self.vals = np.insert(vals, pos[fresh], new_vals[fresh])
        if self.double_buffer:
            self.prev_keys, self.prev_vals = old_keys, old_vals

    @property
    def nbytes(self) -> int:
        total = self.keys.nbytes + self.vals.nbytes
        if self.prev_keys is not None:
            total += self.prev_keys.nbytes + self.prev_vals.nbytes  # type: ignore[union-attr]
        return total


_STOP = object()


class IsmEngine:
    """Drives insert, drain-on-full, merge and final compression for one
    workspace run.

    In pipelined mode two accumulate arrays alternate: the producer thread
    streams inserts into one while a single worker thread drains and merges
    the other, preserving drain order (merges stay in submission order, so
    results are bit-identical to the sequential mode).
    """

    def __init__(
        self,
        extents: Sequence[int],
        policy: Policy,
        capacity: int,
        *,
        hash_l: int | None = None,
        double_buffer: bool = False,
        pipeline: bool = False,
        allow_growth: bool = False,
    ) -> None:
        self.extents = tuple(int(e) for e in extents)
        if not self.extents:
            raise IsmError("a workspace needs at least one dimension")
        total = math.prod(self.extents)
        if total >= 2 ** 64:
            raise IsmError("workspace key space exceeds 64-bit linearization")
        strides = []
        acc = 1
        for e in reversed(self.extents):
            strides.append(acc)
            acc *= e
        self.strides = tuple(reversed(strides))
        self.policy = policy
        self.counters = Counters()
        self.allow_growth = allow_growth
        self.pipeline = pipeline
        if policy is Policy.HASH and hash_l is None:
            raise IsmError("hash policy needs hash_l resolved before execution")
        self._make_acc = lambda: AccArray(capacity, policy, self.strides[0],
                                          hash_l, self.counters)
        self.acc = self._make_acc()
        self.all = AllArray(self.counters, double_buffer=double_buffer)
        self._finalized = False
        if pipeline:
            self._work: queue.Queue = queue.Queue(maxsize=1)
            self._free: queue.Queue = queue.Queue()
            self._free.put(self._make_acc())
            self._exc: BaseException | None = None
            self._worker = threading.Thread(target=self._run_worker, daemon=True)
            self._worker.start()

    # -- producer side -----------------------------------------------------

    def linearize(self, coords: Sequence[int]) -> int:
        key = 0
        for c, s in zip(coords, self.strides):
            key += c * s
        return key

    def insert(self, coords: Sequence[int], val: float) -> None:
        self.insert_key(self.linearize(coords), val)

    def insert_key(self, key: int, val: float) -> None:
        self.counters.inserts += 1
        try:
            self.acc.insert(key, val)
        except AccFullError:
            self._rotate()
            self.acc.insert(key, val)

    def _rotate(self) -> None:
        """Drain path taken when an insert finds the accumulate array full."""
        if self.allow_growth:
            self.acc.grow(grow_capacity(self.acc.capacity))
            return
        self.counters.drains += 1
        if self.pipeline:
            if self._exc is not None:
                raise self._exc
            self._work.put(self.acc)
            self.acc = self._free.get()
            if self._exc is not None:
                raise self._exc
        else:
            keys, vals = self.acc.drain()
            self.all.merge(keys, vals)
            self.acc.clear()
            self._note_peak()

    def _run_worker(self) -> None:
        while True:
            item = self._work.get()
            if item is _STOP:
                return
            try:
                keys, vals = item.drain()
                self.all.merge(keys, vals)
                item.clear()
                self._note_peak()
            except BaseException as exc:  # propagate to the producer thread
                self._exc = exc
                item.clear()
            self._free.put(item)

    def _note_peak(self) -> None:
        live = self.all.nbytes + self._acc_bytes
        if live > self.counters.peak_bytes:
            self.counters.peak_bytes = live

    @property
    def _acc_bytes(self) -> int:
        n = 2 if self.pipeline else 1
        return n * self.acc.capacity * _ELEMENT_BYTES

    # -- finalization --------------------------------------------------------

    def finalize(self) -> None:
        """Drain whatever is left and, in pipelined mode, stop the worker."""
        if self._finalized:
            return
        if self.pipeline:
            if self.acc.size:
                self.counters.drains += 1
                self._work.put(self.acc)
                self.acc = self._free.get()
            self._work.put(_STOP)
            self._worker.join()
            if self._exc is not None:
                raise self._exc
        elif self.acc.size:
            self.counters.drains += 1
            keys, vals = self.acc.drain()
            self.all.merge(keys, vals)
            self.acc.clear()
        self._note_peak()
        self._finalized = True

    def result(self) -> tuple[list[np.ndarray], np.ndarray]:
        """Finalize and decode keys back into per-slot coordinate arrays."""
        self.finalize()
        keys = self.all.keys
        coords = [((keys // s) % e).astype(np.int64)
                  for s, e in zip(self.strides, self.extents)]
        return coords, self.all.vals.copy()
