"""Operation counters and an allocation ledger for engine-owned buffers.

Engines allocate every working array through a :class:`CellLedger` so the
number of live float cells (and its peak) can be read back without relying
on OS memory statistics. Input-side data (feature blocks read from the
observation stream) is not engine-owned and is tracked only as a count of
stream reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OpCounter:
    """Counts of scalar operations actually executed.

    ``log_add`` is the log-domain addition ⊕, ``add`` real addition (which is
    also log-domain ⊗), ``mul`` real multiplication and ``log`` logarithm
    evaluations. ``exp`` covers the final conversion to expected counts.
    """

    log_add: int = 0
    add: int = 0
    mul: int = 0
    log: int = 0
    exp: int = 0

    def as_dict(self) -> dict:
        return {
            "log_add": self.log_add,
            "add": self.add,
            "mul": self.mul,
            "log": self.log,
            "exp": self.exp,
        }


class CellLedger:
    """Tracks live and peak float cells of arrays allocated through it."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.allocations = 0
        # per-tag counts of live arrays (not cells), e.g. "alpha" or "psi"
        self.arrays: dict[str, int] = {}
        self.peak_arrays: dict[str, int] = {}
        self._owned: dict[int, tuple] = {}

    def _track(self, arr: np.ndarray, tag: str) -> np.ndarray:
        self._owned[id(arr)] = (arr.size, tag)
        self.live += arr.size
        self.allocations += 1
        if self.live > self.peak:
            self.peak = self.live
        count = self.arrays.get(tag, 0) + 1
        self.arrays[tag] = count
        if count > self.peak_arrays.get(tag, 0):
            self.peak_arrays[tag] = count
        return arr

    def empty(self, shape, tag: str = "scratch") -> np.ndarray:
        return self._track(np.empty(shape, dtype=np.float64), tag)

    def full(self, shape, value: float, tag: str = "scratch") -> np.ndarray:
        return self._track(np.full(shape, value, dtype=np.float64), tag)

    def release(self, arr: np.ndarray | None) -> None:
        if arr is None:
            return
        entry = self._owned.pop(id(arr), None)
        if entry is None:
            raise KeyError("array was not allocated through this ledger")
        size, tag = entry
        self.live -= size
        self.arrays[tag] -= 1


@dataclass
class Instruments:
    """Bundle passed to engines: op counter, cell ledger and stream reads."""

    ops: OpCounter = field(default_factory=OpCounter)
    cells: CellLedger = field(default_factory=CellLedger)
    stream_reads: int = 0
    # feature entries seen, used to measure the average active-set size
    active_entries: int = 0
    active_cells: int = 0

    @property
    def average_active(self) -> float:
        return self.active_entries / self.active_cells if self.active_cells else 0.0
