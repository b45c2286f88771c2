"""Desk-scale benchmark harness: time, working set and operation counts per engine.

Memory is the peak number of float cells held in engine-owned buffers (see
:class:`~chaincrf.instruments.CellLedger`), not process RSS.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass

import numpy as np

from .corpus import make_generator
from .instruments import Instruments
from .model import FIXED_START, BoundSequence, CrfModel
from .training import ENGINES, sequence_gradient

OOV_TOKEN = "<unk>"


@dataclass
class BenchRecord:
    engine: str
    T: int
    N: int
    M: int
    A: float
    wall_time: float
    peak_cells: int
    log_adds: int
    adds: int
    muls: int
    logs: int
    stream_reads: int

    def __post_init__(self):
        counts = (self.T, self.N, self.M, self.peak_cells, self.log_adds, self.adds,
                  self.muls, self.logs, self.stream_reads)
        if min(counts) < 0:
            raise ValueError("bench counts must be nonnegative")
        if not 0 <= self.A <= max(self.M, 0):
            raise ValueError("average active-set size must lie in [0, M]")


FIELDS = [f for f in BenchRecord.__dataclass_fields__]


def bench_problem(seed: int, num_labels: int, length: int, vocab: int, *,
                  oov_rate: float = 0.0, weight_scale: float = 0.5,
                  start_mode: str = FIXED_START):
    """A default-template model over ``vocab`` tokens and one sampled sequence.

    A fraction ``oov_rate`` of positions is replaced by a token the model
    has never seen, which drops the emission feature there.
    """
    gen = make_generator(seed, num_labels, vocab)
    rng = np.random.default_rng([seed, 2])
    _, token_ids = gen.sample(rng, length)
    width = len(str(vocab - 1))
    names = [f"w{k:0{width}d}" for k in range(vocab)]
    tokens = [names[t] for t in token_ids]
    if oov_rate > 0:
        for pos in np.flatnonzero(rng.random(length) < oov_rate):
            tokens[pos] = OOV_TOKEN
    labels = [f"L{k}" for k in range(num_labels)]
    model = CrfModel.create(labels, ("transition", "emission"), names, start_mode=start_mode)
    weights = rng.normal(scale=weight_scale, size=model.num_features)
    return model.with_weights(weights), tokens


def measure_active(model: CrfModel, x) -> float:
    """Average active-set size over all positions and label pairs, one scan of ``x``.

    Engines that re-read positions (checkpointing reads some twice more
    than others) would bias a count taken while they run, so the record
    uses this scan instead.
    """
    bound = x if isinstance(x, BoundSequence) else model.bind(x)
    n = model.num_labels
    total = sum(len(bound.position_features(i)) for i in range(1, bound.length + 1))
    return total / (bound.length * n * n)


def predicted_counts(engine: str, T: int, N: int, M: int, A: float) -> dict:
    """Predicted operation counts: one term per quantity each engine computes.

    Leading-order totals drop lower terms such as the N^2 T forward and
    backward work; keeping every term gives a prediction to compare
    measured counts with.
    """
    n2ta = N * N * T * A
    if engine == "emp":
        return {
            "log_adds": N * N * T + N * N * T * (M + A) + N + N * M,
            "adds": n2ta + 2 * N * N * T + N * N * T * (M + A),
            "muls": n2ta,
            "logs": n2ta,
        }
    if engine.startswith("fb-"):
        return {
            "log_adds": 2 * N * N * T + N + n2ta,
            "adds": n2ta + 2 * N * N * T + 2 * N * N * T + n2ta,
            "muls": n2ta,
            "logs": n2ta,
        }
    raise ValueError(f"unknown engine {engine!r}")


def run_one(engine: str, model: CrfModel, x, *, timing: bool = True) -> BenchRecord:
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}; expected one of {ENGINES}")
    inst = Instruments()
    bound = model.bind(x)
    start = time.perf_counter()
    sequence_gradient(model, bound, engine, instruments=inst)
    elapsed = time.perf_counter() - start if timing else 0.0
    ops = inst.ops
    return BenchRecord(
        engine=engine, T=bound.length, N=model.num_labels, M=model.num_features,
        A=measure_active(model, bound), wall_time=elapsed, peak_cells=inst.cells.peak,
        log_adds=ops.log_add, adds=ops.add, muls=ops.mul, logs=ops.log,
        stream_reads=inst.stream_reads,
    )


def run_bench(engine: str, lengths, num_labels: int, *, vocab: int = 20, seed: int = 0,
              oov_rate: float = 0.0, timing: bool = True) -> list:
    records = []
    for t in lengths:
        model, x = bench_problem(seed, num_labels, t, vocab, oov_rate=oov_rate)
        records.append(run_one(engine, model, x, timing=timing))
    return records


def format_csv(records, *, header: dict | None = None) -> str:
    """CSV text with ``# key=value`` comment lines first (seeds, settings)."""
    buf = io.StringIO()
    for key, value in (header or {}).items():
        buf.write(f"# {key}={value}\n")
    writer = csv.DictWriter(buf, fieldnames=FIELDS, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        row = asdict(rec)
        row["A"] = f"{rec.A:.6f}"
        row["wall_time"] = f"{rec.wall_time:.6f}"
        writer.writerow(row)
    return buf.getvalue()
