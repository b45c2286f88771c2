"""Labeled sequence corpora: the tab-separated format and a seeded generator."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .model import LabelAlphabet

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    """Malformed corpus input. ``code`` names the failure, ``line`` is 1-based."""

    def __init__(self, code: str, message: str = "", line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{code}{where}: {message}" if message else f"{code}{where}")
        self.code = code
        self.line = line


@dataclass(frozen=True)
class SequenceInstance:
    observations: tuple
    labels: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        if not self.observations:
            raise CorpusError("empty-sequence", "a sequence needs at least one token")
        if self.labels is not None:
            labels = tuple(int(y) for y in self.labels)
            if len(labels) != len(self.observations):
                raise CorpusError("length-mismatch", "labels and observations differ in length")
            object.__setattr__(self, "labels", labels)

    @property
    def length(self) -> int:
        return len(self.observations)


@dataclass
class Corpus:
    alphabet: LabelAlphabet
    instances: list
    skipped: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.instances:
            raise CorpusError("empty-corpus")
        n = self.alphabet.size
        for inst in self.instances:
            if inst.labels is not None and any(not 0 <= y < n for y in inst.labels):
                raise CorpusError("bad-label", "label index outside the alphabet")

    @property
    def labeled(self) -> bool:
        return all(inst.labels is not None for inst in self.instances)

    def __len__(self):
        return len(self.instances)

    def vocabulary(self) -> set:
        return {tok for inst in self.instances for tok in inst.observations}


def _read_blocks(stream: TextIO):
    """Yield ``(first_line_number, [(line_number, text), ...])`` per sequence, plus skip count."""
    block: list = []
    start = None
    blank_run = 0
    for lineno, raw in enumerate(stream, 1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip():
            if block:
                yield start, block
                block = []
                blank_run = 1
            else:
                blank_run += 1
                if blank_run >= 2:
                    yield None, lineno
            continue
        blank_run = 0
        if not block:
            start = lineno
        block.append((lineno, line))
    if block:
        yield start, block


def parse_corpus(stream: TextIO | str, *, alphabet: LabelAlphabet | None = None,
                 labeled: bool = True) -> Corpus:
    """Read ``token<TAB>label`` lines; a blank line ends a sequence.

    Labels are collected in first-seen order and then sorted so the label
    indices do not depend on corpus order. Passing ``alphabet`` fixes the
    label set instead (inference time); unknown labels are then an error.
    With ``labeled=False`` each line is just a token and any tab-separated
    tail is ignored.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    raw_instances = []
    skipped = 0
    seen: dict[str, None] = {}
    for start, block in _read_blocks(stream):
        if start is None:
            skipped += 1
            continue
        tokens, names = [], []
        for lineno, line in block:
            if labeled:
                if "\t" not in line:
                    raise CorpusError("missing-tab", f"expected token<TAB>label, got {line!r}", lineno)
                token, label = line.split("\t", 1)
                label = label.strip()
                if not label:
                    raise CorpusError("missing-label", "empty label", lineno)
                names.append((label, lineno))
                seen.setdefault(label)
            else:
                token = line.split("\t", 1)[0]
            tokens.append(token)
        raw_instances.append((tokens, names))
    if not raw_instances:
        raise CorpusError("empty-corpus")
    if skipped:
        log.warning("skipped %d empty sequence(s)", skipped)

    if labeled and alphabet is None:
        alphabet = LabelAlphabet(tuple(sorted(seen)))
    if alphabet is None:
        alphabet = LabelAlphabet(("_",))
    lookup = {name: i for i, name in enumerate(alphabet.labels)}
    instances = []
    for tokens, names in raw_instances:
        labels = None
        if labeled:
            labels = []
            for name, lineno in names:
                if name not in lookup:
                    raise CorpusError("unknown-label", repr(name), lineno)
                labels.append(lookup[name])
        instances.append(SequenceInstance(tuple(tokens), labels))
    return Corpus(alphabet, instances, skipped=skipped)


def read_corpus(path, **kwargs) -> Corpus:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_corpus(fh, **kwargs)


def format_corpus(corpus: Corpus) -> str:
    out = []
    for inst in corpus.instances:
        for i, tok in enumerate(inst.observations):
            if inst.labels is None:
                out.append(f"{tok}\n")
            else:
                out.append(f"{tok}\t{corpus.alphabet.labels[inst.labels[i]]}\n")
        out.append("\n")
    return "".join(out)


@dataclass(frozen=True)
class ChainGenerator:
    """A known chain model: ``y_0 = start``, ``y_i ~ P(. | y_{i-1})``, ``x_i ~ P(. | y_i)``."""

    transition: np.ndarray
    emission: np.ndarray
    start_label: int = 0

    def sample(self, rng: np.random.Generator, length: int):
        n, vocab = self.emission.shape
        labels = np.empty(length, dtype=np.int64)
        tokens = np.empty(length, dtype=np.int64)
        prev = self.start_label
        # inverse-CDF sampling keeps the draw sequence fixed per platform
        u = rng.random((length, 2))
        t_cdf = np.cumsum(self.transition, axis=1)
        e_cdf = np.cumsum(self.emission, axis=1)
        for i in range(length):
            y = min(int(np.searchsorted(t_cdf[prev], u[i, 0], side="right")), n - 1)
            w = min(int(np.searchsorted(e_cdf[y], u[i, 1], side="right")), vocab - 1)
            labels[i], tokens[i] = y, w
            prev = y
        return labels, tokens


def make_generator(seed: int, num_labels: int, vocab: int) -> ChainGenerator:
    """Draw transition and emission tables from Dirichlet(1) rows, seeded."""
    rng = np.random.default_rng([seed, 0])
    trans = rng.dirichlet(np.ones(num_labels), size=num_labels)
    emit = rng.dirichlet(np.ones(vocab), size=num_labels)
    return ChainGenerator(trans, emit)


def synth_corpus(seed: int, num_labels: int, length: int, count: int, vocab: int) -> Corpus:
    """Sample ``count`` sequences of ``length`` tokens from a seeded chain model.

    Labels are named ``L0..L{N-1}`` and tokens ``w0..w{V-1}`` (zero-padded so
    lexicographic order equals numeric order). The generator tables are kept
    in ``corpus.meta["generator"]``.
    """
    if num_labels < 1 or length < 1 or count < 1 or vocab < 1:
        raise ValueError("num_labels, length, count and vocab must be positive")
    gen = make_generator(seed, num_labels, vocab)
    rng = np.random.default_rng([seed, 1])
    lw = len(str(num_labels - 1))
    tw = len(str(vocab - 1))
    alphabet = LabelAlphabet(tuple(f"L{k:0{lw}d}" for k in range(num_labels)))
    token_names = [f"w{k:0{tw}d}" for k in range(vocab)]
    instances = []
    for _ in range(count):
        labels, tokens = gen.sample(rng, length)
        instances.append(SequenceInstance(tuple(token_names[t] for t in tokens), tuple(labels)))
    return Corpus(alphabet, instances, meta={"seed": seed, "generator": gen})


def corpus_from_pairs(sequences: Iterable[Iterable[tuple]]) -> Corpus:
    """Build a corpus from ``[(token, label), ...]`` sequences (labels sorted like the parser)."""
    seqs = [list(s) for s in sequences]
    labels = sorted({lab for s in seqs for _, lab in s})
    alphabet = LabelAlphabet(tuple(labels))
    lookup = {name: i for i, name in enumerate(labels)}
    return Corpus(alphabet, [
        SequenceInstance(tuple(t for t, _ in s), tuple(lookup[l] for _, l in s)) for s in seqs
    ])
