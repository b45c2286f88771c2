"""Linear-chain CRF model: labels, feature templates, potentials, model files.

A model is a :class:`FeatureSpace` (labels, start convention, the ordered
feature names and the lookup tables derived from them) plus a weight vector.
Feature names are tab-joined strings whose first field names the template:

``T\\t<prev>\\t<label>``
    transition indicator ``1[y_prev = prev and y = label]``
``E\\t<label>\\t<token>``
    emission indicator ``1[y = label and x_i = token]``
``X\\t<k>``
    lattice feature: the observation itself carries its feature entries
    (see :class:`LatticeToken`), which lets callers supply arbitrary
    nonnegative feature values.

Canonical ordering of the index is by (template, label ids, token).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

FIXED_START = "fixed"
FREE_START = "free"
START_MODES = (FIXED_START, FREE_START)

TRANSITION = "T"
EMISSION = "E"
LATTICE = "X"
_TEMPLATE_ORDER = {TRANSITION: 0, EMISSION: 1, LATTICE: 2}

MAGIC = b"CRFG"
FORMAT_VERSION = 1


class ModelError(ValueError):
    """Invalid model construction or feature request."""


class ModelFormatError(ValueError):
    """Model file could not be decoded. ``code`` identifies the failure."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


@dataclass(frozen=True)
class LabelAlphabet:
    labels: tuple
    start_label: int = 0

    def __post_init__(self):
        labels = tuple(str(l) for l in self.labels)
        object.__setattr__(self, "labels", labels)
        if not labels:
            raise ModelError("label alphabet must not be empty")
        if len(set(labels)) != len(labels):
            raise ModelError("duplicate label names")
        if not 0 <= self.start_label < len(labels):
            raise ModelError(f"start label {self.start_label} out of range")

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, name: str) -> int:
        try:
            return self.labels.index(name)
        except ValueError:
            raise ModelError(f"unknown label {name!r}") from None


@dataclass(frozen=True)
class SparseFeatures:
    """Active feature set of one cell: strictly increasing indices, values > 0."""

    indices: tuple
    values: tuple

    def __len__(self):
        return len(self.indices)

    def dense(self, size: int) -> np.ndarray:
        out = np.zeros(size)
        out[list(self.indices)] = self.values
        return out


@dataclass(frozen=True, eq=False)
class PositionFeatures:
    """All active features at one position, flattened over cells.

    Entries are ordered by ``(row, col, index)``, i.e. cells row-major and
    feature indices ascending inside a cell. Zero values are never stored.
    """

    rows: np.ndarray
    cols: np.ndarray
    index: np.ndarray
    value: np.ndarray

    def __len__(self):
        return self.index.shape[0]


@dataclass(frozen=True, eq=False)
class LatticeToken:
    """An observation that carries its own feature entries.

    Each entry ``(rows[j], cols[j], index[j], value[j])`` says feature
    ``index[j]`` fires with ``value[j]`` on the label pair ``(rows[j], cols[j])``.
    ``index`` refers to the k-th lattice feature of the model.
    """

    rows: np.ndarray
    cols: np.ndarray
    index: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        for name in ("rows", "cols", "index"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        value = np.asarray(self.value, dtype=np.float64)
        if np.any(value < 0) or not np.all(np.isfinite(value)):
            raise ModelError("feature values must be finite and nonnegative")
        object.__setattr__(self, "value", value)
        if not (self.rows.shape == self.cols.shape == self.index.shape == value.shape):
            raise ModelError("lattice token arrays must have equal length")
        if self.rows.size:
            if min(self.rows.min(), self.cols.min(), self.index.min()) < 0:
                raise ModelError("negative label or feature index")
            triples = np.stack([self.rows, self.cols, self.index], axis=1)
            if np.unique(triples, axis=0).shape[0] != triples.shape[0]:
                raise ModelError("duplicate (row, col, index) entry in lattice token")


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Log-potentials ``psi_i(a, b) = <theta, f(a, b, x, i)>`` at one position."""

    position: int
    cells: np.ndarray


def transition_feature(prev: str, label: str) -> str:
    return f"{TRANSITION}\t{prev}\t{label}"


def emission_feature(label: str, token: str) -> str:
    return f"{EMISSION}\t{label}\t{token}"


def lattice_feature(k: int) -> str:
    return f"{LATTICE}\t{k}"


class FeatureSpace:
    """Labels, start convention and the feature index, without weights."""

    def __init__(self, alphabet: LabelAlphabet, feature_names: Sequence[str],
                 start_mode: str = FIXED_START):
        if start_mode not in START_MODES:
            raise ModelError(f"unknown start mode {start_mode!r}")
        self.alphabet = alphabet
        self.start_mode = start_mode
        self.feature_names = tuple(feature_names)
        self.feature_index = {}
        for m, name in enumerate(self.feature_names):
            if name in self.feature_index:
                raise ModelError(f"duplicate feature name {name!r}")
            self.feature_index[name] = m

        n = alphabet.size
        self.trans_idx = np.full((n, n), -1, dtype=np.int64)
        vocab: dict[str, int] = {}
        emissions = []
        lattice = {}
        for m, name in enumerate(self.feature_names):
            kind, *rest = name.split("\t")
            if kind == TRANSITION and len(rest) == 2:
                a, b = (alphabet.index(r) for r in rest)
                self.trans_idx[a, b] = m
            elif kind == EMISSION and len(rest) == 2:
                b = alphabet.index(rest[0])
                w = vocab.setdefault(rest[1], len(vocab))
                emissions.append((b, w, m))
            elif kind == LATTICE and len(rest) == 1:
                lattice[int(rest[0])] = m
            else:
                raise ModelError(f"unrecognised feature name {name!r}")
        self.vocab = vocab
        self.emit_idx = np.full((n, max(len(vocab), 1)), -1, dtype=np.int64)
        for b, w, m in emissions:
            self.emit_idx[b, w] = m
        self.lattice_idx = np.full(max(lattice, default=-1) + 1, -1, dtype=np.int64)
        for k, m in lattice.items():
            self.lattice_idx[k] = m
        self.has_transition = bool(np.any(self.trans_idx >= 0))
        self.has_emission = bool(emissions)
        self.has_lattice = bool(lattice)
        if self.has_emission and self.has_lattice:
            raise ModelError("emission and lattice features cannot be combined")

        self._rows = np.repeat(np.arange(n), n)
        self._cols = np.tile(np.arange(n), n)
        flat = self.trans_idx.ravel()
        keep = flat >= 0
        self._trans_block = (self._rows[keep], self._cols[keep], flat[keep])

    @property
    def num_labels(self) -> int:
        return self.alphabet.size

    @property
    def num_features(self) -> int:
        return len(self.feature_names)

    def templates(self) -> tuple:
        kinds = []
        if self.has_transition:
            kinds.append("transition")
        if self.has_emission:
            kinds.append("emission")
        if self.has_lattice:
            kinds.append("lattice")
        return tuple(kinds)

    def __eq__(self, other):
        if not isinstance(other, FeatureSpace):
            return NotImplemented
        return (self.alphabet == other.alphabet and self.start_mode == other.start_mode
                and self.feature_names == other.feature_names)


def canonical_feature_names(alphabet: LabelAlphabet, templates: Iterable[str],
                            vocabulary: Iterable[str] = (), lattice_size: int = 0) -> list:
    """Feature names for the given templates, in canonical index order."""
    templates = set(templates)
    unknown = templates - {"transition", "emission", "lattice"}
    if unknown:
        raise ModelError(f"unknown templates {sorted(unknown)}")
    labels = alphabet.labels
    names = []
    if "transition" in templates:
        names += [transition_feature(a, b) for a in labels for b in labels]
    if "emission" in templates:
        tokens = sorted(set(vocabulary))
        names += [emission_feature(b, w) for b in labels for w in tokens]
    if "lattice" in templates:
        names += [lattice_feature(k) for k in range(lattice_size)]
    return names


class CrfModel:
    """A feature space together with the weight vector ``theta``.

    Instances are immutable; :meth:`with_weights` returns a new model that
    shares the feature space.
    """

    def __init__(self, space: FeatureSpace, weights=None):
        self.space = space
        if weights is None:
            weights = np.zeros(space.num_features)
        w = np.array(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != space.num_features:
            raise ModelError(
                f"weights have length {w.shape[0]}, expected {space.num_features}")
        w.setflags(write=False)
        self.weights = w

    @classmethod
    def create(cls, labels: Sequence[str], templates: Iterable[str] = ("transition", "emission"),
               vocabulary: Iterable[str] = (), *, lattice_size: int = 0,
               start_mode: str = FIXED_START, start_label: int = 0, weights=None):
        alphabet = LabelAlphabet(tuple(labels), start_label)
        names = canonical_feature_names(alphabet, templates, vocabulary, lattice_size)
        return cls(FeatureSpace(alphabet, names, start_mode), weights)

    @classmethod
    def from_corpus(cls, corpus, templates=("transition", "emission"), *,
                    start_mode: str = FIXED_START, weights=None):
        """First pass over a training corpus: labels from its alphabet, tokens as vocabulary."""
        vocab = {tok for inst in corpus.instances for tok in inst.observations}
        return cls.create(corpus.alphabet.labels, templates, vocab, start_mode=start_mode,
                          start_label=corpus.alphabet.start_label, weights=weights)

    def with_weights(self, weights) -> "CrfModel":
        return CrfModel(self.space, weights)

    alphabet = property(lambda self: self.space.alphabet)
    start_mode = property(lambda self: self.space.start_mode)
    feature_names = property(lambda self: self.space.feature_names)
    feature_index = property(lambda self: self.space.feature_index)
    num_labels = property(lambda self: self.space.num_labels)
    num_features = property(lambda self: self.space.num_features)

    def bind(self, observations) -> "BoundSequence":
        return BoundSequence(self, observations)

    def __eq__(self, other):
        if not isinstance(other, CrfModel):
            return NotImplemented
        return self.space == other.space and self.weights.tobytes() == other.weights.tobytes()

    def __repr__(self):
        return (f"CrfModel(N={self.num_labels}, M={self.num_features}, "
                f"templates={self.space.templates()}, start={self.start_mode!r})")


class BoundSequence:
    """A model paired with one observation sequence; positions are 1-based."""

    def __init__(self, model: CrfModel, observations):
        observations = list(observations)
        if not observations:
            raise ModelError("observation sequence must not be empty")
        self.model = model
        self.space = model.space
        self.observations = observations
        if self.space.has_emission:
            vocab = self.space.vocab
            self.token_ids = np.array([vocab.get(tok, -1) for tok in observations], dtype=np.int64)
        else:
            self.token_ids = None
        if self.space.has_lattice and not all(isinstance(o, LatticeToken) for o in observations):
            raise ModelError("lattice features need LatticeToken observations")

    @property
    def length(self) -> int:
        return len(self.observations)

    def _check_position(self, i: int) -> None:
        if not 1 <= i <= self.length:
            raise ModelError(f"position {i} outside [1, {self.length}]")

    def position_features(self, i: int) -> PositionFeatures:
        self._check_position(i)
        sp = self.space
        n, m = sp.num_labels, sp.num_features
        parts = []
        if sp.has_transition:
            parts.append(sp._trans_block)
        if sp.has_emission:
            w = self.token_ids[i - 1]
            if w >= 0:
                idx = sp.emit_idx[sp._cols, w]
                keep = idx >= 0
                parts.append((sp._rows[keep], sp._cols[keep], idx[keep]))
        values = [np.ones(p[0].shape[0]) for p in parts]
        if sp.has_lattice:
            tok = self.observations[i - 1]
            if tok.index.size and (tok.index.max() >= sp.lattice_idx.shape[0]
                                   or np.any(sp.lattice_idx[tok.index] < 0)):
                raise ModelError("lattice token refers to an unknown feature")
            if tok.rows.size and (tok.rows.max() >= n or tok.cols.max() >= n):
                raise ModelError("lattice token refers to an unknown label")
            parts.append((tok.rows, tok.cols, sp.lattice_idx[tok.index]))
            values.append(tok.value)
        if not parts:
            empty = np.zeros(0, dtype=np.int64)
            return PositionFeatures(empty, empty, empty, np.zeros(0))
        rows = np.concatenate([p[0] for p in parts])
        cols = np.concatenate([p[1] for p in parts])
        idx = np.concatenate([p[2] for p in parts])
        val = np.concatenate(values)
        keep = val > 0
        if not keep.all():
            rows, cols, idx, val = rows[keep], cols[keep], idx[keep], val[keep]
        order = np.argsort((rows * n + cols) * max(m, 1) + idx, kind="stable")
        return PositionFeatures(rows[order], cols[order], idx[order], val[order])

    def log_potentials(self, feats: PositionFeatures, out: np.ndarray | None = None) -> np.ndarray:
        """Fill an N x N array with ``sum_m theta_m f_m`` per cell.

        Contributions are added cell by cell in ascending feature order.
        """
        n = self.space.num_labels
        if out is None:
            out = np.zeros((n, n))
        else:
            out.fill(0.0)
        if len(feats):
            np.add.at(out, (feats.rows, feats.cols), self.model.weights[feats.index] * feats.value)
        return out


def extract_features(model: CrfModel, x, i: int, y_prev: int, y: int) -> SparseFeatures:
    """Active features ``A_i(y_prev, y)`` with their values."""
    bound = x if isinstance(x, BoundSequence) else model.bind(x)
    n = model.num_labels
    if not (0 <= y_prev < n and 0 <= y < n):
        raise ModelError("label index out of range")
    feats = bound.position_features(i)
    sel = (feats.rows == y_prev) & (feats.cols == y)
    return SparseFeatures(tuple(int(m) for m in feats.index[sel]),
                          tuple(float(v) for v in feats.value[sel]))


def build_transition_matrix(model: CrfModel, x, i: int) -> TransitionMatrix:
    bound = x if isinstance(x, BoundSequence) else model.bind(x)
    return TransitionMatrix(i, bound.log_potentials(bound.position_features(i)))


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def _write_str(buf: io.BytesIO, s: str) -> None:
    data = s.encode("utf-8")
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def serialize_model(model: CrfModel) -> bytes:
    """Encode a model as ``CRFG`` little-endian bytes.

    Layout: magic, u16 version, u8 start mode (0 fixed, 1 free), u32 start
    label, u32 N, u32 M, N length-prefixed UTF-8 labels, M length-prefixed
    feature names, M float64 weights.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HBIII", FORMAT_VERSION, START_MODES.index(model.start_mode),
                          model.alphabet.start_label, model.num_labels, model.num_features))
    for label in model.alphabet.labels:
        _write_str(buf, label)
    for name in model.feature_names:
        _write_str(buf, name)
    buf.write(model.weights.astype("<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("truncated", f"needed {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ModelFormatError("bad-string", str(exc)) from None


def deserialize_model(data: bytes) -> CrfModel:
    r = _Reader(bytes(data))
    if r.take(len(MAGIC)) != MAGIC:
        raise ModelFormatError("bad-magic")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise ModelFormatError("version-mismatch", f"file version {version}")
    mode, start_label, n, m = r.unpack("<BIII")
    if mode >= len(START_MODES):
        raise ModelFormatError("bad-mode", f"mode flag {mode}")
    labels = [r.string() for _ in range(n)]
    names = [r.string() for _ in range(m)]
    if len(set(names)) != len(names):
        raise ModelFormatError("duplicate-feature")
    weights = np.frombuffer(r.take(8 * m), dtype="<f8").astype(np.float64)
    if r.pos != len(r.data):
        raise ModelFormatError("trailing-bytes", f"{len(r.data) - r.pos} unread bytes")
    try:
        space = FeatureSpace(LabelAlphabet(tuple(labels), start_label), names, START_MODES[mode])
    except ModelError as exc:
        raise ModelFormatError("bad-model", str(exc)) from None
    return CrfModel(space, weights)


def save_model(model: CrfModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def load_model(path) -> CrfModel:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
