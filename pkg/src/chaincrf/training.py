"""Dataset log-likelihood, its gradient, independent oracles and a batch trainer.

The gradient of the log-likelihood is the empirical feature count minus the
expected count ``(dZ/dtheta) / Z`` for every sequence; the expected counts
come from one of the engines:

=================  ==========================================
``fb-full``        forward-backward, everything stored
``fb-recompute``   forward-backward, matrices rebuilt on use
``fb-checkpoint``  forward-backward, sqrt(T) checkpoints
``emp``            forward-only expectation-semiring pass
=================  ==========================================

With ``start_mode="free"`` the label ``y_0`` is not observed in the data and
is summed out of the numerator as well as the partition function.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .emp import emp_gradient
from .fb import GradientResult, fb_gradient, sequence_log_partition
from .model import FIXED_START, START_MODES, BoundSequence, CrfModel, FeatureSpace

log = logging.getLogger(__name__)

ENGINES = ("fb-full", "fb-recompute", "fb-checkpoint", "emp")
ORACLE_LIMIT = 10**6


class TrainingError(ValueError):
    pass


class OracleLimitError(ValueError):
    """The enumeration oracle was asked for more paths than it allows."""

    code = "oracle-limit"


class DivergedError(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"diverged: non-finite likelihood {value} at iteration {iteration}")
        self.code = "diverged"
        self.iteration = iteration


def sequence_gradient(model: CrfModel, x, engine: str = "emp", *,
                      start_mode: str | None = None, instruments=None) -> GradientResult:
    """Expected feature counts for one sequence from the named engine."""
    if engine == "emp":
        return emp_gradient(model, x, start_mode=start_mode, instruments=instruments)
    if engine.startswith("fb-") and engine in ENGINES:
        return fb_gradient(model, x, engine[3:], start_mode=start_mode, instruments=instruments)
    raise ValueError(f"unknown engine {engine!r}; expected one of {ENGINES}")


def _labels(inst) -> tuple:
    if inst.labels is None:
        raise TrainingError("log-likelihood needs labeled sequences")
    return inst.labels


def path_statistics(model: CrfModel, x, labels, *, start_mode: str | None = None):
    """Numerator log-score and empirical feature counts of a labeled sequence.

    In free-start mode the first transition is averaged over ``y_0`` under
    its conditional distribution given ``y_1``.
    """
    bound = x if isinstance(x, BoundSequence) else model.bind(x)
    mode = start_mode or model.start_mode
    counts = np.zeros(model.num_features)
    score = 0.0
    prev = model.alphabet.start_label
    for i, y in enumerate(labels, 1):
        feats = bound.position_features(i)
        psi = bound.log_potentials(feats)
        if i == 1 and mode != FIXED_START:
            col = psi[:, y]
            top = col.max()
            weights = np.exp(col - top)
            score += top + math.log(weights.sum())
            weights /= weights.sum()
            sel = feats.cols == y
            np.add.at(counts, feats.index[sel], weights[feats.rows[sel]] * feats.value[sel])
        else:
            score += psi[prev, y]
            sel = (feats.rows == prev) & (feats.cols == y)
            np.add.at(counts, feats.index[sel], feats.value[sel])
        prev = y
    return score, counts


def log_likelihood(model: CrfModel, corpus: Corpus, *, l2: float = 0.0,
                   start_mode: str | None = None) -> float:
    total = 0.0
    for inst in corpus.instances:
        labels = _labels(inst)
        score, _ = path_statistics(model, inst.observations, labels, start_mode=start_mode)
        total += score - sequence_log_partition(model, inst.observations, start_mode=start_mode)
    if l2:
        total -= 0.5 * l2 * float(model.weights @ model.weights)
    return total


def _per_sequence(model, inst, engine, start_mode):
    labels = _labels(inst)
    score, empirical = path_statistics(model, inst.observations, labels, start_mode=start_mode)
    res = sequence_gradient(model, inst.observations, engine, start_mode=start_mode)
    return score - res.log_partition, empirical - res.expected_counts


def objective_and_gradient(model: CrfModel, corpus: Corpus, engine: str = "emp", *,
                           l2: float = 0.0, start_mode: str | None = None,
                           workers: int | None = None):
    """Log-likelihood and its gradient in one sweep over the corpus.

    Sequences may be processed on ``workers`` threads; the reduction always
    runs in corpus order.
    """
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}; expected one of {ENGINES}")

    def job(inst):
        return _per_sequence(model, inst, engine, start_mode)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, corpus.instances))
    else:
        parts = [job(inst) for inst in corpus.instances]
    value = 0.0
    grad = np.zeros(model.num_features)
    for v, g in parts:
        value += v
        grad += g
    if l2:
        value -= 0.5 * l2 * float(model.weights @ model.weights)
        grad -= l2 * model.weights
    return value, grad


def likelihood_gradient(model: CrfModel, corpus: Corpus, engine: str = "emp", **kwargs) -> np.ndarray:
    return objective_and_gradient(model, corpus, engine, **kwargs)[1]


def fd_gradient(model: CrfModel, corpus: Corpus, h: float = 1e-5, *, l2: float = 0.0,
                start_mode: str | None = None) -> np.ndarray:
    """Central finite differences of :func:`log_likelihood`, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step must be positive")
    theta = np.array(model.weights)
    grad = np.zeros_like(theta)
    for m in range(theta.shape[0]):
        plus, minus = theta.copy(), theta.copy()
        plus[m] += h
        minus[m] -= h
        fp = log_likelihood(model.with_weights(plus), corpus, l2=l2, start_mode=start_mode)
        fm = log_likelihood(model.with_weights(minus), corpus, l2=l2, start_mode=start_mode)
        grad[m] = (fp - fm) / (2 * h)
    return grad


def brute_force_gradient(model: CrfModel, x, *, start_mode: str | None = None,
                         limit: int = ORACLE_LIMIT) -> GradientResult:
    """Enumerate every label sequence and sum in the plain domain.

    Path scores are shifted by their maximum before exponentiation. Feature
    vectors are rebuilt densely per cell and potentials as dense dot
    products, so nothing is shared with the message-passing engines beyond
    feature extraction itself.
    """
    bound = x if isinstance(x, BoundSequence) else model.bind(x)
    mode = start_mode or model.start_mode
    n, m, t = model.num_labels, model.num_features, bound.length
    width = t if mode == FIXED_START else t + 1
    if n ** width > limit:
        raise OracleLimitError(f"oracle-limit: {n}^{width} paths exceeds {limit}")
    count = n ** width
    idx = np.arange(count)
    cols = [(idx // n ** (width - 1 - j)) % n for j in range(width)]
    if mode == FIXED_START:
        cols.insert(0, np.full(count, model.alphabet.start_label))

    dense = []
    score = np.zeros(count)
    for i in range(1, t + 1):
        feats = bound.position_features(i)
        f = np.zeros((n, n, m))
        f[feats.rows, feats.cols, feats.index] = feats.value
        psi = f @ model.weights
        dense.append(f)
        score += psi[cols[i - 1], cols[i]]
    top = score.max()
    w = np.exp(score - top)
    z = w.sum()
    grad = np.zeros(m)
    for i in range(1, t + 1):
        mass = np.bincount(cols[i - 1] * n + cols[i], weights=w, minlength=n * n)
        grad += mass @ dense[i - 1].reshape(n * n, m)
    counts = grad / z
    log_z = top + math.log(z)
    with np.errstate(divide="ignore"):
        log_grad = np.log(counts) + log_z
    return GradientResult(log_z, log_grad, counts)


@dataclass(frozen=True)
class TrainConfig:
    engine: str = "emp"
    step_size: float = 0.05
    iterations: int = 50
    l2: float = 0.0
    start_mode: str | None = None
    workers: int | None = None

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise TrainingError(f"unknown engine {self.engine!r}")
        if not (self.step_size > 0 and math.isfinite(self.step_size)):
            raise TrainingError("step_size must be positive")
        if not isinstance(self.iterations, int) or self.iterations < 1:
            raise TrainingError("iterations must be at least 1")
        if not (self.l2 >= 0):
            raise TrainingError("l2 must be nonnegative")
        if self.start_mode is not None and self.start_mode not in START_MODES:
            raise TrainingError(f"unknown start mode {self.start_mode!r}")


@dataclass
class TrainResult:
    model: CrfModel
    trace: list = field(default_factory=list)


def train(model: CrfModel, corpus: Corpus, config: TrainConfig) -> TrainResult:
    """Batch gradient ascent on the per-sequence mean log-likelihood.

    Each update is ``theta <- theta + step * grad L / D`` for a corpus of
    ``D`` sequences, so one step size works across corpus sizes. The trace
    holds the summed log-likelihood ``L`` before every update and after the
    last one, so it has ``iterations + 1`` entries.
    """
    if config.start_mode is not None and config.start_mode != model.start_mode:
        space = model.space
        model = CrfModel(FeatureSpace(space.alphabet, space.feature_names, config.start_mode),
                         model.weights)
    trace = []
    for it in range(config.iterations):
        value, grad = objective_and_gradient(model, corpus, config.engine, l2=config.l2,
                                             workers=config.workers)
        if not math.isfinite(value) or not np.all(np.isfinite(grad)):
            raise DivergedError(it, value)
        trace.append(value)
        log.debug("iteration %d: log-likelihood %.10g", it, value)
        model = model.with_weights(model.weights + (config.step_size / len(corpus)) * grad)
    final = log_likelihood(model, corpus, l2=config.l2)
    if not math.isfinite(final):
        raise DivergedError(config.iterations, final)
    trace.append(final)
    return TrainResult(model, trace)
