"""Forward-backward message passing.

Two layers live here:

* a semiring-generic engine (:func:`generic_forward`, :func:`generic_backward`,
  :func:`fb_marginals`, :func:`log_partition`) that works element by element
  for any :class:`~chaincrf.semiring.Semiring`; it is the reference path and
  drives Viterbi decoding through the max-plus semiring;
* the vectorised log-domain gradient (:func:`fb_gradient`) with three memory
  strategies: ``full`` keeps every matrix and message, ``recompute`` rebuilds
  matrices on use and keeps only the forward messages, ``checkpoint`` keeps
  ``ceil(sqrt(T))`` forward messages and rebuilds each block on the way back.

Gradient accumulation runs over positions ``k = T .. 1``, then cells
row-major, then feature indices ascending, in every strategy, so the three
strategies perform identical floating-point operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .instruments import Instruments
from .model import FIXED_START, START_MODES, BoundSequence, CrfModel, ModelError
from .semiring import LOG_SUM_PRODUCT, MAX_PLUS, NEG_INF, Semiring, SemiringError

STRATEGIES = ("full", "recompute", "checkpoint")


@dataclass(frozen=True)
class MessageVector:
    position: int
    values: tuple

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class PairwiseMarginals:
    """``v_k(a, b) = alpha_{k-1}(a) ⊗ u_k(a, b) ⊗ beta_k(b)``."""

    position: int
    cells: np.ndarray


@dataclass(frozen=True, eq=False)
class GradientResult:
    """``log Z``, ``log dZ/dtheta_m`` and the expected counts ``(dZ/dtheta) / Z``."""

    log_partition: float
    log_gradient: np.ndarray
    expected_counts: np.ndarray


# ---------------------------------------------------------------------------
# semiring-generic engine
# ---------------------------------------------------------------------------


def initial_vector(semiring: Semiring, n: int, start_mode: str = "free",
                   start_label: int = 0) -> list:
    """``alpha_0``: the ⊗-identity everywhere (free start) or only at the start label."""
    if start_mode == FIXED_START:
        return [semiring.one if y == start_label else semiring.zero for y in range(n)]
    return [semiring.one] * n


def _square(kernel, n: int | None):
    rows = len(kernel)
    if n is not None and rows != n:
        raise SemiringError(f"kernel has {rows} rows, expected {n}")
    if any(len(row) != rows for row in kernel):
        raise SemiringError("kernel is not square")
    return rows


def generic_forward(kernels: Iterable, semiring: Semiring, *, init: Sequence | None = None,
                    backpointers: list | None = None) -> list:
    """Forward messages ``alpha_0 .. alpha_T`` over ``semiring``.

    ``alpha_i(y) = ⊕_{y'} u_i(y', y) ⊗ alpha_{i-1}(y')``, folded over ``y'``
    in ascending order. When ``backpointers`` is a list, the first ``y'``
    whose term equals the sum is appended per position; this is only
    meaningful for selective semirings such as max-plus.
    """
    alphas = []
    prev = None
    n = None if init is None else len(init)
    for i, kernel in enumerate(kernels, 1):
        n = _square(kernel, n)
        if prev is None:
            prev = list(init) if init is not None else [semiring.one] * n
            alphas.append(MessageVector(0, tuple(prev)))
        cur, bp = [], []
        for y in range(n):
            terms = [semiring.mul(kernel[yp][y], prev[yp]) for yp in range(n)]
            total = semiring.sum(terms)
            cur.append(total)
            if backpointers is not None:
                bp.append(next(yp for yp, t in enumerate(terms) if t == total))
        if backpointers is not None:
            backpointers.append(bp)
        alphas.append(MessageVector(i, tuple(cur)))
        prev = cur
    if not alphas:
        raise SemiringError("need at least one kernel")
    return alphas


def generic_backward(kernels: Sequence, semiring: Semiring) -> list:
    """Backward messages ``beta_0 .. beta_T``; ``beta_T`` is the ⊗-identity."""
    kernels = list(kernels)
    if not kernels:
        raise SemiringError("need at least one kernel")
    n = _square(kernels[0], None)
    for kernel in kernels:
        _square(kernel, n)
    t = len(kernels)
    nxt = [semiring.one] * n
    betas = [MessageVector(t, tuple(nxt))]
    for i in range(t - 1, -1, -1):
        kernel = kernels[i]  # u_{i+1}
        cur = [semiring.sum(semiring.mul(kernel[y][yn], nxt[yn]) for yn in range(n))
               for y in range(n)]
        betas.append(MessageVector(i, tuple(cur)))
        nxt = cur
    betas.reverse()
    return betas


def fb_marginals(alphas: Sequence, betas: Sequence, kernels: Sequence, k: int,
                 semiring: Semiring = LOG_SUM_PRODUCT) -> PairwiseMarginals:
    """Pairwise marginal table at position ``k`` (1-based)."""
    t = len(kernels)
    if not 1 <= k <= t:
        raise SemiringError(f"position {k} outside [1, {t}]")
    a = alphas[k - 1].values
    b = betas[k].values
    u = kernels[k - 1]
    n = len(a)
    cells = [[semiring.mul(semiring.mul(a[i], u[i][j]), b[j]) for j in range(n)] for i in range(n)]
    dtype = np.float64 if isinstance(semiring.one, float) else object
    return PairwiseMarginals(k, np.array(cells, dtype=dtype))


def log_partition(alpha_last: MessageVector | Sequence, semiring: Semiring = LOG_SUM_PRODUCT):
    values = alpha_last.values if isinstance(alpha_last, MessageVector) else alpha_last
    return semiring.sum(values)


def log_kernels(model: CrfModel, x) -> list:
    """Dense log-potential matrices ``psi_1 .. psi_T`` for the generic engine."""
    bound = x if isinstance(x, BoundSequence) else model.bind(x)
    return [bound.log_potentials(bound.position_features(i)) for i in range(1, bound.length + 1)]


# ---------------------------------------------------------------------------
# log-domain gradient
# ---------------------------------------------------------------------------


class _Pass:
    """Shared buffers and primitive steps for one gradient computation."""

    def __init__(self, model: CrfModel, x, start_mode: str | None,
                 instruments: Instruments | None):
        self.bound = x if isinstance(x, BoundSequence) else model.bind(x)
        self.n = model.num_labels
        self.m = model.num_features
        self.length = self.bound.length
        self.start_mode = start_mode or model.start_mode
        if self.start_mode not in START_MODES:
            raise ModelError(f"unknown start mode {self.start_mode!r}")
        self.start_label = model.alphabet.start_label
        self.inst = instruments if instruments is not None else Instruments()
        self.ops = self.inst.ops
        self.cells = self.inst.cells
        self.tmp = self.cells.empty((self.n, self.n))

    def alpha0(self) -> np.ndarray:
        a = self.cells.full(self.n, 0.0, "alpha")
        if self.start_mode == FIXED_START:
            a.fill(NEG_INF)
            a[self.start_label] = 0.0
        return a

    def read(self, k: int, psi: np.ndarray | None):
        """Read position ``k`` from the stream; fill ``psi`` if given."""
        feats = self.bound.position_features(k)
        self.inst.stream_reads += 1
        self.inst.active_entries += len(feats)
        self.inst.active_cells += self.n * self.n
        if psi is not None:
            self.bound.log_potentials(feats, out=psi)
            self.ops.mul += len(feats)
            self.ops.add += len(feats)
        return feats

    def forward(self, psi, prev, out):
        np.add(psi, prev[:, None], out=self.tmp)
        np.logaddexp.reduce(self.tmp, axis=0, out=out)
        self.ops.add += self.n * self.n
        self.ops.log_add += self.n * (self.n - 1)

    def backward(self, psi_next, beta_next, out):
        np.add(psi_next, beta_next[None, :], out=self.tmp)
        np.logaddexp.reduce(self.tmp, axis=1, out=out)
        self.ops.add += self.n * self.n
        self.ops.log_add += self.n * (self.n - 1)

    def accumulate(self, alpha_prev, psi, beta, feats, log_grad):
        v = self.tmp
        np.add(alpha_prev[:, None], psi, out=v)
        v += beta[None, :]
        self.ops.add += 2 * self.n * self.n
        k = len(feats)
        if k:
            w = v[feats.rows, feats.cols] + np.log(feats.value)
            np.logaddexp.at(log_grad, feats.index, w)
            self.ops.log += k
            self.ops.add += k
            self.ops.log_add += k

    def finish(self, log_z: float, log_grad: np.ndarray) -> GradientResult:
        counts = np.exp(log_grad - log_z)
        self.ops.exp += self.m
        result = GradientResult(float(log_z), log_grad.copy(), counts)
        self.cells.release(log_grad)
        self.cells.release(self.tmp)
        return result


def _log_z(p: _Pass, alpha_last) -> float:
    p.ops.log_add += p.n - 1
    return float(np.logaddexp.reduce(alpha_last))


def _fb_full(p: _Pass) -> GradientResult:
    t, n = p.length, p.n
    psis = [None] * (t + 1)
    alphas = [p.alpha0()] + [None] * t
    for k in range(1, t + 1):
        psis[k] = p.cells.empty((n, n), "psi")
        p.read(k, psis[k])
        alphas[k] = p.cells.empty(n, "alpha")
        p.forward(psis[k], alphas[k - 1], alphas[k])

    betas = [None] * (t + 1)
    betas[t] = p.cells.full(n, 0.0, "beta")
    for k in range(t - 1, 0, -1):
        betas[k] = p.cells.empty(n, "beta")
        p.backward(psis[k + 1], betas[k + 1], betas[k])

    log_z = _log_z(p, alphas[t])
    log_grad = p.cells.full(p.m, NEG_INF, "grad")
    for k in range(t, 0, -1):
        feats = p.read(k, None)
        p.accumulate(alphas[k - 1], psis[k], betas[k], feats, log_grad)

    for arr in psis[1:] + alphas + betas[1:]:
        p.cells.release(arr)
    return p.finish(log_z, log_grad)


def _terminate_block(p: _Pass, lo: int, hi: int, alphas: dict, beta, beta_spare, psi, log_grad):
    """Accumulate positions ``hi .. lo`` and step beta down to ``beta_{lo-1}``.

    ``alphas[k-1]`` must be available for ``k`` in the block. Returns the
    (beta, spare) buffers with ``beta`` holding ``beta_{lo-1}``.
    """
    for k in range(hi, lo - 1, -1):
        feats = p.read(k, psi)
        p.accumulate(alphas[k - 1], psi, beta, feats, log_grad)
        if k > 1:
            p.backward(psi, beta, beta_spare)
            beta, beta_spare = beta_spare, beta
    return beta, beta_spare


def _fb_recompute(p: _Pass) -> GradientResult:
    t, n = p.length, p.n
    psi = p.cells.empty((n, n), "psi")
    alphas = {0: p.alpha0()}
    for k in range(1, t + 1):
        p.read(k, psi)
        alphas[k] = p.cells.empty(n, "alpha")
        p.forward(psi, alphas[k - 1], alphas[k])
    log_z = _log_z(p, alphas[t])

    log_grad = p.cells.full(p.m, NEG_INF, "grad")
    beta = p.cells.full(n, 0.0, "beta")
    spare = p.cells.empty(n, "beta")
    beta, spare = _terminate_block(p, 1, t, alphas, beta, spare, psi, log_grad)

    for arr in list(alphas.values()) + [psi, beta, spare]:
        p.cells.release(arr)
    return p.finish(log_z, log_grad)


def checkpoint_block_size(length: int) -> int:
    """``ceil(sqrt(T))``; the last block may be shorter."""
    return math.isqrt(length - 1) + 1 if length > 1 else 1


def _fb_checkpoint(p: _Pass) -> GradientResult:
    t, n = p.length, p.n
    size = checkpoint_block_size(t)
    starts = list(range(0, t, size))  # block j covers positions starts[j]+1 .. starts[j]+size
    psi = p.cells.empty((n, n), "psi")

    checkpoints = {0: p.alpha0()}
    cur = p.cells.empty(n, "alpha")
    cur[:] = checkpoints[0]
    nxt = p.cells.empty(n, "alpha")
    for k in range(1, t + 1):
        p.read(k, psi)
        p.forward(psi, cur, nxt)
        cur, nxt = nxt, cur
        if k < t and k % size == 0:
            checkpoints[k] = p.cells.empty(n, "alpha")
            checkpoints[k][:] = cur
    log_z = _log_z(p, cur)
    p.cells.release(cur)
    p.cells.release(nxt)

    log_grad = p.cells.full(p.m, NEG_INF, "grad")
    beta = p.cells.full(n, 0.0, "beta")
    spare = p.cells.empty(n, "beta")
    for start in reversed(starts):
        hi = min(start + size, t)
        block = {start: checkpoints[start]}
        for k in range(start + 1, hi):
            p.read(k, psi)
            block[k] = p.cells.empty(n, "alpha")
            p.forward(psi, block[k - 1], block[k])
        beta, spare = _terminate_block(p, start + 1, hi, block, beta, spare, psi, log_grad)
        for k in range(start + 1, hi):
            p.cells.release(block[k])
        p.cells.release(checkpoints.pop(start))

    for arr in (psi, beta, spare):
        p.cells.release(arr)
    return p.finish(log_z, log_grad)


_STRATEGY_IMPL = {"full": _fb_full, "recompute": _fb_recompute, "checkpoint": _fb_checkpoint}


def fb_gradient(model: CrfModel, x, strategy: str = "full", *, start_mode: str | None = None,
                instruments: Instruments | None = None) -> GradientResult:
    """Log partition function and expected feature counts by forward-backward.

    ``strategy`` picks the storage scheme (``full``, ``recompute`` or
    ``checkpoint``); all three return bit-identical results.
    """
    try:
        impl = _STRATEGY_IMPL[strategy]
    except KeyError:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}") from None
    return impl(_Pass(model, x, start_mode, instruments))


def checkpoint_fb_gradient(model: CrfModel, x, **kwargs) -> GradientResult:
    return fb_gradient(model, x, "checkpoint", **kwargs)


def forward_messages(model: CrfModel, x, *, start_mode: str | None = None) -> np.ndarray:
    """All log-domain forward vectors as a ``(T+1, N)`` array."""
    p = _Pass(model, x, start_mode, None)
    out = np.empty((p.length + 1, p.n))
    out[0] = p.alpha0()
    psi = np.empty((p.n, p.n))
    for k in range(1, p.length + 1):
        p.read(k, psi)
        p.forward(psi, out[k - 1], out[k])
    return out


def sequence_log_partition(model: CrfModel, x, *, start_mode: str | None = None) -> float:
    """``log Z(x)`` from a forward pass with constant storage."""
    p = _Pass(model, x, start_mode, None)
    cur = p.alpha0()
    nxt = np.empty(p.n)
    psi = np.empty((p.n, p.n))
    for k in range(1, p.length + 1):
        p.read(k, psi)
        p.forward(psi, cur, nxt)
        cur, nxt = nxt, cur
    return float(np.logaddexp.reduce(cur))


# ---------------------------------------------------------------------------
# Viterbi
# ---------------------------------------------------------------------------


def viterbi(model: CrfModel, x, *, start_mode: str | None = None):
    """Best label sequence and its score via the max-plus semiring.

    Ties go to the lowest label index, both for the final label and for
    every back-pointer.
    """
    bound = x if isinstance(x, BoundSequence) else model.bind(x)
    mode = start_mode or model.start_mode
    init = initial_vector(MAX_PLUS, model.num_labels, mode, model.alphabet.start_label)
    kernels = (bound.log_potentials(bound.position_features(i)).tolist()
               for i in range(1, bound.length + 1))
    pointers: list = []
    alphas = generic_forward(kernels, MAX_PLUS, init=init, backpointers=pointers)
    last = alphas[-1].values
    score = log_partition(last, MAX_PLUS)
    y = next(j for j, s in enumerate(last) if s == score)
    path = [y]
    for bp in reversed(pointers[1:]):
        y = bp[y]
        path.append(y)
    path.reverse()
    return path, score


def viterbi_decode(model: CrfModel, x, **kwargs) -> list:
    return viterbi(model, x, **kwargs)[0]
