"""Forward-only gradient over the log-domain expectation semiring.

Each forward message is a pair per label: a z-part ``alpha_z[y]`` (the usual
log forward value) and an h-part ``alpha_h[y, m]`` holding the log of the
partial derivative of that forward value with respect to ``theta_m``. After
the last position the pair sums give ``log Z`` and ``log dZ/dtheta`` at once,
so nothing about earlier positions has to be kept.

Per position the h-part update is

    hat_h[y, m] = ⊕_{y'} (psi[y', y] + alpha_h[y', m])                 (dense)
                ⊕ ⊕_{y', m in A(y', y)} (psi[y', y] + alpha_z[y'] + log f_m)  (sparse)

with the dense term computed first, then the sparse injections in row-major
cell order. Two generations of buffers are swapped each step; the working
set is ``O(N^2 + N M)`` cells whatever the sequence length.
"""

from __future__ import annotations

import numpy as np

from .fb import GradientResult, generic_forward, initial_vector
from .instruments import Instruments
from .model import FIXED_START, START_MODES, BoundSequence, CrfModel, LabelAlphabet, ModelError
from .semiring import NEG_INF, ExpectationSemiring


class EmpState:
    """Double-buffered forward pair plus per-step scratch, all ledger-owned."""

    def __init__(self, n: int, m: int, instruments: Instruments | None = None):
        self.n, self.m = n, m
        self.inst = instruments if instruments is not None else Instruments()
        cells = self.inst.cells
        self.alpha_z = cells.empty(n, "alpha_z")
        self.alpha_h = cells.empty((n, m), "alpha_h")
        self.scratch_z = cells.empty(n, "alpha_z")
        self.scratch_h = cells.empty((n, m), "alpha_h")
        self.psi = cells.empty((n, n), "psi")
        self.gamma = cells.empty((n, n), "gamma")
        self.work = cells.empty((n, m), "work")
        self.position = 0

    def buffers(self):
        return (self.alpha_z, self.alpha_h, self.scratch_z, self.scratch_h,
                self.psi, self.gamma, self.work)

    def release(self) -> None:
        for buf in self.buffers():
            self.inst.cells.release(buf)


def emp_init(alphabet: LabelAlphabet, num_features: int, start_mode: str = FIXED_START,
             instruments: Instruments | None = None) -> EmpState:
    """State at position 0: ``(0, -inf)`` at every label (free) or only at the start label."""
    if start_mode not in START_MODES:
        raise ModelError(f"unknown start mode {start_mode!r}")
    state = EmpState(alphabet.size, num_features, instruments)
    state.alpha_z[:] = initial_vector_z(alphabet, start_mode)
    state.alpha_h.fill(NEG_INF)
    return state


def initial_vector_z(alphabet: LabelAlphabet, start_mode: str) -> np.ndarray:
    z = np.zeros(alphabet.size)
    if start_mode == FIXED_START:
        z.fill(NEG_INF)
        z[alphabet.start_label] = 0.0
    return z


def emp_step(state: EmpState, model: CrfModel, x, i: int) -> EmpState:
    """Advance ``state`` from position ``i-1`` to ``i`` in place and return it."""
    bound = x if isinstance(x, BoundSequence) else model.bind(x)
    if i != state.position + 1:
        raise ModelError(f"state is at position {state.position}, cannot step to {i}")
    n, m = state.n, state.m
    inst, ops = state.inst, state.inst.ops

    feats = bound.position_features(i)  # raises on out-of-range i
    inst.stream_reads += 1
    inst.active_entries += len(feats)
    inst.active_cells += n * n
    psi = bound.log_potentials(feats, out=state.psi)
    ops.mul += len(feats)
    ops.add += len(feats)

    gamma = state.gamma
    np.add(psi, state.alpha_z[:, None], out=gamma)
    np.logaddexp.reduce(gamma, axis=0, out=state.scratch_z)
    ops.add += n * n
    ops.log_add += n * (n - 1)

    hat_h, work = state.scratch_h, state.work
    for y in range(n):
        np.add(psi[:, y, None], state.alpha_h, out=work)
        np.logaddexp.reduce(work, axis=0, out=hat_h[y])
    ops.add += n * n * m
    ops.log_add += n * (n - 1) * m

    k = len(feats)
    if k:
        inject = gamma[feats.rows, feats.cols] + np.log(feats.value)
        np.logaddexp.at(hat_h, (feats.cols, feats.index), inject)
        ops.log += k
        ops.add += k
        ops.log_add += k

    state.alpha_z, state.scratch_z = state.scratch_z, state.alpha_z
    state.alpha_h, state.scratch_h = state.scratch_h, state.alpha_h
    state.position = i
    return state


def emp_terminate(state: EmpState) -> GradientResult:
    ops = state.inst.ops
    log_z = float(np.logaddexp.reduce(state.alpha_z))
    log_grad = np.logaddexp.reduce(state.alpha_h, axis=0)
    ops.log_add += (state.n - 1) * (1 + state.m)
    counts = np.exp(log_grad - log_z)
    ops.exp += state.m
    return GradientResult(log_z, log_grad, counts)


def emp_gradient(model: CrfModel, x, *, start_mode: str | None = None,
                 instruments: Instruments | None = None, history: list | None = None,
                 on_step=None) -> GradientResult:
    """``log Z`` and expected feature counts from a single forward pass.

    ``history`` (tests only) receives a copy of the z-part after every step;
    ``on_step(i, state)`` is called after each step for instrumentation.
    """
    bound = x if isinstance(x, BoundSequence) else model.bind(x)
    state = emp_init(model.alphabet, model.num_features, start_mode or model.start_mode,
                     instruments)
    if history is not None:
        history.append(state.alpha_z.copy())
    for i in range(1, bound.length + 1):
        emp_step(state, model, bound, i)
        if history is not None:
            history.append(state.alpha_z.copy())
        if on_step is not None:
            on_step(i, state)
    result = emp_terminate(state)
    state.release()
    return result


def expectation_kernels(model: CrfModel, x) -> list:
    """Plain-domain local kernels ``(exp psi, exp psi * f)`` as pair matrices."""
    bound = x if isinstance(x, BoundSequence) else model.bind(x)
    sr = ExpectationSemiring(model.num_features)
    n = model.num_labels
    kernels = []
    for i in range(1, bound.length + 1):
        feats = bound.position_features(i)
        psi = bound.log_potentials(feats)
        with np.errstate(over="ignore"):
            z = np.exp(psi)
        rows = []
        for a in range(n):
            row = []
            for b in range(n):
                f = np.zeros(model.num_features)
                sel = (feats.rows == a) & (feats.cols == b)
                f[feats.index[sel]] = feats.value[sel]
                with np.errstate(over="ignore", invalid="ignore"):
                    row.append(sr.pair(z[a, b], z[a, b] * f))
            rows.append(row)
        kernels.append(rows)
    return kernels


def plain_expectation_gradient(model: CrfModel, x, *, start_mode: str | None = None):
    """Plain-domain expectation-semiring forward pass: returns ``(Z, dZ/dtheta)``.

    Numerically unstable by construction (products of ``exp(psi)``); meant
    as a small-instance oracle and for demonstrating overflow.
    """
    sr = ExpectationSemiring(model.num_features)
    init = initial_vector(sr, model.num_labels, start_mode or model.start_mode,
                          model.alphabet.start_label)
    with np.errstate(over="ignore", invalid="ignore"):
        alphas = generic_forward(expectation_kernels(model, x), sr, init=init)
        total = sr.sum(alphas[-1].values)
    return total.z, total.h

