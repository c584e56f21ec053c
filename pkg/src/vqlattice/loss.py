"""Transducer negative log-likelihood.

Grid convention: ``grid[t, u, k]`` is the log-probability of output ``k``
(0 = blank) at frame ``t`` (0-based) after ``u`` emitted labels. A blank
advances ``t``, label ``y[u]`` advances ``u``; every alignment ends with the
blank emitted at ``(T-1, U)``.
"""

from __future__ import annotations

import itertools
import math
from typing import NamedTuple

import numpy as np

from .model.network import BLANK
from .numerics import ContractError, NEG_INF, log_sum_exp


class AlignmentError(ContractError):
    pass


class Trellis(NamedTuple):
    alpha: np.ndarray
    beta: np.ndarray
    log_likelihood: float


def _check(grid, y):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ContractError("grid must be T x (U+1) x K")
    T, U1, K = grid.shape
    if T == 0:
        raise AlignmentError("no frames: no alignment can emit the labels")
    if len(y) != U1 - 1:
        raise ContractError(f"label length {len(y)} inconsistent with grid U+1={U1}")
    if any(not 1 <= k < K for k in y):
        raise ContractError("label ids must lie in 1..K-1")
    return grid, T, U1 - 1


def trellis(grid, y) -> Trellis:
    grid, T, U = _check(grid, y)
    blank = grid[:, :, BLANK]
    emit = grid[:, np.arange(U), np.asarray(y, dtype=int)] if U else np.zeros((T, 0))
    if not np.isfinite(emit).all():
        return _trellis_loop(blank, emit, T, U)
    # Within a frame the label recursion is a running log-sum-exp:
    # alpha[t, u] = E[u] + logcumsumexp_v(A[v] - E[v]), E the cumulative emit score.
    zero = np.zeros((T, 1))
    E = np.concatenate([zero, np.cumsum(emit, axis=1)], axis=1)
    alpha = np.empty((T, U + 1))
    arrive = np.full(U + 1, NEG_INF)
    arrive[0] = 0.0
    for t in range(T):
        if t:
            arrive = alpha[t - 1] + blank[t - 1]
        alpha[t] = E[t] + np.logaddexp.accumulate(arrive - E[t])
    # beta[t, u] = logcumsumexp over v >= u of (B[v] + E[v]) - E[u]
    beta = np.empty((T, U + 1))
    leave = np.full(U + 1, NEG_INF)
    leave[U] = blank[T - 1, U]
    for t in range(T - 1, -1, -1):
        if t < T - 1:
            leave = beta[t + 1] + blank[t]
        beta[t] = np.logaddexp.accumulate((leave + E[t])[::-1])[::-1] - E[t]
    return Trellis(alpha, beta, float(beta[0, 0]))


def _trellis_loop(blank, emit, T, U) -> Trellis:
    """Cell-by-cell recursion; used when some label scores are infinite."""
    alpha = np.full((T, U + 1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U + 1):
            terms = []
            if t:
                terms.append(alpha[t - 1, u] + blank[t - 1, u])
            if u:
                terms.append(alpha[t, u - 1] + emit[t, u - 1])
            if terms:
                alpha[t, u] = np.logaddexp.reduce(terms)
    beta = np.full((T, U + 1), NEG_INF)
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if t == T - 1 and u == U:
                beta[t, u] = blank[t, u]
                continue
            terms = []
            if t < T - 1:
                terms.append(beta[t + 1, u] + blank[t, u])
            if u < U:
                terms.append(beta[t, u + 1] + emit[t, u])
            beta[t, u] = np.logaddexp.reduce(terms)
    return Trellis(alpha, beta, float(beta[0, 0]))


def forward_backward_nll(grid, y) -> float:
    return -trellis(grid, y).log_likelihood


def nll_gradient(grid, y):
    """Return ``(nll, d nll / d grid)``; only blank and target entries are non-zero."""
    grid, T, U = _check(grid, y)
    tr = trellis(grid, y)
    ll = tr.log_likelihood
    a, b = tr.alpha, tr.beta
    grad = np.zeros_like(grid)
    nxt = np.full((T, U + 1), NEG_INF)
    nxt[:-1] = b[1:]
    nxt[T - 1, U] = 0.0
    grad[:, :, BLANK] = -np.exp(a + grid[:, :, BLANK] + nxt - ll)
    if U:
        ys = np.asarray(y, dtype=int)
        occ = -np.exp(a[:, :U] + grid[:, np.arange(U), ys] + b[:, 1:] - ll)
        grad[:, np.arange(U), ys] = occ
    return -ll, grad


def count_alignments(T: int, U: int) -> int:
    return math.comb(T + U - 1, U) if T >= 1 else 0


def brute_force_nll(grid, y, max_size: int = 12) -> float:
    """Enumerate every alignment explicitly (test oracle)."""
    grid, T, U = _check(grid, y)
    if T + U > max_size:
        raise ContractError(f"T + U = {T + U} exceeds brute-force guard {max_size}")
    scores = []
    # choose which of the first T+U-1 steps are label emissions; the last step is blank
    for label_steps in itertools.combinations(range(T + U - 1), U):
        chosen = set(label_steps)
        t = u = 0
        s = 0.0
        for i in range(T + U - 1):
            if i in chosen:
                s += grid[t, u, y[u]]
                u += 1
            else:
                s += grid[t, u, BLANK]
                t += 1
        s += grid[T - 1, U, BLANK]
        scores.append(s)
    return -log_sum_exp(scores)
