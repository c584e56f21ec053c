"""Small deterministic numeric kernel shared by every other module.

All probabilities are handled in the natural-log domain. Randomness goes
through :class:`SeededRng`, which wraps the Philox4x64 counter-based
generator so that a given seed yields the same stream on every platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

NEG_INF = float("-inf")


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


@dataclass
class DenseMap:
    """Affine map ``x -> weight @ x + bias``."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or min(self.weight.shape) < 1:
            raise ContractError(f"weight must be a non-empty matrix, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ContractError(
                f"bias shape {self.bias.shape} does not match out_dim {self.weight.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng: "SeededRng", out_dim: int, in_dim: int, scale: Optional[float] = None):
        scale = 1.0 / math.sqrt(in_dim) if scale is None else scale
        return cls(rng.uniform(-scale, scale, (out_dim, in_dim)), np.zeros(out_dim))


def dense_apply(dmap: DenseMap, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dmap.in_dim:
        raise ContractError(f"input dim {x.shape[-1]} != map in_dim {dmap.in_dim}")
    return x @ dmap.weight.T + dmap.bias


class SeededRng:
    """Single-owner random stream (Philox4x64 via numpy).

    ``derive`` creates an independent child stream from a string tag, which is
    how per-utterance or per-split randomness is obtained without sharing state.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def derive(self, tag: str) -> "SeededRng":
        h = 0xCBF29CE484222325
        for byte in f"{self.seed}:{tag}".encode():
            h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return SeededRng(h)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def gumbel(self, size=None):
        return self._gen.gumbel(0.0, 1.0, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def log_sum_exp(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ContractError("log_sum_exp of an empty sequence")
    m = v.max()
    if m == NEG_INF:
        return NEG_INF
    return float(m + math.log(np.exp(v - m).sum()))


def sigmoid(x):
    # tanh form: one ufunc call, no overflow
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def log_softmax(x, axis: int = -1):
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x, axis: int = -1):
    return np.exp(log_softmax(x, axis=axis))


def activations(kind: str, x) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(np.asarray(x, dtype=np.float64))
    if kind == "softmax":
        return softmax(x)
    if kind == "log_softmax":
        return log_softmax(x)
    raise ContractError(f"unknown activation {kind!r}")


def gumbel_softmax(logits, temperature: float, hard: bool = False, rng: Optional[SeededRng] = None):
    """Relaxed categorical sample over the last axis.

    Returns ``(probs, index)``. With an ``rng`` the logits are perturbed by
    Gumbel(0, 1) noise before the tempered softmax; without one the selection
    is the plain argmax of ``logits``. When ``hard`` is set the first element
    is the one-hot of ``index`` (the forward value of the straight-through
    estimator); the soft probabilities are what gradients flow through.
    """
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ContractError("logits must be finite")
    if rng is None:
        probs = softmax(logits / temperature)
        index = np.argmax(logits, axis=-1)
    else:
        probs = softmax((logits + rng.gumbel(logits.shape)) / temperature)
        index = np.argmax(probs, axis=-1)
    if hard:
        probs = one_hot(index, logits.shape[-1])
    if np.ndim(index) == 0:
        index = int(index)
    return probs, index


def one_hot(index, depth: int) -> np.ndarray:
    index = np.asarray(index)
    out = np.zeros(index.shape + (depth,))
    np.put_along_axis(out, index[..., None], 1.0, axis=-1)
    return out


def linear_anneal(start: float, end: float, progress: float) -> float:
    progress = min(max(progress, 0.0), 1.0)
    return start + (end - start) * progress
