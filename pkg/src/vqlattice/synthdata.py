"""Synthetic transduction task.

Each label is rendered as a run of 2-4 frames whose features are the label's
one-hot prototype plus Gaussian noise. Adjacent repeats of a label are only
separable by duration, which keeps the task from being trivially solvable.
"""

from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple

import numpy as np

from .model.network import Vocabulary
from .numerics import ContractError, SeededRng

SPLITS = ("train", "dev", "test")
_HEADER = "#vqlattice-dataset v1"


@dataclass(frozen=True)
class SynthTask:
    num_labels: int = 8
    min_len: int = 2
    max_len: int = 12
    min_frames: int = 2
    max_frames: int = 4
    feat_dim: int = 16
    noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.feat_dim < self.num_labels:
            raise ContractError("feat_dim must be at least num_labels (one-hot prototypes)")
        if not 1 <= self.min_len <= self.max_len:
            raise ContractError("invalid label length range")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ContractError("invalid frames-per-label range")

    def vocabulary(self) -> Vocabulary:
        return default_vocabulary(self.num_labels)


def default_vocabulary(n: int) -> Vocabulary:
    if n <= 26:
        return Vocabulary(list(string.ascii_lowercase[:n]))
    return Vocabulary([f"s{k}" for k in range(n)])


class Utterance(NamedTuple):
    uid: str
    features: np.ndarray  # T x F
    labels: tuple  # label ids, 1-based


class Dataset(NamedTuple):
    vocab: Vocabulary
    feat_dim: int
    utterances: List[Utterance]

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)


def generate(task: SynthTask, count: int, split: str = "train") -> Dataset:
    if count < 1:
        raise ContractError("count must be >= 1")
    if split not in SPLITS:
        raise ContractError(f"split must be one of {SPLITS}")
    base = SeededRng(task.seed).derive(f"split:{split}")
    utts = []
    for n in range(count):
        rng = base.derive(f"utt:{n}")
        U = int(rng.integers(task.min_len, task.max_len + 1))
        labels = tuple(int(k) for k in rng.integers(1, task.num_labels + 1, size=U))
        frames = rng.integers(task.min_frames, task.max_frames + 1, size=U)
        ids = np.repeat(np.asarray(labels) - 1, frames)
        feats = np.zeros((len(ids), task.feat_dim))
        feats[np.arange(len(ids)), ids] = 1.0
        if task.noise > 0:
            feats += rng.normal(0.0, task.noise, feats.shape)
        utts.append(Utterance(f"{split}-{n:05d}", feats, labels))
    return Dataset(task.vocabulary(), task.feat_dim, utts)


def utterance_digest(utt: Utterance) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(utt.features, dtype="<f8").tobytes())
    h.update(repr(utt.labels).encode())
    return h.hexdigest()


# ----------------------------------------------------------------------------
# text container: header, then per utterance a label line and the T x F matrix


def dumps(ds: Dataset) -> str:
    lines = [_HEADER, f"feat_dim {ds.feat_dim}", "vocab " + " ".join(ds.vocab.symbols)]
    for utt in ds.utterances:
        lines.append(f"utt {utt.uid} {utt.features.shape[0]}")
        lines.append("labels " + " ".join(ds.vocab.decode(utt.labels)))
        lines.extend(" ".join(repr(float(v)) for v in row) for row in utt.features)
    return "\n".join(lines) + "\n"


def loads(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines or lines[0] != _HEADER:
        raise ContractError("not a dataset file (bad header)")
    feat_dim = int(lines[1].split()[1])
    vocab = Vocabulary(lines[2].split()[1:])
    utts = []
    k = 3
    while k < len(lines):
        _, uid, T = lines[k].split()
        labels = vocab.encode(lines[k + 1].split()[1:])
        rows = [list(map(float, ln.split())) for ln in lines[k + 2 : k + 2 + int(T)]]
        feats = np.array(rows, dtype=np.float64).reshape(int(T), feat_dim)
        utts.append(Utterance(uid, feats, labels))
        k += 2 + int(T)
    return Dataset(vocab, feat_dim, utts)


def save(ds: Dataset, path) -> None:
    Path(path).write_text(dumps(ds))


def load(path) -> Dataset:
    return loads(Path(path).read_text())
