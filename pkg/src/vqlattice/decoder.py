"""Alignment-length synchronous beam search with hypothesis merging.

At step ``i`` every live hypothesis has consumed ``t`` frames and emitted
``u`` labels with ``t + u = i``. Each step expands the beam over blank and
all labels, merges candidates whose future is (or is treated as) identical,
prunes to the beam size and records the step in a lattice.

Lattice bookkeeping: a hypothesis remembers its lattice node and the blank
mass accumulated since it last moved to a new node (``pending``). The
Viterbi score of a hypothesis' node plus its pending mass equals its score,
so the best lattice path always reproduces the decoder's best final.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from .lattice import FINAL, Emission, Lattice, trim, update_lattice
from .model.network import BLANK, PredNetState, Transducer
from .numerics import ContractError, log_softmax, log_sum_exp

STRATEGIES = ("none", "vq_state", "limited_context", "same_label_sequence")


class NoHypothesisError(RuntimeError):
    """No hypothesis consumed every frame; usually the beam or U_max is too small."""


@dataclass(frozen=True)
class MergeStrategy:
    tag: str = "none"
    k: int = 2  # context width for limited_context
    code_only: bool = False  # vq_state: ignore the output length in the key

    def __post_init__(self):
        if self.tag not in STRATEGIES:
            raise ContractError(f"unknown merge strategy {self.tag!r}; expected one of {STRATEGIES}")
        if self.k < 1:
            raise ContractError("limited_context needs k >= 1")

    @classmethod
    def parse(cls, text: str) -> "MergeStrategy":
        """``none``, ``vq_state``, ``vq_code``, ``same_label_sequence``, ``limited_context[:k]``."""
        name, _, arg = text.partition(":")
        if name == "vq_code":
            return cls("vq_state", code_only=True)
        if name == "limited_context" and arg:
            return cls(name, k=int(arg))
        if arg:
            raise ContractError(f"strategy {name!r} takes no argument")
        return cls(name)

    def __str__(self):
        if self.tag == "limited_context":
            return f"limited_context:{self.k}"
        if self.tag == "vq_state" and self.code_only:
            return "vq_code"
        return self.tag

    def check_variant(self, variant: str) -> None:
        if self.tag == "vq_state" and variant != "vq_lstm":
            raise ContractError("vq_state merging needs a vq_lstm prediction network")

    def key(self, labels: tuple, state: PredNetState):
        # Identical label sequences always share a key: every strategy is at
        # least as coarse as de-duplication.
        if self.tag == "vq_state":
            if self.code_only and labels:
                return ("code", state.code)
            return ("code", len(labels), state.code)
        if self.tag == "limited_context":
            return ("ctx", len(labels), labels[-self.k :])
        return ("seq", labels)


@dataclass(frozen=True)
class DecoderConfig:
    beam: int = 8
    u_max_ratio: float = 1.0
    strategy: MergeStrategy = MergeStrategy()
    emit_lattice: bool = True

    def __post_init__(self):
        if self.beam < 1:
            raise ContractError("beam size must be >= 1")
        if self.u_max_ratio < 0:
            raise ContractError("U_max ratio must be >= 0")


@dataclass
class Hypothesis:
    labels: tuple
    state: PredNetState
    pg: np.ndarray  # joint projection of the prediction output
    score: float
    node: int
    pending: float = 0.0

    @property
    def code(self):
        if self.state.variant == "vq_lstm":
            return self.state.code
        if self.state.variant == "vlc":
            return self.state.context
        return None


class Candidate(NamedTuple):
    parent: Hypothesis
    label: int  # BLANK or a label id
    logp: float  # log-prob of this expansion
    score: float
    final: bool
    state: PredNetState
    pg: np.ndarray

    @property
    def labels(self) -> tuple:
        if self.label == BLANK:
            return self.parent.labels
        return self.parent.labels + (self.label,)


class MergeGroup(NamedTuple):
    score: float  # log-sum of member scores
    rep: Candidate
    members: List[Candidate]


class FinalHypothesis(NamedTuple):
    labels: tuple
    score: float


@dataclass
class DecodeResult:
    nbest: List[FinalHypothesis]
    lattice: Optional[Lattice]
    merges: int = 0  # groups that combined different label sequences
    steps: int = 0

    @property
    def best(self) -> FinalHypothesis:
        return self.nbest[0]


def rank_key(score: float, labels: tuple):
    """Deterministic order: higher score, then shorter, then lexicographic."""
    return (-score, len(labels), labels)


class _Expander:
    """Caches whole-vocabulary prediction steps by state identity."""

    def __init__(self, model: Transducer):
        self.model = model
        self.cache: Dict[object, tuple] = {}

    def _state_key(self, labels, state):
        if state.variant == "vq_lstm":
            return state.code
        if state.variant == "vlc":
            return state.context
        return labels

    def expand(self, hyp: Hypothesis):
        key = self._state_key(hyp.labels, hyp.state)
        hit = self.cache.get(key)
        if hit is None:
            states, G = self.model.step_all(hyp.state)
            hit = (states, self.model.pred_projection(G))
            self.cache[key] = hit
        return hit


def expand_hypothesis(hyp: Hypothesis, logp: np.ndarray, t: int, T: int, allow_labels: bool, expander) -> List[Candidate]:
    """Candidates for one hypothesis given its joint output ``logp`` at frame ``t``.

    The blank candidate keeps the prediction state; at the last frame it is
    final. Label candidates step the prediction network (for vq_lstm this
    yields the discrete code the merge key needs).
    """
    if t > T - 1:
        raise ContractError(f"hypothesis at t={t} is past the last frame")
    out = [Candidate(hyp, BLANK, float(logp[BLANK]), hyp.score + float(logp[BLANK]), t == T - 1, hyp.state, hyp.pg)]
    if allow_labels:
        states, PG = expander.expand(hyp)
        for k in range(1, len(logp)):
            lp = float(logp[k])
            out.append(Candidate(hyp, k, lp, hyp.score + lp, False, states[k - 1], PG[k - 1]))
    return out


def merge_hypotheses(cands: List[Candidate], key_fn) -> List[MergeGroup]:
    """Group candidates by ``key_fn``; the group score is the log-sum of members."""
    groups: Dict[object, List[Candidate]] = {}
    for c in cands:
        groups.setdefault(key_fn(c), []).append(c)
    out = []
    for members in groups.values():
        members.sort(key=lambda c: rank_key(c.score, c.labels))
        score = members[0].score if len(members) == 1 else log_sum_exp([c.score for c in members])
        out.append(MergeGroup(score, members[0], members))
    return out


def prune_beam(groups: List[MergeGroup], H: int) -> List[MergeGroup]:
    return sorted(groups, key=lambda g: rank_key(g.score, g.rep.labels))[:H]


def _emissions(group: MergeGroup) -> List[Emission]:
    bonus = group.score - group.rep.score
    ems = []
    for c in group.members:
        extra = bonus if c is group.rep else 0.0
        w = c.parent.pending + c.logp + extra
        if c.label == BLANK:
            ems.append(Emission(None, None, w, c.parent.node))
        else:
            ems.append(Emission(c.parent.node, c.label, w))
    return ems


def finalize(group: MergeGroup, lattice: Lattice) -> FinalHypothesis:
    """Connect every member of a final group to the end node."""
    bonus = group.score - group.rep.score
    for c in group.members:
        extra = bonus if c is group.rep else 0.0
        lattice.add_arc(c.parent.node, lattice.end, FINAL, c.parent.pending + c.logp + extra)
    return FinalHypothesis(group.rep.labels, group.score)


def decode(model: Transducer, features, config: DecoderConfig = DecoderConfig()) -> DecodeResult:
    config.strategy.check_variant(model.config.variant)
    m, _ = model.encode(features)
    E = model.enc_projection(m)
    T = len(E)
    U_max = math.ceil(config.u_max_ratio * T)
    lattice = Lattice(T, model.vocab.symbols)
    expander = _Expander(model)
    state, g0 = model.initial_state()
    beam = [Hypothesis((), state, model.pred_projection(g0), 0.0, lattice.start)]
    strategy = config.strategy
    key_fn = lambda c: strategy.key(c.labels, c.state)  # noqa: E731
    finals: List[FinalHypothesis] = []
    merges = 0
    steps = 0
    Wo, bo = model.params["joint.out.W"], model.params["joint.out.b"]
    for i in range(T + U_max):
        if not beam:
            break
        steps += 1
        ts = [i - len(h.labels) for h in beam]
        Z = np.tanh(E[ts] * np.stack([h.pg for h in beam]))
        LP = log_softmax(Z @ Wo.T + bo, axis=-1)
        cands: List[Candidate] = []
        for h, t, lp in zip(beam, ts, LP):
            cands.extend(expand_hypothesis(h, lp, t, T, len(h.labels) < U_max, expander))
        ending = [c for c in cands if c.final]
        live = [c for c in cands if not c.final]
        for group in merge_hypotheses(ending, lambda c: c.labels):
            finals.append(finalize(group, lattice))
        kept = prune_beam(merge_hypotheses(live, key_fn), config.beam)
        merges += sum(1 for g in kept if len({c.labels for c in g.members}) > 1)
        targets = update_lattice(lattice, [_emissions(g) for g in kept])
        beam = []
        for g, node in zip(kept, targets):
            rep = g.rep
            if len(g.members) == 1 and rep.label == BLANK:
                pending = rep.parent.pending + rep.logp
            else:
                pending = 0.0
            beam.append(Hypothesis(rep.labels, rep.state, rep.pg, g.score, node, pending))
    if not finals:
        raise NoHypothesisError(
            f"no hypothesis reached the last frame (T={T}, beam={config.beam}, U_max={U_max})"
        )
    finals.sort(key=lambda f: rank_key(f.score, f.labels))
    return DecodeResult(finals, trim(lattice) if config.emit_lattice else None, merges, steps)


def greedy_decode(model: Transducer, features, u_max_ratio: float = 1.0) -> FinalHypothesis:
    return decode(model, features, DecoderConfig(beam=1, u_max_ratio=u_max_ratio, emit_lattice=False)).best
