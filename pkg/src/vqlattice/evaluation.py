"""Corpus-level decoding and metrics shared by the CLI and the test suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

from .decoder import DecodeResult, DecoderConfig, MergeStrategy, decode
from .lattice import density, edit_distance, extract_nbest, oracle_wer, prune_lattice, validate
from .lm import NGramLM, rescore, tune_lambda

DEFAULT_STRATEGY = {"lstm": "none", "vlc": "limited_context:2", "vq_lstm": "vq_state"}
BEAM_SWEEP = (1, 2, 4, 8, 16)


def default_strategy(variant: str) -> MergeStrategy:
    return MergeStrategy.parse(DEFAULT_STRATEGY[variant])


def error_rate(errors: int, ref_len: int) -> float:
    return errors / ref_len if ref_len else 0.0


@dataclass
class CorpusDecode:
    results: List[DecodeResult]
    references: List[tuple]

    @property
    def ref_len(self) -> int:
        return sum(len(r) for r in self.references)

    def errors(self) -> int:
        return sum(edit_distance(res.best.labels, ref) for res, ref in zip(self.results, self.references))

    def wer(self) -> float:
        return error_rate(self.errors(), self.ref_len)

    def oracle_errors(self) -> int:
        total = 0
        for res, ref in zip(self.results, self.references):
            rate, _ = oracle_wer(res.lattice, ref)
            total += round(rate * len(ref))
        return total

    def oracle_wer(self) -> float:
        return error_rate(self.oracle_errors(), self.ref_len)

    def density(self) -> float:
        """Mean arcs per frame over utterances."""
        return sum(density(r.lattice) for r in self.results) / len(self.results)

    def invalid(self) -> List[int]:
        return [k for k, r in enumerate(self.results) if not validate(r.lattice).ok]


def decode_corpus(model, dataset, config: DecoderConfig) -> CorpusDecode:
    results = [decode(model, u.features, config) for u in dataset]
    return CorpusDecode(results, [tuple(u.labels) for u in dataset])


@dataclass
class SweepRow:
    beam: int
    wer: float
    oracle_wer: float
    density: float
    invalid: int


def beam_sweep(model, dataset, strategy: MergeStrategy, beams: Sequence[int] = BEAM_SWEEP, u_max_ratio=1.0):
    rows = []
    for H in beams:
        cd = decode_corpus(model, dataset, DecoderConfig(beam=H, u_max_ratio=u_max_ratio, strategy=strategy))
        rows.append(SweepRow(H, cd.wer(), cd.oracle_wer(), cd.density(), len(cd.invalid())))
    return rows


def nbest_lists(corpus: CorpusDecode, n: int = 100, margin: Optional[float] = 0.1):
    """N-best lists from (optionally margin-pruned) lattices."""
    out = []
    for res in corpus.results:
        lat = prune_lattice(res.lattice, margin) if margin is not None else res.lattice
        out.append(extract_nbest(lat, n))
    return out


@dataclass
class RescoreOutcome:
    lam: float
    table: List[tuple]  # (lambda, dev errors)
    baseline_errors: int
    rescored_errors: int
    ref_len: int
    hypotheses: List[tuple]

    @property
    def baseline_wer(self) -> float:
        return error_rate(self.baseline_errors, self.ref_len)

    @property
    def rescored_wer(self) -> float:
        return error_rate(self.rescored_errors, self.ref_len)


def rescore_corpus(dev_nbest, dev_refs, test_nbest, test_refs, lm: NGramLM, symbols, lam=None) -> RescoreOutcome:
    """Tune the LM weight on dev (unless given) and apply it to test."""
    table: List[tuple] = []
    if lam is None:
        lam, table = tune_lambda(dev_nbest, dev_refs, lm, symbols)
    base = sum(edit_distance(nb[0].labels, ref) for nb, ref in zip(test_nbest, test_refs))
    hyps = [rescore(nb, lm, lam, symbols)[0].labels for nb in test_nbest]
    new = sum(edit_distance(h, ref) for h, ref in zip(hyps, test_refs))
    return RescoreOutcome(lam, table, base, new, sum(len(r) for r in test_refs), hyps)

