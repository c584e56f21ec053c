"""Add-k smoothed n-gram language model and n-best rescoring."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

from .lattice import NBestEntry, edit_distance
from .numerics import ContractError

BOS = "<s>"
EOS = "</s>"
_HEADER = "#vqlattice-ngram v1"
LAMBDA_GRID = tuple(round(0.1 * k, 1) for k in range(11))


class NGramLM:
    """Closed-vocabulary n-gram model over label symbols.

    ``p(w | ctx) = (count(ctx, w) + k) / (count(ctx) + k |V|)`` where ``V`` is
    the symbol set plus the end-of-sentence marker. Contexts are padded with
    ``<s>``.
    """

    def __init__(self, order: int, k: float, symbols: Sequence[str], counts=None):
        if not 1 <= order <= 3:
            raise ContractError("n-gram order must be 1, 2 or 3")
        if not k > 0:
            raise ContractError("smoothing constant k must be > 0")
        self.order = order
        self.k = float(k)
        self.symbols = list(symbols)
        self.outcomes = self.symbols + [EOS]
        self._known = set(self.symbols)
        self.counts: Dict[tuple, Counter] = defaultdict(Counter)
        for ctx, row in (counts or {}).items():
            self.counts[tuple(ctx)].update(row)
        self._totals = {ctx: sum(row.values()) for ctx, row in self.counts.items()}

    def _events(self, sentence):
        padded = [BOS] * (self.order - 1) + list(sentence) + [EOS]
        for j in range(self.order - 1, len(padded)):
            yield tuple(padded[j - self.order + 1 : j]), padded[j]

    def _add(self, sentence):
        for ctx, w in self._events(sentence):
            self.counts[ctx][w] += 1
        self._totals = {ctx: sum(row.values()) for ctx, row in self.counts.items()}

    def prob(self, word: str, context: Sequence[str] = ()) -> float:
        if word not in self._known and word != EOS:
            raise ContractError(f"unknown symbol {word!r}")
        ctx = tuple(context)[-(self.order - 1) :] if self.order > 1 else ()
        ctx = (BOS,) * (self.order - 1 - len(ctx)) + ctx
        count = self.counts.get(ctx, {}).get(word, 0)
        return (count + self.k) / (self._totals.get(ctx, 0) + self.k * len(self.outcomes))

    def distribution(self, context: Sequence[str] = ()) -> Dict[str, float]:
        return {w: self.prob(w, context) for w in self.outcomes}

    def score(self, sentence: Sequence[str]) -> float:
        """Natural-log probability of ``sentence`` including the end marker."""
        for w in sentence:
            if w not in self._known:
                raise ContractError(f"unknown symbol {w!r}")
        total = 0.0
        for ctx, w in self._events(sentence):
            total += math.log(self.prob(w, ctx))
        return total

    # -- persistence -----------------------------------------------------------

    def dumps(self) -> str:
        lines = [_HEADER, f"order {self.order}", f"k {self.k!r}", "vocab " + " ".join(self.symbols)]
        for ctx in sorted(self.counts):
            for w in sorted(self.counts[ctx]):
                lines.append(f"{' '.join(ctx) or '-'}\t{w}\t{self.counts[ctx][w]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "NGramLM":
        lines = text.splitlines()
        if not lines or lines[0] != _HEADER:
            raise ContractError("not an n-gram file (bad header)")
        order = int(lines[1].split()[1])
        k = float(lines[2].split()[1])
        symbols = lines[3].split()[1:]
        counts: Dict[tuple, Counter] = defaultdict(Counter)
        for ln in lines[4:]:
            ctx, w, c = ln.split("\t")
            counts[() if ctx == "-" else tuple(ctx.split())][w] = int(c)
        return cls(order, k, symbols, counts)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "NGramLM":
        return cls.loads(Path(path).read_text())


def train_ngram(corpus: Iterable[Sequence[str]], symbols: Sequence[str], order: int = 2, k: float = 0.1) -> NGramLM:
    corpus = [list(s) for s in corpus]
    if not corpus:
        raise ContractError("cannot train an n-gram model on an empty corpus")
    lm = NGramLM(order, k, symbols)
    for sentence in corpus:
        for w in sentence:
            if w not in lm._known:
                raise ContractError(f"unknown symbol {w!r}")
        lm._add(sentence)
    return lm


def lm_score(lm: NGramLM, sentence: Sequence[str]) -> float:
    return lm.score(sentence)


def rescore(entries: Sequence[NBestEntry], lm: NGramLM, lam: float, symbols: Sequence[str]) -> List[NBestEntry]:
    """Rerank by ``acoustic + lam * lm``; ties keep the input order."""
    if lam < 0:
        raise ContractError("interpolation weight must be >= 0")
    scored = []
    for pos, e in enumerate(entries):
        lm_lp = lm.score([symbols[k - 1] for k in e.labels])
        scored.append((pos, NBestEntry(e.labels, e.acoustic, lm_lp, e.acoustic + lam * lm_lp)))
    scored.sort(key=lambda p: (-p[1].combined, p[0]))
    return [e for _, e in scored]


def tune_lambda(
    nbests: Sequence[Sequence[NBestEntry]],
    references: Sequence[Sequence[int]],
    lm: NGramLM,
    symbols: Sequence[str],
    grid: Sequence[float] = LAMBDA_GRID,
) -> Tuple[float, List[Tuple[float, int]]]:
    """Grid search for the weight with the fewest errors; ties go to the smallest.

    Returns ``(best_lambda, [(lambda, total_errors), ...])``.
    """
    if len(nbests) != len(references):
        raise ContractError("one reference per n-best list required")
    table = []
    for lam in grid:
        errors = sum(
            edit_distance(rescore(nb, lm, lam, symbols)[0].labels, ref) for nb, ref in zip(nbests, references) if nb
        )
        table.append((float(lam), errors))
    best = min(table, key=lambda p: (p[1], p[0]))[0]
    return best, table
