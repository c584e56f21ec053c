"""Weighted acyclic acceptors built during search, and metrics over them.

Arc weights are natural-log probabilities. Label arcs carry a label id
(1-based, as in the model vocabulary); arcs into the end node carry
``FINAL`` and hold the trailing blank mass of a finished hypothesis. The
score of a path is the sum of its arc weights.
"""

from __future__ import annotations

import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from .numerics import ContractError

FINAL = -1
FINAL_SYMBOL = "</s>"
_HEADER = "#vqlattice-lattice v1"


class LatticeError(ContractError):
    pass


class Arc(NamedTuple):
    src: int
    dst: int
    label: int
    weight: float


class Lattice:
    def __init__(self, num_frames: int, symbols: Optional[Sequence[str]] = None):
        self.num_frames = int(num_frames)
        self.symbols = list(symbols) if symbols is not None else None
        self.start = 0
        self.end = 1
        self.num_nodes = 2
        self.arcs: List[Arc] = []
        self._in: Dict[int, List[int]] = defaultdict(list)

    def add_node(self) -> int:
        self.num_nodes += 1
        return self.num_nodes - 1

    def add_arc(self, src: int, dst: int, label: int, weight: float) -> None:
        if not (0 <= src < self.num_nodes and 0 <= dst < self.num_nodes):
            raise LatticeError(f"arc {src}->{dst} references an unknown node")
        self._in[dst].append(len(self.arcs))
        self.arcs.append(Arc(src, dst, int(label), float(weight)))

    def in_arcs(self, node: int) -> List[Arc]:
        return [self.arcs[k] for k in self._in.get(node, ())]

    def out_arcs(self) -> Dict[int, List[Arc]]:
        out = defaultdict(list)
        for a in self.arcs:
            out[a.src].append(a)
        return out

    def label_string(self, labels) -> str:
        if self.symbols is None:
            return " ".join(map(str, labels))
        return " ".join(self.symbols[k - 1] for k in labels)

    def copy(self) -> "Lattice":
        lat = Lattice(self.num_frames, self.symbols)
        lat.start, lat.end, lat.num_nodes = self.start, self.end, self.num_nodes
        for a in self.arcs:
            lat.add_arc(*a)
        return lat

    def __repr__(self):
        return f"Lattice(nodes={self.num_nodes}, arcs={len(self.arcs)}, T={self.num_frames})"


# ----------------------------------------------------------------------------
# construction


class Emission(NamedTuple):
    """How one merged hypothesis reaches the shared target of its group.

    A label emission adds ``src --label/weight--> target``. A blank
    continuation (``label is None``) re-routes every in-arc of ``node`` into
    the target with ``weight`` (the blank mass accumulated since that node)
    added, which keeps each path score exact.
    """

    src: Optional[int]
    label: Optional[int]
    weight: float
    node: Optional[int] = None


def update_lattice(lattice: Lattice, groups: Sequence[Sequence[Emission]]) -> List[int]:
    """Add the arcs for one alignment step; returns the target node per group.

    Merged members share one fresh target node; an unmerged label emission
    gets its own fresh node; an unmerged blank continuation stays where it is.
    """
    targets = []
    for group in groups:
        if len(group) == 1 and group[0].label is None:
            targets.append(group[0].node)
            continue
        target = lattice.add_node()
        for em in group:
            if em.label is not None:
                lattice.add_arc(em.src, target, em.label, em.weight)
            else:
                incoming = lattice.in_arcs(em.node)
                if not incoming:
                    raise LatticeError(f"cannot re-route node {em.node}: it has no incoming arcs")
                for a in incoming:
                    lattice.add_arc(a.src, target, a.label, a.weight + em.weight)
        targets.append(target)
    return targets


def topological_order(lattice: Lattice) -> Optional[List[int]]:
    """Kahn order over all nodes (smallest id first); ``None`` if cyclic."""
    indeg = [0] * lattice.num_nodes
    out = defaultdict(list)
    for a in lattice.arcs:
        indeg[a.dst] += 1
        out[a.src].append(a.dst)
    ready = [n for n in range(lattice.num_nodes) if indeg[n] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for d in out[n]:
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(ready, d)
    return order if len(order) == lattice.num_nodes else None


def _reach(num_nodes, edges, root):
    adj = defaultdict(list)
    for s, d in edges:
        adj[s].append(d)
    seen = {root}
    stack = [root]
    while stack:
        n = stack.pop()
        for d in adj[n]:
            if d not in seen:
                seen.add(d)
                stack.append(d)
    return seen


def reachable(lattice: Lattice) -> set:
    return _reach(lattice.num_nodes, [(a.src, a.dst) for a in lattice.arcs], lattice.start)


def coreachable(lattice: Lattice) -> set:
    return _reach(lattice.num_nodes, [(a.dst, a.src) for a in lattice.arcs], lattice.end)


def trim(lattice: Lattice) -> Lattice:
    """Keep only nodes on some start->end path, renumbered in topological order."""
    keep = reachable(lattice) & coreachable(lattice)
    order = topological_order(lattice)
    if order is None:
        raise LatticeError("cannot trim a cyclic lattice")
    kept = [n for n in order if n in keep and n not in (lattice.start, lattice.end)]
    new_id = {lattice.start: 0, lattice.end: 1}
    for k, n in enumerate(kept):
        new_id[n] = k + 2
    out = Lattice(lattice.num_frames, lattice.symbols)
    out.num_nodes = 2 + len(kept)
    arcs = [
        Arc(new_id[a.src], new_id[a.dst], a.label, a.weight)
        for a in lattice.arcs
        if a.src in keep and a.dst in keep
    ]
    for a in sorted(arcs, key=lambda a: (a.src, a.dst, a.label, -a.weight)):
        out.add_arc(*a)
    return out


# ----------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    checks: Dict[str, bool] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def to_text(self) -> str:
        lines = [f"{name}\t{'pass' if ok else 'FAIL'}" for name, ok in self.checks.items()]
        lines += [f"# {msg}" for msg in self.failures]
        return "\n".join(lines) + "\n"


def validate(lattice: Lattice) -> ValidationReport:
    rep = ValidationReport()

    def check(name, ok, msg):
        rep.checks[name] = bool(ok)
        if not ok:
            rep.failures.append(f"{name}: {msg}")

    bad_nodes = [a for a in lattice.arcs if not (0 <= a.src < lattice.num_nodes and 0 <= a.dst < lattice.num_nodes)]
    check("node_references", not bad_nodes, f"{len(bad_nodes)} arcs reference unknown nodes")
    if bad_nodes:
        return rep
    check("acyclic", topological_order(lattice) is not None, "lattice contains a cycle")
    fwd = reachable(lattice)
    bwd = coreachable(lattice)
    unreach = sorted(set(range(lattice.num_nodes)) - fwd)
    dead = sorted(set(range(lattice.num_nodes)) - bwd)
    check("reachable", not unreach, f"nodes not reachable from start: {unreach[:10]}")
    check("coreachable", not dead, f"nodes with no path to end: {dead[:10]}")
    nonfinite = [a for a in lattice.arcs if not math.isfinite(a.weight)]
    check("finite_weights", not nonfinite, f"{len(nonfinite)} arcs with non-finite weight")
    wrong_final = [a for a in lattice.arcs if (a.label == FINAL) != (a.dst == lattice.end)]
    max_label = len(lattice.symbols) if lattice.symbols is not None else float("inf")
    bad_label = [a for a in lattice.arcs if a.label != FINAL and not 1 <= a.label <= max_label]
    check("labels", not wrong_final and not bad_label, "end-arc or label id inconsistency")
    check("frames", lattice.num_frames >= 1, "frame count must be >= 1")
    return rep


# ----------------------------------------------------------------------------
# paths and metrics


def density(lattice: Lattice) -> float:
    if lattice.num_frames < 1:
        raise LatticeError("density needs T >= 1")
    return len(lattice.arcs) / lattice.num_frames


def _order_or_raise(lattice):
    order = topological_order(lattice)
    if order is None:
        raise LatticeError("lattice is cyclic")
    return order


def best_path(lattice: Lattice):
    """Viterbi path: returns ``(labels, score)``; earlier arcs win exact ties."""
    order = _order_or_raise(lattice)
    score = np.full(lattice.num_nodes, -np.inf)
    back: Dict[int, Arc] = {}
    score[lattice.start] = 0.0
    out = lattice.out_arcs()
    for n in order:
        if score[n] == -np.inf:
            continue
        for a in out[n]:
            s = score[n] + a.weight
            if s > score[a.dst]:
                score[a.dst] = s
                back[a.dst] = a
    if score[lattice.end] == -np.inf:
        raise LatticeError("no complete path")
    labels = []
    n = lattice.end
    while n != lattice.start:
        a = back[n]
        if a.label != FINAL:
            labels.append(a.label)
        n = a.src
    return tuple(reversed(labels)), float(score[lattice.end])


def backward_scores(lattice: Lattice) -> np.ndarray:
    order = _order_or_raise(lattice)
    out = lattice.out_arcs()
    best = np.full(lattice.num_nodes, -np.inf)
    best[lattice.end] = 0.0
    for n in reversed(order):
        for a in out[n]:
            best[n] = max(best[n], a.weight + best[a.dst])
    return best


def enumerate_paths(lattice: Lattice, limit: int = 10_000):
    """All complete paths as ``(labels, score)``; raises if more than ``limit``."""
    out = lattice.out_arcs()
    paths = []
    stack = [(lattice.start, (), 0.0)]
    while stack:
        n, labels, s = stack.pop()
        if n == lattice.end:
            paths.append((labels, s))
            if len(paths) > limit:
                raise LatticeError(f"more than {limit} paths")
            continue
        for a in out[n]:
            stack.append((a.dst, labels if a.label == FINAL else labels + (a.label,), s + a.weight))
    return paths


def count_paths(lattice: Lattice) -> int:
    order = _order_or_raise(lattice)
    out = lattice.out_arcs()
    count = [0] * lattice.num_nodes
    count[lattice.start] = 1
    for n in order:
        for a in out[n]:
            count[a.dst] += count[n]
    return count[lattice.end]


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit costs (rolling single-row DP)."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def oracle_wer(lattice: Lattice, reference: Sequence):
    """Lowest error rate over all complete paths; returns ``(wer, best_labels)``.

    Dynamic programme over (node in topological order) x (reference prefix).
    """
    ref = list(reference)
    if not ref:
        raise ContractError("reference must be non-empty")
    report = validate(lattice)
    if not report.checks.get("acyclic", False) or lattice.end not in reachable(lattice):
        raise LatticeError("invalid lattice: " + "; ".join(report.failures or ["end not reachable"]))
    R = len(ref)
    order = topological_order(lattice)
    out = lattice.out_arcs()
    INF = np.iinfo(np.int64).max // 4
    cost = {lattice.start: np.arange(R + 1, dtype=np.int64)}
    # back[node][j] = (prev_node, prev_j, label or None); label None means a deletion step
    back = {lattice.start: [None] * (R + 1)}
    for n in order:
        if n not in cost:
            continue
        c = cost[n]
        bk = back[n]
        for j in range(1, R + 1):
            if c[j - 1] + 1 < c[j]:
                c[j] = c[j - 1] + 1
                bk[j] = (n, j - 1, None)
        for a in out[n]:
            d = a.dst
            if d not in cost:
                cost[d] = np.full(R + 1, INF, dtype=np.int64)
                back[d] = [None] * (R + 1)
            cd, bd = cost[d], back[d]
            if a.label == FINAL:
                for j in range(R + 1):
                    if c[j] < cd[j]:
                        cd[j] = c[j]
                        bd[j] = (n, j, FINAL)
                continue
            for j in range(R + 1):
                best, src = c[j] + 1, j  # insertion of the arc label
                if j and c[j - 1] + (a.label != ref[j - 1]) < best:
                    best, src = c[j - 1] + (a.label != ref[j - 1]), j - 1
                if best < cd[j]:
                    cd[j] = best
                    bd[j] = (n, src, a.label)
    end_cost = cost[lattice.end][R]
    labels = []
    n, j = lattice.end, R
    while back[n][j] is not None:
        pn, pj, lab = back[n][j]
        if lab is not None and lab != FINAL:
            labels.append(lab)
        n, j = pn, pj
    return float(end_cost) / R, tuple(reversed(labels))


def prune_lattice(lattice: Lattice, relative_margin: float = 0.1) -> Lattice:
    """Margin pruning inside groups of parallel arcs (same source and target).

    An arc survives when its weight is within ``relative_margin * |min weight|``
    of the group's best weight; the best arc always survives.
    """
    if relative_margin < 0:
        raise ContractError("margin must be >= 0")
    groups = defaultdict(list)
    for a in lattice.arcs:
        groups[(a.src, a.dst)].append(a)
    out = Lattice(lattice.num_frames, lattice.symbols)
    out.start, out.end, out.num_nodes = lattice.start, lattice.end, lattice.num_nodes
    for a in lattice.arcs:
        g = groups[(a.src, a.dst)]
        wmax = max(x.weight for x in g)
        wmin = min(x.weight for x in g)
        if a.weight == wmax or a.weight >= wmax - relative_margin * abs(wmin):
            out.add_arc(*a)
    return trim(out)


class NBestEntry(NamedTuple):
    labels: tuple
    acoustic: float
    lm: Optional[float] = None
    combined: Optional[float] = None


def extract_nbest(lattice: Lattice, n: int, max_pops: int = 1_000_000) -> List[NBestEntry]:
    """Best ``n`` distinct label sequences, each scored by its best path.

    A* from the start node with the exact best-completion score as heuristic,
    so complete paths pop in non-increasing score order.
    """
    if n < 1:
        raise ContractError("N must be >= 1")
    h = backward_scores(lattice)
    if h[lattice.start] == -np.inf:
        return []
    out = lattice.out_arcs()
    heap = [(-h[lattice.start], 0, lattice.start, 0.0, ())]
    counter = 1
    seen = set()
    result = []
    pops = 0
    while heap and len(result) < n and pops < max_pops:
        _, _, node, s, labels = heapq.heappop(heap)
        pops += 1
        if node == lattice.end:
            if labels not in seen:
                seen.add(labels)
                result.append(NBestEntry(labels, s, None, s))
            continue
        for a in out[node]:
            if h[a.dst] == -np.inf:
                continue
            ns = s + a.weight
            nl = labels if a.label == FINAL else labels + (a.label,)
            heapq.heappush(heap, (-(ns + h[a.dst]), counter, a.dst, ns, nl))
            counter += 1
    # exact score ties follow the decoder's order: shorter, then lexicographic
    result.sort(key=lambda e: (-e.acoustic, len(e.labels), e.labels))
    return result


# ----------------------------------------------------------------------------
# text format: header, then "src dst label weight" (negative log-prob), then "final <end>"


def _fmt(x: float) -> str:
    return "%.9g" % x


def dumps(lattice: Lattice, vocab_checksum: str = "-") -> str:
    lines = [f"{_HEADER} T={lattice.num_frames} vocab={vocab_checksum} start={lattice.start} nodes={lattice.num_nodes}"]
    for a in lattice.arcs:
        if a.label == FINAL:
            sym = FINAL_SYMBOL
        elif lattice.symbols is not None:
            sym = lattice.symbols[a.label - 1]
        else:
            sym = str(a.label)
        lines.append(f"{a.src} {a.dst} {sym} {_fmt(0.0 - a.weight)}")
    lines.append(f"final {lattice.end}")
    return "\n".join(lines) + "\n"


def loads(text: str, symbols: Optional[Sequence[str]] = None) -> Lattice:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(_HEADER):
        raise LatticeError("not a lattice file")
    meta = dict(tok.split("=", 1) for tok in lines[0][len(_HEADER):].split())
    lat = Lattice(int(meta["T"]), symbols)
    lat.start = int(meta["start"])
    lat.num_nodes = int(meta["nodes"])
    index = {s: k + 1 for k, s in enumerate(symbols)} if symbols is not None else None
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "final":
            lat.end = int(parts[1])
            continue
        src, dst, sym, w = parts
        if sym == FINAL_SYMBOL:
            label = FINAL
        elif index is not None and sym in index:
            label = index[sym]
        elif index is None and sym.isdigit():
            label = int(sym)
        else:
            raise LatticeError(f"unknown arc symbol {sym!r} (pass the vocabulary symbols)")
        lat.add_arc(int(src), int(dst), label, -float(w))
    return lat


def save(lattice: Lattice, path, vocab_checksum: str = "-") -> None:
    Path(path).write_text(dumps(lattice, vocab_checksum))


def load(path, symbols=None) -> Lattice:
    return loads(Path(path).read_text(), symbols)
