"""Confidence targets from edit-distance alignment, and CN-to-lattice arc matching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .lattice import EPSILON_WORDS, ArcGraph, ConfusionNetwork, Lattice, as_graph, interval_overlap, one_best_path

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


@dataclass(frozen=True)
class TargetTag:
    index: int
    target: int

    def __post_init__(self):
        if self.target not in (0, 1):
            raise ValueError(f"target must be 0 or 1, got {self.target}")


def edit_alignment(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[str, int | None, int | None]]:
    """Unit-cost Levenshtein alignment as (op, hyp_index, ref_index) triples.

    Traceback runs from the end and takes the first optimal move in the order
    match, substitution, deletion (ref word skipped), insertion (hyp word
    unaligned).
    """
    n, m = len(hyp), len(ref)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = d[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1])
            d[i][j] = min(diag, d[i][j - 1] + 1, d[i - 1][j] + 1)
    ops = []
    i, j = n, m
    while i or j:
        if i and j and hyp[i - 1] == ref[j - 1] and d[i][j] == d[i - 1][j - 1]:
            ops.append((MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and j and d[i][j] == d[i - 1][j - 1] + 1:
            ops.append((SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j and d[i][j] == d[i][j - 1] + 1:
            ops.append((DEL, None, j - 1))
            j -= 1
        else:
            ops.append((INS, i - 1, None))
            i -= 1
    return ops[::-1]


def edit_distance(hyp: Sequence[str], ref: Sequence[str]) -> int:
    return sum(op != MATCH for op, _, _ in edit_alignment(hyp, ref))


def levenshtein_targets(hyp: Sequence[str], ref: Sequence[str]) -> list[TargetTag]:
    tags = [0] * len(hyp)
    for op, i, _ in edit_alignment(hyp, ref):
        if op == MATCH:
            tags[i] = 1
    return [TargetTag(i, t) for i, t in enumerate(tags)]


def tag_graph_arcs(graph: Lattice | ConfusionNetwork | ArcGraph, ref: Sequence[str]) -> list[TargetTag]:
    """Binary target per arc (indexed by arc id).

    The one-best path is tagged by edit alignment.  An off-path arc is correct
    iff its word equals the reference word aligned to the on-path position that
    overlaps it in time and whose midpoint is closest to its own.  Epsilon arcs
    are not words: they are left out of the hypothesis and always tagged 0.
    """
    g = as_graph(graph)
    by_id = {a.id: a for a in g.arcs}
    path = [by_id[i] for i in one_best_path(g) if by_id[i].word not in EPSILON_WORDS]
    aligned_ref: list[str | None] = [None] * len(path)
    on_path = {}
    for op, i, j in edit_alignment([a.word for a in path], ref):
        if op in (MATCH, SUB):
            aligned_ref[i] = ref[j]
        if op == MATCH:
            on_path[path[i].id] = 1
        elif i is not None:
            on_path[path[i].id] = 0
    out = []
    for a in g.arcs:
        if a.id in on_path or a.word in EPSILON_WORDS:
            out.append(TargetTag(a.id, on_path.get(a.id, 0)))
            continue
        mid = 0.5 * (a.start + a.end)
        best = None
        for pos, p in enumerate(path):
            if interval_overlap((a.start, a.end), (p.start, p.end)) > 0:
                dist = abs(0.5 * (p.start + p.end) - mid)
                if best is None or dist < best[0]:
                    best = (dist, pos)
        hit = best is not None and aligned_ref[best[1]] == a.word
        out.append(TargetTag(a.id, int(hit)))
    return out


def format_targets(utterance_id: str, tags: Sequence[TargetTag]) -> str:
    return " ".join([utterance_id, *(f"{t.index}:{t.target}" for t in tags)]) + "\n"


def parse_targets(text: str) -> dict[str, list[TargetTag]]:
    out = {}
    for line in text.splitlines():
        tokens = line.split()
        if tokens:
            out[tokens[0]] = [TargetTag(int(a), int(b)) for a, b in (t.split(":") for t in tokens[1:])]
    return out


# --------------------------------------------------------------------------
# CN <-> lattice


@dataclass(frozen=True)
class CnLatticeMap:
    utterance_id: str
    matches: tuple[frozenset[int], ...]

    @property
    def unmatched_arcs(self) -> list[int]:
        return [i for i, m in enumerate(self.matches) if not m]

    @property
    def unmatched_flag(self) -> bool:
        return any(not m for m in self.matches)


def overlap_ratio(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Intersection over union of two time intervals."""
    union = max(a[1], b[1]) - min(a[0], b[0])
    if union <= 0:
        return 1.0 if a == b else 0.0
    return interval_overlap(a, b) / union


def align_cn_to_lattice(cn: ConfusionNetwork, lat: Lattice, tolerance: float = 0.5) -> CnLatticeMap:
    if not 0 < tolerance <= 1:
        raise ValueError(f"tolerance must lie in (0, 1], got {tolerance}")
    if cn.utterance_id != lat.utterance_id:
        raise ValueError(f"utterance mismatch: CN {cn.utterance_id!r} vs lattice {lat.utterance_id!r}")
    cg, lg = as_graph(cn), as_graph(lat)
    by_word: dict[str, list] = {}
    for a in lg.arcs:
        by_word.setdefault(a.word, []).append(a)
    matches = []
    for c in cg.arcs:
        span = (c.start, c.end)
        matches.append(frozenset(
            a.id for a in by_word.get(c.word, ()) if overlap_ratio(span, (a.start, a.end)) >= tolerance
        ))
    return CnLatticeMap(cn.utterance_id, tuple(matches))


def unmatched_fraction(maps: Sequence[CnLatticeMap]) -> float:
    if not maps:
        return 0.0
    return sum(m.unmatched_flag for m in maps) / len(maps)


def utterances_to_exclude(maps: Sequence[CnLatticeMap], max_unmatched_arcs: int = 0) -> list[str]:
    """Utterances with more unmatched CN arcs than allowed."""
    return [m.utterance_id for m in maps if len(m.unmatched_arcs) > max_unmatched_arcs]
