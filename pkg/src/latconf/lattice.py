"""Lattices, confusion networks and the graph operations shared by both.

Text formats (one record per header line, several records per file allowed)::

    LATTICE id=utt1 N=3 L=2
    I=0 t=0.0
    I=1 t=0.5
    I=2 t=0.9
    J=0 S=0 E=1 W=quick a=-10.5 l=-2.0 p=1.0 sw=q:0.1,u:0.1:0.9
    J=1 S=1 E=2 W=fox a=-8.0 l=-1.5

    CN id=utt1 K=1
    SET k=0 ts=0.0 te=0.5
    W=fox p=0.9 sw=f:0.2,o:0.15,x:0.15
    W=box p=0.1
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-10
EPSILON_WORDS = frozenset({"<eps>", "!NULL", "-"})


class LatticeError(ValueError):
    """Base class for malformed lattice / CN input."""

    kind = "error"

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MalformedHeaderError(LatticeError):
    kind = "malformed-header"


class MalformedLineError(LatticeError):
    kind = "malformed-line"


class DanglingReferenceError(LatticeError):
    kind = "dangling-reference"


class CycleError(LatticeError):
    kind = "cycle"


class DuplicateIdError(LatticeError):
    kind = "duplicate-id"


class MassViolationError(LatticeError):
    kind = "mass-violation"


class StructureError(LatticeError):
    """Initial node / reachability / path existence problems."""

    kind = "structure"


@dataclass(frozen=True)
class SubwordUnit:
    unit: str
    duration: float
    posterior: float | None = None

    def __post_init__(self):
        if not self.duration >= 0:
            raise ValueError(f"sub-word duration must be >= 0, got {self.duration}")
        if self.posterior is not None and not 0.0 <= self.posterior <= 1.0:
            raise ValueError(f"sub-word posterior out of [0,1]: {self.posterior}")


@dataclass(frozen=True)
class LatticeNode:
    id: int
    time: float


@dataclass(frozen=True)
class LatticeArc:
    id: int
    start_node: int
    end_node: int
    word: str
    am_score: float = 0.0
    lm_score: float = 0.0
    posterior: float | None = None
    subwords: tuple[SubwordUnit, ...] = ()


@dataclass(frozen=True)
class Lattice:
    utterance_id: str
    nodes: tuple[LatticeNode, ...]
    arcs: tuple[LatticeArc, ...]
    initial_node: int
    final_nodes: frozenset[int]
    _times: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_times", {n.id: n.time for n in self.nodes})

    def time(self, node_id: int) -> float:
        return self._times[node_id]

    def arc(self, arc_id: int) -> LatticeArc:
        for a in self.arcs:
            if a.id == arc_id:
                return a
        raise KeyError(arc_id)

    def span(self, arc: LatticeArc) -> tuple[float, float]:
        return self._times[arc.start_node], self._times[arc.end_node]

    def duration(self, arc: LatticeArc) -> float:
        return self._times[arc.end_node] - self._times[arc.start_node]

    @property
    def has_posteriors(self) -> bool:
        return all(a.posterior is not None for a in self.arcs)


@dataclass(frozen=True)
class CNEntry:
    word: str
    posterior: float
    subwords: tuple[SubwordUnit, ...] = ()


@dataclass(frozen=True)
class ConfusionSet:
    index: int
    start: float
    end: float
    entries: tuple[CNEntry, ...]


@dataclass(frozen=True)
class ConfusionNetwork:
    utterance_id: str
    sets: tuple[ConfusionSet, ...]


@dataclass(frozen=True)
class GraphArc:
    """Arc of either representation, with explicit times."""

    id: int
    start_node: int
    end_node: int
    start: float
    end: float
    word: str
    posterior: float | None
    am_score: float = 0.0
    lm_score: float = 0.0
    subwords: tuple[SubwordUnit, ...] = ()

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class ArcGraph:
    """Common DAG view used by tagging, features and the models."""

    utterance_id: str
    node_times: dict
    arcs: tuple[GraphArc, ...]
    initial_node: int
    final_nodes: frozenset[int]


# --------------------------------------------------------------------------
# parsing / serialization


def _fmt(x: float) -> str:
    return repr(float(x))


def _fields(tokens: Sequence[str], lineno: int) -> dict[str, str]:
    out = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or not key:
            raise MalformedLineError(f"expected key=value, got {tok!r}", lineno)
        if key in out:
            raise MalformedLineError(f"repeated field {key!r}", lineno)
        out[key] = value
    return out


def _number(fields: dict, key: str, lineno: int, conv=float, required=True):
    if key not in fields:
        if required:
            raise MalformedLineError(f"missing field {key}=", lineno)
        return None
    try:
        value = conv(fields[key])
    except ValueError:
        raise MalformedLineError(f"bad value for {key}: {fields[key]!r}", lineno) from None
    if conv is float and not math.isfinite(value):
        raise MalformedLineError(f"non-finite value for {key}", lineno)
    return value


def _parse_subwords(spec: str | None, lineno: int) -> tuple[SubwordUnit, ...]:
    if not spec:
        return ()
    units = []
    for item in spec.split(","):
        parts = item.split(":")
        if len(parts) not in (2, 3) or not parts[0]:
            raise MalformedLineError(f"bad sub-word item {item!r}", lineno)
        try:
            dur = float(parts[1])
            post = float(parts[2]) if len(parts) == 3 else None
            units.append(SubwordUnit(parts[0], dur, post))
        except ValueError as exc:
            raise MalformedLineError(f"bad sub-word item {item!r}: {exc}", lineno) from None
    return tuple(units)


def _format_subwords(units: Iterable[SubwordUnit]) -> str:
    items = []
    for u in units:
        s = f"{u.unit}:{_fmt(u.duration)}"
        if u.posterior is not None:
            s += f":{_fmt(u.posterior)}"
        items.append(s)
    return ",".join(items)


def _records(text: str, header: str):
    """Split text into (lineno, tokens) groups, one per header line."""
    groups: list[list[tuple[int, list[str]]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == header:
            groups.append([])
        elif not groups:
            raise MalformedHeaderError(f"expected {header} header, got {tokens[0]!r}", lineno)
        groups[-1].append((lineno, tokens))
    return groups


def _header(lineno: int, tokens: list[str], keys: Sequence[str]) -> dict:
    try:
        fields = _fields(tokens[1:], lineno)
    except MalformedLineError as exc:
        raise MalformedHeaderError(str(exc)) from None
    missing = [k for k in keys if k not in fields]
    if missing:
        raise MalformedHeaderError(f"header missing {', '.join(missing)}", lineno)
    return fields


def _lattice_from_record(record) -> Lattice:
    lineno, tokens = record[0]
    head = _header(lineno, tokens, ("id", "N", "L"))
    try:
        n_nodes, n_arcs = int(head["N"]), int(head["L"])
    except ValueError:
        raise MalformedHeaderError("N and L must be integers", lineno) from None
    nodes: dict[int, LatticeNode] = {}
    arcs: dict[int, LatticeArc] = {}
    arc_lines: dict[int, int] = {}
    for lineno, tokens in record[1:]:
        f = _fields(tokens, lineno)
        if "I" in f:
            nid = _number(f, "I", lineno, int)
            if nid in nodes:
                raise DuplicateIdError(f"duplicate node id {nid}", lineno)
            t = _number(f, "t", lineno)
            if t < 0:
                raise MalformedLineError(f"negative node time {t}", lineno)
            nodes[nid] = LatticeNode(nid, t)
        elif "J" in f:
            aid = _number(f, "J", lineno, int)
            if aid in arcs:
                raise DuplicateIdError(f"duplicate arc id {aid}", lineno)
            if not f.get("W"):
                raise MalformedLineError("missing word W=", lineno)
            post = _number(f, "p", lineno, required=False)
            if post is not None and not 0.0 <= post <= 1.0:
                raise MalformedLineError(f"posterior out of [0,1]: {post}", lineno)
            arcs[aid] = LatticeArc(
                id=aid,
                start_node=_number(f, "S", lineno, int),
                end_node=_number(f, "E", lineno, int),
                word=f["W"],
                am_score=_number(f, "a", lineno, required=False) or 0.0,
                lm_score=_number(f, "l", lineno, required=False) or 0.0,
                posterior=post,
                subwords=_parse_subwords(f.get("sw"), lineno),
            )
            arc_lines[aid] = lineno
        else:
            raise MalformedLineError(f"unrecognised line starting {tokens[0]!r}", lineno)
    header_line = record[0][0]
    if len(nodes) != n_nodes or len(arcs) != n_arcs:
        raise MalformedHeaderError(
            f"header declares N={n_nodes} L={n_arcs}, found {len(nodes)} nodes and {len(arcs)} arcs",
            header_line,
        )
    for aid, arc in arcs.items():
        for end in (arc.start_node, arc.end_node):
            if end not in nodes:
                raise DanglingReferenceError(f"arc {aid} references missing node {end}", arc_lines[aid])
        if nodes[arc.start_node].time > nodes[arc.end_node].time:
            raise MalformedLineError(f"arc {aid} ends before it starts", arc_lines[aid])
    lat = build_lattice(head["id"], nodes.values(), arcs.values())
    try:
        validate(lat)
    except LatticeError as exc:
        if exc.line is None:
            exc = type(exc)(str(exc), header_line)
        raise exc from None
    return lat


def build_lattice(utterance_id: str, nodes: Iterable[LatticeNode], arcs: Iterable[LatticeArc]) -> Lattice:
    """Assemble a lattice, inferring the initial node and final nodes.

    Nodes and arcs are stored sorted by id so that textual order in the
    source file never matters.  Raises StructureError unless there is exactly
    one node without incoming arcs.
    """
    nodes = tuple(sorted(nodes, key=lambda n: n.id))
    arcs = tuple(sorted(arcs, key=lambda a: a.id))
    has_in = {a.end_node for a in arcs}
    has_out = {a.start_node for a in arcs}
    starts = [n.id for n in nodes if n.id not in has_in]
    if len(starts) != 1:
        raise StructureError(f"expected exactly one initial node, found {starts}")
    finals = frozenset(n.id for n in nodes if n.id not in has_out)
    return Lattice(utterance_id, nodes, arcs, starts[0], finals)


def validate(lat: Lattice) -> Lattice:
    """Check DAG-ness and reachability; returns the lattice unchanged."""
    ids = [n.id for n in lat.nodes]
    if len(set(ids)) != len(ids):
        raise DuplicateIdError("duplicate node ids")
    arc_ids = [a.id for a in lat.arcs]
    if len(set(arc_ids)) != len(arc_ids):
        raise DuplicateIdError("duplicate arc ids")
    known = set(ids)
    for a in lat.arcs:
        if a.start_node not in known or a.end_node not in known:
            raise DanglingReferenceError(f"arc {a.id} references a missing node")
    for n in lat.nodes:
        if not (math.isfinite(n.time) and n.time >= 0):
            raise StructureError(f"node {n.id} has invalid time {n.time}")
    topological_order(lat)
    seen = {lat.initial_node}
    stack = [lat.initial_node]
    out = _adjacency(lat.arcs)
    while stack:
        for a in out.get(stack.pop(), ()):
            if a.end_node not in seen:
                seen.add(a.end_node)
                stack.append(a.end_node)
    unreachable = known - seen
    if unreachable:
        raise StructureError(f"nodes unreachable from initial node: {sorted(unreachable)}")
    return lat


def _adjacency(arcs) -> dict[int, list]:
    out: dict[int, list] = {}
    for a in arcs:
        out.setdefault(a.start_node, []).append(a)
    return out


def parse_lattices(text: str) -> list[Lattice]:
    return [_lattice_from_record(rec) for rec in _records(text, "LATTICE")]


def parse_lattice(text: str) -> Lattice:
    lats = parse_lattices(text)
    if len(lats) != 1:
        raise MalformedHeaderError(f"expected one LATTICE record, found {len(lats)}")
    return lats[0]


def format_lattice(lat: Lattice) -> str:
    lines = [f"LATTICE id={lat.utterance_id} N={len(lat.nodes)} L={len(lat.arcs)}"]
    lines += [f"I={n.id} t={_fmt(n.time)}" for n in lat.nodes]
    for a in lat.arcs:
        s = f"J={a.id} S={a.start_node} E={a.end_node} W={a.word} a={_fmt(a.am_score)} l={_fmt(a.lm_score)}"
        if a.posterior is not None:
            s += f" p={_fmt(a.posterior)}"
        if a.subwords:
            s += f" sw={_format_subwords(a.subwords)}"
        lines.append(s)
    return "\n".join(lines) + "\n"


serialize_lattice = format_lattice


def _cn_from_record(record, mass_tol: float = 1e-6) -> ConfusionNetwork:
    lineno, tokens = record[0]
    head = _header(lineno, tokens, ("id", "K"))
    try:
        n_sets = int(head["K"])
    except ValueError:
        raise MalformedHeaderError("K must be an integer", lineno) from None
    sets: list[tuple[int, float, float, list[CNEntry], int]] = []
    for lineno, tokens in record[1:]:
        if tokens[0] == "SET":
            f = _fields(tokens[1:], lineno)
            k = _number(f, "k", lineno, int)
            if any(s[0] == k for s in sets):
                raise DuplicateIdError(f"duplicate set index {k}", lineno)
            ts, te = _number(f, "ts", lineno), _number(f, "te", lineno)
            if not 0 <= ts <= te:
                raise MalformedLineError(f"bad set span [{ts}, {te}]", lineno)
            sets.append((k, ts, te, [], lineno))
            continue
        f = _fields(tokens, lineno)
        if "W" in f:
            if not sets:
                raise MalformedLineError("entry before any SET line", lineno)
            post = _number(f, "p", lineno)
            if not 0.0 <= post <= 1.0:
                raise MalformedLineError(f"posterior out of [0,1]: {post}", lineno)
            sets[-1][3].append(CNEntry(f["W"], post, _parse_subwords(f.get("sw"), lineno)))
        else:
            raise MalformedLineError(f"unrecognised line starting {tokens[0]!r}", lineno)
    if len(sets) != n_sets:
        raise MalformedHeaderError(f"header declares K={n_sets}, found {len(sets)} sets", record[0][0])
    out = []
    for k, ts, te, entries, ln in sorted(sets, key=lambda s: s[0]):
        if not entries:
            raise MalformedLineError(f"set {k} has no entries", ln)
        mass = sum(e.posterior for e in entries)
        if mass > 1.0 + mass_tol:
            raise MassViolationError(f"set {k} posteriors sum to {mass:.6g} > 1", ln)
        out.append(ConfusionSet(k, ts, te, tuple(entries)))
    for prev, cur in zip(out, out[1:]):
        if cur.start < prev.start:
            raise StructureError(f"set {cur.index} starts before set {prev.index}", record[0][0])
    return ConfusionNetwork(head["id"], tuple(out))


def parse_confusion_networks(text: str) -> list[ConfusionNetwork]:
    return [_cn_from_record(rec) for rec in _records(text, "CN")]


def parse_confusion_network(text: str) -> ConfusionNetwork:
    cns = parse_confusion_networks(text)
    if len(cns) != 1:
        raise MalformedHeaderError(f"expected one CN record, found {len(cns)}")
    return cns[0]


def format_confusion_network(cn: ConfusionNetwork) -> str:
    lines = [f"CN id={cn.utterance_id} K={len(cn.sets)}"]
    for s in cn.sets:
        lines.append(f"SET k={s.index} ts={_fmt(s.start)} te={_fmt(s.end)}")
        for e in s.entries:
            line = f"W={e.word} p={_fmt(e.posterior)}"
            if e.subwords:
                line += f" sw={_format_subwords(e.subwords)}"
            lines.append(line)
    return "\n".join(lines) + "\n"


def parse_references(text: str) -> dict[str, list[str]]:
    refs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not tokens:
            continue
        if tokens[0] in refs:
            raise DuplicateIdError(f"duplicate reference for {tokens[0]}", lineno)
        refs[tokens[0]] = tokens[1:]
    return refs


def format_references(refs: dict[str, Sequence[str]]) -> str:
    return "".join(" ".join([utt, *words]) + "\n" for utt, words in refs.items())


# --------------------------------------------------------------------------
# graph algorithms


def _topo(node_times: dict, arcs) -> list[int]:
    indeg = {n: 0 for n in node_times}
    out = _adjacency(arcs)
    for a in arcs:
        indeg[a.end_node] += 1
    heap = [(node_times[n], n) for n, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, n = heapq.heappop(heap)
        order.append(n)
        for a in out.get(n, ()):
            indeg[a.end_node] -= 1
            if indeg[a.end_node] == 0:
                heapq.heappush(heap, (node_times[a.end_node], a.end_node))
    if len(order) != len(node_times):
        stuck = sorted(n for n, d in indeg.items() if d > 0)
        raise CycleError(f"cycle detected among nodes {stuck}")
    return order


def topological_order(lat: Lattice | ArcGraph) -> list[int]:
    """Node ids in topological order, ties broken by (time, id)."""
    if isinstance(lat, ArcGraph):
        return _topo(lat.node_times, lat.arcs)
    return _topo(lat._times, lat.arcs)


def _logaddexp_all(values: list[float]) -> float:
    if not values:
        return -math.inf
    m = max(values)
    if m == -math.inf:
        return m
    return m + math.log(math.fsum(math.exp(v - m) for v in values))


def compute_arc_posteriors(lat: Lattice, am_scale: float = 1.0, lm_scale: float = 1.0) -> Lattice:
    """Forward-backward arc posteriors in the log domain."""
    if am_scale <= 0 or lm_scale <= 0:
        raise ValueError("score scales must be positive")
    order = topological_order(lat)
    incoming: dict[int, list[LatticeArc]] = {}
    outgoing = _adjacency(lat.arcs)
    for a in lat.arcs:
        incoming.setdefault(a.end_node, []).append(a)
    like = {a.id: am_scale * a.am_score + lm_scale * a.lm_score for a in lat.arcs}
    alpha = {}
    for n in order:
        if n == lat.initial_node:
            alpha[n] = 0.0
        else:
            alpha[n] = _logaddexp_all([alpha[a.start_node] + like[a.id] for a in incoming.get(n, ())])
    beta = {}
    for n in reversed(order):
        if n in lat.final_nodes:
            beta[n] = 0.0
        else:
            beta[n] = _logaddexp_all([like[a.id] + beta[a.end_node] for a in outgoing.get(n, ())])
    total = beta[lat.initial_node]
    if total == -math.inf:
        raise StructureError(f"{lat.utterance_id}: no initial-to-final path")
    arcs = []
    for a in lat.arcs:
        logp = alpha[a.start_node] + like[a.id] + beta[a.end_node] - total
        arcs.append(replace(a, posterior=min(1.0, max(0.0, math.exp(logp)))))
    return replace(lat, arcs=tuple(arcs))


def as_graph(obj: Lattice | ConfusionNetwork | ArcGraph) -> ArcGraph:
    """Unified arc view; CN set k spans nodes k -> k+1, arcs numbered set-major."""
    if isinstance(obj, ArcGraph):
        return obj
    if isinstance(obj, Lattice):
        arcs = tuple(
            GraphArc(a.id, a.start_node, a.end_node, obj.time(a.start_node), obj.time(a.end_node),
                     a.word, a.posterior, a.am_score, a.lm_score, a.subwords)
            for a in obj.arcs
        )
        return ArcGraph(obj.utterance_id, dict(obj._times), arcs, obj.initial_node, obj.final_nodes)
    times = {}
    arcs = []
    for k, s in enumerate(obj.sets):
        times[k] = s.start
        for e in s.entries:
            arcs.append(GraphArc(len(arcs), k, k + 1, s.start, s.end, e.word, e.posterior, subwords=e.subwords))
    times[len(obj.sets)] = obj.sets[-1].end if obj.sets else 0.0
    return ArcGraph(obj.utterance_id, times, tuple(arcs), 0, frozenset({len(obj.sets)}))


def chain_graph(utterance_id: str, arcs: Sequence[GraphArc]) -> ArcGraph:
    """Re-link a sequence of arcs (e.g. a one-best path) as a linear chain."""
    out = tuple(
        replace(a, id=i, start_node=i, end_node=i + 1) for i, a in enumerate(arcs)
    )
    times = {i: a.start for i, a in enumerate(arcs)}
    times[len(arcs)] = arcs[-1].end if arcs else 0.0
    return ArcGraph(utterance_id, times, out, 0, frozenset({len(arcs)}))


def one_best_path(lat: Lattice | ConfusionNetwork | ArcGraph) -> list[int]:
    """Arc ids of the initial->final path with maximal product of posteriors.

    Ties are resolved towards the lower arc id at every node.  On a CN this
    reduces to the per-set argmax.
    """
    g = as_graph(lat)
    if any(a.posterior is None for a in g.arcs):
        raise ValueError(f"{g.utterance_id}: posteriors missing; compute them first")
    order = topological_order(g)
    incoming: dict[int, list[GraphArc]] = {}
    for a in g.arcs:
        incoming.setdefault(a.end_node, []).append(a)
    score = {g.initial_node: 0.0}
    back: dict[int, GraphArc] = {}
    for n in order:
        if n == g.initial_node:
            continue
        best = None
        for a in sorted(incoming.get(n, ()), key=lambda a: a.id):
            s = score[a.start_node] + (math.log(a.posterior) if a.posterior > 0 else -math.inf)
            if best is None or s > best[0]:
                best = (s, a)
        score[n], back[n] = best
    end = max(sorted(g.final_nodes), key=lambda n: score[n])
    path = []
    while end != g.initial_node:
        a = back[end]
        path.append(a.id)
        end = a.start_node
    return path[::-1]


def _overlap_matrix(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    inter = np.minimum(ends[:, None], ends[None, :]) - np.maximum(starts[:, None], starts[None, :])
    mat = inter > 0
    np.fill_diagonal(mat, True)
    return mat


def overlap_stats_all(graph) -> tuple[np.ndarray, np.ndarray]:
    """Population mean and std of posteriors over time-overlapping arcs, per arc."""
    g = as_graph(graph)
    if any(a.posterior is None for a in g.arcs):
        raise ValueError(f"{g.utterance_id}: posteriors missing")
    starts = np.array([a.start for a in g.arcs], dtype=float)
    ends = np.array([a.end for a in g.arcs], dtype=float)
    post = np.array([a.posterior for a in g.arcs], dtype=float)
    mask = _overlap_matrix(starts, ends)
    counts = mask.sum(axis=1)
    mean = (mask * post[None, :]).sum(axis=1) / counts
    var = (mask * (post[None, :] - mean[:, None]) ** 2).sum(axis=1) / counts
    return mean, np.sqrt(var)


def overlap_stats(lat, arc_id: int) -> tuple[float, float]:
    g = as_graph(lat)
    idx = [a.id for a in g.arcs].index(arc_id)
    mean, std = overlap_stats_all(g)
    return float(mean[idx]), float(std[idx])


def interval_overlap(a: tuple[float, float], b: tuple[float, float]) -> float:
    return max(0.0, min(a[1], b[1]) - max(a[0], b[0]))


def clamp_prob(p: float) -> float:
    return min(1.0, max(PROB_FLOOR, p))
