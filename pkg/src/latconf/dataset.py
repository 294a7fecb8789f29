"""Data directories, utterance splits and per-utterance model inputs.

A data directory holds ``cn.txt`` (confusion networks), optionally
``lattices.txt`` and ``ref.txt`` (``<utt-id> w1 w2 ...`` per line).  A
``Sample`` is the numeric view of one utterance for a chosen graph type.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .alignment import align_cn_to_lattice, tag_graph_arcs
from .features import attention_keys
from .lattice import (
    EPSILON_WORDS,
    ArcGraph,
    ConfusionNetwork,
    Lattice,
    SubwordUnit,
    as_graph,
    chain_graph,
    compute_arc_posteriors,
    format_confusion_network,
    format_lattice,
    format_references,
    one_best_path,
    parse_confusion_networks,
    parse_lattices,
    parse_references,
)

CN_FILE = "cn.txt"
LATTICE_FILE = "lattices.txt"
REF_FILE = "ref.txt"


class DataError(ValueError):
    """Missing, inconsistent or empty input data."""


@dataclass(frozen=True)
class Utterance:
    id: str
    cn: ConfusionNetwork
    lattice: Lattice | None = None
    reference: tuple[str, ...] | None = None


def _read(path) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc


def load_dataset(data_dir, need_references: bool = False) -> list[Utterance]:
    cn_path = os.path.join(data_dir, CN_FILE)
    if not os.path.exists(cn_path):
        raise DataError(f"{data_dir}: no {CN_FILE}")
    try:
        cns = parse_confusion_networks(_read(cn_path))
    except ValueError as exc:
        raise DataError(f"{cn_path}: {exc}") from exc
    lattices = {}
    lat_path = os.path.join(data_dir, LATTICE_FILE)
    if os.path.exists(lat_path):
        try:
            for lat in parse_lattices(_read(lat_path)):
                if not lat.has_posteriors:
                    lat = compute_arc_posteriors(lat)
                lattices[lat.utterance_id] = lat
        except ValueError as exc:
            raise DataError(f"{lat_path}: {exc}") from exc
    refs = {}
    ref_path = os.path.join(data_dir, REF_FILE)
    if os.path.exists(ref_path):
        refs = parse_references(_read(ref_path))
    elif need_references:
        raise DataError(f"{data_dir}: no {REF_FILE}; references are required here")
    seen = set()
    out = []
    for cn in cns:
        if cn.utterance_id in seen:
            raise DataError(f"{cn_path}: duplicate utterance {cn.utterance_id!r}")
        seen.add(cn.utterance_id)
        if need_references and cn.utterance_id not in refs:
            raise DataError(f"{ref_path}: no reference for {cn.utterance_id!r}")
        ref = refs.get(cn.utterance_id)
        out.append(Utterance(cn.utterance_id, cn, lattices.get(cn.utterance_id),
                             tuple(ref) if ref is not None else None))
    if not out:
        raise DataError(f"{data_dir}: no utterances")
    return out


def write_dataset(data_dir, utterances: Sequence[Utterance]):
    os.makedirs(data_dir, exist_ok=True)
    with open(os.path.join(data_dir, CN_FILE), "w", encoding="utf-8") as fh:
        fh.writelines(format_confusion_network(u.cn) for u in utterances)
    lats = [u.lattice for u in utterances if u.lattice is not None]
    if lats:
        with open(os.path.join(data_dir, LATTICE_FILE), "w", encoding="utf-8") as fh:
            fh.writelines(format_lattice(lat) for lat in lats)
    refs = {u.id: u.reference for u in utterances if u.reference is not None}
    if refs:
        with open(os.path.join(data_dir, REF_FILE), "w", encoding="utf-8") as fh:
            fh.write(format_references(refs))


def split_dataset(utterances: Sequence, seed: int, ratios=(8, 1, 1)) -> tuple[list, list, list]:
    """Seeded shuffle into train / cv / test by utterance (default 8:1:1)."""
    n = len(utterances)
    order = np.random.default_rng(seed).permutation(n)
    total = sum(ratios)
    n_train = n * ratios[0] // total
    n_cv = n * ratios[1] // total
    pick = lambda idx: [utterances[i] for i in sorted(idx)]
    return pick(order[:n_train]), pick(order[n_train:n_train + n_cv]), pick(order[n_train + n_cv:])


# --------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    id: str
    graph: ArcGraph
    words: list[str]
    duration: np.ndarray
    posterior: np.ndarray
    keys: np.ndarray
    am: np.ndarray
    lm: np.ndarray
    subwords: list[tuple[SubwordUnit, ...]]
    targets: np.ndarray | None   # 0/1 per arc
    one_best: np.ndarray         # bool per arc: on the one-best path
    scored: np.ndarray           # bool per arc: a real word (not epsilon)
    path: list[int]              # arc positions of the one-best words, in order
    lattice_ok: bool

    def __len__(self):
        return len(self.words)


def _cn_lattice_scores(utt: Utterance, tolerance: float) -> tuple[np.ndarray, np.ndarray, bool]:
    """Mean AM/LM score of the lattice arcs matched to each CN arc."""
    n = sum(len(s.entries) for s in utt.cn.sets)
    am, lm = np.zeros(n), np.zeros(n)
    if utt.lattice is None:
        return am, lm, False
    m = align_cn_to_lattice(utt.cn, utt.lattice, tolerance)
    words = [a.word for a in as_graph(utt.cn).arcs]
    arcs = {a.id: a for a in utt.lattice.arcs}
    ok = True
    for i, ids in enumerate(m.matches):
        if ids:
            am[i] = np.mean([arcs[j].am_score for j in sorted(ids)])
            lm[i] = np.mean([arcs[j].lm_score for j in sorted(ids)])
        elif words[i] not in EPSILON_WORDS:
            ok = False
    return am, lm, ok


def build_sample(utt: Utterance, graph: str = "cn", one_best_source: str = "cn",
                 tolerance: float = 0.5) -> Sample:
    """Numeric view of one utterance.

    ``graph`` selects the arcs the model sees: the full CN, the full lattice,
    or the one-best path of ``one_best_source`` re-linked as a chain.
    """
    am = lm = None
    lattice_ok = False
    if graph == "lattice" or (graph == "one-best" and one_best_source == "lattice"):
        if utt.lattice is None:
            raise DataError(f"{utt.id}: lattice required but missing")
        base = as_graph(utt.lattice)
        am = np.array([a.am_score for a in base.arcs])
        lm = np.array([a.lm_score for a in base.arcs])
        lattice_ok = True
    elif graph in ("cn", "one-best"):
        base = as_graph(utt.cn)
        am, lm, lattice_ok = _cn_lattice_scores(utt, tolerance)
    else:
        raise ValueError(f"unknown graph type {graph!r}")
    if not base.arcs:
        raise DataError(f"{utt.id}: no arcs")
    pos = {a.id: i for i, a in enumerate(base.arcs)}
    best = [pos[i] for i in one_best_path(base)]
    tags = tag_graph_arcs(base, utt.reference) if utt.reference is not None else None
    targets = np.array([t.target for t in tags], dtype=float) if tags is not None else None
    on_best = np.zeros(len(base.arcs), dtype=bool)
    on_best[best] = True
    if graph == "one-best":
        keep = [i for i in best if base.arcs[i].word not in EPSILON_WORDS]
        if not keep:
            raise DataError(f"{utt.id}: empty one-best")
        g = chain_graph(utt.id, [base.arcs[i] for i in keep])
        am, lm = am[keep], lm[keep]
        targets = targets[keep] if targets is not None else None
        on_best = np.ones(len(keep), dtype=bool)
        best = list(range(len(keep)))
    else:
        g = base
    words = [a.word for a in g.arcs]
    scored = np.array([w not in EPSILON_WORDS for w in words])
    return Sample(
        id=utt.id, graph=g, words=words,
        duration=np.array([a.duration for a in g.arcs]),
        posterior=np.array([a.posterior for a in g.arcs], dtype=float),
        keys=attention_keys(g), am=am, lm=lm,
        subwords=[a.subwords for a in g.arcs],
        targets=targets, one_best=on_best, scored=scored,
        path=[i for i in best if scored[i]], lattice_ok=lattice_ok,
    )


def build_samples(utterances: Sequence[Utterance], graph: str = "cn", one_best_source: str = "cn",
                  tolerance: float = 0.5) -> list[Sample]:
    return [build_sample(u, graph, one_best_source, tolerance) for u in utterances]


def selection_mask(sample_or_batch, mode: str) -> np.ndarray:
    """Arcs that count toward the loss / evaluation in ``mode``."""
    if mode == "one-best":
        return sample_or_batch.one_best & sample_or_batch.scored
    if mode == "all-arcs":
        return sample_or_batch.scored.copy()
    raise ValueError(f"unknown scope {mode!r}; choose one-best or all-arcs")
