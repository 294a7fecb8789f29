"""Per-arc input features, attention keys and posterior calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .lattice import PROB_FLOOR, GraphArc, SubwordUnit, as_graph, clamp_prob, overlap_stats_all

UNK = "<unk>"


class EmbeddingTable:
    """Token vectors with a fallback for unseen tokens.

    Row 0 of ``vectors`` is the unknown-token vector; token ``tokens[i]`` sits
    at row ``i + 1``.
    """

    def __init__(self, tokens: Sequence[str], vectors: np.ndarray, trainable: bool = False):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(vectors) != len(tokens) + 1:
            raise ValueError("vectors must have one row per token plus the unknown row")
        self.tokens = list(tokens)
        self.vectors = vectors
        self.trainable = trainable
        self._index = {t: i + 1 for i, t in enumerate(self.tokens)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def unk_vector(self) -> np.ndarray:
        return self.vectors[0]

    def __len__(self):
        return len(self.tokens)

    def index(self, token: str) -> int:
        return self._index.get(token, 0)

    def lookup(self, token: str) -> np.ndarray:
        return self.vectors[self.index(token)]


def load_embeddings(path, trainable: bool = False) -> EmbeddingTable:
    """Read ``<token> v1 ... vd`` lines; a leading ``count dim`` header is skipped."""
    tokens, rows = [], []
    with open(path, encoding="utf-8") as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if lines and len(lines[0]) == 2 and all(p.isdigit() for p in lines[0]):
        lines = lines[1:]
    if not lines:
        raise ValueError(f"{path}: no embeddings found")
    dim = len(lines[0]) - 1
    for lineno, parts in enumerate(lines, start=1):
        if len(parts) - 1 != dim:
            raise ValueError(f"{path}: row {lineno} ({parts[0]!r}) has {len(parts) - 1} dims, expected {dim}")
        tokens.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    mat = np.array(rows)
    return EmbeddingTable(tokens, np.vstack([mat.mean(axis=0), mat]), trainable=trainable)


def random_embeddings(tokens: Iterable[str], dim: int, rng: np.random.Generator, scale: float = 0.1) -> EmbeddingTable:
    tokens = sorted(set(tokens))
    return EmbeddingTable(tokens, rng.uniform(-scale, scale, size=(len(tokens) + 1, dim)), trainable=True)


# --------------------------------------------------------------------------
# posterior calibration


@dataclass(frozen=True)
class PosteriorMap:
    """Piecewise-constant posterior -> confidence map.

    ``boundaries`` are the internal cut points; a value equal to a cut point
    belongs to the higher bin.
    """

    boundaries: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != len(self.boundaries) + 1:
            raise ValueError("need one more bin value than boundaries")
        if any(b >= c for b, c in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("bin boundaries must be strictly increasing")
        if not all(0.0 < v < 1.0 for v in self.values):
            raise ValueError("bin values must lie in (0, 1)")

    def bin_of(self, p) -> np.ndarray:
        return np.searchsorted(np.asarray(self.boundaries), p, side="right")

    def __call__(self, p):
        out = np.asarray(self.values)[self.bin_of(p)]
        return float(out) if np.ndim(out) == 0 else out


def fit_posterior_map(dev_posteriors: Sequence[float], dev_targets: Sequence[int], bins: int = 50) -> PosteriorMap:
    """Equal-count bins over the dev posteriors, each mapped to (correct + 1) / (count + 2)."""
    post = np.asarray(dev_posteriors, dtype=float)
    tgt = np.asarray(dev_targets, dtype=float)
    if len(post) != len(tgt):
        raise ValueError(f"{len(post)} posteriors but {len(tgt)} targets")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if len(post) < bins:
        raise ValueError(f"need at least {bins} dev items, got {len(post)}")
    ordered = np.sort(post, kind="stable")
    cuts = [chunk[0] for chunk in np.array_split(ordered, bins)[1:]]
    boundaries = sorted({c for c in cuts if c > ordered[0]})
    which = np.searchsorted(np.asarray(boundaries), post, side="right")
    count = np.bincount(which, minlength=len(boundaries) + 1)
    correct = np.bincount(which, weights=tgt, minlength=len(boundaries) + 1)
    values = (correct + 1.0) / (count + 2.0)
    return PosteriorMap(tuple(float(b) for b in boundaries), tuple(float(v) for v in values))


def apply_posterior_map(pmap: PosteriorMap, p: float) -> float:
    return pmap(p)


def format_posterior_map(pmap: PosteriorMap) -> str:
    uppers = list(pmap.boundaries) + [1.0]
    return "".join(f"BIN {u!r} {v!r}\n" for u, v in zip(uppers, pmap.values))


def parse_posterior_map(text: str) -> PosteriorMap:
    uppers, values = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3 or parts[0] != "BIN":
            raise ValueError(f"line {lineno}: expected 'BIN <upper> <value>'")
        uppers.append(float(parts[1]))
        values.append(float(parts[2]))
    if not values:
        raise ValueError("empty posterior map")
    return PosteriorMap(tuple(uppers[:-1]), tuple(values))


# --------------------------------------------------------------------------
# feature vectors


def _log_clamped(p: float) -> float:
    return math.log(clamp_prob(p))


def word_features(arc: GraphArc, table: EmbeddingTable, use_mapped: bool = False,
                  pmap: PosteriorMap | None = None) -> np.ndarray:
    """[embedding | duration | log posterior] for one arc."""
    if arc.posterior is None:
        raise ValueError(f"arc {arc.id} ({arc.word}) has no posterior")
    post = arc.posterior
    if use_mapped:
        if pmap is None:
            raise ValueError("use_mapped requires a posterior map")
        post = pmap(post)
    return np.concatenate([table.lookup(arc.word), [arc.duration, _log_clamped(post)]])


def subword_posterior(unit: SubwordUnit, parent_posterior: float | None) -> float:
    if unit.posterior is not None:
        return unit.posterior
    return parent_posterior if parent_posterior is not None else 1.0


def subword_unit_features(unit: SubwordUnit, table: EmbeddingTable, parent_posterior: float | None = None) -> np.ndarray:
    """[embedding | duration | log posterior] for one sub-word unit."""
    post = subword_posterior(unit, parent_posterior)
    return np.concatenate([table.lookup(unit.unit), [unit.duration, _log_clamped(post)]])


def attention_keys(graph) -> np.ndarray:
    """(N, 3) array of [log c, log mean, log std] over time-overlapping arcs."""
    g = as_graph(graph)
    post = np.array([a.posterior for a in g.arcs], dtype=float)
    mean, std = overlap_stats_all(g)
    return np.log(np.clip(np.stack([post, mean, std], axis=1), PROB_FLOOR, None))


def attention_key(graph, arc_id: int) -> np.ndarray:
    g = as_graph(graph)
    return attention_keys(g)[[a.id for a in g.arcs].index(arc_id)]


def aggregate_lattice_features(cn_arc, matched_lattice_arcs: Sequence) -> tuple[float, float] | None:
    """Mean AM and LM score of the matched lattice arcs; None when nothing matched."""
    if not matched_lattice_arcs:
        return None
    am = math.fsum(a.am_score for a in matched_lattice_arcs) / len(matched_lattice_arcs)
    lm = math.fsum(a.lm_score for a in matched_lattice_arcs) / len(matched_lattice_arcs)
    return am, lm


@dataclass
class Normalizer:
    """Per-column z-normalisation statistics fitted on training data."""

    stats: dict[str, tuple[float, float]] = field(default_factory=dict)

    def fit(self, name: str, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        values = values[np.isfinite(values)]
        if len(values) == 0:
            self.stats[name] = (0.0, 1.0)
        else:
            self.stats[name] = (float(values.mean()), float(max(values.std(), 1e-6)))

    def apply(self, name: str, values: np.ndarray) -> np.ndarray:
        mean, std = self.stats.get(name, (0.0, 1.0))
        out = (np.asarray(values, dtype=float) - mean) / std
        return np.where(np.isfinite(out), out, 0.0)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in sorted(self.stats.items())}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls({k: (float(v[0]), float(v[1])) for k, v in d.items()})

