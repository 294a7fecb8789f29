"""Bi-directional sequence and lattice RNN confidence models.

States live on arcs.  For the forward direction an arc's predecessor state is
the attention-weighted combination of the forward states of all arcs ending
at its start node (the learned initial state when there are none); the
backward direction mirrors this on the reversed graph.  Arcs are processed
level by level so that every arc of a batch whose inputs are ready is updated
in one matrix operation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .features import EmbeddingTable, Normalizer, PosteriorMap, random_embeddings
from .lattice import PROB_FLOOR, ArcGraph, SubwordUnit, as_graph

KEY_SIZE = 3
POSTERIOR_FEATURES = ("none", "raw", "mapped", "both")
SUBWORD_MODES = ("direct-features", "encoder")
SUBWORD_INPUTS = ("embedding", "duration", "posterior")
GRAPHS = ("one-best", "cn", "lattice")
LOSS_MODES = ("one-best", "all-arcs")


@dataclass(frozen=True)
class ModelConfig:
    graph: str = "cn"
    one_best_source: str = "cn"
    hidden_size: int = 32
    subword_hidden_size: int = 10
    cell: str = "gru"
    attention: str = "add"
    attention_size: int = 16
    use_embedding: bool = True
    embed_dim: int = 16
    use_duration: bool = True
    posterior_feature: str = "raw"
    use_subwords: bool = False
    subword_mode: str = "encoder"
    subword_inputs: tuple[str, ...] = ("embedding", "duration")
    subword_embed_dim: int = 4
    use_lattice_features: bool = False
    loss_mode: str = "one-best"
    seed: int = 42

    def __post_init__(self):
        checks = [
            (self.graph in GRAPHS, f"graph must be one of {GRAPHS}"),
            (self.one_best_source in ("cn", "lattice"), "one_best_source must be cn or lattice"),
            (self.cell in nn.CELLS, f"cell must be one of {nn.CELLS}"),
            (self.attention in nn.MECHANISMS, f"attention must be one of {nn.MECHANISMS}"),
            (self.posterior_feature in POSTERIOR_FEATURES, f"posterior_feature must be one of {POSTERIOR_FEATURES}"),
            (self.subword_mode in SUBWORD_MODES, f"subword_mode must be one of {SUBWORD_MODES}"),
            (set(self.subword_inputs) <= set(SUBWORD_INPUTS) and len(self.subword_inputs) > 0,
             f"subword_inputs must be a non-empty subset of {SUBWORD_INPUTS}"),
            (self.loss_mode in LOSS_MODES, f"loss_mode must be one of {LOSS_MODES}"),
            (min(self.hidden_size, self.subword_hidden_size, self.attention_size,
                 self.embed_dim, self.subword_embed_dim) >= 1, "sizes must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        object.__setattr__(self, "subword_inputs", tuple(self.subword_inputs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["subword_inputs"] = list(self.subword_inputs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def n_posterior_columns(self) -> int:
        return {"none": 0, "raw": 1, "mapped": 1, "both": 2}[self.posterior_feature]

    @property
    def subword_value_size(self) -> int:
        if self.subword_mode == "encoder":
            return 2 * self.subword_hidden_size
        return self.subword_input_size

    @property
    def subword_input_size(self) -> int:
        sizes = {"embedding": self.subword_embed_dim, "duration": 1, "posterior": 1}
        return sum(sizes[k] for k in self.subword_inputs)

    @property
    def feature_size(self) -> int:
        size = self.embed_dim if self.use_embedding else 0
        size += int(self.use_duration) + self.n_posterior_columns
        if self.use_subwords:
            size += self.subword_value_size + 1
        if self.use_lattice_features:
            size += 2
        return size


# --------------------------------------------------------------------------
# level plans


@dataclass
class Level:
    cand: np.ndarray      # candidate arcs per group, -1 = initial state
    offsets: np.ndarray   # group starts in cand
    single: bool          # every group has exactly one candidate
    arcs: np.ndarray      # arcs updated at this level
    arc_group: np.ndarray  # group feeding each updated arc


def plan_dag(src: np.ndarray, dst: np.ndarray, n_nodes: int) -> list[Level]:
    """Schedule arcs (src -> dst) so each arc runs after all arcs entering its source."""
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    incoming: list[list[int]] = [[] for _ in range(n_nodes)]
    outgoing: list[list[int]] = [[] for _ in range(n_nodes)]
    for a, (s, d) in enumerate(zip(src.tolist(), dst.tolist())):
        outgoing[s].append(a)
        incoming[d].append(a)
    indeg = [len(x) for x in incoming]
    level = [0] * n_nodes
    stack = [n for n in range(n_nodes) if indeg[n] == 0]
    by_level: dict[int, list[int]] = {}
    seen = 0
    while stack:
        n = stack.pop()
        seen += 1
        if outgoing[n]:
            by_level.setdefault(level[n], []).append(n)
        for a in outgoing[n]:
            d = dst[a]
            if level[n] + 1 > level[d]:
                level[d] = level[n] + 1
            indeg[d] -= 1
            if indeg[d] == 0:
                stack.append(d)
    if seen != n_nodes:
        raise ValueError("cycle in arc graph")
    plan = []
    for lv in sorted(by_level):
        cand, offsets, arcs, groups = [], [], [], []
        single = True
        for g, n in enumerate(sorted(by_level[lv])):
            offsets.append(len(cand))
            into = incoming[n] or [-1]
            single &= len(into) == 1
            cand.extend(into)
            arcs.extend(outgoing[n])
            groups.extend([g] * len(outgoing[n]))
        plan.append(Level(np.array(cand, dtype=np.intp), np.array(offsets, dtype=np.intp), single,
                          np.array(arcs, dtype=np.intp), np.array(groups, dtype=np.intp)))
    return plan


def _graph_plans(graphs: Sequence[ArcGraph]) -> tuple[list[Level], list[Level]]:
    src, dst = [], []
    base = 0
    for g in graphs:
        ids = {n: base + i for i, n in enumerate(sorted(g.node_times))}
        src += [ids[a.start_node] for a in g.arcs]
        dst += [ids[a.end_node] for a in g.arcs]
        base += len(ids)
    return plan_dag(np.array(src), np.array(dst), base), plan_dag(np.array(dst), np.array(src), base)


def _chain_plans(lengths: Sequence[int]) -> tuple[list[Level], list[Level]]:
    src, dst = [], []
    base = 0
    for n in lengths:
        src += list(range(base, base + n))
        dst += list(range(base + 1, base + n + 1))
        base += n + 1
    return plan_dag(np.array(src), np.array(dst), base), plan_dag(np.array(dst), np.array(src), base)


# --------------------------------------------------------------------------
# recurrence


def _step(cell: str, h_prev: Tensor, gx: Tensor, p: dict) -> Tensor:
    """One cell update given the precomputed input projection ``gx``."""
    if cell == "rnn":
        return ad.tanh(ad.add(ad.linear(h_prev, p["W_h"]), gx))
    hidden = p["W_h"].shape[1]
    gh = ad.linear(h_prev, p["W_h"], p["b_h"])
    r = ad.sigmoid(ad.add(ad.slice_cols(gx, 0, hidden), ad.slice_cols(gh, 0, hidden)))
    z = ad.sigmoid(ad.add(ad.slice_cols(gx, hidden, 2 * hidden), ad.slice_cols(gh, hidden, 2 * hidden)))
    n = ad.tanh(ad.add(ad.slice_cols(gx, 2 * hidden, 3 * hidden), ad.mul(r, ad.slice_cols(gh, 2 * hidden, 3 * hidden))))
    return ad.add(n, ad.mul(z, ad.sub(h_prev, n)))


def _project_inputs(cell: str, X: Tensor, p: dict) -> Tensor:
    return ad.linear(X, p["W_x"], p.get("b_x") if cell == "gru" else None)


def run_direction(plan: list[Level], X: Tensor, keys: np.ndarray | None, cell: str, p: dict,
                  mechanism: str, att: dict, alphas: list | None = None) -> Tensor:
    """States (N, H) for one direction, rows in arc order."""
    n = X.shape[0]
    gx_all = _project_inputs(cell, X, p)
    sources = [p["h0"]]
    lvl = np.full(n, -1, dtype=np.intp)
    row = np.zeros(n, dtype=np.intp)
    for L in plan:
        init = L.cand < 0
        src_idx = np.where(init, 0, lvl[L.cand] + 1)
        rows = np.where(init, 0, row[L.cand])
        states = ad.gather_multi(sources, src_idx, rows)
        if not L.single:
            k = None
            if keys is not None:
                k = np.where(init[:, None], 0.0, keys[L.cand])
            scores = nn.attention_scores(states, k, mechanism, att)
            if alphas is not None:
                alphas.append((L.cand.copy(), L.offsets.copy(), ad.segment_softmax(scores, L.offsets).value))
            states = nn.attention_pool(states, scores, L.offsets)
        if len(L.arc_group) != states.shape[0] or np.any(L.arc_group != np.arange(len(L.arc_group))):
            states = ad.gather_rows(states, L.arc_group)
        h = _step(cell, states, ad.gather_rows(gx_all, L.arcs), p)
        sources.append(h)
        lvl[L.arcs] = len(sources) - 2
        row[L.arcs] = np.arange(len(L.arcs))
    return ad.gather_multi(sources, lvl + 1, row)


def _head(fwd: Tensor, bwd: Tensor, store: nn.ParamStore) -> Tensor:
    both = ad.concat([fwd, bwd], axis=1)
    return ad.sigmoid(ad.add(ad.project(both, store["out.w_c"]), store["out.b_c"]))


def birnn_forward(features, store: nn.ParamStore, config: ModelConfig) -> Tensor:
    """Sequential bi-directional RNN over one word sequence -> confidences (T,).

    A plain left-to-right / right-to-left loop with no attention; used for
    one-best input and as the reference the lattice model must reduce to on
    linear chains.
    """
    X = ad.as_tensor(features)
    if X.value.ndim != 2 or X.shape[0] == 0:
        raise ValueError("features must be a non-empty (T, D) array")
    if X.shape[1] != store["fwd.W_x"].shape[1]:
        raise ValueError(f"feature dim {X.shape[1]} does not match parameters ({store['fwd.W_x'].shape[1]})")
    cell = nn.cell_fn(config.cell)
    T = X.shape[0]
    out = {}
    for direction, steps in (("fwd", range(T)), ("bwd", range(T - 1, -1, -1))):
        p = store.sub(direction)
        h = p["h0"]
        states = [None] * T
        for t in steps:
            h = cell(h, ad.gather_rows(X, [t]), p)
            states[t] = h
        out[direction] = ad.concat(states, axis=0)
    return _head(out["fwd"], out["bwd"], store)


def bilatrnn_forward(graph, features, keys, store: nn.ParamStore, config: ModelConfig,
                     alphas: dict | None = None) -> Tensor:
    """Bi-directional lattice RNN over one graph (or a list of graphs) -> confidence per arc."""
    graphs = [as_graph(g) for g in graph] if isinstance(graph, (list, tuple)) else [as_graph(graph)]
    X = ad.as_tensor(features)
    n = sum(len(g.arcs) for g in graphs)
    if X.shape[0] != n:
        raise ValueError(f"{X.shape[0]} feature rows for {n} arcs")
    if X.shape[1] != store["fwd.W_x"].shape[1]:
        raise ValueError(f"feature dim {X.shape[1]} does not match parameters ({store['fwd.W_x'].shape[1]})")
    if config.attention == "add" and keys is None:
        raise ValueError("additive attention needs attention keys")
    fplan, bplan = _graph_plans(graphs)
    return _bidirectional(fplan, bplan, X, keys, store, config, alphas)


def _bidirectional(fplan, bplan, X, keys, store, config, alphas=None) -> Tensor:
    states = {}
    for direction, plan in (("fwd", fplan), ("bwd", bplan)):
        collected = [] if alphas is not None else None
        states[direction] = run_direction(plan, X, keys, config.cell, store.sub(direction),
                                          config.attention, store.sub(f"{direction}.att"), collected)
        if alphas is not None:
            alphas[direction] = collected
    return _head(states["fwd"], states["bwd"], store)


# --------------------------------------------------------------------------
# sub-word encoder


@dataclass
class SubwordBatch:
    unit_ids: np.ndarray     # (U,) rows into the unit embedding
    duration: np.ndarray     # (U,) normalised durations
    log_post: np.ndarray     # (U,)
    lengths: list[int]       # units per word, 0 allowed
    n_words: int


def _subword_vectors(sb: SubwordBatch, store: nn.ParamStore, config: ModelConfig,
                     want_alpha: bool = False):
    """Pooled sub-word vector per word plus an empty-word flag column -> (W, Dv + 1)."""
    nonempty = [i for i, n in enumerate(sb.lengths) if n > 0]
    flag = np.array([[0.0] if n > 0 else [1.0] for n in sb.lengths])
    dv = config.subword_value_size
    if not nonempty:
        return ad.Tensor(np.hstack([np.zeros((sb.n_words, dv)), flag])), None
    emb = ad.gather_rows(store["sw_emb"], sb.unit_ids)
    parts = {"embedding": emb, "duration": Tensor(sb.duration[:, None]), "posterior": Tensor(sb.log_post[:, None])}
    inputs = ad.concat([parts[k] for k in config.subword_inputs], axis=1)
    if config.subword_mode == "encoder":
        fplan, bplan = _chain_plans([sb.lengths[i] for i in nonempty])
        f = run_direction(fplan, inputs, None, "gru", store.sub("sw.fwd"), "dot", {})
        b = run_direction(bplan, inputs, None, "gru", store.sub("sw.bwd"), "dot", {})
        values = ad.concat([f, b], axis=1)
    else:
        values = inputs
    keys = ad.concat([emb, parts["duration"]], axis=1)
    scores = nn.attention_scores(values, keys, "add", store.sub("sw.att"))
    offsets = np.cumsum([0] + [sb.lengths[i] for i in nonempty])[:-1]
    alpha = ad.segment_softmax(scores, offsets).value if want_alpha else None
    pooled = nn.attention_pool(values, scores, offsets)
    src = np.zeros(sb.n_words, dtype=np.intp)
    rows = np.zeros(sb.n_words, dtype=np.intp)
    src[nonempty] = 1
    rows[nonempty] = np.arange(len(nonempty))
    full = ad.gather_multi([Tensor(np.zeros((1, dv))), pooled], src, rows)
    return ad.concat([full, Tensor(flag)], axis=1), alpha


def subword_encode(units: Sequence[SubwordUnit], table: EmbeddingTable, store: nn.ParamStore,
                   config: ModelConfig, parent_posterior: float | None = None,
                   normalizer: Normalizer | None = None):
    """Fixed-size vector for one word's sub-word units; returns (vector, attention weights).

    The vector ends with the empty-word flag; an empty unit list gives zeros
    with the flag set and no weights.
    """
    from .features import subword_posterior

    norm = normalizer or Normalizer()
    sb = SubwordBatch(
        unit_ids=np.array([table.index(u.unit) for u in units], dtype=np.intp),
        duration=norm.apply("unit_duration", np.array([u.duration for u in units], dtype=float)),
        log_post=np.log(np.clip([subword_posterior(u, parent_posterior) for u in units], PROB_FLOOR, 1.0)),
        lengths=[len(units)], n_words=1,
    )
    vec, alpha = _subword_vectors(sb, store, config, want_alpha=True)
    return vec.value[0], alpha


# --------------------------------------------------------------------------
# parameters


def init_params(config: ModelConfig, word_table: EmbeddingTable | None,
                unit_table: EmbeddingTable | None) -> nn.ParamStore:
    rng = np.random.default_rng(config.seed)
    store = nn.ParamStore(seed=config.seed)
    H, D = config.hidden_size, config.feature_size
    if config.use_embedding:
        if word_table is None or word_table.dim != config.embed_dim:
            raise ValueError("word embedding table missing or of the wrong dimension")
        store.add("word_emb", word_table.vectors, trainable=word_table.trainable)
    for direction in ("fwd", "bwd"):
        nn.add_cell(store, rng, direction, config.cell, D, H)
        store.add(f"{direction}.h0", np.zeros((1, H)))
        nn.add_attention(store, rng, f"{direction}.att", config.attention, H, KEY_SIZE, config.attention_size)
    store.add("out.w_c", nn.uniform_init(rng, (2 * H,), 2 * H))
    store.add("out.b_c", np.zeros(()))
    if config.use_subwords:
        if unit_table is None or unit_table.dim != config.subword_embed_dim:
            raise ValueError("sub-word embedding table missing or of the wrong dimension")
        store.add("sw_emb", unit_table.vectors, trainable=unit_table.trainable)
        Hs = config.subword_hidden_size
        if config.subword_mode == "encoder":
            for direction in ("sw.fwd", "sw.bwd"):
                nn.add_cell(store, rng, direction, "gru", config.subword_input_size, Hs)
                store.add(f"{direction}.h0", np.zeros((1, Hs)))
        nn.add_attention(store, rng, "sw.att", "add", config.subword_value_size,
                         config.subword_embed_dim + 1, config.attention_size)
    return store


# --------------------------------------------------------------------------
# full model


@dataclass
class Batch:
    graphs: list[ArcGraph]
    word_ids: np.ndarray
    pre: np.ndarray          # duration / posterior columns
    post: np.ndarray         # lattice score columns
    keys: np.ndarray
    fplan: list[Level]
    bplan: list[Level]
    subwords: SubwordBatch | None
    targets: np.ndarray | None
    one_best: np.ndarray
    scored: np.ndarray
    slices: list[slice]

    @property
    def n_arcs(self) -> int:
        return len(self.word_ids)


class ConfidenceModel:
    def __init__(self, config: ModelConfig, store: nn.ParamStore, word_tokens: Sequence[str],
                 unit_tokens: Sequence[str], normalizer: Normalizer, posterior_map: PosteriorMap | None = None):
        self.config = config
        self.store = store
        self.word_tokens = list(word_tokens)
        self.unit_tokens = list(unit_tokens)
        self._word_index = {t: i + 1 for i, t in enumerate(self.word_tokens)}
        self._unit_index = {t: i + 1 for i, t in enumerate(self.unit_tokens)}
        self.normalizer = normalizer
        self.posterior_map = posterior_map
        if config.posterior_feature in ("mapped", "both") and posterior_map is None:
            raise ValueError("mapped posterior features need a posterior map")

    @classmethod
    def create(cls, config: ModelConfig, samples, word_table: EmbeddingTable | None = None,
               unit_table: EmbeddingTable | None = None, posterior_map: PosteriorMap | None = None):
        """Fresh model whose vocabularies and normalisation come from ``samples``."""
        rng = np.random.default_rng(config.seed + 1)
        if word_table is None:
            word_table = random_embeddings((w for s in samples for w in s.words), config.embed_dim, rng)
        if unit_table is None:
            units = (u.unit for s in samples for sw in s.subwords for u in sw)
            unit_table = random_embeddings(units, config.subword_embed_dim, rng)
        norm = Normalizer()
        norm.fit("duration", np.concatenate([s.duration for s in samples]))
        norm.fit("unit_duration", np.array([u.duration for s in samples for sw in s.subwords for u in sw]))
        lat = [s for s in samples if s.lattice_ok]
        norm.fit("am", np.concatenate([s.am for s in lat]) if lat else np.array([]))
        norm.fit("lm", np.concatenate([s.lm for s in lat]) if lat else np.array([]))
        store = init_params(config, word_table if config.use_embedding else None,
                            unit_table if config.use_subwords else None)
        return cls(config, store, word_table.tokens, unit_table.tokens, norm, posterior_map)

    # ----------------------------------------------------------------------
    def encode(self, samples) -> Batch:
        from .features import subword_posterior

        cfg = self.config
        graphs = [s.graph for s in samples]
        word_ids = np.array([self._word_index.get(w, 0) for s in samples for w in s.words], dtype=np.intp)
        post = np.concatenate([s.posterior for s in samples])
        cols = []
        if cfg.use_duration:
            cols.append(self.normalizer.apply("duration", np.concatenate([s.duration for s in samples])))
        if cfg.posterior_feature in ("raw", "both"):
            cols.append(np.log(np.clip(post, PROB_FLOOR, 1.0)))
        if cfg.posterior_feature in ("mapped", "both"):
            cols.append(np.log(np.clip(self.posterior_map(post), PROB_FLOOR, 1.0)))
        n = len(word_ids)
        pre = np.stack(cols, axis=1) if cols else np.zeros((n, 0))
        if cfg.use_lattice_features:
            am = np.concatenate([s.am if s.lattice_ok else np.full(len(s.words), np.nan) for s in samples])
            lm = np.concatenate([s.lm if s.lattice_ok else np.full(len(s.words), np.nan) for s in samples])
            lat = np.stack([self.normalizer.apply("am", am), self.normalizer.apply("lm", lm)], axis=1)
        else:
            lat = np.zeros((n, 0))
        keys = np.concatenate([s.keys for s in samples])
        sb = None
        if cfg.use_subwords:
            arcs_units = [(sw, p) for s in samples for sw, p in zip(s.subwords, s.posterior)]
            units = [u for sw, _ in arcs_units for u in sw]
            sb = SubwordBatch(
                unit_ids=np.array([self._unit_index.get(u.unit, 0) for u in units], dtype=np.intp),
                duration=self.normalizer.apply("unit_duration", np.array([u.duration for u in units], dtype=float)),
                log_post=np.log(np.clip([subword_posterior(u, p) for sw, p in arcs_units for u in sw],
                                        PROB_FLOOR, 1.0)) if units else np.zeros(0),
                lengths=[len(sw) for sw, _ in arcs_units], n_words=n,
            )
        if all(len(g.arcs) == 0 for g in graphs):
            raise ValueError("batch has no arcs")
        if all(_is_chain(g) for g in graphs):
            fplan, bplan = _chain_plans([len(g.arcs) for g in graphs])
        else:
            fplan, bplan = _graph_plans(graphs)
        have_targets = all(s.targets is not None for s in samples)
        bounds = np.cumsum([0] + [len(s.words) for s in samples])
        return Batch(
            graphs=graphs, word_ids=word_ids, pre=pre, post=lat, keys=keys, fplan=fplan, bplan=bplan,
            subwords=sb,
            targets=np.concatenate([s.targets for s in samples]) if have_targets else None,
            one_best=np.concatenate([s.one_best for s in samples]),
            scored=np.concatenate([s.scored for s in samples]),
            slices=[slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])],
        )

    def input_features(self, batch: Batch) -> Tensor:
        parts = []
        if self.config.use_embedding:
            parts.append(ad.gather_rows(self.store["word_emb"], batch.word_ids))
        if batch.pre.shape[1]:
            parts.append(Tensor(batch.pre))
        if self.config.use_subwords:
            parts.append(_subword_vectors(batch.subwords, self.store, self.config)[0])
        if batch.post.shape[1]:
            parts.append(Tensor(batch.post))
        return ad.concat(parts, axis=1)

    def forward(self, batch: Batch, alphas: dict | None = None) -> Tensor:
        X = self.input_features(batch)
        return _bidirectional(batch.fplan, batch.bplan, X, batch.keys, self.store, self.config, alphas)

    def predict(self, samples, batch_size: int = 32) -> list[np.ndarray]:
        """Per-arc confidences for each sample (no gradient tracking)."""
        out = []
        with ad.no_grad():
            for i in range(0, len(samples), batch_size):
                chunk = samples[i:i + batch_size]
                batch = self.encode(chunk)
                conf = self.forward(batch).value
                out += [conf[s].copy() for s in batch.slices]
        return out

    def predict_utterance(self, sample) -> dict:
        """Scores for every arc plus the one-best words and their scores in path order."""
        if self.config.graph == "one-best":
            X = self.input_features(self.encode([sample]))
            with ad.no_grad():
                conf = birnn_forward(X.value, self.store, self.config).value
        else:
            conf = self.predict([sample])[0]
        order = sample.path
        return {
            "arc_confidences": conf,
            "one_best": [(sample.words[i], float(conf[i])) for i in order],
        }

    # ----------------------------------------------------------------------
    def checkpoint_extra(self) -> dict:
        from .features import format_posterior_map

        return {
            "word_tokens": self.word_tokens,
            "unit_tokens": self.unit_tokens,
            "normalizer": self.normalizer.to_dict(),
            "posterior_map": format_posterior_map(self.posterior_map) if self.posterior_map else None,
        }

    def save(self, path, extra: dict | None = None):
        doc = self.checkpoint_extra()
        doc.update(extra or {})
        nn.save_checkpoint(path, self.store, self.config.to_dict(), doc)

    @classmethod
    def load(cls, path) -> tuple["ConfidenceModel", dict]:
        from .features import parse_posterior_map

        store, config, extra = nn.load_checkpoint(path)
        pmap = parse_posterior_map(extra["posterior_map"]) if extra.get("posterior_map") else None
        model = cls(ModelConfig.from_dict(config), store, extra["word_tokens"], extra["unit_tokens"],
                    Normalizer.from_dict(extra["normalizer"]), pmap)
        return model, extra


def _is_chain(g: ArcGraph) -> bool:
    return all(a.start_node == i and a.end_node == i + 1 for i, a in enumerate(g.arcs))
