import math

import numpy as np
import pytest

from latconf import autodiff as ad
from latconf import nn
from latconf.autodiff import Tensor, finite_difference_check
from latconf.dataset import build_samples
from latconf.features import EmbeddingTable, attention_keys
from latconf.lattice import SubwordUnit, as_graph, compute_arc_posteriors, parse_confusion_network, parse_lattice
from latconf.model import (
    ConfidenceModel,
    ModelConfig,
    bilatrnn_forward,
    birnn_forward,
    init_params,
    plan_dag,
    subword_encode,
)
from latconf.synth import SynthSpec, generate

from helpers import random_chain_cn, random_lattice

UNITS = EmbeddingTable(["f", "o", "x"], np.array([[0, 0, 0, 0], [.1, .2, .3, .4], [-.1, 0, .1, .2], [.3, -.3, .2, 0]]),
                       trainable=True)


def small_config(**kw):
    base = dict(use_embedding=False, hidden_size=4, attention_size=3)
    base.update(kw)
    return ModelConfig(**base)


def features_for(graph, rng):
    g = as_graph(graph)
    return rng.normal(size=(len(g.arcs), 2)), attention_keys(g)


def zero_all(store):
    for t in store.tensors.values():
        t.value[...] = 0.0


# --------------------------------------------------------------------------
# plans


def test_plan_orders_arcs_after_their_predecessors():
    rng = np.random.default_rng(0)
    for _ in range(30):
        g = as_graph(random_lattice(rng))
        nodes = sorted(g.node_times)
        idx = {n: i for i, n in enumerate(nodes)}
        src = np.array([idx[a.start_node] for a in g.arcs])
        dst = np.array([idx[a.end_node] for a in g.arcs])
        done_at = {}
        for lv, L in enumerate(plan_dag(src, dst, len(nodes))):
            for a in L.arcs:
                done_at[int(a)] = lv
        assert sorted(done_at) == list(range(len(g.arcs)))
        for a in range(len(g.arcs)):
            for b in range(len(g.arcs)):
                if dst[b] == src[a]:
                    assert done_at[b] < done_at[a]


def test_plan_rejects_cycles():
    with pytest.raises(ValueError, match="cycle"):
        plan_dag(np.array([0, 1]), np.array([1, 0]), 2)


# --------------------------------------------------------------------------
# forward passes


def test_zero_params_give_one_half():
    cfg = small_config()
    store = init_params(cfg, None, None)
    zero_all(store)
    rng = np.random.default_rng(1)
    lat = compute_arc_posteriors(random_lattice(rng))
    X, keys = features_for(lat, rng)
    assert np.all(bilatrnn_forward(lat, X, keys, store, cfg).value == 0.5)
    assert np.all(birnn_forward(X, store, cfg).value == 0.5)


def test_single_step_uses_only_initial_states():
    cfg = small_config()
    store = init_params(cfg, None, None)
    x = np.array([[0.3, -0.7]])
    out = birnn_forward(x, store, cfg).value
    f = nn.gru_cell(store["fwd.h0"], x, store.sub("fwd"))
    b = nn.gru_cell(store["bwd.h0"], x, store.sub("bwd"))
    logit = np.concatenate([f.value[0], b.value[0]]) @ store["out.w_c"].value + store["out.b_c"].value
    assert out[0] == pytest.approx(1 / (1 + math.exp(-logit)), abs=1e-15)
    cn = parse_confusion_network("CN id=s K=1\nSET k=0 ts=0 te=1\nW=a p=1.0\n")
    assert bilatrnn_forward(cn, x, attention_keys(cn), store, cfg).value[0] == pytest.approx(out[0], abs=1e-15)


def test_forward_errors():
    cfg = small_config()
    store = init_params(cfg, None, None)
    with pytest.raises(ValueError):
        birnn_forward(np.zeros((0, 2)), store, cfg)
    with pytest.raises(ValueError, match="feature dim"):
        birnn_forward(np.zeros((3, 5)), store, cfg)
    cn = parse_confusion_network("CN id=s K=1\nSET k=0 ts=0 te=1\nW=a p=1.0\n")
    with pytest.raises(ValueError, match="keys"):
        bilatrnn_forward(cn, np.zeros((1, 2)), None, store, cfg)


@pytest.mark.parametrize("cell, mechanism", [("gru", "add"), ("rnn", "dot"), ("gru", "mult")])
def test_chain_equivalence(cell, mechanism):
    cfg = small_config(cell=cell, attention=mechanism)
    store = init_params(cfg, None, None)
    rng = np.random.default_rng(2)
    for i in range(25):
        cn = random_chain_cn(rng, utt=f"c{i}")
        X, keys = features_for(cn, rng)
        lat_out = bilatrnn_forward(cn, X, keys, store, cfg).value
        seq_out = birnn_forward(X, store, cfg).value
        assert np.max(np.abs(lat_out - seq_out)) <= 1e-9


DIAMOND = """CN id=d K=2
SET k=0 ts=0.0 te=0.5
W=brown p=0.6
W=crown p=0.4
SET k=1 ts=0.5 te=1.0
W=fox p=1.0
"""


@pytest.mark.parametrize("mechanism", ["dot", "mult", "add"])
def test_diamond_attention_by_hand(mechanism):
    cfg = small_config(attention=mechanism)
    store = init_params(cfg, None, None)
    cn = parse_confusion_network(DIAMOND)
    rng = np.random.default_rng(3)
    X, keys = features_for(cn, rng)
    alphas = {}
    out = bilatrnn_forward(cn, X, keys, store, cfg, alphas=alphas).value

    fwd, bwd = store.sub("fwd"), store.sub("bwd")
    h_brown = nn.gru_cell(fwd["h0"], X[[0]], fwd).value
    h_crown = nn.gru_cell(fwd["h0"], X[[1]], fwd).value
    states = np.vstack([h_brown, h_crown])
    e = nn.attention_scores(states, keys[:2], mechanism, store.sub("fwd.att")).value
    alpha = np.exp(e - e.max()) / np.exp(e - e.max()).sum()
    mixed = alpha @ states
    h_fox = nn.gru_cell(mixed, X[[2]], fwd).value[0]

    (cand, _, got_alpha), = alphas["fwd"]
    assert cand.tolist() == [0, 1]
    assert got_alpha == pytest.approx(alpha, abs=1e-12)
    assert abs(got_alpha.sum() - 1) <= 1e-12
    assert alphas["bwd"] == []  # both competitors see the single "fox" arc backwards
    b_fox = nn.gru_cell(bwd["h0"], X[[2]], bwd).value[0]
    logit = np.concatenate([h_fox, b_fox]) @ store["out.w_c"].value + store["out.b_c"].value
    assert out[2] == pytest.approx(1 / (1 + math.exp(-logit)), abs=1e-12)


def test_attention_weights_sum_to_one_on_lattices():
    cfg = small_config()
    store = init_params(cfg, None, None)
    rng = np.random.default_rng(4)
    for _ in range(20):
        lat = compute_arc_posteriors(random_lattice(rng))
        X, keys = features_for(lat, rng)
        alphas = {}
        out = bilatrnn_forward(lat, X, keys, store, cfg, alphas=alphas).value
        assert np.all((out > 0) & (out < 1))
        for direction in ("fwd", "bwd"):
            for cand, offsets, a in alphas[direction]:
                for s, e in zip(offsets, list(offsets[1:]) + [len(cand)]):
                    assert abs(a[s:e].sum() - 1.0) <= 1e-12


def test_arc_text_order_does_not_matter():
    cfg = small_config()
    store = init_params(cfg, None, None)
    rng = np.random.default_rng(5)
    from latconf.lattice import format_lattice
    for _ in range(10):
        lat = compute_arc_posteriors(random_lattice(rng))
        lines = format_lattice(lat).splitlines()
        head = [ln for ln in lines if not ln.startswith("J=")]
        arcs = [ln for ln in lines if ln.startswith("J=")]
        shuffled = parse_lattice("\n".join(head + [arcs[i] for i in rng.permutation(len(arcs))]) + "\n")
        X, keys = features_for(lat, rng)
        a = bilatrnn_forward(lat, X, keys, store, cfg).value
        b = bilatrnn_forward(shuffled, X, attention_keys(shuffled), store, cfg).value
        assert np.max(np.abs(a - b)) <= 1e-12


def test_batched_graphs_equal_separate_runs():
    cfg = small_config()
    store = init_params(cfg, None, None)
    rng = np.random.default_rng(6)
    lats = [compute_arc_posteriors(random_lattice(rng, utt=f"b{i}")) for i in range(4)]
    feats = [features_for(l, rng) for l in lats]
    joint = bilatrnn_forward(lats, np.vstack([f[0] for f in feats]), np.vstack([f[1] for f in feats]), store, cfg).value
    separate = np.concatenate([bilatrnn_forward(l, X, k, store, cfg).value for l, (X, k) in zip(lats, feats)])
    assert np.max(np.abs(joint - separate)) <= 1e-12


def test_fixed_seed_output_is_pinned_and_repeatable():
    cfg = small_config()
    X = np.array([[0.1, -0.2], [0.5, -1.5], [-0.3, -0.05]])
    first = birnn_forward(X, init_params(cfg, None, None), cfg).value
    second = birnn_forward(X, init_params(cfg, None, None), cfg).value
    assert first.tobytes() == second.tobytes()
    assert first == pytest.approx([0.5552178064233265, 0.5576121112665523, 0.5064933047797843], abs=1e-12)


def test_lattice_gradient_check_small():
    cfg = small_config()
    store = init_params(cfg, None, None)
    rng = np.random.default_rng(7)
    lat = parse_lattice("""LATTICE id=g N=3 L=3
I=0 t=0
I=1 t=0.4
I=2 t=1.0
J=0 S=0 E=1 W=a a=-1 l=-1
J=1 S=0 E=1 W=b a=-2 l=-1
J=2 S=1 E=2 W=c a=-1 l=-1
""")
    lat = compute_arc_posteriors(lat)
    X, keys = features_for(lat, rng)
    for t in store.trainable().values():
        t.value += rng.normal(scale=0.3, size=t.value.shape)  # move away from the zero-initialised states
    w = Tensor(np.array([1.0, -1.0, 0.5]))
    report = finite_difference_check(store.trainable(),
                                     lambda: ad.sum_all(ad.mul(ad.log(bilatrnn_forward(lat, X, keys, store, cfg)), w)))
    assert report["max_rel_error"] < 1e-4, report


# --------------------------------------------------------------------------
# sub-word encoder


def sw_config(**kw):
    return small_config(use_subwords=True, subword_hidden_size=3, **kw)


@pytest.mark.parametrize("mode", ["encoder", "direct-features"])
def test_subword_singleton_and_identical_units(mode):
    cfg = sw_config(subword_mode=mode)
    store = init_params(cfg, None, UNITS)
    one, alpha = subword_encode([SubwordUnit("o", 0.1, 0.5)], UNITS, store, cfg)
    assert alpha.tolist() == [1.0] and one[-1] == 0.0
    if mode == "direct-features":
        assert one[:-1].tolist() == [*UNITS.lookup("o"), 0.1]
    two, alpha = subword_encode([SubwordUnit("o", 0.1, 0.5)] * 2, UNITS, store, cfg)
    assert abs(alpha.sum() - 1.0) <= 1e-12
    if mode == "direct-features":
        assert np.allclose(two, one, atol=1e-15, rtol=0)


def test_subword_pooled_vector_is_convex_mix_of_encoder_states():
    cfg = sw_config()
    store = init_params(cfg, None, UNITS)
    units = [SubwordUnit("f", 0.1, 0.9), SubwordUnit("o", 0.15), SubwordUnit("x", 0.12, 0.5)]
    vec, alpha = subword_encode(units, UNITS, store, cfg, parent_posterior=0.8)
    assert vec.shape == (2 * 3 + 1,)
    assert np.all(alpha > 0) and abs(alpha.sum() - 1.0) <= 1e-12


def test_subword_three_graphemes_pinned():
    cfg = sw_config()
    store = init_params(cfg, None, UNITS)
    units = [SubwordUnit("f", 0.1, 0.9), SubwordUnit("o", 0.15), SubwordUnit("x", 0.12, 0.5)]
    vec, alpha = subword_encode(units, UNITS, store, cfg, parent_posterior=0.8)
    pinned = [0.14714552749827498, -0.051711485839532625, 0.14929926288208334, 0.31540679769788027,
              -0.05291690131075159, -0.31241134194457887, 0.0]
    assert vec == pytest.approx(pinned, abs=1e-12)
    assert abs(alpha.sum() - 1.0) <= 1e-12


def test_empty_subword_list_sets_flag():
    cfg = sw_config()
    store = init_params(cfg, None, UNITS)
    vec, alpha = subword_encode([], UNITS, store, cfg)
    assert alpha is None and vec[-1] == 1.0 and not vec[:-1].any()


# --------------------------------------------------------------------------
# full model


@pytest.fixture(scope="module")
def samples():
    utts = generate(SynthSpec(n_utterances=12, vocab_size=30, seed=3))
    return build_samples(utts, "cn")


@pytest.mark.parametrize("kw", [{}, {"use_subwords": True}, {"use_lattice_features": True},
                                {"graph": "one-best"}])
def test_model_predict_is_deterministic(samples, kw, tmp_path):
    from latconf.dataset import build_samples as bs
    cfg = ModelConfig(hidden_size=6, embed_dim=4, attention_size=4, **kw)
    data = samples if cfg.graph == "cn" else bs(generate(SynthSpec(n_utterances=12, vocab_size=30, seed=3)), "one-best")
    model = ConfidenceModel.create(cfg, data)
    first = model.predict(data, batch_size=5)
    again = model.predict(data, batch_size=3)
    for a, b, s in zip(first, again, data):
        assert len(a) == len(s.words)
        assert np.max(np.abs(a - b)) <= 1e-12
        assert np.all((a > 0) & (a < 1))
    path = tmp_path / "m.json"
    model.save(path)
    loaded, _ = ConfidenceModel.load(path)
    for a, b in zip(first, loaded.predict(data, batch_size=5)):
        assert a.tobytes() == b.tobytes()


def test_predict_utterance_one_best(samples):
    cfg = ModelConfig(hidden_size=6, embed_dim=4, attention_size=4)
    model = ConfidenceModel.create(cfg, samples)
    s = samples[0]
    out = model.predict_utterance(s)
    assert len(out["arc_confidences"]) == len(s.words)
    assert [w for w, _ in out["one_best"]] == [s.words[i] for i in s.path]
    assert model.predict_utterance(s)["one_best"] == out["one_best"]


def test_one_best_config_delegates_to_birnn():
    utts = generate(SynthSpec(n_utterances=3, vocab_size=20, seed=4))
    data = build_samples(utts, "one-best")
    model = ConfidenceModel.create(ModelConfig(graph="one-best", hidden_size=5, embed_dim=3, attention_size=2), data)
    s = data[0]
    X = model.input_features(model.encode([s])).value
    seq = birnn_forward(X, model.store, model.config).value
    assert np.max(np.abs(model.predict([s])[0] - seq)) <= 1e-9
    assert model.predict_utterance(s)["arc_confidences"].tolist() == seq.tolist()


def test_config_round_trip_and_validation():
    cfg = ModelConfig(subword_inputs=["embedding"])
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig(attention="cosine")
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})
    assert ModelConfig(use_subwords=True, use_lattice_features=True).feature_size == 16 + 2 + 20 + 1 + 2
