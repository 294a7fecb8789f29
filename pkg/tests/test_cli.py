import json
import subprocess
import sys

import pytest

from latconf.cli import main
from latconf.metrics import parse_kv
from latconf.presets import FEATURE_LADDERS, LADDERS, PRESETS, preset_config

TINY_MODEL = ["--hidden-size", "6", "--embed-dim", "4", "--attention-size", "4", "--epochs", "2"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(out), "--n-utterances", "60", "--vocab-size", "40", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--preset", "cn-1best", *TINY_MODEL]) == 0
    return out


def read_conf(path):
    return (path / "confidences.txt").read_text().splitlines()


# --------------------------------------------------------------------------
# synth / snapshot / precedence


def test_synth_writes_files_and_snapshot(data_dir):
    for name in ("cn.txt", "lattices.txt", "ref.txt", "resolved_config.json"):
        assert (data_dir / name).exists()
    snap = json.loads((data_dir / "resolved_config.json").read_text())
    assert snap["command"] == "synth" and snap["synth_spec"]["n_utterances"] == 60


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_utterances": 5, "vocab-size": 30, "seed": 9}))
    out = tmp_path / "o"
    assert main(["synth", "--out", str(out), "--config", str(cfg), "--n-utterances", "7"]) == 0
    snap = json.loads((out / "resolved_config.json").read_text())
    assert snap["synth_spec"]["n_utterances"] == 7     # flag beats file
    assert snap["synth_spec"]["vocab_size"] == 30      # file beats default
    assert snap["synth_spec"]["mean_length"] == 8.0    # default
    assert snap["options"]["seed"] == 9
    assert len((out / "ref.txt").read_text().splitlines()) == 7


# --------------------------------------------------------------------------
# exit codes


def test_usage_errors_exit_2(tmp_path, data_dir, capsys):
    assert main(["synth"]) == 2
    assert main(["bogus"]) == 2
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--preset", "nope"]) == 2
    err = capsys.readouterr().err
    assert "available presets" in err and "cn-1best" in err
    assert main(["evaluate", "--data", str(data_dir), "--out", str(tmp_path)]) == 2
    assert main(["evaluate", "--data", str(data_dir), "--out", str(tmp_path),
                 "--checkpoint", "x", "--baseline", "oracle"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_option": 1}))
    assert main(["synth", "--out", str(tmp_path), "--config", str(bad)]) == 2
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--attention", "cosine"]) == 2


def test_data_errors_exit_3(tmp_path):
    assert main(["calibrate", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "cn.txt").write_text("CN id=x K=1\nSET k=0 ts=0 te=1\nW=a p=0.9\nW=b p=0.9\n")
    assert main(["evaluate", "--baseline", "posterior", "--data", str(broken), "--out", str(tmp_path / "o")]) == 3


def test_numeric_failure_exits_4(data_dir, tmp_path):
    import numpy as np
    with np.errstate(all="ignore"):
        code = main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--preset", "words", *TINY_MODEL,
                     "--optimizer", "sgd", "--learning-rate", "1e200", "--clip-norm", "1e300"])
    assert code == 4


# --------------------------------------------------------------------------
# presets


def test_feature_ladders_grow_strictly():
    for name in FEATURE_LADDERS:
        dims = [preset_config(p).feature_size for p in LADDERS[name]]
        assert all(a < b for a, b in zip(dims, dims[1:])), (name, dims)


def test_preset_contents():
    words = preset_config("words")
    assert words.graph == "one-best" and words.feature_size == words.embed_dim
    cn = preset_config("cn-1best")
    assert cn.graph == "cn" and cn.loss_mode == "one-best"
    assert preset_config("cn-cn").loss_mode == "all-arcs"
    assert preset_config("+lattice").use_lattice_features
    assert set(PRESETS) >= {"words", "+duration", "+posteriors", "+mapping", "+encoder", "cn-1best", "cn-cn",
                            "+lattice"}


# --------------------------------------------------------------------------
# train / predict / evaluate


def test_train_outputs(trained):
    log = (trained / "train.log").read_text().splitlines()
    assert len(log) == 2 and log[0].startswith("epoch=1 train_loss=") and "cv_nce=" in log[0] and "cv_auc=" in log[0]
    ckpt = json.loads((trained / "checkpoint.json").read_text())
    assert ckpt["extra"]["preset"] == "cn-1best"
    assert ckpt["config"]["graph"] == "cn"
    assert json.loads((trained / "resolved_config.json").read_text())["model_config"]["hidden_size"] == 6


def test_predict_one_best_and_all_arcs(trained, data_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    ckpt = str(trained / "checkpoint.json")
    assert main(["predict", "--checkpoint", ckpt, "--data", str(data_dir), "--out", str(a)]) == 0
    assert main(["predict", "--checkpoint", ckpt, "--data", str(data_dir), "--out", str(b), "--all-arcs"]) == 0
    from latconf.dataset import load_dataset
    utts = load_dataset(data_dir)
    one, every = read_conf(a), read_conf(b)
    assert len(one) == len(every) == len(utts)
    for line, u in zip(every, utts):
        uid, *items = line.split()
        assert uid == u.id
        assert len(items) == sum(len(s.entries) for s in u.cn.sets)
        for item in items:
            word, conf = item.rsplit(":", 1)
            assert 0 < float(conf) < 1
    for line, u in zip(one, utts):
        assert len(line.split()) - 1 == len(u.cn.sets)


def test_predict_single_utterance(trained, data_dir, tmp_path):
    single = tmp_path / "single"
    single.mkdir()
    text = (data_dir / "cn.txt").read_text()
    first = text[: text.index("CN id=", 1)]
    (single / "cn.txt").write_text(first)
    assert main(["predict", "--checkpoint", str(trained / "checkpoint.json"), "--data", str(single),
                 "--out", str(tmp_path / "o")]) == 0
    assert len(read_conf(tmp_path / "o")) == 1


def test_rerun_is_byte_identical(data_dir, tmp_path):
    outs = []
    for run in ("r1", "r2"):
        t, p = tmp_path / run / "train", tmp_path / run / "pred"
        assert main(["train", "--data", str(data_dir), "--out", str(t), "--preset", "+posteriors", *TINY_MODEL]) == 0
        assert main(["predict", "--checkpoint", str(t / "checkpoint.json"), "--data", str(data_dir),
                     "--out", str(p)]) == 0
        outs.append(((t / "checkpoint.json").read_bytes(), (t / "train.log").read_bytes(),
                     (p / "confidences.txt").read_bytes()))
    assert outs[0] == outs[1]


def test_evaluate_model_and_baselines(trained, data_dir, tmp_path):
    out = tmp_path / "ev"
    assert main(["evaluate", "--checkpoint", str(trained / "checkpoint.json"), "--data", str(data_dir),
                 "--out", str(out), "--split", "all"]) == 0
    kv = parse_kv((out / "report.kv").read_text())
    assert {"nce", "pr_auc", "prevalence", "n_words", "config_hash"} <= set(kv)
    assert kv["preset"] == "cn-1best"
    assert (out / "pr_curve.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (out / "pr_curve.txt").read_text().startswith("# recall precision")

    from latconf.dataset import build_samples, load_dataset
    samples = build_samples(load_dataset(data_dir, need_references=True))
    t = [s.targets[i] for s in samples for i in s.path]
    assert float(kv["prevalence"]) == sum(t) / len(t)

    oracle, post = tmp_path / "oracle", tmp_path / "post"
    assert main(["evaluate", "--baseline", "oracle", "--data", str(data_dir), "--out", str(oracle)]) == 0
    assert float(parse_kv((oracle / "report.kv").read_text())["nce"]) >= 1 - 1e-6
    assert main(["evaluate", "--baseline", "posterior", "--data", str(data_dir), "--out", str(post),
                 "--split", "all"]) == 0
    kv = parse_kv((post / "report.kv").read_text())
    assert float(kv["pr_auc"]) > float(kv["prevalence"])
    mapped = tmp_path / "mapped"
    assert main(["evaluate", "--baseline", "mapped", "--data", str(data_dir), "--out", str(mapped)]) == 0


def test_calibrate_and_train_with_map(data_dir, tmp_path):
    cal = tmp_path / "cal"
    assert main(["calibrate", "--data", str(data_dir), "--out", str(cal), "--bins", "5"]) == 0
    lines = (cal / "posterior_map.txt").read_text().splitlines()
    assert 1 <= len(lines) <= 5 and all(ln.startswith("BIN ") for ln in lines)
    out = tmp_path / "tr"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--preset", "+mapping", *TINY_MODEL,
                 "--posterior-map", str(cal / "posterior_map.txt")]) == 0


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "latconf", "synth", "--out", str(tmp_path), "--n-utterances", "2"],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "latconf", "train"], capture_output=True, text=True)
    assert res.returncode == 2
