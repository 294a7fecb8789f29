"""Command-line interface: ``latconf {synth,calibrate,train,predict,evaluate}``.

Option values resolve as command-line flag > ``--config`` JSON file > default,
and every run writes the resolved options to ``<out>/resolved_config.json``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import typing

from .model import ModelConfig
from .presets import PRESETS, UnknownPresetError, preset_overrides
from .synth import SynthSpec
from .training import BASELINES, TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SNAPSHOT = "resolved_config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# parser construction


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser, cls, skip=()):
    """One flag per dataclass field; bools get --x/--no-x, tuples take several values."""
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        hint = hints[f.name]
        if hint is bool:
            parser.add_argument(_flag(f.name), action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
        elif typing.get_origin(hint) is tuple:
            elem = typing.get_args(hint)[0]
            parser.add_argument(_flag(f.name), type=elem, nargs="+", default=argparse.SUPPRESS)
        else:
            parser.add_argument(_flag(f.name), type=hint, default=argparse.SUPPRESS)


def _dataclass_defaults(cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name not in skip:
            out[f.name] = f.default
    return out


COMMON_DEFAULTS = {"seed": 42, "threads": 1, "out": None}
COMMAND_DEFAULTS = {
    "synth": _dataclass_defaults(SynthSpec, skip=("seed",)),
    "calibrate": {"data": None, "bins": 50, "split": "cv"},
    "train": {"data": None, "preset": None, "embeddings": None, "posterior_map": None, "tolerance": 0.5,
              **_dataclass_defaults(TrainConfig, skip=("seed",))},
    "predict": {"checkpoint": None, "data": None, "all_arcs": False, "split": "all"},
    "evaluate": {"checkpoint": None, "baseline": None, "data": None, "scope": "one-best", "split": "test",
                 "posterior_map": None, "graph": "cn"},
}
MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"seed"}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("shared options")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 42)")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="cap on numeric worker threads (default 1)")
    g.add_argument("--config", default=None, help="JSON file of option values (flags override it)")
    g.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    parser = _Parser(prog="latconf", description="Word confidence estimation over one-best, CN and lattice input.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic data directory")
    _add_dataclass_flags(p, SynthSpec, skip=("seed",))

    p = sub.add_parser("calibrate", parents=[common], help="fit a posterior-to-confidence map")
    p.add_argument("--data", default=argparse.SUPPRESS, help="data directory")
    p.add_argument("--bins", type=int, default=argparse.SUPPRESS)
    p.add_argument("--split", choices=("cv", "all"), default=argparse.SUPPRESS,
                   help="fit on the seeded cv split (default) or on everything")

    p = sub.add_parser("train", parents=[common], help="train a confidence model")
    p.add_argument("--data", default=argparse.SUPPRESS)
    p.add_argument("--preset", default=argparse.SUPPRESS, help=f"one of: {', '.join(PRESETS)}")
    p.add_argument("--embeddings", default=argparse.SUPPRESS, help="pre-trained word vectors (kept frozen)")
    p.add_argument("--posterior-map", default=argparse.SUPPRESS, help="map from `calibrate` (else fitted on cv)")
    p.add_argument("--tolerance", type=float, default=argparse.SUPPRESS, help="CN-lattice time-overlap tolerance")
    _add_dataclass_flags(p, ModelConfig, skip=("seed",))
    _add_dataclass_flags(p, TrainConfig, skip=("seed",))

    p = sub.add_parser("predict", parents=[common], help="write per-word confidences")
    p.add_argument("--checkpoint", default=argparse.SUPPRESS)
    p.add_argument("--data", default=argparse.SUPPRESS)
    p.add_argument("--all-arcs", action="store_true", default=argparse.SUPPRESS, help="score every arc, not just the one-best")
    p.add_argument("--split", choices=("all", "train", "cv", "test"), default=argparse.SUPPRESS)

    p = sub.add_parser("evaluate", parents=[common], help="NCE / PR-AUC report with PR curve")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--checkpoint", default=argparse.SUPPRESS)
    src.add_argument("--baseline", choices=BASELINES, default=argparse.SUPPRESS)
    p.add_argument("--data", default=argparse.SUPPRESS)
    p.add_argument("--scope", choices=("one-best", "all-arcs"), default=argparse.SUPPRESS)
    p.add_argument("--split", choices=("all", "train", "cv", "test"), default=argparse.SUPPRESS)
    p.add_argument("--posterior-map", default=argparse.SUPPRESS, help="map for the `mapped` baseline")
    p.add_argument("--graph", choices=("cn", "lattice"), default=argparse.SUPPRESS, help="arcs for baselines")
    return parser


# --------------------------------------------------------------------------
# option resolution


def _load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in doc.items()}


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags (in rising priority)."""
    command = args.command
    allowed = dict(COMMON_DEFAULTS, **COMMAND_DEFAULTS[command])
    if command == "train":
        allowed.update({k: None for k in MODEL_KEYS})
    resolved = {k: v for k, v in allowed.items() if not (command == "train" and k in MODEL_KEYS)}
    explicit = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    if args.config:
        from_file = _load_config_file(args.config)
        unknown = sorted(set(from_file) - set(allowed))
        if unknown:
            raise UsageError(f"config file {args.config}: unknown keys for `{command}`: {', '.join(unknown)}")
        resolved.update(from_file)
    resolved.update(explicit)
    if resolved.get("out") is None:
        raise UsageError(f"{command}: --out is required")
    if resolved["threads"] is None or int(resolved["threads"]) < 1:
        raise UsageError("--threads must be >= 1")
    needs_data = command != "synth"
    if needs_data and not resolved.get("data"):
        raise UsageError(f"{command}: --data is required")
    if command == "predict" and not resolved.get("checkpoint"):
        raise UsageError("predict: --checkpoint is required")
    if command == "evaluate":
        if bool(resolved.get("checkpoint")) == bool(resolved.get("baseline")):
            raise UsageError("evaluate: give exactly one of --checkpoint or --baseline")
    return resolved


def _model_config(opts: dict) -> ModelConfig:
    base = {}
    if opts.get("preset") is not None:
        base = preset_overrides(opts["preset"])
    base.update({k: opts[k] for k in MODEL_KEYS if opts.get(k) is not None})
    base["seed"] = opts["seed"]
    try:
        return ModelConfig(**base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model configuration: {exc}") from exc


def _train_config(opts: dict) -> TrainConfig:
    keys = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
    try:
        return TrainConfig(seed=opts["seed"], **{k: opts[k] for k in keys})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from exc


def _write_snapshot(out_dir, command: str, opts: dict, **resolved):
    os.makedirs(out_dir, exist_ok=True)
    doc = {"command": command, "options": opts, **resolved}
    with open(os.path.join(out_dir, SNAPSHOT), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2, default=list)
        fh.write("\n")


# --------------------------------------------------------------------------
# commands


def cmd_synth(opts: dict) -> int:
    from .dataset import write_dataset
    from .synth import generate

    keys = {f.name for f in dataclasses.fields(SynthSpec)} - {"seed"}
    try:
        spec = SynthSpec(seed=opts["seed"], **{k: opts[k] for k in keys})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth spec: {exc}") from exc
    _write_snapshot(opts["out"], "synth", opts, synth_spec=spec.to_dict())
    write_dataset(opts["out"], generate(spec))
    return EXIT_OK


def _split(utterances, name: str, seed: int):
    from .dataset import split_dataset

    if name == "all":
        return list(utterances)
    train, cv, test = split_dataset(utterances, seed)
    return {"train": train, "cv": cv, "test": test}[name]


def cmd_calibrate(opts: dict) -> int:
    from .dataset import build_samples, load_dataset
    from .features import format_posterior_map
    from .training import fit_calibration

    _write_snapshot(opts["out"], "calibrate", opts)
    utts = _split(load_dataset(opts["data"], need_references=True), opts["split"], opts["seed"])
    pmap = fit_calibration(build_samples(utts, "cn"), bins=int(opts["bins"]))
    with open(os.path.join(opts["out"], "posterior_map.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_posterior_map(pmap))
    return EXIT_OK


def _read_map(path):
    from .dataset import DataError
    from .features import parse_posterior_map

    try:
        with open(path, encoding="utf-8") as fh:
            return parse_posterior_map(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read posterior map {path}: {exc.strerror}") from exc


def cmd_train(opts: dict) -> int:
    from .dataset import build_samples, load_dataset, split_dataset
    from .features import load_embeddings
    from .training import train

    if opts.get("preset") is None and not any(opts.get(k) is not None for k in MODEL_KEYS):
        opts = dict(opts, preset="+posteriors")
    mcfg, tcfg = _model_config(opts), _train_config(opts)
    _write_snapshot(opts["out"], "train", opts, model_config=mcfg.to_dict(), train_config=tcfg.to_dict())
    utts = load_dataset(opts["data"], need_references=True)
    train_u, cv_u, _ = split_dataset(utts, opts["seed"])
    tol = float(opts["tolerance"])
    train_s = build_samples(train_u, mcfg.graph, mcfg.one_best_source, tol)
    cv_s = build_samples(cv_u, mcfg.graph, mcfg.one_best_source, tol)
    table = None
    if opts.get("embeddings"):
        table = load_embeddings(opts["embeddings"], trainable=False)
        if table.dim != mcfg.embed_dim:
            raise UsageError(f"embeddings have dim {table.dim} but --embed-dim is {mcfg.embed_dim}")
    pmap = _read_map(opts["posterior_map"]) if opts.get("posterior_map") else None
    lines = []

    def log(line):
        lines.append(line)
        print(line, file=sys.stderr)

    result = train(train_s, cv_s, mcfg, tcfg, posterior_map=pmap, word_table=table, log=log)
    with open(os.path.join(opts["out"], "train.log"), "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))
    result.model.save(os.path.join(opts["out"], "checkpoint.json"), extra={
        "preset": opts.get("preset"),
        "split_seed": opts["seed"],
        "tolerance": tol,
        "train_config": tcfg.to_dict(),
        "history": result.history,
        "best_epoch": result.best_epoch,
    })
    return EXIT_OK


def _load_model(path):
    from .dataset import DataError
    from .model import ConfidenceModel

    try:
        return ConfidenceModel.load(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint ({exc})") from exc


def cmd_predict(opts: dict) -> int:
    from .dataset import build_samples, load_dataset

    model, extra = _load_model(opts["checkpoint"])
    _write_snapshot(opts["out"], "predict", opts, model_config=model.config.to_dict())
    utts = _split(load_dataset(opts["data"]), opts["split"], extra.get("split_seed", opts["seed"]))
    cfg = model.config
    samples = build_samples(utts, cfg.graph, cfg.one_best_source, extra.get("tolerance", 0.5))
    conf = model.predict(samples)
    with open(os.path.join(opts["out"], "confidences.txt"), "w", encoding="utf-8") as fh:
        for s, c in zip(samples, conf):
            idx = [i for i in range(len(s)) if s.scored[i]] if opts["all_arcs"] else s.path
            fh.write(" ".join([s.id, *(f"{s.words[i]}:{c[i]:.6f}" for i in idx)]) + "\n")
    return EXIT_OK


def cmd_evaluate(opts: dict) -> int:
    from .dataset import build_samples, load_dataset
    from .plotting import plot_pr_curve
    from .training import evaluate, evaluate_baseline, fit_calibration

    utts = load_dataset(opts["data"], need_references=True)
    if opts.get("checkpoint"):
        model, extra = _load_model(opts["checkpoint"])
        _write_snapshot(opts["out"], "evaluate", opts, model_config=model.config.to_dict())
        subset = _split(utts, opts["split"], extra.get("split_seed", opts["seed"]))
        cfg = model.config
        report = evaluate(model, build_samples(subset, cfg.graph, cfg.one_best_source, extra.get("tolerance", 0.5)),
                          opts["scope"])
        report.meta["split"] = opts["split"]
        if extra.get("preset"):
            report.meta["preset"] = extra["preset"]
    else:
        _write_snapshot(opts["out"], "evaluate", opts)
        subset = _split(utts, opts["split"], opts["seed"])
        pmap = None
        if opts["baseline"] == "mapped":
            if opts.get("posterior_map"):
                pmap = _read_map(opts["posterior_map"])
            else:
                pmap = fit_calibration(build_samples(_split(utts, "cv", opts["seed"]), opts["graph"]))
        report = evaluate_baseline(build_samples(subset, opts["graph"]), opts["baseline"], opts["scope"], pmap)
        report.meta.update(split=opts["split"], graph=opts["graph"])
    out = opts["out"]
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(os.path.join(out, "report.kv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_kv())
    with open(os.path.join(out, "pr_curve.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.curve_text())
    plot_pr_curve(report.pr_curve, os.path.join(out, "pr_curve.png"), report.prevalence,
                  title=f"PR curve ({report.meta.get('preset') or report.meta.get('baseline') or 'model'})")
    print(report.to_text(), end="")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "calibrate": cmd_calibrate, "train": cmd_train,
            "predict": cmd_predict, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    from .dataset import DataError
    from .lattice import LatticeError
    from .training import NumericError

    try:
        args = build_parser().parse_args(argv)
        opts = resolve_options(args)
        with threadpool_limits(limits=int(opts["threads"])):
            return COMMANDS[args.command](opts)
    except (UsageError, UnknownPresetError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, OverflowError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, LatticeError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
