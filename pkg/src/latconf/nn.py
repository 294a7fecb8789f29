"""Recurrent cells, attention scoring and the parameter container."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT = "latconf-checkpoint"
CHECKPOINT_VERSION = 1
MECHANISMS = ("dot", "mult", "add")
CELLS = ("gru", "rnn")


def _rows(x) -> Tensor:
    x = ad.as_tensor(x)
    if x.value.ndim == 1:
        if x.requires_grad:
            raise ValueError("pass row-batched (N, D) tensors when gradients are tracked")
        return Tensor(x.value[None, :])
    return x


@dataclass
class ParamStore:
    """Named trainable tensors plus the seed they were drawn with."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)
    seed: int = 42

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"parameter {name!r} already defined")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self.tensors[name] = t
        if not trainable:
            self.frozen.add(name)
        return t

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if k not in self.frozen}

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def sub(self, prefix: str) -> dict[str, Tensor]:
        """View of parameters under ``prefix.`` with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: t for k, t in self.tensors.items() if k.startswith(prefix + ".")}

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.tensors.items()}


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_cell(store: ParamStore, rng, prefix: str, cell: str, input_size: int, hidden: int):
    if cell == "gru":
        store.add(f"{prefix}.W_x", uniform_init(rng, (3 * hidden, input_size), input_size))
        store.add(f"{prefix}.W_h", uniform_init(rng, (3 * hidden, hidden), hidden))
        store.add(f"{prefix}.b_x", uniform_init(rng, (3 * hidden,), hidden))
        store.add(f"{prefix}.b_h", uniform_init(rng, (3 * hidden,), hidden))
    elif cell == "rnn":
        store.add(f"{prefix}.W_x", uniform_init(rng, (hidden, input_size), input_size))
        store.add(f"{prefix}.W_h", uniform_init(rng, (hidden, hidden), hidden))
    else:
        raise ValueError(f"unknown cell type {cell!r}; choose from {CELLS}")


def add_attention(store: ParamStore, rng, prefix: str, mechanism: str, state_size: int,
                  key_size: int, attention_size: int):
    if mechanism == "mult":
        store.add(f"{prefix}.W_m", uniform_init(rng, (state_size, state_size), state_size))
    elif mechanism == "add":
        store.add(f"{prefix}.W_q", uniform_init(rng, (attention_size, key_size + state_size), key_size + state_size))
        store.add(f"{prefix}.w_a", uniform_init(rng, (attention_size,), attention_size))
    elif mechanism != "dot":
        raise ValueError(f"unknown attention mechanism {mechanism!r}; choose from {MECHANISMS}")


# --------------------------------------------------------------------------
# cells


def rnn_cell(h_prev, x, params: dict[str, Tensor]) -> Tensor:
    """Plain recurrence tanh(W_h h_prev + W_x x), row-batched."""
    h_prev, x = _rows(h_prev), _rows(x)
    return ad.tanh(ad.add(ad.linear(h_prev, params["W_h"]), ad.linear(x, params["W_x"])))


def gru_cell(h_prev, x, params: dict[str, Tensor]) -> Tensor:
    """Update/reset-gate GRU: h = (1 - z) * n + z * h_prev."""
    h_prev, x = _rows(h_prev), _rows(x)
    hidden = params["W_h"].shape[1]
    if h_prev.shape[1] != hidden:
        raise ValueError(f"shape mismatch: state {h_prev.shape} for hidden size {hidden}")
    gx = ad.linear(x, params["W_x"], params["b_x"])
    gh = ad.linear(h_prev, params["W_h"], params["b_h"])
    r = ad.sigmoid(ad.add(ad.slice_cols(gx, 0, hidden), ad.slice_cols(gh, 0, hidden)))
    z = ad.sigmoid(ad.add(ad.slice_cols(gx, hidden, 2 * hidden), ad.slice_cols(gh, hidden, 2 * hidden)))
    n = ad.tanh(ad.add(ad.slice_cols(gx, 2 * hidden, 3 * hidden), ad.mul(r, ad.slice_cols(gh, 2 * hidden, 3 * hidden))))
    return ad.add(n, ad.mul(z, ad.sub(h_prev, n)))


def cell_fn(cell: str):
    return {"gru": gru_cell, "rnn": rnn_cell}[cell]


# --------------------------------------------------------------------------
# attention


def attention_scores(states, keys, mechanism: str, params: dict[str, Tensor] | None = None) -> Tensor:
    """One score per row of ``states``.

    ``dot`` is the scaled squared norm h.h / sqrt(dim): each state is scored
    against itself, there is no separate query.  ``mult`` is h^T W_m h and
    ``add`` is sigmoid(w_a . tanh(W_q [k; h])).
    """
    states = _rows(states)
    if mechanism == "dot":
        return ad.scale(ad.row_dot(states, states), 1.0 / math.sqrt(states.shape[1]))
    if mechanism == "mult":
        return ad.row_dot(ad.linear(states, params["W_m"]), states)
    if mechanism == "add":
        if keys is None:
            raise ValueError("additive attention needs keys")
        query = ad.concat([_rows(keys), states], axis=1)
        return ad.sigmoid(ad.project(ad.tanh(ad.linear(query, params["W_q"])), params["w_a"]))
    raise ValueError(f"unknown attention mechanism {mechanism!r}")


def attention_pool(states: Tensor, scores: Tensor, offsets) -> Tensor:
    """Softmax-weighted sum of rows within contiguous groups."""
    alpha = ad.segment_softmax(scores, offsets)
    return ad.segment_sum(ad.mul(states, ad.column(alpha)), offsets)


def attention_combine(states, scores) -> tuple[Tensor, Tensor]:
    """Combine a non-empty set of states; returns (combined vector, weights)."""
    states = _rows(states)
    scores = ad.as_tensor(scores)
    if states.shape[0] == 0:
        raise ValueError("attention over an empty state set")
    if scores.shape != (states.shape[0],):
        raise ValueError(f"shape mismatch: {scores.shape} scores for {states.shape[0]} states")
    alpha = ad.softmax(scores)
    combined = ad.segment_sum(ad.mul(states, ad.column(alpha)), [0])
    return combined, alpha


# --------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, store: ParamStore, config: dict, extra: dict | None = None):
    """Write a JSON checkpoint.

    Layout: {"format", "version", "seed", "config", "config_hash", "extra",
    "tensors": {name: {"shape", "trainable", "values" (row-major floats)}}}.
    Floats are written with Python's shortest round-trip repr so loading
    reproduces every value exactly.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": store.seed,
        "config": config,
        "config_hash": config_hash(config),
        "extra": extra or {},
        "tensors": {
            name: {
                "shape": list(t.shape),
                "trainable": name not in store.frozen,
                "values": t.value.reshape(-1).tolist(),
            }
            for name, t in sorted(store.tensors.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ParamStore, dict, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    if config_hash(doc["config"]) != doc["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    store = ParamStore(seed=doc["seed"])
    for name, t in doc["tensors"].items():
        store.add(name, np.array(t["values"], dtype=np.float64).reshape(t["shape"]), trainable=t["trainable"])
    return store, doc["config"], doc["extra"]
