"""Synthetic references, confusion networks and lattices with controllable difficulty.

Each reference word is recognised correctly with a probability that depends
on three hidden factors: a per-word difficulty, the word's duration relative
to its expected length, and a sticky "hard region" state shared by
neighbouring words.  Averaged over the corpus that probability equals the
requested informativeness.  The recognised word heads its confusion set with
a posterior that is higher when it is correct; hard regions have more
competitors.  Lattices are time-aligned sausages in which every CN entry is
split over one or more parallel arcs, so linearising a lattice reproduces its
confusion network exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import Utterance
from .lattice import (
    CNEntry,
    ConfusionNetwork,
    ConfusionSet,
    LatticeArc,
    LatticeNode,
    SubwordUnit,
    build_lattice,
)

EPS = "<eps>"


@dataclass(frozen=True)
class SynthSpec:
    n_utterances: int = 1000
    vocab_size: int = 300
    alphabet: str = "abcdefghijklmnoprstu"
    mean_length: float = 8.0
    branching: tuple[float, ...] = (0.5, 0.5)  # P(0, 1, 2, ... competitors)
    informativeness: float = 0.62
    seed: int = 0
    lattice_copies: int = 2
    hard_fraction: float = 0.5
    stickiness: float = 0.75
    hard_extra_competitors: int = 3
    factor_weights: tuple[float, float, float] = (0.1, 0.15, 0.75)  # difficulty, duration, region

    def __post_init__(self):
        object.__setattr__(self, "branching", tuple(float(b) for b in self.branching))
        object.__setattr__(self, "factor_weights", tuple(float(w) for w in self.factor_weights))
        if len(self.factor_weights) != 3 or min(self.factor_weights) < 0 or sum(self.factor_weights) > 1 + 1e-12:
            raise ValueError("factor_weights must be three non-negative weights summing to <= 1")
        if self.hard_extra_competitors < 0:
            raise ValueError("hard_extra_competitors must be >= 0")
        if min(self.n_utterances, self.vocab_size, self.lattice_copies) < 1 or self.mean_length < 1:
            raise ValueError("sizes must be >= 1")
        if len(self.alphabet) < 2 or len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet needs >= 2 distinct symbols")
        for name in ("informativeness", "hard_fraction", "stickiness"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.branching or min(self.branching) < 0 or abs(sum(self.branching) - 1.0) > 1e-9:
            raise ValueError("branching must be a probability vector")
        if self.vocab_size < len(self.branching) + self.hard_extra_competitors + 1:
            raise ValueError("vocab_size too small for the branching factor")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branching"] = list(self.branching)
        d["factor_weights"] = list(self.factor_weights)
        return d


def make_vocabulary(spec: SynthSpec, rng: np.random.Generator) -> list[str]:
    words: set[str] = set()
    out = []
    while len(out) < spec.vocab_size:
        n = int(rng.integers(2, 8))
        w = "".join(rng.choice(list(spec.alphabet), size=n))
        if w not in words:
            words.add(w)
            out.append(w)
    return out


def _units(word: str, duration: float) -> tuple[SubwordUnit, ...]:
    share = duration / len(word)
    return tuple(SubwordUnit(ch, share) for ch in word)


class _Generator:
    def __init__(self, spec: SynthSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.vocab = make_vocabulary(spec, self.rng)
        ranks = np.arange(1, spec.vocab_size + 1)
        self.freq = (1.0 / ranks) / (1.0 / ranks).sum()
        delta = self.rng.uniform(-1.0, 1.0, spec.vocab_size)
        delta -= float(self.freq @ delta)
        self.difficulty = delta / np.abs(delta).max()
        h, s = spec.hard_fraction, spec.stickiness
        self.leave_hard = 1.0 - s if 0 < h < 1 else (0.0 if h == 1 else 1.0)
        self.enter_hard = self.leave_hard * h / (1.0 - h) if h < 1 else 1.0
        q = spec.informativeness
        self.amplitude = min(q, 1.0 - q)

    def utterance(self, index: int) -> Utterance:
        spec, rng = self.spec, self.rng
        uid = f"utt{index:06d}"
        length = 1 + int(rng.poisson(spec.mean_length - 1))
        ref_idx = rng.choice(spec.vocab_size, size=length, p=self.freq)
        hard = rng.random() < spec.hard_fraction
        sets, lat_nodes, lat_arcs = [], [LatticeNode(0, 0.0)], []
        t = 0.0
        for k, w in enumerate(ref_idx.tolist()):
            if k:
                hard = rng.random() >= self.leave_hard if hard else rng.random() < self.enter_hard
            word = self.vocab[w]
            noise = rng.normal(0.0, 0.25)
            duration = round(0.08 * len(word) * math.exp(noise), 4)
            region = -(1.0 - spec.hard_fraction) if hard else spec.hard_fraction
            wd, wt, wr = spec.factor_weights
            p_correct = spec.informativeness + self.amplitude * (
                wd * self.difficulty[w] + wt * float(np.clip(noise / 0.25, -2, 2)) / 2 + wr * region)
            correct = rng.random() < p_correct
            entries = self._confusion_set(w, correct, hard)
            start, end = round(t, 4), round(t + duration, 4)
            sets.append(ConfusionSet(k, start, end, tuple(
                CNEntry(wd, p, _units(wd, end - start)) for wd, p in entries if wd != EPS)))
            lat_nodes.append(LatticeNode(k + 1, end))
            for wd, p in entries:
                self._lattice_arcs(lat_arcs, k, wd, p, wd == word, end - start)
            t = end
        cn = ConfusionNetwork(uid, tuple(sets))
        lattice = build_lattice(uid, lat_nodes, lat_arcs)
        return Utterance(uid, cn, lattice, tuple(self.vocab[i] for i in ref_idx))

    def _confusion_set(self, w: int, correct: bool, hard: bool) -> list[tuple[str, float]]:
        rng = self.rng
        n_comp = int(rng.choice(len(self.spec.branching), p=self.spec.branching)) + self.spec.hard_extra_competitors * int(hard)
        others = [int(i) for i in rng.permutation(self.spec.vocab_size) if i != w]
        if correct:
            top_word = w
            p_top = 0.5 + 0.5 * rng.beta(3.0, 1.2)
            comp = others[:n_comp]
        else:
            top_word = others[0]
            p_top = 0.5 + 0.5 * rng.beta(1.5, 2.0)
            comp = others[1:1 + n_comp]
            if comp and rng.random() < 0.7:
                comp[0] = w
        p_top = round(p_top, 6)
        entries = [(self.vocab[top_word], p_top)]
        rest = 1.0 - p_top
        if comp:
            weights = rng.dirichlet(np.ones(len(comp)))
            if not correct and comp[0] == w:
                weights = 0.5 * weights + 0.5 * np.eye(len(comp))[0]
            shares = [math.floor(rest * float(x) * 1e6) / 1e6 for x in weights]
            for c, s in sorted(zip(comp, shares), key=lambda cs: -cs[1]):
                if s > 0:
                    entries.append((self.vocab[c], s))
        else:
            entries.append((EPS, round(rest, 6)))
        return entries

    def _lattice_arcs(self, arcs: list, k: int, word: str, p: float, is_ref: bool, duration: float):
        rng = self.rng
        copies = int(rng.integers(1, self.spec.lattice_copies + 1)) if word != EPS else 1
        shares = rng.dirichlet(np.ones(copies)) if copies > 1 else np.ones(1)
        units = _units(word, duration) if word != EPS else ()
        for share in shares:
            total = math.log(max(p * float(share), 1e-300))
            lm = round(-2.5 + (0.8 if is_ref else 0.0) + rng.normal(0.0, 0.7), 4)
            arcs.append(LatticeArc(len(arcs), k, k + 1, word, round(total - lm, 6), lm,
                                   p * float(share), units))


def generate(spec: SynthSpec) -> list[Utterance]:
    gen = _Generator(spec)
    return [gen.utterance(i) for i in range(spec.n_utterances)]
