"""Shared generators and brute-force oracles for the test-suite."""

from __future__ import annotations

import math

import numpy as np

from latconf.lattice import ConfusionNetwork, ConfusionSet, CNEntry, LatticeArc, LatticeNode, SubwordUnit, build_lattice

WORDS = ["the", "a", "cat", "cap", "sat", "sad", "on", "in", "mat", "map"]


def random_lattice(rng: np.random.Generator, max_paths: int = 64, utt: str = "u", subwords: bool = False):
    """Random DAG on a time-ordered backbone chain, rejected until it has <= max_paths paths."""
    while True:
        n = int(rng.integers(3, 8))
        times = np.round(np.cumsum(np.r_[0.0, rng.uniform(0.1, 0.5, n - 1)]), 4)
        pairs = [(i, i + 1) for i in range(n - 1)]
        for _ in range(int(rng.integers(0, 2 * n))):
            i = int(rng.integers(0, n - 1))
            j = int(rng.integers(i + 1, n))
            pairs.append((i, j))
        if count_paths(n, pairs) <= max_paths:
            break
    nodes = [LatticeNode(i, float(t)) for i, t in enumerate(times)]
    arcs = []
    for k, (i, j) in enumerate(pairs):
        word = WORDS[int(rng.integers(len(WORDS)))]
        units = ()
        if subwords:
            d = float(times[j] - times[i]) / len(word)
            units = tuple(SubwordUnit(ch, d) for ch in word)
        arcs.append(LatticeArc(k, i, j, word, float(rng.normal(-5, 2)), float(rng.normal(-2, 1)), None, units))
    return build_lattice(utt, nodes, arcs)


def count_paths(n: int, pairs) -> int:
    ways = [0] * n
    ways[0] = 1
    for i in range(n):
        for a, b in pairs:
            if a == i:
                ways[b] += ways[i]
    return ways[n - 1]


def enumerate_paths(lat):
    """All initial->final arc-id paths by depth-first search."""
    out_arcs = {}
    for a in lat.arcs:
        out_arcs.setdefault(a.start_node, []).append(a)
    paths = []

    def walk(node, acc):
        if node in lat.final_nodes:
            paths.append(list(acc))
        for a in out_arcs.get(node, ()):
            acc.append(a.id)
            walk(a.end_node, acc)
            acc.pop()

    walk(lat.initial_node, [])
    return paths


def brute_posteriors(lat, am_scale=1.0, lm_scale=1.0) -> dict[int, float]:
    arcs = {a.id: a for a in lat.arcs}
    paths = enumerate_paths(lat)
    scores = [math.fsum(am_scale * arcs[i].am_score + lm_scale * arcs[i].lm_score for i in p) for p in paths]
    top = max(scores)
    weights = [math.exp(s - top) for s in scores]
    total = math.fsum(weights)
    return {aid: math.fsum(w for p, w in zip(paths, weights) if aid in p) / total for aid in arcs}


def random_chain_cn(rng: np.random.Generator, utt: str = "c", subwords: bool = False) -> ConfusionNetwork:
    """Linear-chain CN: one entry per set."""
    t = 0.0
    sets = []
    for k in range(int(rng.integers(1, 9))):
        d = round(float(rng.uniform(0.1, 0.6)), 4)
        word = WORDS[int(rng.integers(len(WORDS)))]
        units = tuple(SubwordUnit(ch, d / len(word)) for ch in word) if subwords else ()
        sets.append(ConfusionSet(k, t, round(t + d, 4), (CNEntry(word, round(float(rng.uniform(0.05, 1.0)), 6), units),)))
        t = round(t + d, 4)
    return ConfusionNetwork(utt, tuple(sets))
