"""Binary cross-entropy, normalised cross-entropy and precision-recall AUC."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import autodiff as ad

CLAMP = 1e-10


def clamp(c):
    return np.clip(np.asarray(c, dtype=float), CLAMP, 1.0 - CLAMP)


def _selected(n: int, mode: str, one_best_mask) -> np.ndarray:
    if mode == "all-arcs":
        sel = np.arange(n)
    elif mode == "one-best":
        if one_best_mask is None:
            raise ValueError("one-best mode needs a one-best mask")
        mask = np.asarray(one_best_mask, dtype=bool)
        if mask.shape != (n,):
            raise ValueError(f"mask has shape {mask.shape}, expected ({n},)")
        sel = np.flatnonzero(mask)
    else:
        raise ValueError(f"unknown loss mode {mode!r}; choose one-best or all-arcs")
    if len(sel) == 0:
        raise ValueError("loss selection is empty")
    return sel


def bce_loss(confidences, targets, mode: str = "all-arcs", one_best_mask=None) -> ad.Tensor:
    """Mean binary cross-entropy over the selected arcs (differentiable).

    Confidences are clamped to [1e-10, 1 - 1e-10] inside the loss only.
    """
    c = ad.as_tensor(confidences)
    t = np.asarray(targets, dtype=float)
    if c.shape != t.shape or c.value.ndim != 1:
        raise ValueError(f"{c.shape} confidences vs {t.shape} targets")
    sel = _selected(len(t), mode, one_best_mask)
    cs = ad.clip(ad.gather_rows(c, sel), CLAMP, 1.0 - CLAMP)
    ts = t[sel]
    ll = ad.add(ad.mul(ad.log(cs), ts), ad.mul(ad.log(ad.sub(1.0, cs)), 1.0 - ts))
    return ad.scale(ad.mean_all(ll), -1.0)


def log_loss(confidences, targets) -> float:
    """Summed natural-log cross-entropy with clamping, accumulated exactly-rounded."""
    c = clamp(confidences)
    t = np.asarray(targets, dtype=float)
    terms = np.where(t > 0.5, np.log(c), np.log1p(-c))
    return -math.fsum(terms.tolist())


def nce(confidences, targets) -> float:
    """(H(p) - H(c)) / H(p) with p the fraction of correct words."""
    c = np.asarray(confidences, dtype=float)
    t = np.asarray(targets, dtype=float)
    if c.shape != t.shape or c.ndim != 1 or len(c) == 0:
        raise ValueError(f"{c.shape} confidences vs {t.shape} targets")
    n1 = int(np.count_nonzero(t > 0.5))
    if n1 == 0 or n1 == len(t):
        raise ValueError("NCE undefined: all targets are equal")
    h_prior = log_loss(np.full(len(t), n1 / len(t)), t)
    return (h_prior - log_loss(c, t)) / h_prior


def pr_auc(confidences, targets) -> tuple[float, list[tuple[float, float]]]:
    """Average precision with correct words as positives, plus the PR curve.

    Items are ranked by descending confidence; tied confidences form one block
    that enters the sum once, at the precision reached after the whole block.
    A constant classifier therefore scores exactly the prevalence.  The sum is
    accumulated in rationals so that exact identities survive.
    """
    c = np.asarray(confidences, dtype=float)
    t = np.asarray(targets, dtype=float) > 0.5
    if c.shape != t.shape or c.ndim != 1:
        raise ValueError(f"{c.shape} confidences vs {t.shape} targets")
    n_pos = int(t.sum())
    if n_pos == 0:
        raise ValueError("PR-AUC undefined: no positive targets")
    order = np.argsort(-c, kind="stable")
    cs, ts = c[order], t[order]
    ends = np.flatnonzero(np.r_[cs[1:] != cs[:-1], True]) + 1
    tp_at = np.cumsum(ts)[ends - 1]
    ap = Fraction(0)
    curve = []
    prev_tp = 0
    for end, tp in zip(ends.tolist(), tp_at.tolist()):
        if tp > prev_tp:
            ap += Fraction(tp - prev_tp, n_pos) * Fraction(tp, end)
        curve.append((tp / n_pos, tp / end))
        prev_tp = tp
    return float(ap), curve


@dataclass
class EvalReport:
    nce: float
    pr_auc: float
    prevalence: float
    pr_curve: list[tuple[float, float]]
    n_words: int
    config_hash: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.pr_auc <= 1.0 and 0.0 <= self.prevalence <= 1.0):
            raise ValueError("pr_auc and prevalence must lie in [0, 1]")

    def fields(self) -> list[tuple[str, str]]:
        rows = [
            ("nce", repr(self.nce)),
            ("pr_auc", repr(self.pr_auc)),
            ("prevalence", repr(self.prevalence)),
            ("n_words", str(self.n_words)),
            ("config_hash", self.config_hash),
        ]
        return rows + [(k, str(v)) for k, v in sorted(self.meta.items())]

    def to_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.fields())

    def to_text(self) -> str:
        lines = ["Confidence evaluation", "=" * 21]
        lines += [f"{k:<16} {v}" for k, v in self.fields()]
        lines.append(f"{'curve_points':<16} {len(self.pr_curve)}")
        return "\n".join(lines) + "\n"

    def curve_text(self) -> str:
        return "# recall precision\n" + "".join(f"{r!r} {p!r}\n" for r, p in self.pr_curve)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def make_report(confidences: Sequence[float], targets: Sequence[float], config_hash: str = "-",
                **meta) -> EvalReport:
    c = np.asarray(confidences, dtype=float)
    t = np.asarray(targets, dtype=float)
    if len(t) == 0:
        raise ValueError("evaluation scope contains no words")
    auc, curve = pr_auc(c, t)
    n1 = int(np.count_nonzero(t > 0.5))
    return EvalReport(nce(c, t), auc, n1 / len(t), curve, len(t), config_hash, dict(meta))
