"""Optimisation loop with early stopping, calibration and evaluation helpers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .dataset import Sample, selection_mask
from .features import PosteriorMap, fit_posterior_map
from .metrics import EvalReport, bce_loss, make_report, nce, pr_auc
from .model import ConfidenceModel, ModelConfig
from .nn import config_hash

OPTIMIZERS = ("adam", "sgd")
TAGGING_RULE = "levenshtein; off-path arcs by closest overlapping one-best midpoint"


class NumericError(ArithmeticError):
    """Training diverged (non-finite loss or parameters)."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    epochs: int = 10
    patience: int = 2
    clip_norm: float = 5.0
    batch_size: int = 32
    seed: int = 42

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.patience < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("need patience >= 0, epochs >= 1, batch_size >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr = params, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.value) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.value) for k, t in params.items()}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            self.params[k].value = self.params[k].value - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params: dict, lr: float):
        self.params, self.lr = params, lr

    def step(self, grads: dict):
        for k, g in grads.items():
            self.params[k].value = self.params[k].value - self.lr * g


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / norm)
    return norm


def fit_calibration(samples: Sequence[Sample], bins: int = 50) -> PosteriorMap:
    """Posterior map fitted on the one-best words of ``samples``."""
    post, tgt = [], []
    for s in samples:
        if s.targets is None:
            raise ValueError(f"{s.id}: calibration needs references")
        sel = selection_mask(s, "one-best")
        post.append(s.posterior[sel])
        tgt.append(s.targets[sel])
    if not post or sum(len(p) for p in post) == 0:
        raise ValueError("calibration set is empty")
    return fit_posterior_map(np.concatenate(post), np.concatenate(tgt), bins=min(bins, sum(len(p) for p in post)))


def scored_outputs(confidences: Sequence[np.ndarray], samples: Sequence[Sample], scope: str):
    conf, tgt = [], []
    for c, s in zip(confidences, samples):
        sel = selection_mask(s, scope)
        conf.append(c[sel])
        tgt.append(s.targets[sel])
    if not conf:
        raise ValueError("evaluation scope contains no words")
    return np.concatenate(conf), np.concatenate(tgt)


@dataclass
class TrainResult:
    model: ConfidenceModel
    history: list[dict]
    best_epoch: int
    stopped_early: bool


def train(train_samples: Sequence[Sample], cv_samples: Sequence[Sample], model_config: ModelConfig,
          train_config: TrainConfig, posterior_map: PosteriorMap | None = None,
          word_table=None, unit_table=None, log: Callable[[str], None] | None = None) -> TrainResult:
    """Minimise BCE over shuffled batches, keeping the parameters with the best cv NCE."""
    if not train_samples or not cv_samples:
        raise ValueError("training and cv sets must be non-empty")
    if any(s.targets is None for s in list(train_samples) + list(cv_samples)):
        raise ValueError("training needs references for every utterance")
    train_samples = [s for s in train_samples if s.lattice_ok] if model_config.use_lattice_features else list(train_samples)
    if not train_samples:
        raise ValueError("no training utterances with matched lattice features")
    if model_config.posterior_feature in ("mapped", "both") and posterior_map is None:
        posterior_map = fit_calibration(cv_samples)
    model = ConfidenceModel.create(model_config, train_samples, word_table, unit_table, posterior_map)
    params = model.store.trainable()
    opt = Adam(params, train_config.learning_rate) if train_config.optimizer == "adam" else SGD(params, train_config.learning_rate)
    rng = np.random.default_rng(train_config.seed)
    mode = model_config.loss_mode
    best, best_nce, best_epoch, waited = model.store.values(), -math.inf, 0, 0
    history: list[dict] = []
    stopped_early = False
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(len(train_samples))
        losses, weights = [], []
        for i in range(0, len(order), train_config.batch_size):
            batch = model.encode([train_samples[j] for j in order[i:i + train_config.batch_size]])
            mask = selection_mask(batch, mode)
            if not mask.any():
                continue
            model.store.zero_grad()
            loss = bce_loss(model.forward(batch), batch.targets, "one-best", mask)
            if not math.isfinite(float(loss.value)):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {i // train_config.batch_size}")
            loss.backward()
            grads = {k: t.grad for k, t in params.items() if t.grad is not None}
            clip_gradients(grads, train_config.clip_norm)
            opt.step(grads)
            losses.append(float(loss.value))
            weights.append(int(mask.sum()))
        if not all(np.isfinite(t.value).all() for t in params.values()):
            raise NumericError(f"non-finite parameters after epoch {epoch}")
        train_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        c, t = scored_outputs(model.predict(cv_samples), cv_samples, mode)
        cv_nce = nce(c, t)
        cv_auc = pr_auc(c, t)[0]
        history.append({"epoch": epoch, "train_loss": train_loss, "cv_nce": cv_nce, "cv_auc": cv_auc})
        if log:
            log(f"epoch={epoch} train_loss={train_loss:.6f} cv_nce={cv_nce:.6f} cv_auc={cv_auc:.6f}")
        if cv_nce > best_nce:
            best, best_nce, best_epoch, waited = model.store.values(), cv_nce, epoch, 0
        else:
            waited += 1
            if waited > train_config.patience:
                stopped_early = True
                break
    for k, v in best.items():
        model.store[k].value = v
    return TrainResult(model, history, best_epoch, stopped_early)


def evaluate(model: ConfidenceModel, samples: Sequence[Sample], scope: str = "one-best") -> EvalReport:
    conf = model.predict(samples)
    c, t = scored_outputs(conf, samples, scope)
    return make_report(c, t, config_hash(model.config.to_dict()), scope=scope,
                       tagging=TAGGING_RULE, graph=model.config.graph,
                       one_best_source=model.config.one_best_source)


BASELINES = ("posterior", "mapped", "oracle")


def evaluate_baseline(samples: Sequence[Sample], baseline: str, scope: str = "one-best",
                      posterior_map: PosteriorMap | None = None) -> EvalReport:
    """Score words without a model: raw posteriors, calibrated posteriors or the targets themselves."""
    if baseline not in BASELINES:
        raise ValueError(f"unknown baseline {baseline!r}; choose from {BASELINES}")
    if baseline == "mapped" and posterior_map is None:
        raise ValueError("the mapped baseline needs a posterior map")
    conf = []
    for s in samples:
        if baseline == "posterior":
            conf.append(s.posterior)
        elif baseline == "mapped":
            conf.append(np.asarray(posterior_map(s.posterior), dtype=float))
        else:
            conf.append(s.targets.astype(float))
    c, t = scored_outputs(conf, samples, scope)
    return make_report(c, t, f"baseline-{baseline}", scope=scope, tagging=TAGGING_RULE, baseline=baseline)
