"""Named model configurations forming the feature-ablation ladders.

Each ladder adds one ingredient per step.  Within the feature ladders
(``words`` ... ``+mapping``, the sub-word ladder, and the lattice ladder) every
preset has a strictly larger input dimension than its predecessor; the
confusion ladder varies the graph and the loss, not the features.
"""

from __future__ import annotations

from .model import ModelConfig

_WORDS = dict(graph="one-best", use_embedding=True, use_duration=False, posterior_feature="none")
_DUR = dict(_WORDS, use_duration=True)
_POST = dict(_DUR, posterior_feature="raw")
_MAP = dict(_DUR, posterior_feature="both")
_SW_EMB = dict(_MAP, use_subwords=True, subword_mode="direct-features", subword_inputs=("embedding",))
_SW_DUR = dict(_SW_EMB, subword_inputs=("embedding", "duration"))
_ENC = dict(_SW_DUR, subword_mode="encoder")
_CN1 = dict(_POST, graph="cn", loss_mode="one-best")
_CNCN = dict(_CN1, loss_mode="all-arcs")
_CNSW = dict(_CN1, use_subwords=True, subword_mode="encoder", subword_inputs=("embedding", "duration"))
_LAT = dict(_CNSW, use_lattice_features=True)

PRESETS: dict[str, dict] = {
    "words": _WORDS,
    "+duration": _DUR,
    "+posteriors": _POST,
    "+mapping": _MAP,
    "+subword-embedding": _SW_EMB,
    "+subword-duration": _SW_DUR,
    "+encoder": _ENC,
    "cn-1best": _CN1,
    "cn-cn": _CNCN,
    "cn-subword": _CNSW,
    "+lattice": _LAT,
}

LADDERS: dict[str, list[str]] = {
    "word-features": ["words", "+duration", "+posteriors", "+mapping"],
    "subword-features": ["+mapping", "+subword-embedding", "+subword-duration", "+encoder"],
    "confusions": ["+posteriors", "cn-1best", "cn-cn"],
    "lattice-features": ["cn-1best", "cn-subword", "+lattice"],
}
FEATURE_LADDERS = ("word-features", "subword-features", "lattice-features")


class UnknownPresetError(KeyError):
    def __str__(self):
        return f"unknown preset {self.args[0]!r}; available presets: {', '.join(PRESETS)}"


def preset_overrides(name: str) -> dict:
    if name not in PRESETS:
        raise UnknownPresetError(name)
    return dict(PRESETS[name])


def preset_config(name: str, **overrides) -> ModelConfig:
    """ModelConfig for ``name``; keyword overrides win over the preset."""
    return ModelConfig(**{**preset_overrides(name), **overrides})
