"""Prompt schemes and learnable context assembly.

Five schemes: the bare class name, a generic photo template, a hand-crafted
dataset-specific template, stored per-class descriptions (pre-generated
offline and shipped as a JSON asset), and learnable context vectors prepended
to the class-name embedding and optimized through the frozen text encoder.
"""

import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import ConfigError, ValidationError
from .rng import stream
from .textenc import MAX_LEN, ToyTextEncoder, toy_tokenize


class PromptScheme(Enum):
    CLASSNAME = "classname"
    VANILLA = "vanilla"
    HAND_CRAFTED = "hand_crafted"
    GPT = "gpt"
    COOP = "coop"


DEFAULT_TEMPLATES = {
    PromptScheme.CLASSNAME: "{cls}",
    PromptScheme.VANILLA: "a photo of a {cls}.",
    PromptScheme.HAND_CRAFTED: "a photo of a {cls} breast tissue.",
}


@dataclass(frozen=True)
class PromptSpec:
    scheme: PromptScheme
    template: str | None = None
    per_class: Mapping[str, str] | None = None
    context_len: int = 0
    embed_dim: int = 0

    @classmethod
    def classname(cls) -> "PromptSpec":
        return cls(PromptScheme.CLASSNAME, template=DEFAULT_TEMPLATES[PromptScheme.CLASSNAME])

    @classmethod
    def vanilla(cls, template: str | None = None) -> "PromptSpec":
        return cls(PromptScheme.VANILLA,
                   template=template or DEFAULT_TEMPLATES[PromptScheme.VANILLA])

    @classmethod
    def hand_crafted(cls, template: str | None = None) -> "PromptSpec":
        return cls(PromptScheme.HAND_CRAFTED,
                   template=template or DEFAULT_TEMPLATES[PromptScheme.HAND_CRAFTED])

    @classmethod
    def gpt(cls, per_class: Mapping[str, str]) -> "PromptSpec":
        if not per_class:
            raise ConfigError("gpt scheme needs at least one per-class string")
        return cls(PromptScheme.GPT, per_class=MappingProxyType(dict(per_class)))

    @classmethod
    def coop(cls, context_len: int, embed_dim: int) -> "PromptSpec":
        if context_len < 1:
            raise ConfigError(f"context_len must be >= 1, got {context_len}")
        return cls(PromptScheme.COOP, context_len=context_len, embed_dim=embed_dim)


def render_prompt(spec: PromptSpec, classname: str) -> str:
    """The prompt string for one class under a fixed (non-learnable) scheme."""
    if spec.scheme is PromptScheme.COOP:
        raise ConfigError("coop prompts are embeddings, not strings")
    if spec.scheme is PromptScheme.GPT:
        if spec.per_class is None or classname not in spec.per_class:
            raise ConfigError(f"no stored prompt for class {classname!r}")
        return spec.per_class[classname]
    template = spec.template or DEFAULT_TEMPLATES[spec.scheme]
    return template.replace("{cls}", classname)


def load_prompt_assets(path=None) -> dict[str, dict[str, list[str]]]:
    """Prompt asset JSON: scheme name -> classname -> list of strings."""
    if path is None:
        with resources.files("pm2.assets").joinpath("bach_prompts.json").open("rb") as fh:
            return json.load(fh)
    with open(path, "rb") as fh:
        return json.load(fh)


def gpt_spec_from_assets(assets: dict, key: str, index: int = 0) -> PromptSpec:
    """Build a stored-description spec from one asset section."""
    if key not in assets:
        raise ConfigError(f"asset file has no scheme section {key!r}")
    try:
        per_class = {name: strings[index] for name, strings in assets[key].items()}
    except IndexError:
        raise ConfigError(f"asset section {key!r} has no string at index {index}")
    return PromptSpec.gpt(per_class)


@dataclass
class CoopContext:
    """Trainable context vectors shared across all classes."""

    context: np.ndarray  # (M, embed_dim)


def init_coop_context(context_len: int, embed_dim: int, seed: int, std: float = 0.02) -> CoopContext:
    rng = stream("coop/init", seed)
    return CoopContext(context=std * rng.normal(size=(context_len, embed_dim)))


def coop_assemble(ctx: CoopContext, class_token_embeddings, eos_embedding) -> np.ndarray:
    """Sequence [ctx_1 .. ctx_M, class tokens, EOS] as one embedded matrix."""
    cls_emb = np.atleast_2d(np.asarray(class_token_embeddings, dtype=np.float64))
    eos = np.asarray(eos_embedding, dtype=np.float64).reshape(1, -1)
    if cls_emb.shape[1] != ctx.context.shape[1] or eos.shape[1] != ctx.context.shape[1]:
        raise ValidationError("context, class and EOS embeddings disagree on dim")
    total = ctx.context.shape[0] + cls_emb.shape[0] + 1
    if total > MAX_LEN:
        raise ValidationError(f"assembled sequence length {total} exceeds {MAX_LEN}")
    return np.concatenate([ctx.context, cls_emb, eos], axis=0)


def class_token_embeddings(encoder: ToyTextEncoder, classname: str) -> np.ndarray:
    """Frozen embeddings of the class-name tokens (EOS excluded)."""
    ids = toy_tokenize(classname)[:-1]
    if not ids:
        raise ValidationError(f"class name {classname!r} has no tokens")
    return encoder.embed_ids(ids)


def encode_class_prompts(
    encoder: ToyTextEncoder, spec: PromptSpec, classnames: list[str]
) -> np.ndarray:
    """Text features for every class under a fixed scheme; (C, d_cls).

    The encoder is frozen and deterministic, so callers compute this once
    per run and reuse the result.
    """
    feats = []
    for name in classnames:
        ids = toy_tokenize(render_prompt(spec, name))
        feature, _ = encoder.forward_ids(ids)
        feats.append(feature)
    return np.stack(feats, axis=0)
