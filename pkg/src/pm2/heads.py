"""Classification heads over frozen dual-encoder features.

The image side combines a first-order term (the class token through a linear
classifier) with an optional token-statistics term: either the mean of the
projected visual tokens or their square-root-normalized covariance. The text
side applies the *same* classifier object to text features. Sharing by
object identity, not by copy, is what couples the two modalities during
training while keeping inference image-only.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .linalg import as_matrix, matmul, matvec
from .rng import stream
from .sopool import SoPoolConfig, SoPoolTape, sopool_backward, sopool_forward


class HeadMode(Enum):
    CLS_ONLY = "cls"
    CLS_PLUS_AVG = "cls+avg"
    CLS_PLUS_SO = "cls+so"

    @classmethod
    def from_string(cls, s: str) -> "HeadMode":
        for mode in cls:
            if mode.value == s:
                return mode
        raise ConfigError(f"unknown head mode {s!r}; expected one of "
                          f"{[m.value for m in cls]}")


@dataclass
class HeadParams:
    """Trainable parameters. ``shared_w``/``shared_b`` serve both the image
    class token and the text features; the remaining fields exist only for
    the token modes."""

    shared_w: np.ndarray  # (C, d_cls)
    shared_b: np.ndarray  # (C,)
    proj_weight: np.ndarray | None = None  # (d_tok, r)
    proj_bias: np.ndarray | None = None  # (r,)
    so_w: np.ndarray | None = None  # (C, r(r+1)/2) for cls+so, (C, r) for cls+avg
    so_b: np.ndarray | None = None  # (C,)

    def param_dict(self) -> dict[str, np.ndarray]:
        out = {"shared_w": self.shared_w, "shared_b": self.shared_b}
        for name in ("proj_weight", "proj_bias", "so_w", "so_b"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(value) for name, value in self.param_dict().items()}


def _row_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_head_params(
    mode: HeadMode,
    n_classes: int,
    d_cls: int,
    d_tok: int | None = None,
    sopool: SoPoolConfig | None = None,
    seed: int = 0,
    init_shared_from: np.ndarray | None = None,
) -> HeadParams:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, zero biases.

    ``init_shared_from`` (C, d_cls) copies per-class text features into the
    shared classifier rows instead of random init.
    """
    if init_shared_from is not None:
        shared = np.asarray(init_shared_from, dtype=np.float64)
        if shared.shape != (n_classes, d_cls):
            raise ShapeError(
                f"init features shape {shared.shape} != ({n_classes}, {d_cls})"
            )
        shared_w = shared.copy()
    else:
        shared_w = _row_uniform(stream("init/shared_w", seed), n_classes, d_cls)
    params = HeadParams(shared_w=shared_w, shared_b=np.zeros(n_classes))
    if mode is HeadMode.CLS_ONLY:
        return params
    if d_tok is None or sopool is None:
        raise ConfigError(f"mode {mode.value} needs d_tok and a sopool config")
    r = sopool.reduced_dim
    # Stored as (d_tok, r) so projection is tokens @ W; init rows have
    # fan_in d_tok, hence the transpose.
    params.proj_weight = _row_uniform(stream("init/proj_weight", seed), r, d_tok).T.copy()
    params.proj_bias = np.zeros(r)
    so_dim = r if mode is HeadMode.CLS_PLUS_AVG else sopool.feature_dim
    params.so_w = _row_uniform(stream("init/so_w", seed), n_classes, so_dim)
    params.so_b = np.zeros(n_classes)
    return params


def project_tokens(tokens, params: HeadParams) -> np.ndarray:
    """Per-token affine map into the reduced dimension."""
    t = as_matrix(tokens, "tokens")
    if params.proj_weight is None or params.proj_bias is None:
        raise ConfigError("head parameters carry no token projection")
    if t.shape[1] != params.proj_weight.shape[0]:
        raise ShapeError(
            f"token dim {t.shape[1]} != projection input dim {params.proj_weight.shape[0]}"
        )
    return matmul(t, params.proj_weight) + params.proj_bias


@dataclass
class VisualTape:
    """Saved forward state for visual_logits_backward."""

    mode: HeadMode
    cls_token: np.ndarray
    raw_tokens: np.ndarray | None = None
    projected: np.ndarray | None = None
    pooled: np.ndarray | None = None  # avg-mode mean or so-mode features
    sopool_tape: SoPoolTape | None = None


def visual_logits(
    cls_token,
    tokens,
    params: HeadParams,
    mode: HeadMode,
    cfg: SoPoolConfig | None = None,
) -> tuple[np.ndarray, VisualTape]:
    """Image-side logits: shared classifier on the class token, plus the
    configured token-statistics term."""
    cls_vec = np.asarray(cls_token, dtype=np.float64)
    if cls_vec.ndim != 1 or cls_vec.size != params.shared_w.shape[1]:
        raise ShapeError(
            f"class token dim {cls_vec.shape} incompatible with shared classifier "
            f"{params.shared_w.shape}"
        )
    logits = matvec(params.shared_w, cls_vec) + params.shared_b
    tape = VisualTape(mode=mode, cls_token=cls_vec)
    if mode is HeadMode.CLS_ONLY:
        return logits, tape
    if params.so_w is None or params.so_b is None:
        raise ConfigError(f"mode {mode.value} needs second-head parameters")
    if tokens is None:
        raise ConfigError(f"mode {mode.value} needs visual tokens")
    raw = as_matrix(tokens, "tokens")
    projected = project_tokens(raw, params)
    tape.raw_tokens = raw
    tape.projected = projected
    if mode is HeadMode.CLS_PLUS_AVG:
        pooled = projected.mean(axis=0)
    else:
        if cfg is None:
            raise ConfigError("cls+so mode needs a SoPoolConfig")
        pooled, tape.sopool_tape = sopool_forward(projected, cfg)
    if params.so_w.shape[1] != pooled.size:
        raise ShapeError(
            f"second-head width {params.so_w.shape[1]} != feature length {pooled.size}"
        )
    tape.pooled = pooled
    return logits + matvec(params.so_w, pooled) + params.so_b, tape


def visual_logits_backward(
    grad_logits, tape: VisualTape, params: HeadParams, grads: dict[str, np.ndarray]
) -> None:
    """Accumulate d(loss)/d(params) given d(loss)/d(logits) for one image."""
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != (params.shared_w.shape[0],):
        raise ShapeError(f"gradient shape {g.shape} != logits shape")
    grads["shared_w"] += np.outer(g, tape.cls_token)
    grads["shared_b"] += g
    if tape.mode is HeadMode.CLS_ONLY:
        return
    grads["so_w"] += np.outer(g, tape.pooled)
    grads["so_b"] += g
    grad_pooled = matvec(params.so_w.T, g)
    if tape.mode is HeadMode.CLS_PLUS_AVG:
        n = tape.projected.shape[0]
        grad_projected = np.tile(grad_pooled / n, (n, 1))
    else:
        grad_projected = sopool_backward(grad_pooled, tape.sopool_tape)
    grads["proj_weight"] += matmul(tape.raw_tokens.T, grad_projected)
    grads["proj_bias"] += grad_projected.sum(axis=0)


def text_logits(text_feature, params: HeadParams) -> np.ndarray:
    """Text-side logits through the shared classifier (same object as the
    image first-order path)."""
    f = np.asarray(text_feature, dtype=np.float64)
    if f.ndim != 1 or f.size != params.shared_w.shape[1]:
        raise ShapeError(
            f"text feature dim {f.shape} incompatible with shared classifier "
            f"{params.shared_w.shape}"
        )
    return matvec(params.shared_w, f) + params.shared_b


def text_logits_backward(
    grad_logits, text_feature, params: HeadParams, grads: dict[str, np.ndarray]
) -> np.ndarray:
    """Accumulate shared-classifier gradients; returns d(loss)/d(feature)."""
    g = np.asarray(grad_logits, dtype=np.float64)
    f = np.asarray(text_feature, dtype=np.float64)
    grads["shared_w"] += np.outer(g, f)
    grads["shared_b"] += g
    return matvec(params.shared_w.T, g)


def zero_shot_probs(cls_token, class_text_features, temperature: float = 0.01) -> np.ndarray:
    """Softmax over cosine similarities scaled by 1/temperature."""
    if not temperature > 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    x = np.asarray(cls_token, dtype=np.float64)
    feats = as_matrix(class_text_features, "class text features")
    if x.ndim != 1 or feats.shape[1] != x.size:
        raise ShapeError(
            f"class token {x.shape} incompatible with text features {feats.shape}"
        )
    x_norm = float(np.sqrt(np.sum(x * x)))
    f_norms = np.sqrt(np.sum(feats * feats, axis=1))
    if x_norm == 0.0 or np.any(f_norms == 0.0):
        raise ValidationError("zero-norm vector has no cosine similarity")
    sims = matvec(feats, x) / (f_norms * x_norm)
    scaled = sims / temperature
    scaled -= scaled.max()
    e = np.exp(scaled)
    return e / e.sum()
