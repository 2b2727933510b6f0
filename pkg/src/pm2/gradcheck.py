"""Central-difference verification of the hand-written backward passes.

Each check builds a scalar loss (a fixed random weighting of the relevant
logits or features), computes the analytic gradient through the backward
path, and compares sampled coordinates against (f(x+h) - f(x-h)) / 2h in
double precision.
"""

import numpy as np

from .heads import (
    HeadMode,
    init_head_params,
    text_logits,
    text_logits_backward,
    visual_logits,
    visual_logits_backward,
)
from .prompts import class_token_embeddings, coop_assemble, init_coop_context
from .rng import stream
from .sopool import SoPoolConfig, sopool_backward, sopool_forward
from .textenc import ToyTextEncoder, ToyTextEncoderConfig

FD_STEP = 1e-5


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def _central_diff(fn, array: np.ndarray, flat_index: int, h: float = FD_STEP) -> float:
    flat = array.reshape(-1)
    original = flat[flat_index]
    flat[flat_index] = original + h
    up = fn()
    flat[flat_index] = original - h
    down = fn()
    flat[flat_index] = original
    return (up - down) / (2.0 * h)


def check_sopool(n_coords: int = 120, seed: int = 0) -> float:
    """Pooled-feature gradient w.r.t. the input tokens."""
    cfg = SoPoolConfig(reduced_dim=4, ns_iterations=3)
    rng = stream("gradcheck/sopool", seed)
    worst = 0.0
    checked = 0
    while checked < n_coords:
        tokens = rng.normal(size=(6, cfg.reduced_dim))
        weights = rng.normal(size=cfg.feature_dim)

        def loss() -> float:
            features, _ = sopool_forward(tokens, cfg)
            return float(weights @ features)

        features, tape = sopool_forward(tokens, cfg)
        analytic = sopool_backward(weights, tape)
        for flat_index in range(tokens.size):
            numeric = _central_diff(loss, tokens, flat_index)
            worst = max(worst, rel_err(analytic.reshape(-1)[flat_index], numeric))
            checked += 1
    return worst


def check_visual_head(
    n_coords: int = 120, seed: int = 0, mode: HeadMode = HeadMode.CLS_PLUS_SO
) -> float:
    """Full visual head gradient w.r.t. every trainable parameter."""
    rng = stream("gradcheck/head", seed)
    n_classes, d_cls, d_tok, n_tokens = 3, 6, 10, 8
    cfg = SoPoolConfig(reduced_dim=4, ns_iterations=3)
    params = init_head_params(mode, n_classes, d_cls, d_tok, cfg, seed=seed)
    params.shared_b += 0.1 * rng.normal(size=n_classes)
    params.so_b += 0.1 * rng.normal(size=n_classes)
    cls_token = rng.normal(size=d_cls)
    tokens = rng.normal(size=(n_tokens, d_tok))
    weights = rng.normal(size=n_classes)

    def loss() -> float:
        logits, _ = visual_logits(cls_token, tokens, params, mode, cfg)
        return float(weights @ logits)

    _, tape = visual_logits(cls_token, tokens, params, mode, cfg)
    grads = params.zero_grads()
    visual_logits_backward(weights, tape, params, grads)

    # Round-robin over parameter names so every array is exercised.
    names = sorted(grads)
    worst = 0.0
    for i in range(n_coords):
        name = names[i % len(names)]
        arr = getattr(params, name)
        flat_index = int(rng.integers(arr.size))
        numeric = _central_diff(loss, arr, flat_index)
        worst = max(worst, rel_err(grads[name].reshape(-1)[flat_index], numeric))
    return worst


def check_coop(n_coords: int = 120, seed: int = 0) -> float:
    """Context -> frozen encoder -> shared head gradient."""
    rng = stream("gradcheck/coop", seed)
    enc = ToyTextEncoder(ToyTextEncoderConfig(embed_dim=32, n_layers=2, n_heads=4,
                                              d_cls=12, seed=seed))
    n_classes = 2
    params = init_head_params(HeadMode.CLS_ONLY, n_classes, d_cls=12, seed=seed)
    ctx = init_coop_context(4, 32, seed)
    cls_emb = class_token_embeddings(enc, "tissue")
    eos = enc.eos_embedding()
    weights = rng.normal(size=n_classes)

    def loss() -> float:
        seq = coop_assemble(ctx, cls_emb, eos)
        feature, _ = enc.forward_embedded(seq)
        return float(weights @ text_logits(feature, params))

    seq = coop_assemble(ctx, cls_emb, eos)
    feature, enc_tape = enc.forward_embedded(seq)
    grads = params.zero_grads()
    grad_feature = text_logits_backward(weights, feature, params, grads)
    grad_seq = enc.backward_to_input(grad_feature, enc_tape)
    grads["coop_ctx"] = grad_seq[:4]

    targets = [("coop_ctx", ctx.context), ("shared_w", params.shared_w),
               ("shared_b", params.shared_b)]
    worst = 0.0
    for i in range(n_coords):
        name, arr = targets[i % len(targets)]
        flat_index = int(rng.integers(arr.size))
        numeric = _central_diff(loss, arr, flat_index)
        worst = max(worst, rel_err(grads[name].reshape(-1)[flat_index], numeric))
    return worst


CHECKS = {"sopool": check_sopool, "head": check_visual_head, "coop": check_coop}
