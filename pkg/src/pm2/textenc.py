"""Frozen toy transformer text encoder.

A byte-level stand-in for a real text tower: 257-symbol vocabulary (bytes
plus an end-of-sequence id), learned-position causal transformer blocks, and
a linear projection from the end-of-sequence hidden state into the joint
embedding space. All weights are generated once from a seed and never
trained; the backward pass therefore only propagates gradients to the INPUT
embeddings, which is exactly what learnable-context prompts need.

Determinism: same seed, same weights, bit-identical forward results.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .linalg import matmul, matvec
from .rng import stream

VOCAB_SIZE = 257
EOS_ID = 256
MAX_LEN = 77

_GELU_A = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715
_LN_EPS = 1e-5
_MASK_VALUE = -1e30


def toy_tokenize(s: str) -> list[int]:
    """UTF-8 bytes as ids 0..255, then EOS. Truncates to 77 ids, EOS last."""
    if not s:
        raise ValidationError("cannot tokenize an empty string")
    ids = list(s.encode("utf-8"))
    ids = ids[: MAX_LEN - 1]
    ids.append(EOS_ID)
    return ids


@dataclass(frozen=True)
class ToyTextEncoderConfig:
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_cls: int = 64
    ffn_mult: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )


def _layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std)

def _layernorm_backward(dy: np.ndarray, gamma: np.ndarray, saved) -> np.ndarray:
    xhat, inv_std = saved
    dxhat = dy * gamma
    return inv_std * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )


def _gelu(u: np.ndarray):
    inner = _GELU_A * (u + _GELU_C * u**3)
    t = np.tanh(inner)
    return 0.5 * u * (1.0 + t), t


def _gelu_backward(du_out: np.ndarray, u: np.ndarray, t: np.ndarray) -> np.ndarray:
    d_inner = _GELU_A * (1.0 + 3.0 * _GELU_C * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * d_inner)


class ToyTextEncoder:
    """Causal transformer with frozen, seed-generated weights."""

    def __init__(self, config: ToyTextEncoderConfig = ToyTextEncoderConfig()):
        self.config = config
        d = config.embed_dim
        ffn = config.ffn_mult * d
        self._names: list[str] = []
        self.weights: dict[str, np.ndarray] = {}

        def add(name: str, value: np.ndarray):
            value.setflags(write=False)
            self.weights[name] = value
            self._names.append(name)

        def gauss(name: str, shape, std: float) -> np.ndarray:
            return std * stream("toyenc/" + name, config.seed).normal(size=shape)

        add("tok_embed", gauss("tok_embed", (VOCAB_SIZE, d), 0.02))
        add("pos_embed", gauss("pos_embed", (MAX_LEN, d), 0.01))
        for i in range(config.n_layers):
            p = f"layer{i}."
            add(p + "ln1_g", np.ones(d))
            add(p + "ln1_b", np.zeros(d))
            for proj in ("wq", "wk", "wv", "wo"):
                add(p + proj, gauss(p + proj, (d, d), 1.0 / np.sqrt(d)))
                add(p + proj[1] + "_bias", np.zeros(d))
            add(p + "ln2_g", np.ones(d))
            add(p + "ln2_b", np.zeros(d))
            add(p + "w1", gauss(p + "w1", (d, ffn), 1.0 / np.sqrt(d)))
            add(p + "b1", np.zeros(ffn))
            add(p + "w2", gauss(p + "w2", (ffn, d), 1.0 / np.sqrt(ffn)))
            add(p + "b2", np.zeros(d))
        add("lnf_g", np.ones(d))
        add("lnf_b", np.zeros(d))
        add("out_proj", gauss("out_proj", (d, config.d_cls), 1.0 / np.sqrt(d)))

    def weight_checksum(self) -> str:
        """SHA-256 over all weights in their fixed order (freeze witness)."""
        h = hashlib.sha256()
        for name in self._names:
            h.update(name.encode())
            h.update(self.weights[name].tobytes())
        return h.hexdigest()

    def embed_ids(self, ids) -> np.ndarray:
        """Frozen token-embedding lookup."""
        idx = np.asarray(ids)
        if idx.ndim != 1 or idx.size == 0:
            raise ValidationError("ids must be a non-empty 1-D sequence")
        if idx.min() < 0 or idx.max() >= VOCAB_SIZE:
            raise ValidationError("token id out of range")
        return self.weights["tok_embed"][idx].astype(np.float64)

    def eos_embedding(self) -> np.ndarray:
        return self.weights["tok_embed"][EOS_ID].astype(np.float64)

    def forward_ids(self, ids):
        idx = list(ids)
        if not idx:
            raise ValidationError("empty token sequence")
        if idx[-1] != EOS_ID:
            raise ValidationError("token sequence must end with EOS")
        return self.forward_embedded(self.embed_ids(idx))

    def forward_embedded(self, x0):
        """Run the blocks on an already-embedded sequence (EOS row last)."""
        x0 = np.asarray(x0, dtype=np.float64)
        cfg = self.config
        if x0.ndim != 2 or x0.shape[1] != cfg.embed_dim:
            raise ShapeError(f"embedded sequence must be (S, {cfg.embed_dim})")
        s = x0.shape[0]
        if s == 0:
            raise ValidationError("empty sequence")
        if s > MAX_LEN:
            raise ValidationError(f"sequence length {s} exceeds {MAX_LEN}")
        w = self.weights
        d = cfg.embed_dim
        heads = cfg.n_heads
        hd = d // heads
        scale = 1.0 / np.sqrt(hd)
        mask = np.triu(np.full((s, s), _MASK_VALUE), k=1)

        x = x0 + w["pos_embed"][:s]
        layer_tapes = []
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            h1, ln1_saved = _layernorm(x, w[p + "ln1_g"], w[p + "ln1_b"])
            q = matmul(h1, w[p + "wq"]) + w[p + "q_bias"]
            k = matmul(h1, w[p + "wk"]) + w[p + "k_bias"]
            v = matmul(h1, w[p + "wv"]) + w[p + "v_bias"]
            ctx = np.zeros((s, d))
            attn_probs = []
            for h in range(heads):
                sl = slice(h * hd, (h + 1) * hd)
                scores = matmul(q[:, sl], k[:, sl].T) * scale + mask
                scores -= scores.max(axis=1, keepdims=True)
                e = np.exp(scores)
                probs = e / e.sum(axis=1, keepdims=True)
                attn_probs.append(probs)
                ctx[:, sl] = matmul(probs, v[:, sl])
            attn_out = matmul(ctx, w[p + "wo"]) + w[p + "o_bias"]
            x = x + attn_out
            h2, ln2_saved = _layernorm(x, w[p + "ln2_g"], w[p + "ln2_b"])
            u = matmul(h2, w[p + "w1"]) + w[p + "b1"]
            g, tanh_saved = _gelu(u)
            x = x + matmul(g, w[p + "w2"]) + w[p + "b2"]
            layer_tapes.append(
                {"ln1": ln1_saved, "q": q, "k": k, "v": v, "attn": attn_probs,
                 "ln2": ln2_saved, "u": u, "tanh": tanh_saved}
            )
        hf, lnf_saved = _layernorm(x, w["lnf_g"], w["lnf_b"])
        feature = matvec(w["out_proj"].T, hf[-1])
        tape = {"seq_len": s, "layers": layer_tapes, "lnf": lnf_saved}
        return feature, tape

    def backward_to_input(self, grad_feature, tape) -> np.ndarray:
        """Gradient of a scalar loss w.r.t. the input embeddings.

        Weights are frozen, so no weight gradients exist by design.
        """
        cfg = self.config
        w = self.weights
        g_feat = np.asarray(grad_feature, dtype=np.float64)
        if g_feat.shape != (cfg.d_cls,):
            raise ShapeError(f"grad feature must be ({cfg.d_cls},)")
        s = tape["seq_len"]
        d = cfg.embed_dim
        heads = cfg.n_heads
        hd = d // heads
        scale = 1.0 / np.sqrt(hd)

        grad_h = np.zeros((s, d))
        grad_h[-1] = matvec(w["out_proj"], g_feat)
        grad_x = _layernorm_backward(grad_h, w["lnf_g"], tape["lnf"])
        for i in range(cfg.n_layers - 1, -1, -1):
            p = f"layer{i}."
            lt = tape["layers"][i]
            # x = f_in + gelu(ln2(f_in) @ w1) @ w2
            grad_g = matmul(grad_x, w[p + "w2"].T)
            grad_u = _gelu_backward(grad_g, lt["u"], lt["tanh"])
            grad_h2 = matmul(grad_u, w[p + "w1"].T)
            grad_x = grad_x + _layernorm_backward(grad_h2, w[p + "ln2_g"], lt["ln2"])
            # x = a_in + attn(ln1(a_in))
            grad_ctx = matmul(grad_x, w[p + "wo"].T)
            q, k, v = lt["q"], lt["k"], lt["v"]
            grad_q = np.zeros((s, d))
            grad_k = np.zeros((s, d))
            grad_v = np.zeros((s, d))
            for h in range(heads):
                sl = slice(h * hd, (h + 1) * hd)
                probs = lt["attn"][h]
                g_ctx_h = grad_ctx[:, sl]
                g_probs = matmul(g_ctx_h, v[:, sl].T)
                grad_v[:, sl] = matmul(probs.T, g_ctx_h)
                g_scores = probs * (g_probs - (g_probs * probs).sum(axis=1, keepdims=True))
                grad_q[:, sl] = matmul(g_scores, k[:, sl]) * scale
                grad_k[:, sl] = matmul(g_scores.T, q[:, sl]) * scale
            grad_h1 = (
                matmul(grad_q, w[p + "wq"].T)
                + matmul(grad_k, w[p + "wk"].T)
                + matmul(grad_v, w[p + "wv"].T)
            )
            grad_x = grad_x + _layernorm_backward(grad_h1, w[p + "ln1_g"], lt["ln1"])
        return grad_x


def toy_text_encode(encoder: ToyTextEncoder, ids_or_embedded):
    """Encode token ids or an already-embedded (CoOp) sequence.

    Returns ``(feature, tape)``; the tape feeds ``backward_to_input``.
    """
    arr = np.asarray(ids_or_embedded)
    if arr.ndim == 2:
        return encoder.forward_embedded(arr)
    return encoder.forward_ids(ids_or_embedded)
