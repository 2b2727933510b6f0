"""Dual-encoder backbones.

Two kinds: a deterministic simulated encoder with ViT-B/16 geometry
(224x224 input, 16x16 patches -> 196 tokens of width 768, joint space 512),
generated from a fixed seed and useful wherever pretrained weights are not
available; and a real CLIP encoder loaded through transformers when local
weights exist. Both expose the same interface:

    n_tokens, d_tok, d_cls, weights_id
    encode_image(path) -> (cls_token float32 (d_cls,), tokens float32 (N, d_tok))
    encode_text(text)  -> float32 (d_cls,)
"""

import hashlib

import numpy as np

from .preprocess import load_image_array

IMAGE_SIZE = 224
PATCH = 16


class SetupError(RuntimeError):
    """Backbone prerequisites (weights, optional deps) are missing."""


def _keyed_gaussian(name: str, shape, scale: float) -> np.ndarray:
    digest = hashlib.blake2b(name.encode(), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return scale * rng.normal(size=shape)


class SimulatedViTB16:
    """Seeded random-projection encoder with ViT-B/16 shapes.

    Not a trained model: a stand-in that is deterministic, fast, and emits
    the exact header geometry a real ViT-B/16 export would.
    """

    name = "sim-vit-b16"
    n_tokens = (IMAGE_SIZE // PATCH) ** 2  # 196
    d_tok = PATCH * PATCH * 3  # 768
    d_cls = 512

    def __init__(self, seed_tag: str = "v1"):
        self.weights_id = f"{self.name}:{seed_tag}"
        self._patch_proj = _keyed_gaussian(
            f"{self.weights_id}/patch", (self.d_tok, self.d_tok), 1.0 / np.sqrt(self.d_tok)
        )
        self._cls_proj = _keyed_gaussian(
            f"{self.weights_id}/cls", (self.d_tok, self.d_cls), 1.0 / np.sqrt(self.d_tok)
        )
        self._tok_embed = _keyed_gaussian(f"{self.weights_id}/text_embed", (257, 64), 1.0)
        self._text_proj = _keyed_gaussian(
            f"{self.weights_id}/text_proj", (64, self.d_cls), 1.0 / 8.0
        )

    def encode_image(self, path):
        pixels = load_image_array(path, IMAGE_SIZE)  # (224, 224, 3) float64
        grid = IMAGE_SIZE // PATCH
        patches = (
            pixels.reshape(grid, PATCH, grid, PATCH, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(self.n_tokens, self.d_tok)
        )
        tokens = np.tanh(patches @ self._patch_proj)
        cls_token = np.tanh(tokens.mean(axis=0) @ self._cls_proj)
        return cls_token.astype(np.float32), tokens.astype(np.float32)

    def encode_text(self, text: str):
        ids = list(text.encode("utf-8"))[:76] + [256]
        decay = 0.97 ** np.arange(len(ids))
        pooled = (self._tok_embed[ids] * decay[:, None]).sum(axis=0)
        return np.tanh(pooled @ self._text_proj).astype(np.float32)


class ClipViTB16:
    """Real CLIP ViT-B/16 through transformers; needs local weights."""

    name = "clip-vit-base-patch16"
    n_tokens = 196
    d_tok = 768
    d_cls = 512

    def __init__(self, weights_id: str | None = None):
        self.weights_id = weights_id or "openai/clip-vit-base-patch16"
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as err:
            raise SetupError(f"torch/transformers not installed: {err}") from err
        try:
            self._model = CLIPModel.from_pretrained(self.weights_id)
            self._processor = CLIPProcessor.from_pretrained(self.weights_id)
        except OSError as err:
            raise SetupError(
                f"pretrained weights {self.weights_id!r} not available locally: {err}"
            ) from err
        self._torch = torch
        self._model.eval()

    def encode_image(self, path):
        from PIL import Image

        torch = self._torch
        image = Image.open(path).convert("RGB")
        inputs = self._processor(images=image, return_tensors="pt")
        with torch.no_grad():
            vision = self._model.vision_model(pixel_values=inputs["pixel_values"])
            tokens = vision.last_hidden_state[0, 1:, :]  # pre-projection patch tokens
            pooled = vision.pooler_output
            cls_token = self._model.visual_projection(pooled)[0]
        return (
            cls_token.cpu().numpy().astype(np.float32),
            tokens.cpu().numpy().astype(np.float32),
        )

    def encode_text(self, text: str):
        torch = self._torch
        inputs = self._processor(text=[text], return_tensors="pt", padding=True)
        with torch.no_grad():
            feature = self._model.get_text_features(**inputs)[0]
        return feature.cpu().numpy().astype(np.float32)


BACKBONES = {
    SimulatedViTB16.name: SimulatedViTB16,
    ClipViTB16.name: ClipViTB16,
}


def build_backbone(name: str, weights: str | None = None):
    if name not in BACKBONES:
        raise SetupError(f"unknown backbone {name!r}; known: {sorted(BACKBONES)}")
    if name == ClipViTB16.name:
        return ClipViTB16(weights)
    return SimulatedViTB16()
