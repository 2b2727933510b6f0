"""Run a dual encoder over image folders and prompts, writing PM2F files.

The writer below implements the PM2F wire format directly (little-endian
header magic "PM2F", u32 fields, float32 payloads) so exported files are
consumable by anything that speaks the format.
"""

import hashlib
import json
import logging
import os
import struct

import numpy as np

from .backbones import build_backbone
from .manifest import ExportManifest, ManifestError

log = logging.getLogger(__name__)

MAGIC = b"PM2F"
VERSION = 1


def _stream(tag: str, seed: int, extra: int) -> np.random.Generator:
    h = hashlib.blake2b(digest_size=16)
    h.update(tag.encode())
    h.update(seed.to_bytes(8, "little", signed=True))
    h.update(extra.to_bytes(8, "little", signed=True))
    key = np.frombuffer(h.digest(), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _write_pm2f(path, n_tokens, d_cls, d_tok, class_count, records):
    """records: list of (label, cls_token float32, tokens float32 | None)."""
    chunks = [
        MAGIC,
        struct.pack("<6I", VERSION, len(records), n_tokens, d_cls, d_tok, class_count),
    ]
    for label, cls_token, tokens in records:
        if cls_token.shape != (d_cls,) or not np.all(np.isfinite(cls_token)):
            raise ValueError(f"bad cls_token for label {label}")
        chunks.append(struct.pack("<I", label))
        chunks.append(cls_token.astype("<f4").tobytes())
        if n_tokens:
            if tokens.shape != (n_tokens, d_tok) or not np.all(np.isfinite(tokens)):
                raise ValueError(f"bad token matrix for label {label}")
            chunks.append(tokens.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def export_image_features(manifest: ExportManifest, out_dir) -> dict:
    """Encode every image, split 7:3 per class, and write train/val files."""
    backbone = build_backbone(manifest.backbone, manifest.weights)
    os.makedirs(out_dir, exist_ok=True)
    train_records, val_records = [], []
    counts = {}
    for label, name in enumerate(manifest.classes):
        paths = sorted(manifest.images[name])
        encoded = []
        for path in paths:
            try:
                cls_token, tokens = backbone.encode_image(path)
            except (OSError, ValueError) as err:
                if manifest.on_error == "skip":
                    log.warning("skipping unreadable image %s: %s", path, err)
                    continue
                raise
            encoded.append((label, cls_token, tokens))
        if not encoded:
            raise ManifestError(f"class {name!r} has no readable images")
        # Floor, guarded against float wobble (0.7 * 10 is 7.000...01).
        n_train = int(len(encoded) * manifest.split_ratio + 1e-9)
        perm = _stream("export/split", manifest.seed, label).permutation(len(encoded))
        train_idx = sorted(int(i) for i in perm[:n_train])
        val_idx = sorted(int(i) for i in perm[n_train:])
        train_records.extend(encoded[i] for i in train_idx)
        val_records.extend(encoded[i] for i in val_idx)
        counts[name] = {"train": len(train_idx), "val": len(val_idx)}

    train_path = os.path.join(out_dir, "train_images.pm2f")
    val_path = os.path.join(out_dir, "val_images.pm2f")
    for path, records in ((train_path, train_records), (val_path, val_records)):
        _write_pm2f(
            path,
            backbone.n_tokens,
            backbone.d_cls,
            backbone.d_tok,
            len(manifest.classes),
            records,
        )
    info = {
        "backbone": backbone.name,
        "weights_id": backbone.weights_id,
        "classes": manifest.classes,
        "counts": counts,
        "split_ratio": "7:3",
        "seed": manifest.seed,
        "train": train_path,
        "val": val_path,
    }
    with open(os.path.join(out_dir, "export_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(info, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return info


def export_text_features(manifest: ExportManifest, out_dir) -> str:
    """One record per (class, prompt string); N = 0 marks a text file."""
    backbone = build_backbone(manifest.backbone, manifest.weights)
    prompts = manifest.resolve_prompts()
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for label, name in enumerate(manifest.classes):
        for prompt in prompts[name]:
            records.append((label, backbone.encode_text(prompt), None))
    path = os.path.join(out_dir, "text.pm2f")
    _write_pm2f(path, 0, backbone.d_cls, 0, len(manifest.classes), records)
    return path
