"""Synthetic feature generation for desk-scale experiments.

Each class draws its visual tokens as ``token_mean + factor @ z`` with
standard-normal z, so the class token covariance is ``factor @ factor.T``
by construction. Class tokens are the class mean plus isotropic noise.
Generated records are split 7:3 into train/val per class, with the split
recorded in a manifest.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .rng import stream
from .storage import FeatureRecord, Pm2fHeader, write_pm2f


@dataclass
class SynthSpec:
    cls_means: np.ndarray  # (C, d_cls)
    token_means: np.ndarray  # (C, d_tok)
    token_factors: np.ndarray  # (C, d_tok, f) covariance factors
    samples_per_class: int
    n_tokens: int
    noise_scale: float
    seed: int

    def __post_init__(self):
        self.cls_means = np.asarray(self.cls_means, dtype=np.float64)
        self.token_means = np.asarray(self.token_means, dtype=np.float64)
        self.token_factors = np.asarray(self.token_factors, dtype=np.float64)
        if self.cls_means.ndim != 2 or self.token_means.ndim != 2 or self.token_factors.ndim != 3:
            raise ValidationError("means must be 2-D per class, factors 3-D")
        c = self.cls_means.shape[0]
        if self.token_means.shape[0] != c or self.token_factors.shape[0] != c:
            raise ValidationError("per-class arrays disagree on class count")
        if self.token_factors.shape[1] != self.token_means.shape[1]:
            raise ValidationError("factor rows must match token dim")
        if self.samples_per_class < 1 or self.n_tokens < 1:
            raise ValidationError("need at least one sample and one token")
        for ci in range(c):
            f = self.token_factors[ci]
            if np.linalg.matrix_rank(f) < f.shape[1]:
                raise ValidationError(f"class {ci}: covariance factor is rank-deficient")

    @property
    def n_classes(self) -> int:
        return self.cls_means.shape[0]

    @property
    def d_cls(self) -> int:
        return self.cls_means.shape[1]

    @property
    def d_tok(self) -> int:
        return self.token_means.shape[1]

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        with open(path) as fh:
            raw = json.load(fh)
        return cls(
            cls_means=[c["cls_mean"] for c in raw["classes"]],
            token_means=[c["token_mean"] for c in raw["classes"]],
            token_factors=[c["factor"] for c in raw["classes"]],
            samples_per_class=raw["samples_per_class"],
            n_tokens=raw["n_tokens"],
            noise_scale=raw["noise_scale"],
            seed=raw.get("seed", 0),
        )


def synth_generate(spec: SynthSpec, seed: int | None = None):
    """Draw records and split them 7:3 per class.

    Returns (header, train_records, val_records, manifest).
    """
    seed = spec.seed if seed is None else seed
    header = Pm2fHeader(
        record_count=0,
        n_tokens=spec.n_tokens,
        d_cls=spec.d_cls,
        d_tok=spec.d_tok,
        class_count=spec.n_classes,
    )
    per_class: list[list[FeatureRecord]] = []
    for c in range(spec.n_classes):
        cls_rng = stream("synth/cls", seed, c)
        tok_rng = stream("synth/tokens", seed, c)
        records = []
        factor = spec.token_factors[c]
        for _ in range(spec.samples_per_class):
            cls_token = spec.cls_means[c] + spec.noise_scale * cls_rng.normal(size=spec.d_cls)
            z = tok_rng.normal(size=(spec.n_tokens, factor.shape[1]))
            tokens = spec.token_means[c] + z @ factor.T
            records.append(
                FeatureRecord(
                    label=c,
                    cls_token=cls_token.astype(np.float32),
                    visual_tokens=tokens.astype(np.float32),
                )
            )
        per_class.append(records)

    train: list[FeatureRecord] = []
    val: list[FeatureRecord] = []
    split_indices = {}
    for c in range(spec.n_classes):
        n = spec.samples_per_class
        n_train = n * 7 // 10
        perm = stream("synth/split", seed, c).permutation(n)
        train_idx = sorted(int(i) for i in perm[:n_train])
        val_idx = sorted(int(i) for i in perm[n_train:])
        split_indices[str(c)] = {"train": train_idx, "val": val_idx}
        train.extend(per_class[c][i] for i in train_idx)
        val.extend(per_class[c][i] for i in val_idx)

    manifest = {
        "seed": seed,
        "classes": spec.n_classes,
        "samples_per_class": spec.samples_per_class,
        "split_ratio": "7:3",
        "split": split_indices,
        "d_cls": spec.d_cls,
        "d_tok": spec.d_tok,
        "n_tokens": spec.n_tokens,
    }
    return header, train, val, manifest


def synth_to_files(spec: SynthSpec, out_dir, seed: int | None = None):
    """Write train.pm2f / val.pm2f / manifest.json into out_dir."""
    header, train, val, manifest = synth_generate(spec, seed)
    os.makedirs(out_dir, exist_ok=True)
    train_path = os.path.join(out_dir, "train.pm2f")
    val_path = os.path.join(out_dir, "val.pm2f")
    write_pm2f(train_path, _with_count(header, len(train)), train)
    write_pm2f(val_path, _with_count(header, len(val)), val)
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return train_path, val_path, manifest_path


def _with_count(header: Pm2fHeader, count: int) -> Pm2fHeader:
    return Pm2fHeader(
        record_count=count,
        n_tokens=header.n_tokens,
        d_cls=header.d_cls,
        d_tok=header.d_tok,
        class_count=header.class_count,
    )


def covariance_separable_spec(
    n_classes: int = 3,
    d_cls: int = 16,
    d_tok: int = 16,
    n_tokens: int = 32,
    samples_per_class: int = 120,
    seed: int = 0,
) -> SynthSpec:
    """Classes identical in their means but distinct in token covariance:
    the fixture where first-order heads sit at chance and the second-order
    head separates. Class c gets high variance on its own block of token
    dims and low variance elsewhere."""
    cls_means = np.zeros((n_classes, d_cls))
    token_means = np.zeros((n_classes, d_tok))
    factors = np.zeros((n_classes, d_tok, d_tok))
    block = d_tok // n_classes
    for c in range(n_classes):
        scales = np.full(d_tok, 0.4)
        scales[c * block : (c + 1) * block] = 2.5
        factors[c] = np.diag(scales)
    return SynthSpec(
        cls_means=cls_means,
        token_means=token_means,
        token_factors=factors,
        samples_per_class=samples_per_class,
        n_tokens=n_tokens,
        noise_scale=1.0,
        seed=seed,
    )
