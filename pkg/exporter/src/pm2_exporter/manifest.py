"""Export manifest: what to encode, with which backbone, and how to split."""

import json
import os
from dataclasses import dataclass


class ManifestError(ValueError):
    pass


TEMPLATES = {
    "classname": "{cls}",
    "vanilla": "a photo of a {cls}.",
    "hand_crafted": "a photo of a {cls} breast tissue.",
}


@dataclass
class ExportManifest:
    backbone: str
    classes: list[str]
    images: dict[str, list[str]]  # classname -> image paths
    prompt_scheme: str = "vanilla"
    template: str | None = None
    prompts: dict[str, list[str]] | None = None  # per-class strings (gpt)
    prompt_assets: str | None = None  # path to a prompt asset JSON
    asset_key: str | None = None  # which scheme section of the asset file
    split_ratio: float = 0.7
    seed: int = 0
    on_error: str = "abort"  # or "skip"
    weights: str | None = None  # weight identifier for real backbones

    def __post_init__(self):
        if not self.classes:
            raise ManifestError("manifest has no classes")
        if self.on_error not in ("abort", "skip"):
            raise ManifestError(f"on_error must be abort|skip, got {self.on_error!r}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ManifestError(f"split_ratio must be in (0, 1), got {self.split_ratio}")
        for name in self.classes:
            paths = self.images.get(name)
            if not paths:
                raise ManifestError(f"class {name!r} has no images")
            for path in paths:
                if not os.path.exists(path):
                    raise ManifestError(f"image path does not exist: {path}")

    @classmethod
    def from_json(cls, path) -> "ExportManifest":
        with open(path) as fh:
            raw = json.load(fh)
        base = os.path.dirname(os.path.abspath(path))

        def absolute(p: str) -> str:
            return p if os.path.isabs(p) else os.path.join(base, p)

        images = {
            name: [absolute(p) for p in paths]
            for name, paths in raw.get("images", {}).items()
        }
        return cls(
            backbone=raw["backbone"],
            classes=list(raw["classes"]),
            images=images,
            prompt_scheme=raw.get("prompt_scheme", "vanilla"),
            template=raw.get("template"),
            prompts=raw.get("prompts"),
            prompt_assets=absolute(raw["prompt_assets"]) if raw.get("prompt_assets") else None,
            asset_key=raw.get("asset_key"),
            split_ratio=raw.get("split_ratio", 0.7),
            seed=raw.get("seed", 0),
            on_error=raw.get("on_error", "abort"),
            weights=raw.get("weights"),
        )

    def resolve_prompts(self) -> dict[str, list[str]]:
        """Prompt strings per class under the configured scheme."""
        if self.prompt_scheme in TEMPLATES:
            template = self.template or TEMPLATES[self.prompt_scheme]
            return {name: [template.replace("{cls}", name)] for name in self.classes}
        if self.prompt_scheme != "gpt":
            raise ManifestError(f"unknown prompt scheme {self.prompt_scheme!r}")
        per_class = self.prompts
        if per_class is None and self.prompt_assets:
            with open(self.prompt_assets) as fh:
                assets = json.load(fh)
            key = self.asset_key or "gpt_prompt_0"
            if key not in assets:
                raise ManifestError(f"asset file has no section {key!r}")
            per_class = assets[key]
        if per_class is None:
            raise ManifestError("gpt scheme needs 'prompts' or 'prompt_assets'")
        out = {}
        for name in self.classes:
            strings = per_class.get(name)
            if not strings:
                raise ManifestError(f"no prompt strings for class {name!r}")
            if any(not s for s in strings):
                raise ManifestError(f"empty prompt string for class {name!r}")
            out[name] = list(strings)
        return out
