"""Secondary-component acceptance: exporter interop with the consumer.

Criterion 11 (real-data zero-shot sanity) needs the BACH images and local
CLIP weights; it runs only when PM2_BACH_DIR and PM2_CLIP_WEIGHTS are set
and its absence does not block acceptance.
"""

import json
import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from pm2.storage import read_pm2f
from pm2_exporter.export import export_image_features, export_text_features
from pm2_exporter.manifest import ExportManifest


def _report(number: int, text: str) -> None:
    print(f"\nACCEPTANCE {number}: PASS - {text}")


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_images")
    rng = np.random.default_rng(7)
    images = {}
    for label, name in enumerate(["alpha", "beta"]):
        (root / name).mkdir()
        paths = []
        for i in range(10):
            pixels = rng.integers(0, 200, size=(40, 40, 3), dtype=np.uint8)
            pixels[..., label] = 255 - pixels[..., label]
            path = root / name / f"{i}.png"
            Image.fromarray(pixels).save(path)
            paths.append(str(path))
        images[name] = paths
    return images


def test_criterion_10_exporter_interop(tiny_dataset, tmp_path):
    manifest = ExportManifest(
        backbone="sim-vit-b16",
        classes=["alpha", "beta"],
        images=tiny_dataset,
        prompt_scheme="vanilla",
        seed=0,
    )
    first = export_image_features(manifest, tmp_path / "first")
    text_path = export_text_features(manifest, tmp_path / "first")
    # Files pass the consumer's read validation and carry ViT-B/16 geometry.
    for path in (first["train"], first["val"], text_path):
        read_pm2f(path)
    header, _ = read_pm2f(first["train"])
    assert (header.n_tokens, header.d_tok, header.d_cls) == (196, 768, 512)
    text_header, _ = read_pm2f(text_path)
    assert text_header.d_cls == header.d_cls  # image and text share one space
    # Re-export is byte-identical.
    second = export_image_features(manifest, tmp_path / "second")
    text_again = export_text_features(manifest, tmp_path / "second")
    for a, b in ((first["train"], second["train"]), (first["val"], second["val"]),
                 (text_path, text_again)):
        assert open(a, "rb").read() == open(b, "rb").read()
    _report(10, "exports pass read_pm2f, header (196, 768, 512), re-export byte-identical")


BACH_CLASSES = ["Normal", "Benign", "In Situ Carcinoma", "Invasive Carcinoma"]


@pytest.mark.skipif(
    not (os.environ.get("PM2_BACH_DIR") and os.environ.get("PM2_CLIP_WEIGHTS")),
    reason="optional real-data check: set PM2_BACH_DIR and PM2_CLIP_WEIGHTS",
)
def test_criterion_11_real_bach_zero_shot(tmp_path):
    bach = os.environ["PM2_BACH_DIR"]
    images = {
        name: sorted(
            os.path.join(bach, name, f)
            for f in os.listdir(os.path.join(bach, name))
            if f.lower().endswith((".png", ".jpg", ".jpeg", ".tif", ".tiff"))
        )
        for name in BACH_CLASSES
    }
    manifest = ExportManifest(
        backbone="clip-vit-base-patch16",
        classes=BACH_CLASSES,
        images=images,
        prompt_scheme="vanilla",
        weights=os.environ["PM2_CLIP_WEIGHTS"],
        seed=0,
    )
    info = export_image_features(manifest, tmp_path)
    text_path = export_text_features(manifest, tmp_path)
    proc = subprocess.run(
        [sys.executable, "-m", "pm2.cli", "zeroshot", "--data", info["val"],
         "--text", text_path, "--temperature", "0.01"],
        capture_output=True, text=True, check=True,
    )
    accuracy = json.loads(proc.stdout.strip())["accuracy"]
    assert abs(accuracy * 100 - 20.0) <= 3.0
    _report(11, f"real BACH zero-shot accuracy {accuracy:.1%}")
