import json
import os

import numpy as np
import pytest
from PIL import Image

from pm2.storage import read_pm2f  # interop: the consumer's own reader
from pm2_exporter.backbones import SetupError, SimulatedViTB16, build_backbone
from pm2_exporter.cli import main as cli_main
from pm2_exporter.export import export_image_features, export_text_features
from pm2_exporter.manifest import ExportManifest, ManifestError

BACH_CLASSES = ["Normal", "Benign", "In Situ Carcinoma", "Invasive Carcinoma"]


@pytest.fixture(scope="module")
def image_tree(tmp_path_factory):
    """Two classes x 10 small PNGs with class-dependent texture."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(0)
    images = {}
    for label, name in enumerate(["healthy", "lesion"]):
        class_dir = root / name
        class_dir.mkdir()
        paths = []
        for i in range(10):
            base = 40 + 120 * label
            pixels = rng.integers(base, base + 80, size=(48, 64, 3), dtype=np.uint8)
            path = class_dir / f"img_{i:02d}.png"
            Image.fromarray(pixels).save(path)
            paths.append(str(path))
        images[name] = paths
    return {"root": root, "images": images, "classes": ["healthy", "lesion"]}


@pytest.fixture
def manifest(image_tree):
    return ExportManifest(
        backbone="sim-vit-b16",
        classes=image_tree["classes"],
        images=image_tree["images"],
        prompt_scheme="vanilla",
        seed=0,
    )


class TestImageExport:
    def test_header_matches_vit_b16_geometry(self, manifest, tmp_path):
        info = export_image_features(manifest, tmp_path)
        for key in ("train", "val"):
            header, _ = read_pm2f(info[key])
            assert header.n_tokens == 196
            assert header.d_tok == 768
            assert header.d_cls == 512
            assert header.class_count == 2

    def test_split_seven_three(self, manifest, tmp_path):
        info = export_image_features(manifest, tmp_path)
        train_header, train_records = read_pm2f(info["train"])
        val_header, val_records = read_pm2f(info["val"])
        assert train_header.record_count == 14  # 7 per class
        assert val_header.record_count == 6  # 3 per class
        for label in (0, 1):
            assert sum(1 for r in train_records if r.label == label) == 7
            assert sum(1 for r in val_records if r.label == label) == 3

    def test_reexport_byte_identical(self, manifest, tmp_path):
        a = export_image_features(manifest, tmp_path / "a")
        b = export_image_features(manifest, tmp_path / "b")
        for key in ("train", "val"):
            assert open(a[key], "rb").read() == open(b[key], "rb").read()

    def test_records_are_finite_and_distinct(self, manifest, tmp_path):
        info = export_image_features(manifest, tmp_path)
        _, records = read_pm2f(info["train"])
        assert not np.array_equal(records[0].cls_token, records[1].cls_token)
        assert np.all(np.isfinite(records[0].visual_tokens))

    def test_unreadable_image_abort_vs_skip(self, image_tree, tmp_path):
        broken = tmp_path / "broken.png"
        broken.write_bytes(b"not an image")
        images = {k: list(v) for k, v in image_tree["images"].items()}
        images["healthy"] = images["healthy"] + [str(broken)]
        kwargs = dict(backbone="sim-vit-b16", classes=image_tree["classes"],
                      images=images, seed=0)
        with pytest.raises(OSError):
            export_image_features(ExportManifest(on_error="abort", **kwargs),
                                  tmp_path / "abort")
        info = export_image_features(ExportManifest(on_error="skip", **kwargs),
                                     tmp_path / "skip")
        assert info["counts"]["healthy"] == {"train": 7, "val": 3}


class TestTextExport:
    def test_vanilla_bach_classes(self, image_tree, tmp_path):
        manifest = ExportManifest(
            backbone="sim-vit-b16",
            classes=BACH_CLASSES,
            images={name: image_tree["images"]["healthy"][:1] for name in BACH_CLASSES},
            prompt_scheme="vanilla",
        )
        path = export_text_features(manifest, tmp_path)
        header, records = read_pm2f(path)
        assert header.n_tokens == 0
        assert header.record_count == 4
        assert [r.label for r in records] == [0, 1, 2, 3]
        features = np.stack([r.cls_token for r in records])
        assert len({row.tobytes() for row in features}) == 4

    def test_gpt_scheme_from_assets(self, image_tree, tmp_path):
        assets = {
            "gpt_prompt_1": {
                name: [f"A long caption describing {name} tissue on a slide."]
                for name in BACH_CLASSES
            }
        }
        asset_path = tmp_path / "prompts.json"
        asset_path.write_text(json.dumps(assets))
        manifest = ExportManifest(
            backbone="sim-vit-b16",
            classes=BACH_CLASSES,
            images={name: image_tree["images"]["healthy"][:1] for name in BACH_CLASSES},
            prompt_scheme="gpt",
            prompt_assets=str(asset_path),
            asset_key="gpt_prompt_1",
        )
        path = export_text_features(manifest, tmp_path)
        header, records = read_pm2f(path)
        assert header.record_count == 4
        features = np.stack([r.cls_token for r in records])
        assert len({row.tobytes() for row in features}) == 4

    def test_identical_prompt_identical_bytes(self):
        backbone = SimulatedViTB16()
        a = backbone.encode_text("a photo of a Benign.")
        b = backbone.encode_text("a photo of a Benign.")
        assert a.tobytes() == b.tobytes()

    def test_empty_prompt_rejected(self, image_tree):
        manifest = ExportManifest(
            backbone="sim-vit-b16",
            classes=["healthy"],
            images={"healthy": image_tree["images"]["healthy"][:1]},
            prompt_scheme="gpt",
            prompts={"healthy": [""]},
        )
        with pytest.raises(ManifestError):
            manifest.resolve_prompts()


class TestManifest:
    def test_missing_image_rejected(self, image_tree):
        with pytest.raises(ManifestError):
            ExportManifest(
                backbone="sim-vit-b16",
                classes=["healthy"],
                images={"healthy": ["/nonexistent/img.png"]},
            )

    def test_no_classes_rejected(self):
        with pytest.raises(ManifestError):
            ExportManifest(backbone="sim-vit-b16", classes=[], images={})

    def test_from_json_relative_paths(self, image_tree, tmp_path):
        rel = os.path.relpath(image_tree["images"]["healthy"][0], tmp_path)
        raw = {
            "backbone": "sim-vit-b16",
            "classes": ["healthy"],
            "images": {"healthy": [rel]},
            "seed": 3,
        }
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(raw))
        manifest = ExportManifest.from_json(path)
        assert manifest.seed == 3
        assert os.path.isabs(manifest.images["healthy"][0])


class TestCli:
    def test_export_command(self, image_tree, tmp_path, capsys):
        raw = {
            "backbone": "sim-vit-b16",
            "classes": image_tree["classes"],
            "images": image_tree["images"],
            "prompt_scheme": "classname",
        }
        manifest_path = tmp_path / "m.json"
        manifest_path.write_text(json.dumps(raw))
        rc = cli_main(["export", "--manifest", str(manifest_path),
                       "--out", str(tmp_path / "out")])
        assert rc == 0
        out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        for produced in (out["images"]["train"], out["images"]["val"], out["text"]):
            read_pm2f(produced)  # must parse cleanly

    def test_reexport_byte_identical_across_processes(self, image_tree, tmp_path, capsys):
        import subprocess
        import sys

        raw = {
            "backbone": "sim-vit-b16",
            "classes": image_tree["classes"],
            "images": image_tree["images"],
            "prompt_scheme": "vanilla",
        }
        manifest_path = tmp_path / "m.json"
        manifest_path.write_text(json.dumps(raw))
        assert cli_main(["export", "--manifest", str(manifest_path),
                         "--out", str(tmp_path / "a")]) == 0
        capsys.readouterr()
        subprocess.run(
            [sys.executable, "-m", "pm2_exporter.cli", "export",
             "--manifest", str(manifest_path), "--out", str(tmp_path / "b")],
            check=True, capture_output=True,
        )
        for name in ("train_images.pm2f", "val_images.pm2f", "text.pm2f"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestTrainerInterop:
    def test_exported_features_train(self, manifest, tmp_path):
        """End to end: exported files feed the consumer's training loop."""
        from pm2.heads import HeadMode
        from pm2.sopool import SoPoolConfig
        from pm2.storage import load_dataset, load_text_features
        from pm2.trainer import TrainConfig, sample_few_shot, train_episode

        info = export_image_features(manifest, tmp_path)
        text_path = export_text_features(manifest, tmp_path)
        train_ds = load_dataset(info["train"])
        val_ds = load_dataset(info["val"])
        text = load_text_features(text_path)
        episode = sample_few_shot(train_ds.labels, 2, seed=0, n_classes=2)
        cfg = TrainConfig(base_lr=0.001, weight_decay=0.0,
                          head_mode=HeadMode.CLS_PLUS_SO,
                          sopool=SoPoolConfig(reduced_dim=4),
                          total_iters=5, warmup_iters=1, seed=0)
        _, _, result = train_episode(train_ds, text, episode, cfg, eval_data=val_ds)
        assert len(result.loss_history) == 5
        assert np.all(np.isfinite(result.loss_history))


class TestRealClip:
    def test_missing_weights_is_setup_error(self, monkeypatch):
        # Loading from a path that cannot exist must fail as a setup error,
        # never as a crash. Runs offline.
        monkeypatch.setenv("HF_HUB_OFFLINE", "1")
        monkeypatch.setenv("TRANSFORMERS_OFFLINE", "1")
        pytest.importorskip("transformers")
        with pytest.raises(SetupError):
            build_backbone("clip-vit-base-patch16", "/nonexistent/clip-weights")

    @pytest.mark.skipif(
        not os.environ.get("PM2_CLIP_WEIGHTS"),
        reason="set PM2_CLIP_WEIGHTS to a local CLIP ViT-B/16 checkout to run",
    )
    def test_real_export_geometry(self, image_tree, tmp_path):
        manifest = ExportManifest(
            backbone="clip-vit-base-patch16",
            classes=image_tree["classes"],
            images=image_tree["images"],
            weights=os.environ["PM2_CLIP_WEIGHTS"],
        )
        info = export_image_features(manifest, tmp_path)
        header, _ = read_pm2f(info["train"])
        assert (header.n_tokens, header.d_tok, header.d_cls) == (196, 768, 512)
