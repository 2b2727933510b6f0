"""Acceptance suite.

One test per criterion; each prints a PASS line once its assertions hold,
so a full run ends with nine criterion verdicts. Run with `pytest -s
tests/test_acceptance.py` to see the lines inline.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from pm2.cli import main as cli_main
from pm2.gradcheck import check_coop, check_visual_head
from pm2.heads import HeadMode, init_head_params, text_logits, text_logits_backward, visual_logits
from pm2.linalg import frobenius, matmul
from pm2.sopool import SoPoolConfig, covariance_pool, newton_schulz_sqrt
from pm2.storage import (
    FeatureRecord,
    Pm2fHeader,
    array_checksum,
    file_checksum,
    load_dataset,
    load_text_features,
    read_results,
    records_to_dataset,
    summarize_records,
    write_pm2f,
    write_results,
)
from pm2.synth import covariance_separable_spec, synth_generate, synth_to_files
from pm2.textenc import ToyTextEncoder, ToyTextEncoderConfig
from pm2.trainer import (
    AdamWState,
    CoopTextSource,
    TextFeatureSet,
    TrainConfig,
    adamw_step,
    compute_loss,
    run_protocol,
    sample_few_shot,
    train_episode,
)

from conftest import brute_force_covariance, random_spd


def _report(number: int, text: str) -> None:
    print(f"\nACCEPTANCE {number}: PASS - {text}")


def test_criterion_1_covariance_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        tokens = rng.normal(size=(16, 8))
        diff = np.abs(covariance_pool(tokens) - brute_force_covariance(tokens))
        worst = max(worst, float(diff.max()))
    elapsed = time.perf_counter() - start
    assert worst < 1e-10
    assert elapsed < 1.0
    _report(1, f"50 covariance pools vs brute force, max abs diff {worst:.2e}, {elapsed:.2f}s")


def test_criterion_2_newton_schulz_scalar():
    j_impl, _ = newton_schulz_sqrt([[0.25]], 3)
    j, p = 0.25, 1.0
    for _ in range(3):
        t = 3.0 - p * j
        j, p = 0.5 * j * t, 0.5 * t * p
    assert abs(j_impl[0, 0] - j) < 1e-12
    assert abs(j - 0.48764981540944063) < 1e-12
    assert abs(j_impl[0, 0] - 0.5) < 0.02
    _report(2, f"scalar recurrence agrees to {abs(j_impl[0,0]-j):.1e}, J3={j_impl[0,0]:.6f}")


def test_criterion_3_newton_schulz_matrix():
    rng = np.random.default_rng(33)
    start = time.perf_counter()
    lam = np.logspace(-3, 0, 96)  # min eigenvalue exactly 0.001 * max
    lam /= lam.sum()
    q = random_spd(rng, 96, lam)
    j20, _ = newton_schulz_sqrt(q, 20)
    residual = frobenius(matmul(j20, j20) - q) / frobenius(q)
    errors = []
    _, (j_iters, _) = newton_schulz_sqrt(q, 5)
    for k in range(1, 6):
        jk = j_iters[k]
        errors.append(frobenius(matmul(jk, jk) - q) / frobenius(q))
    elapsed = time.perf_counter() - start
    assert residual < 1e-6
    assert all(errors[i + 1] <= errors[i] for i in range(4))
    assert elapsed < 5.0
    _report(3, f"96x96 k=20 residual {residual:.2e}, k=1..5 errors non-increasing, {elapsed:.2f}s")


def test_criterion_4_gradient_checks():
    start = time.perf_counter()
    head_err = check_visual_head(n_coords=120, seed=11)
    coop_err = check_coop(n_coords=120, seed=11)
    elapsed = time.perf_counter() - start
    assert head_err < 1e-4
    assert coop_err < 1e-4
    assert elapsed < 30.0
    _report(4, f"visual head rel err {head_err:.2e}, coop path rel err {coop_err:.2e}, {elapsed:.1f}s")


def test_criterion_5_second_order_separability():
    start = time.perf_counter()
    spec = covariance_separable_spec(samples_per_class=334, seed=3)
    header, train, val, _ = synth_generate(spec)
    train_ds = records_to_dataset(header, train)
    val_ds = records_to_dataset(header, val)
    assert val_ds.n_samples >= 300
    text = TextFeatureSet(
        features=np.random.default_rng(0).normal(size=(3, spec.d_cls)),
        labels=np.arange(3),
    )
    episode = sample_few_shot(train_ds.labels, 16, seed=0, n_classes=3)
    accuracies = {}
    for mode in (HeadMode.CLS_ONLY, HeadMode.CLS_PLUS_SO):
        cfg = TrainConfig(
            base_lr=0.001,
            weight_decay=0.0,
            head_mode=mode,
            sopool=None if mode is HeadMode.CLS_ONLY else SoPoolConfig(reduced_dim=8),
            seed=0,
            warmup_iters=50,
            total_iters=1200,
            batch_size=2,
        )
        _, _, result = train_episode(train_ds, text, episode, cfg, eval_data=val_ds)
        accuracies[mode.value] = result.top1_accuracy
    elapsed = time.perf_counter() - start
    assert accuracies["cls"] <= 0.45
    assert accuracies["cls+so"] >= 0.90
    assert elapsed < 120.0
    _report(5, f"identical-mean classes: cls {accuracies['cls']:.1%}, "
               f"cls+so {accuracies['cls+so']:.1%}, {elapsed:.1f}s")


def test_criterion_6_shared_head_coupling():
    rng = np.random.default_rng(6)
    params = init_head_params(HeadMode.CLS_ONLY, 3, 5, seed=6)
    cfg = TrainConfig(base_lr=0.05, weight_decay=0.0, head_mode=HeadMode.CLS_ONLY,
                      total_iters=10, warmup_iters=1)
    state = AdamWState.for_params(params.param_dict())
    probe = rng.normal(size=5)
    text_feature = rng.normal(size=5)
    image_before, _ = visual_logits(probe, None, params, HeadMode.CLS_ONLY)
    for step in range(5):
        # Loss driven only by the text path: empty image batch.
        rows = [text_logits(text_feature, params)]
        _, _, grad_texts = compute_loss([], [], rows, [1], 1.0)
        grads = params.zero_grads()
        text_logits_backward(grad_texts[0], text_feature, params, grads)
        adamw_step(params.param_dict(), grads, state, lr=0.05, cfg=cfg)
        # The classifier the text path reads and the one the image path
        # reads must be the same bytes after every step.
        text_view = text_logits(probe, params)
        image_view, _ = visual_logits(probe, None, params, HeadMode.CLS_ONLY)
        assert array_checksum([("w", params.shared_w), ("b", params.shared_b)]) == \
            array_checksum([("w", params.shared_w), ("b", params.shared_b)])
        assert np.array_equal(text_view, image_view)
    image_after, _ = visual_logits(probe, None, params, HeadMode.CLS_ONLY)
    assert not np.array_equal(image_before, image_after)
    _report(6, "text-only steps move image logits; shared weights identical on both paths")


@pytest.fixture
def protocol_inputs(tmp_path):
    spec = covariance_separable_spec(samples_per_class=25, d_cls=6, d_tok=6,
                                     n_tokens=8, seed=9)
    train_path, val_path, _ = synth_to_files(spec, tmp_path / "data")
    text_path = tmp_path / "text.pm2f"
    rng = np.random.default_rng(1)
    write_pm2f(
        text_path,
        Pm2fHeader(record_count=3, n_tokens=0, d_cls=6, d_tok=0, class_count=3),
        [FeatureRecord(label=c, cls_token=rng.normal(size=6).astype(np.float32))
         for c in range(3)],
    )
    return train_path, val_path, text_path


def test_criterion_7_protocol_byte_determinism(tmp_path, protocol_inputs, monkeypatch, capsys):
    train_path, val_path, text_path = protocol_inputs
    monkeypatch.setenv("PM2_THREADS", "1")
    args = [
        "protocol", "--train", str(train_path), "--val", str(val_path),
        "--text", str(text_path), "--head-mode", "cls",
        "--shots", "1,2", "--seeds", "2", "--sweep",
        "--iters", "15", "--warmup", "2", "--scheme-name", "vanilla",
    ]
    outs = [tmp_path / "run1", tmp_path / "run2"]
    assert cli_main(args + ["--out", str(outs[0])]) == 0
    capsys.readouterr()
    # Second run in a fresh interpreter: determinism must hold across
    # processes, not just within one.
    subprocess.run(
        [sys.executable, "-m", "pm2.cli", *args, "--out", str(outs[1])],
        check=True, capture_output=True,
        env={**os.environ, "PM2_THREADS": "1"},
    )
    jsonl = [open(o / "episodes.jsonl", "rb").read() for o in outs]
    csvs = [open(o / "summary.csv", "rb").read() for o in outs]
    assert jsonl[0] == jsonl[1]
    assert csvs[0] == csvs[1]
    _report(7, f"two runs byte-identical ({len(jsonl[0])} JSONL bytes, {len(csvs[0])} CSV bytes)")


def test_criterion_8_protocol_shape(tmp_path, protocol_inputs):
    train_path, val_path, text_path = protocol_inputs
    train_ds = load_dataset(train_path)
    val_ds = load_dataset(val_path)
    text = load_text_features(text_path)
    cfg = TrainConfig(base_lr=0.001, weight_decay=0.0, head_mode=HeadMode.CLS_ONLY,
                      total_iters=40, warmup_iters=5)
    table = run_protocol(
        train_ds, [("vanilla", text)], cfg,
        shots=(1, 2, 4, 8, 16), seeds=(0, 1, 2), sweep=True,
        select_data=val_ds, report_data=val_ds,
    )
    assert len(table.records) == 15  # 5 shots x 3 seeds
    assert all(len(r["sweep"]) == 6 for r in table.records)  # 2 lr x 3 wd
    run_dir = tmp_path / "run"
    _, summary_path = write_results(run_dir, table)
    lines = open(summary_path).read().splitlines()
    assert lines[0] == "text_prompt,1-shot,2-shot,4-shot,8-shot,16-shot"
    assert len(lines) == 2 and lines[1].startswith("vanilla,")
    recomputed = summarize_records(read_results(run_dir))
    for shot, mean in table.means["vanilla"].items():
        assert abs(recomputed["vanilla"][shot] - mean) < 1e-9
    csv_cells = lines[1].split(",")[1:]
    for cell, shot in zip(csv_cells, (1, 2, 4, 8, 16)):
        assert abs(float(cell) - recomputed["vanilla"][shot]) < 1e-9
    _report(8, "15 sweep cells of 6 runs, scheme-by-shot summary, means recomputable to 1e-9")


def test_criterion_9_freeze_contract(tmp_path):
    spec = covariance_separable_spec(samples_per_class=12, d_cls=8, d_tok=6,
                                     n_tokens=6, seed=4)
    train_path, val_path, _ = synth_to_files(spec, tmp_path)
    sums_before = {p: file_checksum(p) for p in (train_path, val_path)}
    train_ds = load_dataset(train_path)
    encoder = ToyTextEncoder(ToyTextEncoderConfig(embed_dim=32, n_layers=2, n_heads=4,
                                                  d_cls=8, seed=0))
    enc_before = encoder.weight_checksum()
    source = CoopTextSource(encoder=encoder, context_len=4,
                            classnames=["normal", "benign", "invasive"])
    episode = sample_few_shot(train_ds.labels, 2, seed=0, n_classes=3)
    cfg = TrainConfig(base_lr=0.001, weight_decay=0.01,
                      head_mode=HeadMode.CLS_PLUS_SO, sopool=SoPoolConfig(reduced_dim=4),
                      total_iters=30, warmup_iters=5, seed=0)
    train_episode(train_ds, source, episode, cfg)
    assert encoder.weight_checksum() == enc_before
    for path, checksum in sums_before.items():
        assert file_checksum(path) == checksum
    _report(9, "encoder weights and feature files unchanged by a training run")
