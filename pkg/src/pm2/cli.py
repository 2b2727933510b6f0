"""Command-line interface.

Subcommands: synth, train, eval, zeroshot, protocol, gradcheck, report.
The PM2_THREADS environment variable caps episode-level parallelism for
`protocol`; the default of 1 keeps runs fully deterministic.
"""

import argparse
import json
import os
import sys

import numpy as np

from .gradcheck import CHECKS
from .heads import HeadMode, zero_shot_probs
from .sopool import SoPoolConfig
from .storage import (
    load_dataset,
    load_params,
    load_text_features,
    read_results,
    save_params,
    summarize_records,
    write_results,
)
from .synth import SynthSpec, synth_to_files
from .trainer import (
    DEFAULT_LR_GRID,
    DEFAULT_WD_GRID,
    CoopTextSource,
    TrainConfig,
    evaluate_top1,
    run_protocol,
    sample_few_shot,
    train_episode,
)
from .textenc import ToyTextEncoder, ToyTextEncoderConfig


def _add_data_args(p: argparse.ArgumentParser, with_val: bool = True):
    p.add_argument("--train", required=True, help="training feature file (.pm2f)")
    if with_val:
        p.add_argument("--val", required=True, help="validation feature file (.pm2f)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--text", help="text feature file (.pm2f, N = 0)")
    group.add_argument("--coop", type=int, metavar="M",
                       help="learnable context with M vectors")
    p.add_argument("--classes", help="comma-separated class names (coop)")
    p.add_argument("--encoder-seed", type=int, default=0,
                   help="seed for the frozen toy text encoder")


def _add_train_args(p: argparse.ArgumentParser):
    p.add_argument("--head-mode", default="cls+so",
                   choices=[m.value for m in HeadMode])
    p.add_argument("--reduced-dim", type=int, default=96)
    p.add_argument("--ns-iters", type=int, default=3)
    p.add_argument("--iters", type=int, default=12800)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--text-loss-weight", type=float, default=1.0)
    p.add_argument("--init-head-from-text", action="store_true")
    p.add_argument("--strict-degeneracy", action="store_true")


def _build_config(args, lr: float, wd: float, seed: int) -> TrainConfig:
    mode = HeadMode.from_string(args.head_mode)
    sopool = None
    if mode is not HeadMode.CLS_ONLY:
        sopool = SoPoolConfig(
            reduced_dim=args.reduced_dim,
            ns_iterations=args.ns_iters,
            strict_degeneracy=args.strict_degeneracy,
        )
    return TrainConfig(
        base_lr=lr,
        weight_decay=wd,
        head_mode=mode,
        sopool=sopool,
        seed=seed,
        warmup_iters=args.warmup,
        total_iters=args.iters,
        batch_size=args.batch_size,
        text_loss_weight=args.text_loss_weight,
        init_head_from_text=args.init_head_from_text,
    )


def _build_text_source(args, data):
    if args.text:
        return load_text_features(args.text)
    if args.coop:
        if args.classes:
            names = [c.strip() for c in args.classes.split(",")]
        elif data.class_names:
            names = data.class_names
        else:
            names = [f"class {i}" for i in range(data.n_classes)]
        encoder = ToyTextEncoder(
            ToyTextEncoderConfig(d_cls=data.d_cls, seed=args.encoder_seed)
        )
        return CoopTextSource(encoder=encoder, context_len=args.coop, classnames=names)
    return None


def _cmd_synth(args) -> int:
    spec = SynthSpec.from_json(args.spec)
    train_path, val_path, manifest_path = synth_to_files(spec, args.out, args.seed)
    print(json.dumps({"train": train_path, "val": val_path, "manifest": manifest_path}))
    return 0


def _cmd_train(args) -> int:
    data = load_dataset(args.train)
    val = load_dataset(args.val)
    source = _build_text_source(args, data)
    cfg = _build_config(args, args.lr, args.wd, args.seed)
    episode = sample_few_shot(data.labels, args.shots, args.seed, data.n_classes)
    params, ctx, result = train_episode(data, source, episode, cfg, eval_data=val)
    os.makedirs(args.out, exist_ok=True)
    save_params(
        os.path.join(args.out, "params.bin"),
        params,
        cfg.head_mode,
        sopool=cfg.sopool,
        coop_context=ctx,
        meta={"shots": args.shots, "seed": args.seed, "lr": args.lr, "wd": args.wd},
    )
    record = {
        "shots": args.shots,
        "seed": args.seed,
        "lr": args.lr,
        "wd": args.wd,
        "accuracy": result.top1_accuracy,
        "loss_history": result.loss_history,
    }
    with open(os.path.join(args.out, "episode.json"), "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    print(json.dumps({"accuracy": result.top1_accuracy}))
    return 0


def _cmd_eval(args) -> int:
    params, mode, sopool, _, _ = load_params(args.model)
    data = load_dataset(args.data)
    accuracy = evaluate_top1(params, data, mode, sopool)
    print(json.dumps({"accuracy": accuracy, "n": data.n_samples}))
    return 0


def _cmd_zeroshot(args) -> int:
    data = load_dataset(args.data)
    text = load_text_features(args.text)
    class_feats = text.class_features(data.n_classes)
    hits = 0
    for i in range(data.n_samples):
        probs = zero_shot_probs(data.cls_tokens[i], class_feats, args.temperature)
        if int(np.argmax(probs)) == int(data.labels[i]):
            hits += 1
    print(json.dumps({"accuracy": hits / data.n_samples, "n": data.n_samples}))
    return 0


def _cmd_protocol(args) -> int:
    data = load_dataset(args.train)
    val = load_dataset(args.val)
    source = _build_text_source(args, data)
    scheme = args.scheme_name or ("coop" if args.coop else "text" if args.text else "none")
    cfg = _build_config(args, args.lr, args.wd, seed=0)
    shots = [int(s) for s in args.shots.split(",")]
    seeds = list(range(args.seeds))
    threads = int(os.environ.get("PM2_THREADS", "1"))
    table = run_protocol(
        data,
        [(scheme, source)],
        cfg,
        shots=shots,
        seeds=seeds,
        sweep=args.sweep,
        select_data=val,
        report_data=val,
        threads=threads,
    )
    episodes_path, summary_path = write_results(args.out, table)
    print(json.dumps({"episodes": episodes_path, "summary": summary_path}))
    return 0


def _cmd_gradcheck(args) -> int:
    names = list(CHECKS) if args.which == "all" else [args.which]
    failed = False
    for name in names:
        worst = CHECKS[name](n_coords=args.trials, seed=args.seed)
        ok = worst < 1e-4
        failed = failed or not ok
        print(f"{name}: max relative error {worst:.3e} [{'ok' if ok else 'FAIL'}]")
    return 1 if failed else 0


def _cmd_report(args) -> int:
    records = read_results(args.run)
    means = summarize_records(records)
    if args.format == "json":
        print(json.dumps(means, sort_keys=True))
        return 0
    shots = sorted({rec["shots"] for rec in records})
    print("text_prompt," + ",".join(f"{s}-shot" for s in shots))
    for scheme in sorted(means):
        cells = [repr(means[scheme].get(s, "")) for s in shots]
        print(scheme + "," + ",".join(cells))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pm2")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic feature files")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="train one few-shot episode")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--wd", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate saved parameters")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("zeroshot", help="zero-shot scoring from text features")
    p.add_argument("--data", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--temperature", type=float, default=0.01)
    p.set_defaults(fn=_cmd_zeroshot)

    p = sub.add_parser("protocol", help="full shots x seeds protocol")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--shots", default="1,2,4,8,16")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--lr", type=float, default=DEFAULT_LR_GRID[0])
    p.add_argument("--wd", type=float, default=DEFAULT_WD_GRID[0])
    p.add_argument("--scheme-name", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_protocol)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--which", default="all", choices=["sopool", "head", "coop", "all"])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("report", help="re-aggregate a protocol run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--format", default="csv", choices=["csv", "json"])
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
