"""Command-line entry point: dataset generation, training, evaluation,
benchmarking. Every command writes a JSON run manifest next to its outputs;
exit codes: 0 ok, 2 bad config, 3 divergence, 4 I/O error."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .bench import CPU_COST_MODEL, run_bench
from .dataset import generate_toy_scene, load_dataset, save_dataset
from .errors import BadConfig, BitfcnError, DivergenceDetected
from .graph import load_model, save_model
from .trainer import SplitData, TrainConfig, evaluate_miou, train_bfcn

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4

GEN_DEFAULTS = dict(train=512, val=128, size="64x64", classes=5, seed=0)
TRAIN_DEFAULTS = dict(kw=2, ka=2, route="p1", decay_rate=None, decay_iters=None,
                      variant="residual", lr=0.02, iters=600, seed=0, batch=4,
                      momentum=0.9, width=8)
BENCH_DEFAULTS = dict(configs="1x1,1x2,2x2,4x4,8x8,fp", shape="1,64,32,32",
                      reps=20, seed=0)


def _sample_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(index,))


def _load_config_file(path: str) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        fileconf = _load_config_file(args.config)
        for key, raw in fileconf.items():
            if key not in resolved:
                raise ValueError(f"unknown config key {key!r}")
            ref = resolved[key]
            if ref is None or isinstance(ref, str):
                resolved[key] = raw if raw != "none" else None
            elif isinstance(ref, int):
                resolved[key] = int(raw)
            else:
                resolved[key] = float(raw)
    for key in resolved:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _write_manifest(path: str, command: str, config: dict, seed, artifacts: list) -> None:
    manifest = {
        "command": command,
        "config": {k: v for k, v in sorted(config.items())},
        "seed": seed,
        "artifacts": artifacts,
        "tool_version": __version__,
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_gen(args) -> int:
    cfg = _resolve(args, GEN_DEFAULTS)
    h, w = (int(v) for v in str(cfg["size"]).lower().split("x"))
    n_train, n_val, classes, seed = cfg["train"], cfg["val"], cfg["classes"], cfg["seed"]
    samples, splits = [], []
    for i in range(n_train + n_val):
        samples.append(generate_toy_scene(_sample_seed(seed, i), h, w, classes))
        splits.append("train" if i < n_train else "val")
    save_dataset(args.out, samples, splits)
    _write_manifest(os.path.join(args.out, "run_manifest.json"), "gen", cfg, seed,
                    ["images/", "labels/", "manifest.tsv"])
    print(f"wrote {n_train} train + {n_val} val samples ({h}x{w}, {classes} classes) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    train = load_dataset(args.data, "train")
    val = load_dataset(args.data, "val")
    if not train:
        raise FileNotFoundError(f"no train split under {args.data}")
    classes = max(int(s.labels.max()) for s in train) + 1
    tc = TrainConfig(lr=float(cfg["lr"]), momentum=float(cfg["momentum"]),
                     batch=int(cfg["batch"]), iters=int(cfg["iters"]),
                     route={"p1": "p1", "p2": "p2", "p1-8bit": "p1-8bit"}[cfg["route"]])
    decay_rate = cfg["decay_rate"]
    result = train_bfcn(
        SplitData(train, val), k_w=int(cfg["kw"]), k_a=int(cfg["ka"]),
        variant=cfg["variant"], base_width=int(cfg["width"]),
        num_classes=classes, seed=int(cfg["seed"]), cfg=tc,
        decay_rate=None if decay_rate is None else int(decay_rate),
        decay_step_iters=None if cfg["decay_iters"] is None else int(cfg["decay_iters"]),
        eval_stages=bool(val),
    )
    save_model(args.out, result.net, result.velocity)
    log_path = args.out + ".log"
    with open(log_path, "w") as f:
        f.write("\n".join(result.log_lines) + "\n")
    _write_manifest(args.out + ".manifest.json", "train", cfg, int(cfg["seed"]),
                    [args.out, log_path])
    for stage in result.stages:
        miou = "-" if stage.val_miou is None else f"{stage.val_miou:.4f}"
        print(f"stage {stage.name}: bits {stage.k_w}-{stage.k_a}, "
              f"iters {stage.iters}, val mIoU {miou}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _ = load_model(args.model)
    samples = load_dataset(args.data, args.split)
    if not samples:
        raise FileNotFoundError(f"no {args.split} split under {args.data}")
    max_label = max(int(s.labels.max(initial=0)) for s in samples)
    if max_label >= net.num_classes:
        raise BadConfig(
            f"dataset has labels up to {max_label} but model predicts "
            f"{net.num_classes} classes"
        )
    miou, per_class, _ = evaluate_miou(net, samples)
    lines = ["class\tiou"]
    for c, iou in enumerate(per_class):
        lines.append(f"{c}\t{'nan' if np.isnan(iou) else f'{iou:.6f}'}")
    lines.append(f"mean\t{miou:.6f}")
    table = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(table)
        _write_manifest(args.out + ".manifest.json", "eval",
                        {"model": args.model, "data": args.data, "split": args.split},
                        None, [args.out])
    sys.stdout.write(table)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _resolve(args, BENCH_DEFAULTS)
    shape = tuple(int(v) for v in str(cfg["shape"]).split(","))
    configs = []
    for token in str(cfg["configs"]).split(","):
        token = token.strip()
        if token == "fp":
            configs.append("fp")
        else:
            k_w, k_a = (int(v) for v in token.split("x"))
            configs.append((k_w, k_a))
    report = run_bench(shape, configs, reps=int(cfg["reps"]), seed=int(cfg["seed"]),
                       model=CPU_COST_MODEL)
    out = args.out or "bench_report.tsv"
    with open(out, "w") as f:
        f.write(report.to_tsv())
    _write_manifest(out + ".manifest.json", "bench", cfg, int(cfg["seed"]), [out])
    print(report.format_table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitfcn",
                                     description="low bit-width FCN engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic segmentation dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int)
    p.add_argument("--val", type=int)
    p.add_argument("--size", help="HxW, default 64x64")
    p.add_argument("--classes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kw", type=int, help="weight bits (32 = full precision)")
    p.add_argument("--ka", type=int, help="activation bits (32 = full precision)")
    p.add_argument("--route", choices=["p1", "p2", "p1-8bit"])
    p.add_argument("--decay-rate", dest="decay_rate", type=int)
    p.add_argument("--decay-iters", dest="decay_iters", type=int)
    p.add_argument("--variant", choices=["single", "wide", "residual"])
    p.add_argument("--lr", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model, printing per-class IoU")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="benchmark bit kernels vs the float path")
    p.add_argument("--configs", help="comma list like 1x1,2x2,fp")
    p.add_argument("--shape", help="N,C,H,W")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DivergenceDetected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (BitfcnError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
