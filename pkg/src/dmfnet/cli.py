"""Command-line interface: ``dmfnet gen-data | train | eval | complete``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
4 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from dmfnet import dataio, geometry
from dmfnet.config import ConfigError, NetConfig, PRESETS, TrainConfig, net_from_dict, resolve
from dmfnet.errors import CheckpointError, FormatError, NonFiniteError, ShapeError
from dmfnet.metrics import DEFAULT_TAU
from dmfnet.model import CompletionNet
from dmfnet.training import Trainer, evaluate, log_header, metrics_table

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

_NET_FIELDS = {f.name: f for f in dataclasses.fields(NetConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(text):
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        return text
    return tuple(value) if isinstance(value, list) else value


def _overrides(args):
    net, train = {}, {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects name=value, got {item!r}")
        if key in _NET_FIELDS:
            net[key] = _parse_value(raw)
        elif key in _TRAIN_FIELDS:
            train[key] = _parse_value(raw)
        else:
            raise ConfigError(f"unknown config field {key!r}")
    for flag, key in (("epochs", "epochs"), ("lr", "lr0"), ("batch_size", "batch_size"),
                      ("seed", "seed"), ("checkpoint_every", "checkpoint_every")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    return net, train


def _write_config(out_dir, command, net, train=None, **extra):
    doc = {"command": command, "net": net.to_dict(), **extra}
    if train is not None:
        doc["train"] = train.to_dict()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _kind_counts(count, kinds):
    base, extra = divmod(count, len(kinds))
    return {k: base + (i < extra) for i, k in enumerate(kinds)}


def cmd_gen_data(args):
    net, _ = resolve(args.preset, *_overrides(args))
    kinds = args.kinds.split(",")
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    out = Path(args.out)
    manifest = dataio.gen_dataset(_kind_counts(args.count, kinds), net.n_points, net.image_size,
                                  net.image_size, args.seed, out, args.fraction)
    _write_config(out, "gen-data", net, seed=args.seed, count=args.count, kinds=kinds,
                  fraction=args.fraction)
    path = out / "manifest.json"
    print(f"{path} ({len(manifest['samples'])} samples)")
    return EXIT_OK


def _check_resolution(net, samples):
    for s in samples:
        if s.partial.shape[0] != net.n_points or s.image.shape[:2] != (net.image_size, net.image_size):
            raise ShapeError(f"dataset sample has {s.partial.shape[0]} points and a "
                             f"{s.image.shape[0]}x{s.image.shape[1]} image; model expects "
                             f"{net.n_points} points and {net.image_size}x{net.image_size}")


def cmd_train(args):
    net_over, train_over = _overrides(args)
    out = Path(args.out)
    ckpt = None
    if args.resume:
        ckpt = dataio.load_checkpoint(args.resume)
        if "train" not in ckpt.config or "net" not in ckpt.config:
            raise CheckpointError(f"{args.resume}: checkpoint carries no run config")
        net = dataclasses.replace(net_from_dict(ckpt.config["net"]), **net_over).validate()
        train = dataclasses.replace(TrainConfig(**ckpt.config["train"]), **train_over).validate()
    else:
        net, train = resolve(args.preset, net_over, train_over)
    samples = dataio.load_samples(args.data, None if args.split == "all" else args.split)
    if not samples:
        raise ConfigError(f"no {args.split} samples in {args.data}")
    _check_resolution(net, samples)
    trainer = Trainer(CompletionNet(net, seed=train.seed), train)
    if ckpt is not None:
        try:
            trainer.restore(ckpt)
        except CheckpointError as exc:
            raise ConfigError(str(exc)) from None
    _write_config(out, "train", net, train, data=str(args.data), split=args.split)
    log_path, ckpt_path = out / "log.csv", out / "model.ckpt"
    if ckpt is None or not log_path.exists():
        log_path.write_text(log_header(), encoding="utf-8")
    with open(log_path, "a", encoding="utf-8", newline="\n") as log:
        trainer.fit(samples, train.epochs, log=log, checkpoint_path=ckpt_path)
    if not ckpt_path.exists():
        trainer.save(ckpt_path)
    print(f"{ckpt_path} (epoch {trainer.epoch})")
    return EXIT_OK


def _load_model(path):
    ckpt = dataio.load_checkpoint(path)
    if "net" not in ckpt.config:
        raise CheckpointError(f"{path}: checkpoint carries no network config")
    net = CompletionNet(net_from_dict(ckpt.config["net"]))
    try:
        dataio.check_compatible(ckpt, net.params)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from None
    net.params.load_state(ckpt.params)
    return net


def cmd_eval(args):
    net = _load_model(args.checkpoint)
    samples = dataio.load_samples(args.data, None if args.split == "all" else args.split)
    if not samples:
        raise ConfigError(f"no {args.split} samples in {args.data}")
    if not args.gt_as_prediction:
        _check_resolution(net.cfg, samples)
    report = evaluate(net, samples, args.tau, gt_as_prediction=args.gt_as_prediction)
    text, csv_text = metrics_table(report, args.tau)
    out = Path(args.out)
    _write_config(out, "eval", net.cfg, checkpoint=str(args.checkpoint), data=str(args.data),
                  split=args.split, tau=args.tau, gt_as_prediction=args.gt_as_prediction)
    (out / "metrics.txt").write_text(text, encoding="utf-8")
    (out / "metrics.csv").write_text(csv_text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _resample(points, n):
    if points.shape[0] > n:
        return points[geometry.fps(points, n)]
    return np.resize(points, (n, 3))


def cmd_complete(args):
    net = _load_model(args.checkpoint)
    cfg = net.cfg
    partial = dataio.load_ply(args.partial)
    image = dataio.load_image(args.image)
    if partial.shape[0] != cfg.n_points:
        if not args.resample:
            raise ShapeError(f"input has {partial.shape[0]} points, model expects {cfg.n_points} "
                             "(pass --resample to adjust)")
        partial = _resample(partial, cfg.n_points)
    if image.shape[:2] != (cfg.image_size, cfg.image_size):
        raise ShapeError(f"image is {image.shape[0]}x{image.shape[1]}, model expects "
                         f"{cfg.image_size}x{cfg.image_size}")
    out = net.forward(partial, image)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataio.save_ply(path, out.pc.data)
    written = [path]
    if args.stages:
        for tag, cloud in (("p0", out.p0), ("seed", out.seed), ("p1", out.p1)):
            stage = path.with_name(f"{path.stem}_{tag}{path.suffix}")
            dataio.save_ply(stage, cloud.data)
            written.append(stage)
    _write_config(path.parent, "complete", cfg, checkpoint=str(args.checkpoint),
                  partial=str(args.partial), image=str(args.image), resample=args.resample)
    for p in written:
        print(p)
    return EXIT_OK


def _add_config_flags(p, preset=True):
    if preset:
        p.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    p.add_argument("--set", action="append", metavar="NAME=VALUE",
                   help="override any network or training config field")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dmfnet", description="Complete partial point clouds guided by a single image.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kinds", default=",".join(dataio.KINDS))
    p.add_argument("--fraction", type=float, default=0.5, help="occluded fraction per sample")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset manifest")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="train")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--gt-as-prediction", action="store_true",
                   help="score the ground truth against itself")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("complete", help="complete one partial cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partial", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", action="store_true", help="also write the intermediate clouds")
    p.add_argument("--resample", action="store_true",
                   help="FPS or replicate the input to the model's point count")
    p.set_defaults(func=cmd_complete)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"dmfnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"dmfnet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"dmfnet {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
