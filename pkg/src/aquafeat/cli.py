"""Command-line entry point: ``aquafeat {dataset,train,enhance,eval,bench}``.

Option values resolve as built-in defaults < ``--config`` file < flags, and
the resolved values are echoed as ``config <key>=<value>`` lines.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import tensor as T
from .dataset import (
    DataError,
    Record,
    read_annotations,
    read_manifest,
    read_ppm,
    resolve,
    sample_frames,
    split_dataset,
    unify_labels,
    write_annotations,
    write_manifest,
    write_ppm,
)
from .detector import decode_predictions, head_forward
from .metrics import MetricReport, evaluate_detections, fps_bench
from .net import NetConfig, enhance, enhance_tensor
from .train import NumericError, TrainConfig, init_model, load_checkpoint, model_shapes, train_loop

logger = logging.getLogger("aquafeat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


@dataclass(frozen=True)
class Option:
    key: str
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


_NET = NetConfig()
NET_OPTIONS = [
    Option("cf_channels", int, _NET.cf_channels, "feature channels of the encoder"),
    Option("dense_growth", int, _NET.dense_growth, "channels added per dense layer"),
    Option("leaky_slope", float, _NET.leaky_slope, "negative slope of leaky ReLU"),
    Option("residual_target", str, _NET.residual_target, "'original' or 'corrected'"),
    Option("safa_heads", int, _NET.safa_heads, "attention heads in cross-scale fusion"),
    Option("head_channels", int, _NET.head_channels, "channels of the detector head"),
]

_TRAIN = TrainConfig()
OPTIONS: dict[str, list[Option]] = {
    "dataset": [
        Option("manifest", str, None, "input manifest (image, label, frame[, split])"),
        Option("out", str, "dataset_manifest.tsv", "output manifest path"),
        Option("labels_dir", str, None, "where unified labels go (default: <out dir>/labels_unified)"),
        Option("stride", int, 30, "keep one frame every N per video"),
        Option("splits", _floats, (0.7, 0.2, 0.1), "train,test,val fractions"),
        Option("seed", int, 0, "split seed"),
    ],
    "train": [
        Option("data", str, None, "manifest to train on"),
        Option("split", str, "train", "split tag to use (untagged manifests use every record)"),
        Option("out", str, "aquafeat.ckpt", "checkpoint path"),
        Option("steps", int, _TRAIN.steps, "optimizer steps"),
        Option("learning_rate", float, _TRAIN.learning_rate, ""),
        Option("batch_size", int, _TRAIN.batch_size, ""),
        Option("betas", _floats, _TRAIN.betas, "beta1,beta2"),
        Option("eps", float, _TRAIN.eps, ""),
        Option("weight_decay", float, _TRAIN.weight_decay, ""),
        Option("seed", int, _TRAIN.seed, ""),
        Option("checkpoint_every", int, 0, "also save every N steps (0 = only at the end)"),
        Option("trainable", str, "all", "'all' or 'head' (enhancer frozen at its init)"),
        *NET_OPTIONS,
    ],
    "enhance": [
        Option("ckpt", str, None, "checkpoint to load"),
        Option("input", str, None, "PPM file or directory of PPM files"),
        Option("out", str, None, "output file (file input) or directory"),
        *NET_OPTIONS,
    ],
    "eval": [
        Option("ckpt", str, None, "checkpoint to load"),
        Option("data", str, None, "manifest to evaluate"),
        Option("split", str, "test", "split tag to evaluate ('all' for every record)"),
        Option("conf", float, 0.25, "confidence threshold for precision/recall"),
        Option("nms", float, 0.5, "NMS IoU threshold"),
        Option("out", str, "report.txt", "report path"),
        Option("dets_dir", str, None, "optionally write per-image detections here"),
        *NET_OPTIONS,
    ],
    "bench": [
        Option("ckpt", str, None, "checkpoint (default: freshly initialised model)"),
        Option("size", int, 64, "square input side"),
        Option("iters", int, 100, "timed iterations per repetition"),
        Option("warmup", int, 5, ""),
        Option("repetitions", int, 5, ""),
        Option("seed", int, 0, "init seed when no checkpoint is given"),
        *NET_OPTIONS,
    ],
}

REQUIRED = {"dataset": ["manifest"], "train": ["data"], "enhance": ["ckpt", "input", "out"], "eval": ["ckpt", "data"]}
# ``--in`` is the documented spelling; ``input`` is its key
FLAG_ALIASES = {"input": ["--in", "--input"]}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aquafeat", description="Underwater image enhancement trained through a detection loss.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, options in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        for opt in options:
            flags = FLAG_ALIASES.get(opt.key, ["--" + opt.key.replace("_", "-")])
            default = ",".join(map(str, opt.default)) if isinstance(opt.default, tuple) else opt.default
            p.add_argument(*flags, dest=opt.key, default=None, metavar=opt.key.upper(),
                           help=f"{opt.help} (default: {default})".strip())
    return parser


def read_config_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve_config(command: str, flags: dict[str, Any], file_values: dict[str, str]) -> dict[str, Any]:
    options = {o.key: o for o in OPTIONS[command]}
    unknown = sorted(set(file_values) - set(options))
    if unknown:
        raise UsageError(f"unknown config key(s) for '{command}': {', '.join(unknown)}")
    resolved = {}
    for key, opt in options.items():
        raw = flags.get(key)
        if raw is None:
            raw = file_values.get(key)
        if raw is None:
            resolved[key] = opt.default
            continue
        try:
            resolved[key] = opt.parse(raw)
        except (TypeError, ValueError):
            raise UsageError(f"invalid value for {key}: {raw!r}") from None
    missing = [k for k in REQUIRED.get(command, []) if resolved[k] is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")
    return resolved


def echo_config(command: str, cfg: dict[str, Any], out) -> None:
    print(f"config command={command}", file=out)
    for k, v in cfg.items():
        shown = ",".join(map(str, v)) if isinstance(v, tuple) else v
        print(f"config {k}={shown}", file=out)


def net_config(cfg: dict[str, Any]) -> NetConfig:
    try:
        return NetConfig(**{k: cfg[k] for k in NetConfig.keys()})
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_model(path, ncfg: NetConfig):
    params, _ = load_checkpoint(path, model_shapes(ncfg))
    return params


def _select_split(records: Sequence[Record], split: str) -> list[Record]:
    if split == "all" or all(r.split is None for r in records):
        return list(records)
    return [r for r in records if r.split == split]


# ---------------------------------------------------------------- commands


def cmd_dataset(cfg: dict[str, Any], out) -> int:
    manifest = Path(cfg["manifest"])
    if not manifest.is_file():
        raise DataError(f"input manifest not found: {manifest}")
    base = manifest.parent
    records = sample_frames(read_manifest(manifest), cfg["stride"])
    missing = [p for r in records for p in (resolve(base, r.image_path), resolve(base, r.ann_path)) if not p.is_file()]
    if missing:
        listing = "\n".join(f"  missing: {p}" for p in missing)
        raise DataError(f"{len(missing)} referenced file(s) do not exist:\n{listing}")
    splits = cfg["splits"]
    if len(splits) != 3:
        raise UsageError(f"--splits needs three fractions (train,test,val), got {len(splits)}")
    try:
        records = split_dataset(records, splits, cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    out_path = Path(cfg["out"])
    out_dir = out_path.parent
    labels_dir = Path(cfg["labels_dir"]) if cfg["labels_dir"] else out_dir / "labels_unified"
    written = []
    for r in records:
        src = resolve(base, r.ann_path)
        dst = labels_dir / r.video / src.name
        dst.parent.mkdir(parents=True, exist_ok=True)
        write_annotations(unify_labels(read_annotations(src)), dst)
        image = os.path.relpath(resolve(base, r.image_path), out_dir)
        written.append(Record(image, os.path.relpath(dst, out_dir), r.frame, r.split))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(written, out_path)
    counts = {s: sum(r.split == s for r in written) for s in ("train", "test", "val")}
    print(f"records={len(written)} train={counts['train']} test={counts['test']} val={counts['val']}", file=out)
    print(f"manifest={out_path}", file=out)
    return EXIT_OK


def cmd_train(cfg: dict[str, Any], out) -> int:
    ncfg = net_config(cfg)
    try:
        tcfg = TrainConfig(learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"], betas=tuple(cfg["betas"]),
                           eps=cfg["eps"], weight_decay=cfg["weight_decay"], steps=cfg["steps"], seed=cfg["seed"],
                           checkpoint_path=cfg["out"], checkpoint_every=cfg["checkpoint_every"],
                           trainable=cfg["trainable"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = Path(cfg["data"])
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    records = _select_split(read_manifest(manifest), cfg["split"])
    if not records:
        raise DataError(f"no records with split {cfg['split']!r} in {manifest}")

    def log(line: str) -> None:
        print(line, file=out, flush=True)

    path = train_loop(tcfg, records, manifest.parent, ncfg, log)
    print(f"checkpoint={path}", file=out)
    return EXIT_OK


def _ppm_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() == ".ppm" and p.is_file())
    if path.is_file():
        return [path]
    raise DataError(f"input not found: {path}")


def cmd_enhance(cfg: dict[str, Any], out) -> int:
    ncfg = net_config(cfg)
    params = load_model(cfg["ckpt"], ncfg)
    src = Path(cfg["input"])
    inputs = _ppm_inputs(src)
    if src.is_dir():
        dest_dir = Path(cfg["out"])
        dest_dir.mkdir(parents=True, exist_ok=True)
        targets = [dest_dir / p.name for p in inputs]
    else:
        targets = [Path(cfg["out"])]
    for p, dst in zip(inputs, targets):
        result = enhance(read_ppm(p), params, ncfg)
        if not np.all(np.isfinite(result)):
            raise NumericError(f"non-finite enhanced output for {p}")
        write_ppm(result, dst)
        print(f"wrote {dst}", file=out)
    return EXIT_OK


def cmd_eval(cfg: dict[str, Any], out) -> int:
    ncfg = net_config(cfg)
    params = load_model(cfg["ckpt"], ncfg)
    manifest = Path(cfg["data"])
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    records = _select_split(read_manifest(manifest), cfg["split"])
    if not records:
        logger.warning("split %r is empty; writing a degenerate report", cfg["split"])
    dets_dir = Path(cfg["dets_dir"]) if cfg["dets_dir"] else None
    if dets_dir is not None:
        dets_dir.mkdir(parents=True, exist_ok=True)
    dtype = params["head.pred.weight"].dtype
    all_dets, all_gts = [], []
    elapsed = 0.0
    for r in records:
        image = read_ppm(resolve(manifest.parent, r.image_path))
        all_gts.append(read_annotations(resolve(manifest.parent, r.ann_path)))
        start = time.perf_counter()
        with T.no_grad():
            enhanced = enhance_tensor(image.transpose(2, 0, 1)[None].astype(dtype), params, ncfg)
            # keep low-confidence detections for AP; P/R apply --conf below
            dets = decode_predictions(head_forward(enhanced, params, ncfg), 0.001, cfg["nms"])
        elapsed += time.perf_counter() - start
        all_dets.append(dets)
        if dets_dir is not None:
            lines = "".join(d.format() + "\n" for d in dets)
            (dets_dir / (Path(r.image_path).stem + ".txt")).write_text(lines)
    report = evaluate_detections(all_dets, all_gts, cfg["conf"])
    report.fps = len(records) / elapsed if elapsed > 0 else 0.0
    text = report.render()
    Path(cfg["out"]).write_text(text)
    out.write(text)
    return EXIT_OK


def cmd_bench(cfg: dict[str, Any], out) -> int:
    ncfg = net_config(cfg)
    if cfg["size"] < 1 or cfg["iters"] < 1:
        raise UsageError("--size and --iters must be >= 1")
    params = load_model(cfg["ckpt"], ncfg) if cfg["ckpt"] else init_model(ncfg, cfg["seed"])
    dtype = params["head.pred.weight"].dtype
    image = np.random.default_rng(cfg["seed"]).random((1, 3, cfg["size"], cfg["size"])).astype(dtype)

    def pipeline():
        with T.no_grad():
            return head_forward(enhance_tensor(image, params, ncfg), params, ncfg)

    result = fps_bench(pipeline, cfg["warmup"], cfg["iters"], cfg["repetitions"])
    out.write(result.render())
    return EXIT_OK


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "enhance": cmd_enhance, "eval": cmd_eval, "bench": cmd_bench}


def main(argv: Sequence[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    handler = logging.StreamHandler(err)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    logger.addHandler(handler)
    try:
        args = build_parser().parse_args(argv)
        logger.setLevel(logging.DEBUG if args.verbose else logging.INFO)
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, flags, file_values)
        echo_config(args.command, cfg, out)
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"aquafeat: usage error: {exc}", file=err)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"aquafeat: numeric failure: {exc}", file=err)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"aquafeat: data error: {exc}", file=err)
        return EXIT_DATA
    finally:
        logger.removeHandler(handler)
