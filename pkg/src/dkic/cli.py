"""Command-line entry point: ``dkic {train,compress,decompress,eval,bdrate,inspect}``.

Exit status is 0 on success, 2 for usage errors, 3 for data errors
(missing/corrupt files, bad config values) and 4 for numeric failures.
Errors are reported as a single ``dkic: error[<kind>]: <message>`` line on
stderr. ``DKIC_MODEL_DIR`` names the directory searched for ``model.npz``
when ``--model`` is omitted.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import torch

from .checkpoint import load_checkpoint
from .codec import NumericFailure, compress_file, decompress_file, load_image
from .evaluation import RdCurve, bd_rate, evaluate_images, latent_group_stats, visualize_offsets
from .model import DKIC, ModelConfig
from .training import IMAGE_SUFFIXES, TrainConfig, train

__all__ = ["EXIT_DATA", "EXIT_NUMERIC", "EXIT_OK", "EXIT_USAGE", "CliError", "main", "resolve_train_config"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODEL_DIR_ENV = "DKIC_MODEL_DIR"

log = logging.getLogger("dkic")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report("usage", message)
        raise SystemExit(EXIT_USAGE)


def _report(kind: str, message: str) -> None:
    line = " ".join(str(message).split())
    print(f"dkic: error[{kind}]: {line}", file=sys.stderr)


# --- configuration --------------------------------------------------------------

_MODEL_KEYS = {"preset", "transform", "entropy"}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_train_config(config_path=None, overrides=(), **flags) -> tuple[TrainConfig, ModelConfig, dict]:
    """Merge preset defaults, the JSON config file and ``key=value`` overrides.

    Training keys are the :class:`TrainConfig` fields. Model keys are
    ``preset`` ("toy" or "full") and ``transform.<field>`` /
    ``entropy.<field>``. Flags given explicitly win over everything.
    """
    raw: dict = {}
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise CliError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise CliError("config file must hold a JSON object")
    merged = {k: v for k, v in raw.items() if k not in ("transform", "entropy")}
    transform = dict(raw.get("transform", {}))
    entropy = dict(raw.get("entropy", {}))
    for item in overrides:
        if "=" not in item:
            raise CliError(f"override must be key=value, got {item!r}", EXIT_USAGE)
        key, value = item.split("=", 1)
        value = _parse_value(value)
        if key.startswith("transform."):
            transform[key.split(".", 1)[1]] = value
        elif key.startswith("entropy."):
            entropy[key.split(".", 1)[1]] = value
        else:
            merged[key] = value
    merged.update({k: v for k, v in flags.items() if v is not None})

    preset = merged.pop("preset", "toy")
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(merged) - train_keys
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}", EXIT_USAGE)
    try:
        if preset == "toy":
            tcfg = TrainConfig.toy(**merged)
            mcfg = ModelConfig.toy()
        elif preset == "full":
            tcfg = TrainConfig(**merged)
            mcfg = ModelConfig.full()
        else:
            raise CliError(f"unknown preset {preset!r}", EXIT_USAGE)
        if "base_width" in transform:
            transform["base_width"] = tuple(transform["base_width"])
        mcfg = mcfg.replace(transform=transform, entropy=entropy)
    except TypeError as exc:
        raise CliError(f"unknown config keys: {exc}", EXIT_USAGE) from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    resolved = {"preset": preset, **asdict(tcfg), "model": mcfg.to_dict()}
    return tcfg, mcfg, resolved


def _model_path(arg) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get(MODEL_DIR_ENV)
    if env:
        return Path(env) / "model.npz"
    raise CliError(f"no --model given and {MODEL_DIR_ENV} is not set", EXIT_USAGE)


def _load_model(arg) -> DKIC:
    path = _model_path(arg)
    if not path.is_file():
        raise CliError(f"model checkpoint not found: {path}")
    try:
        model, _ = load_checkpoint(path)
    except (ValueError, KeyError, OSError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from None
    return model


def _image_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"image directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise CliError(f"no images in {d}")
    return files


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# --- commands -------------------------------------------------------------------


def cmd_train(args) -> int:
    tcfg, mcfg, resolved = resolve_train_config(
        args.config, args.set, seed=args.seed, dataset_path=args.dataset
    )
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_atomic(out / "config.json", json.dumps(resolved, indent=2, sort_keys=True))
    torch.manual_seed(tcfg.seed)
    model = DKIC(mcfg)
    try:
        history = train(model, tcfg, out_dir=out, steps=args.steps)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from None
    last = history[-1] if history else {}
    print(json.dumps({"steps": len(history), "checkpoint": str(out / "model.npz"), **last}))
    return EXIT_OK


def cmd_compress(args) -> int:
    model = _load_model(args.model)
    bits = compress_file(args.image, args.output, model)
    print(f"{bits:.6f} bpp")
    return EXIT_OK


def cmd_decompress(args) -> int:
    model = _load_model(args.model)
    bits = decompress_file(args.bitstream, args.output, model)
    print(f"{bits:.6f} bpp")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    rows = evaluate_images(model, _image_files(args.dir))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, ["name", "width", "height", "bpp", "psnr"], lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({**r, "bpp": f"{r['bpp']:.6f}", "psnr": f"{r['psnr']:.4f}"})
    mean_bpp = sum(r["bpp"] for r in rows) / len(rows)
    mean_psnr = sum(r["psnr"] for r in rows) / len(rows)
    writer.writerow({"name": "mean", "width": "", "height": "", "bpp": f"{mean_bpp:.6f}", "psnr": f"{mean_psnr:.4f}"})
    _write_atomic(Path(args.output), buf.getvalue())
    print(f"{mean_bpp:.6f} bpp {mean_psnr:.4f} dB")
    return EXIT_OK


def _read_curve(path) -> RdCurve:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"RD curve not found: {p}")
    if p.suffix.lower() == ".json":
        return RdCurve.from_json(p)
    return RdCurve.from_csv(p)


def cmd_bdrate(args) -> int:
    value = bd_rate(_read_curve(args.test), _read_curve(args.anchor))
    print(f"{value:.2f}%")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if not (args.offsets or args.latent_stats):
        raise CliError("inspect needs --offsets and/or --latent-stats", EXIT_USAGE)
    model = _load_model(args.model)
    out = Path(args.output)
    if args.offsets:
        if not args.image:
            raise CliError("--offsets needs --image", EXIT_USAGE)
        try:
            row, col = (int(v) for v in args.target.split(","))
        except ValueError:
            raise CliError(f"--target must be ROW,COL, got {args.target!r}", EXIT_USAGE) from None
        record = visualize_offsets(
            model,
            load_image(args.image),
            (row, col),
            block=args.block,
            json_path=out.with_suffix(".offsets.json"),
            png_path=out.with_suffix(".offsets.png"),
        )
        print(f"offsets: {len(record['points'])} sampling points from {record['block']}")
    if args.latent_stats:
        files = _image_files(args.dir) if args.dir else [Path(args.image)] if args.image else None
        if not files:
            raise CliError("--latent-stats needs --dir or --image", EXIT_USAGE)
        stats = latent_group_stats(model, [load_image(f) for f in files])
        _write_atomic(out.with_suffix(".latent.json"), json.dumps(stats, indent=2))
        flag = " (untrained model)" if stats["untrained"] else ""
        print("latent mean |y_hat| per group: " + " ".join(f"{g['mean_abs_y_hat']:.3f}" for g in stats["groups"]) + flag)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dkic", description="Dynamic-kernel learned image codec.")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    t.add_argument("--dataset", help="directory of training images")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="stop after this many steps")
    t.add_argument("-o", "--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", help="encode an image")
    c.add_argument("image")
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--model")
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="decode a bitstream to PNG")
    d.add_argument("bitstream")
    d.add_argument("-o", "--output", required=True)
    d.add_argument("--model")
    d.set_defaults(func=cmd_decompress)

    e = sub.add_parser("eval", help="RD point over a directory of images")
    e.add_argument("--model")
    e.add_argument("--dir", required=True)
    e.add_argument("-o", "--output", default="rd_point.csv")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bdrate", help="BD-rate of two RD curves (CSV or JSON)")
    b.add_argument("--test", required=True)
    b.add_argument("--anchor", required=True)
    b.set_defaults(func=cmd_bdrate)

    i = sub.add_parser("inspect", help="dump sampling locations or latent statistics")
    i.add_argument("--model")
    i.add_argument("--offsets", action="store_true")
    i.add_argument("--latent-stats", action="store_true")
    i.add_argument("--image")
    i.add_argument("--dir")
    i.add_argument("--target", default="0,0", help="ROW,COL on the feature grid")
    i.add_argument("--block", type=int, default=0, help="index of the analysis-side LDCN")
    i.add_argument("-o", "--output", default="inspect")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        _report("usage" if exc.code == EXIT_USAGE else "data", str(exc))
        return exc.code
    except NumericFailure as exc:
        _report("numeric", str(exc))
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        _report("data", str(exc))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
