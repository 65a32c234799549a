"""Command-line front end.

Every command prints JSON lines on stdout. Schemas (one object per line):

* ``encode`` / ``eval``: ``{"event": "stats", "points", "blocks", "features":
  {name: {"bits", "bpp"}}, "header_bits", "total_bits", "total_bpp",
  "timings"}``; ``eval`` also prints one ``{"event": "feature", "feature",
  "bits", "bpp"}`` line per feature first.
* ``decode``: ``{"event": "decoded", "points", "output", "seconds"}``.
* ``train``: ``{"event": "epoch", "epoch", "step", <feature>: loss_bits}``
  per epoch, then ``{"event": "saved", "path", "checksum"}``.
* ``selftest``: ``{"suite", "passed", "detail", "seconds"}`` per suite.
* failures: ``{"event": "error", "kind", "message"}``.

Exit codes: 0 success, 1 usage, 2 I/O, 3 model mismatch, 4 corrupt bitstream
(``selftest`` exits 5 when a suite fails).
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import codec
from .blocktree import partition
from .models import ConfigError, ModelBundle, ModelConfig, FEATURE_NAMES
from .pcloud import PlyError, load_ply, voxelize, write_ply
from .sparsenn import ParamFileError

EXIT_USAGE, EXIT_IO, EXIT_MODEL, EXIT_CORRUPT, EXIT_SELFTEST = 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=False), flush=True)


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _common(p, model_required=True):
    p.add_argument("--config", help="key=value file supplying defaults for the flags below")
    p.add_argument("-m", "--model", required=model_required, help="model bundle file")
    p.add_argument("--workers", type=_positive, default=8)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cnetpc", description="Lossless learned point cloud geometry+colour coder.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", help="PLY -> bitstream")
    _common(p)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--bits", type=_positive, default=10, help="voxel grid bit depth n")
    p.add_argument("--shift", action="store_true", help="move the bounding-box minimum to the origin")
    p.add_argument("--colorspace", choices=("rgb", "ycocg"), help="must match the models if given")
    p.add_argument("--block-log2", type=_positive, help="must match the models if given")
    p.add_argument("--geometry-only", action="store_true", help="drop colours even if present")

    p = sub.add_parser("decode", help="bitstream -> PLY")
    _common(p)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--binary", action="store_true", help="write binary little-endian PLY")

    p = sub.add_parser("eval", help="per-feature rate of a cloud under a model")
    _common(p)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--bits", type=_positive, default=10)
    p.add_argument("--shift", action="store_true")
    p.add_argument("--verify", action="store_true", help="also decode and check losslessness")

    p = sub.add_parser("train", help="train a model bundle")
    _common(p, model_required=False)
    p.add_argument("-o", "--output", required=True, help="model bundle to write")
    p.add_argument("-i", "--input", nargs="*", default=[], help="training PLY files")
    p.add_argument("--bits", type=_positive, default=10)
    p.add_argument("--synthetic", type=int, default=0, help="number of synthetic blocks to add")
    p.add_argument("--colorspace", choices=("rgb", "ycocg"), default="rgb")
    p.add_argument("--block-log2", type=_positive, default=6)
    p.add_argument("--channels", type=_positive, default=32)
    p.add_argument("--o-res-blocks", type=int, default=2)
    p.add_argument("--c-res-blocks", type=int, default=10)
    p.add_argument("--k-first", type=_positive, default=5)
    p.add_argument("--epochs", type=_positive, default=1)
    p.add_argument("--batch-size", type=_positive, default=32)
    p.add_argument("--steps-per-epoch", type=_positive)
    p.add_argument("--lr", type=float, default=15e-5)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--log", help="CSV metric log path")
    p.add_argument("--checkpoint-dir")

    p = sub.add_parser("selftest", help="run the invariant suites")
    p.add_argument("--config")
    p.add_argument("--quick", action="store_true", help="fewer random cases per suite")
    return ap


def _read_config(path: str) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str], ns: argparse.Namespace) -> argparse.Namespace:
    """Re-parse with config values as defaults, so explicit flags still win."""
    sub = parser._subparsers._group_actions[0].choices[ns.command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    values = _read_config(ns.config)
    defaults = {}
    for key, value in values.items():
        if key not in actions:
            raise UsageError(f"unknown config key {key!r}")
        act = actions[key]
        if act.nargs == 0:
            if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise UsageError(f"config key {key!r} expects a boolean")
            defaults[key] = value.lower() in ("1", "true", "yes")
        elif act.nargs == "*":
            defaults[key] = value.split()
        else:
            try:
                defaults[key] = act.type(value) if act.type else value
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
            if act.choices and defaults[key] not in act.choices:
                raise UsageError(f"config key {key!r} must be one of {list(act.choices)}")
        act.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _load_bundle(path: str) -> ModelBundle:
    with open(path, "rb") as f:
        data = f.read()
    return ModelBundle.from_bytes(data)


def _load_cloud(path: str, n: int, shift: bool, geometry_only: bool = False):
    cloud = voxelize(load_ply(path), n, shift=shift)
    if geometry_only and not cloud.geometry_only:
        cloud = type(cloud)(cloud.coords, np.zeros((len(cloud), 0)), (), cloud.offset, True)
    return cloud


def cmd_encode(a) -> int:
    bundle = _load_bundle(a.model)
    if a.colorspace and a.colorspace != bundle.cfg.colorspace:
        raise codec.ModelMismatchError(f"models use {bundle.cfg.colorspace}, --colorspace is {a.colorspace}")
    if a.block_log2 and 1 << a.block_log2 != bundle.cfg.d:
        raise codec.ModelMismatchError(f"models use d={bundle.cfg.d}, --block-log2 gives {1 << a.block_log2}")
    cloud = _load_cloud(a.input, a.bits, a.shift, a.geometry_only)
    data, st = codec.encode_bytes(cloud, bundle, a.bits, a.workers)
    with open(a.output, "wb") as f:
        f.write(data)
    _emit({"event": "stats", **st.as_dict()})
    return 0


def cmd_decode(a) -> int:
    bundle = _load_bundle(a.model)
    with open(a.input, "rb") as f:
        data = f.read()
    t0 = time.perf_counter()
    cloud = codec.decode(data, bundle, a.workers)
    write_ply(a.output, cloud, binary=a.binary)
    _emit({"event": "decoded", "points": len(cloud), "output": a.output,
           "seconds": round(time.perf_counter() - t0, 3)})
    return 0


def cmd_eval(a) -> int:
    bundle = _load_bundle(a.model)
    cloud = _load_cloud(a.input, a.bits, a.shift)
    bs = codec.encode(cloud, bundle, a.bits, a.workers)
    st = codec.stats(bs, cloud)
    for name, bits, bpp in zip(st.feature_names, st.feature_bits, st.feature_bpp):
        _emit({"event": "feature", "feature": name, "bits": bits, "bpp": bpp})
    out = {"event": "stats", **st.as_dict()}
    if a.verify:
        out["lossless"] = bool(codec.decode(bs.to_bytes(), bundle, a.workers).equals(cloud))
    _emit(out)
    return 0 if out.get("lossless", True) else EXIT_CORRUPT


def cmd_train(a) -> int:
    from .trainer import TrainRun, synthetic_dataset, train

    cfg = ModelConfig(d=1 << a.block_log2, channels=a.channels, o_res_blocks=a.o_res_blocks,
                      c_res_blocks=a.c_res_blocks, k_first=a.k_first, colorspace=a.colorspace)
    blocks = []
    for path in a.input:
        cloud = _load_cloud(path, a.bits, shift=True)
        blocks += [b.points for b in partition(cloud, a.bits, a.block_log2).blocks]
    if a.synthetic:
        blocks += synthetic_dataset(a.synthetic, cfg.d, seed=a.seed)
    if not blocks:
        raise UsageError("no training data: give --input files or --synthetic N")
    if any(b.geometry_only for b in blocks):
        raise UsageError("training inputs must carry colour")
    bundle = _load_bundle(a.model) if a.model else None
    if bundle is not None and bundle.cfg != cfg:
        raise codec.ModelMismatchError("--model configuration differs from the requested one")
    run = TrainRun(seed=a.seed, epochs=1, batch_size=a.batch_size, lr=a.lr,
                   steps_per_epoch=a.steps_per_epoch, augment=not a.no_augment,
                   checkpoint_dir=a.checkpoint_dir, log_path=a.log)
    names = FEATURE_NAMES[cfg.colorspace]
    for epoch in range(a.epochs):
        # one epoch per call so progress can be reported
        run.first_epoch = epoch
        start = len(run.log)
        bundle = train(blocks, cfg, run, bundle)
        losses = {}
        for _, name, loss, _, _ in run.log[start:]:
            losses.setdefault(name, []).append(loss)
        _emit({"event": "epoch", "epoch": epoch, "step": run.steps,
               **{n: float(np.mean(losses[n])) for n in names if n in losses}})
    bundle.save(a.output)
    _emit({"event": "saved", "path": a.output, "checksum": bundle.checksum().hex()})
    return 0


def cmd_selftest(a) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(quick=a.quick, report=_emit) else EXIT_SELFTEST


COMMANDS = {"encode": cmd_encode, "decode": cmd_decode, "eval": cmd_eval,
            "train": cmd_train, "selftest": cmd_selftest}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            ns = parser.parse_args(argv)
        except UsageError:
            # required flags may come from a config file
            pre = _Parser(add_help=False)
            pre.add_argument("command", nargs="?")
            pre.add_argument("--config")
            known, _ = pre.parse_known_args(argv)
            if not known.config or known.command not in COMMANDS:
                raise
            ns = argparse.Namespace(command=known.command, config=known.config)
        if getattr(ns, "config", None):
            ns = _apply_config(parser, argv, ns)
        return COMMANDS[ns.command](ns)
    except UsageError as exc:
        _emit({"event": "error", "kind": "usage", "message": str(exc)})
        return EXIT_USAGE
    except (codec.ModelMismatchError, ConfigError, ParamFileError) as exc:
        _emit({"event": "error", "kind": "model", "message": str(exc)})
        return EXIT_MODEL
    except codec.DecodeError as exc:
        _emit({"event": "error", "kind": "corrupt", "message": str(exc)})
        return EXIT_CORRUPT
    except (OSError, PlyError, IndexError) as exc:
        _emit({"event": "error", "kind": "io", "message": str(exc)})
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
