"""Command-line entry point: ``lungseg {synth,train,eval,predict}``.

Exit codes: 0 success, 1 usage/config error, 2 I/O or file-format error,
3 numeric failure (NaN/Inf during training).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .dataset import (
    LAYOUTS,
    Manifest,
    SampleRecord,
    merge_manifests,
    read_manifest,
    scan_dataset,
    split,
    write_manifest,
    write_skipped_report,
)
from .errors import ConfigError, DataIOError, LungSegError, UsageError
from .evalkit import binarize, evaluate
from .imaging import (
    PHANTOM_MIN_SIZE,
    AugmentParams,
    normalize,
    read_gray,
    resize,
    write_mask,
    write_overlay,
    write_phantom_set,
)
from .trainer import EpochStats, TrainConfig, train_epochs, write_history
from .unet import UNetConfig, build_unet, load_checkpoint, predict

PROFILES = {
    "desk": {"input_size": 64, "depth": 3, "base_channels": 8, "epochs": 20},
    "paper": {"input_size": 512, "depth": 4, "base_channels": 64, "epochs": 200},
}


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run; resolved as defaults <- config file <- flags."""

    profile: str = "desk"
    input_size: int = 64
    depth: int = 3
    base_channels: int = 8
    epochs: int = 20
    batch_size: int = 4
    lr: float = 0.0005
    seed: int = 0
    augment: bool = True
    zoom_range: float = 0.05
    shift_range: float = 0.05
    hflip_prob: float = 0.5
    dilate_iterations: int = 1
    test_frac: float = 0.2
    val_frac: float = 0.1
    report_every: int = 1
    out: str = ""
    history: str = ""
    manifest_out: str = ""

    def unet_config(self) -> UNetConfig:
        return UNetConfig(depth=self.depth, base_channels=self.base_channels, input_size=self.input_size)

    def train_config(self) -> TrainConfig:
        if self.dilate_iterations < 0:
            raise ConfigError(f"dilate_iterations must be >= 0, got {self.dilate_iterations}")
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed, augment=self.augment,
            checkpoint=Path(self.out) if self.out else None, report_every=self.report_every,
            dilate_iterations=self.dilate_iterations,
            aug_params=AugmentParams(self.zoom_range, self.shift_range, self.hflip_prob),
        )

    def header(self) -> dict[str, object]:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, value) -> object:
    kind = type(_FIELDS[key].default)
    if isinstance(value, kind):
        return value
    text = str(value).strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {text!r} as {kind.__name__}") from None


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataIOError(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


def resolve_run_config(file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    """Merge defaults, the chosen profile, config-file values and flags, in that order."""
    file_values, flag_values = dict(file_values or {}), dict(flag_values or {})
    for key in (*file_values, *flag_values):
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
    profile = str(flag_values.get("profile", file_values.get("profile", RunConfig.profile)))
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {', '.join(PROFILES)}")
    merged: dict[str, object] = {"profile": profile, **PROFILES[profile]}
    merged.update({k: _coerce(k, v) for k, v in file_values.items()})
    merged.update({k: _coerce(k, v) for k, v in flag_values.items()})
    merged["profile"] = profile
    return replace(RunConfig(), **merged)


# -- argument parsing -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _run_flags(p: argparse.ArgumentParser) -> None:
    """Flags that override RunConfig keys; absent flags leave the key untouched."""
    quiet = argparse.SUPPRESS
    p.add_argument("--config", help="flat key=value file of run settings")
    p.add_argument("--profile", choices=sorted(PROFILES), default=quiet)
    p.add_argument("--seed", type=int, default=quiet)
    p.add_argument("--size", dest="input_size", type=int, default=quiet, help="network input size")
    p.add_argument("--depth", type=int, default=quiet)
    p.add_argument("--base-channels", type=int, default=quiet)
    p.add_argument("--dilate-iterations", type=int, default=quiet)
    p.add_argument("--test-frac", type=float, default=quiet)
    p.add_argument("--val-frac", type=float, default=quiet)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lungseg", description="U-Net lung segmentation for chest radiographs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic phantom image/mask pairs")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="scan, split and train; keeps the best-val checkpoint")
    p.add_argument("--data", nargs="+", required=True, type=Path, metavar="ROOT")
    p.add_argument("--layout", nargs="+", default=["generic"], choices=LAYOUTS,
                   help="one layout for all roots, or one per root")
    p.add_argument("--out", default=argparse.SUPPRESS, help="checkpoint path")
    p.add_argument("--history", default=argparse.SUPPRESS, help="history TSV (default CKPT.history.tsv)")
    p.add_argument("--manifest-out", default=argparse.SUPPRESS, help="manifest TSV (default CKPT.manifest.tsv)")
    p.add_argument("--no-augment", dest="augment", action="store_false", default=argparse.SUPPRESS)
    p.add_argument("--epochs", type=int, default=argparse.SUPPRESS)
    p.add_argument("--batch-size", type=int, default=argparse.SUPPRESS)
    p.add_argument("--lr", type=float, default=argparse.SUPPRESS)
    _run_flags(p)

    p = sub.add_parser("eval", help="per-image DICE of a checkpoint on one split")
    p.add_argument("--ckpt", required=True, type=Path)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", nargs="+", type=Path, metavar="ROOT")
    src.add_argument("--manifest", type=Path, help="manifest TSV written by train")
    p.add_argument("--layout", nargs="+", default=["generic"], choices=LAYOUTS)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--report", type=Path, help="per-sample TSV (default CKPT.SPLIT.dice.tsv)")
    _run_flags(p)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output mask PNG")
    p.add_argument("--overlay", type=Path, help="optional outline overlay PNG")
    p.add_argument("--threshold", type=float, default=0.5)
    return parser


def _run_config_from(args: argparse.Namespace) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k in _FIELDS}
    file_values = read_config_file(args.config) if args.config else {}
    return resolve_run_config(file_values, flags)


def _scan_all(roots: list[Path], layouts: list[str]) -> Manifest:
    if len(layouts) not in (1, len(roots)):
        raise UsageError(f"--layout takes one value or one per root ({len(roots)}), got {len(layouts)}")
    if len(layouts) == 1:
        layouts = layouts * len(roots)
    return merge_manifests(*(scan_dataset(r, lay) for r, lay in zip(roots, layouts)))


def _print_header(values: dict, out=None) -> None:
    out = out or sys.stdout
    for key, value in values.items():
        print(f"# {key}={value}", file=out)


# -- commands ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.size < PHANTOM_MIN_SIZE:
        raise UsageError(f"--size must be >= {PHANTOM_MIN_SIZE}, got {args.size}")
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    pairs = write_phantom_set(args.out, args.count, args.size, args.seed)
    records = [SampleRecord(img.stem, img, (mask,), "synthetic") for img, mask in pairs]
    prov = {"generator": "phantom", "count": str(args.count), "size": str(args.size), "seed": str(args.seed)}
    write_manifest(Manifest(records, prov), args.out / "manifest.tsv")
    print(f"wrote {len(pairs)} phantom pairs and manifest.tsv to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = _run_config_from(args)
    if not run.out:
        raise UsageError("train needs a checkpoint path (--out or out= in the config file)")
    unet_cfg, train_cfg = run.unet_config(), run.train_config()
    ckpt = Path(run.out)
    history_path = Path(run.history) if run.history else ckpt.with_name(ckpt.name + ".history.tsv")
    manifest_path = Path(run.manifest_out) if run.manifest_out else ckpt.with_name(ckpt.name + ".manifest.tsv")

    manifest = split(_scan_all(args.data, args.layout), run.seed, run.test_frac, run.val_frac)
    header = {**run.header(), "history": str(history_path), "manifest_out": str(manifest_path),
              "data": ";".join(str(d) for d in args.data), "layout": ";".join(args.layout)}
    counts = manifest.counts()
    header.update({f"n_{s}": counts[s] for s in ("train", "val", "test")})
    _print_header(header)
    write_manifest(manifest, manifest_path)
    if manifest.skipped:
        write_skipped_report(manifest, manifest_path.with_name(manifest_path.name + ".skipped.tsv"))

    def show(s: EpochStats) -> None:
        print(f"{s.epoch}\t{s.train_loss:.6f}\t{s.val_loss:.6f}\t{s.val_dice:.6f}", flush=True)

    params = build_unet(unet_cfg, run.seed)
    train_m = Manifest(manifest.subset("train"))
    val_m = Manifest(manifest.subset("val"))
    print("epoch\ttrain_loss\tval_loss\tval_dice")
    result = train_epochs(params, unet_cfg, train_cfg, train_m, val_m, on_epoch=show)
    write_history(result.history, history_path, header)
    print(f"# best_epoch={result.best_epoch}")
    print(f"# best_val_dice={result.best_val_dice:.6f}")
    return 0


def cmd_eval(args) -> int:
    run = _run_config_from(args)
    params, unet_cfg = load_checkpoint(args.ckpt)
    if args.manifest:
        manifest = read_manifest(args.manifest)
    else:
        manifest = _scan_all(args.data, args.layout)
        if args.split != "all":
            manifest = split(manifest, run.seed, run.test_frac, run.val_frac)
    split_name = args.split
    if split_name == "all":
        manifest = Manifest([replace(r, split="test") for r in manifest.records], manifest.provenance)
        split_name = "test"
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError(f"--threshold must lie in [0, 1], got {args.threshold}")
    report = evaluate(params, unet_cfg, manifest, split_name, args.threshold, args.batch_size,
                      run.dilate_iterations)
    report.split = args.split
    report_path = args.report or args.ckpt.with_name(f"{args.ckpt.name}.{args.split}.dice.tsv")
    report.write_tsv(report_path)
    print(report.summary())
    print(f"per-sample DICE written to {report_path}")
    return 0


def cmd_predict(args) -> int:
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError(f"--threshold must lie in [0, 1], got {args.threshold}")
    params, cfg = load_checkpoint(args.ckpt)
    original = read_gray(args.image)
    h, w = original.shape
    x = normalize(resize(original, cfg.input_size, cfg.input_size, "bilinear"))
    prob = predict(params, x[None, None])[0, 0]
    mask = resize(binarize(prob, args.threshold), w, h, "nearest")
    write_mask(args.out, mask)
    if args.overlay:
        write_overlay(args.overlay, original, mask)
    print(f"mask {w}x{h}, foreground fraction {float(np.mean(mask)):.4f} -> {args.out}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except LungSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
