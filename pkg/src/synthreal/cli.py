"""Command-line entry point: ``synthreal <subcommand> [flags]``.

Every subcommand writes ``run_manifest.yaml`` into its output directory.
Config values resolve as flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import evaluation as ev
from .config import ConfigError, TrainConfig, dump_config, from_dict, set_key, to_dict
from .nets import load_weights, save_weights
from .toymm import build_datasets, load_bundle, sample_params, save_bundle
from .trainer import (CheckpointError, MetricsLog, TrainingDiverged, all_training_ids, checkpoint_load,
                      checkpoint_save, pretrain_embedder, train, translate)

log = logging.getLogger("synthreal")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3
OUT_ENV = "SYNTHREAL_OUT"
MANIFEST = "run_manifest.yaml"
COMMANDS = ("make-data", "pretrain-embedder", "train", "evaluate", "ablate", "augment-exp", "emit-grids")

# flag dest -> dotted config key
_OVERRIDES = {
    "seed": "seed",
    "size": "data.image_size",
    "iters": "total_iters",
    "lambda_cyc": "loss.lambda_cyc",
    "lambda_dp": "loss.lambda_DP",
    "lambda_c": "loss.lambda_C",
    "lambda_id": "loss.lambda_id",
    "eq7_sign": "identity.eq7_sign",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--out", type=Path, help=f"output directory (default: ${OUT_ENV}/<command>)")
    p.add_argument("--size", type=int, choices=(32, 64, 108), help="image size")
    p.add_argument("--iters", type=int, help="training iterations")
    p.add_argument("--lambda-cyc", type=float, help="cycle loss weight")
    p.add_argument("--lambda-dp", type=float, help="pair loss weight")
    p.add_argument("--lambda-c", type=float, help="identity set loss weight")
    p.add_argument("--lambda-id", type=float, help="identity pixel loss weight")
    p.add_argument("--eq7-sign", choices=("as_printed", "magnet"), help="exponent sign of the identity set loss")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set nets.bottleneck=32 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthreal",
                                     description="Toy synthetic-to-real face translation experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")

    p = sub.add_parser("make-data", help="render and save the toy datasets")
    _common(p)

    p = sub.add_parser("pretrain-embedder", help="pretrain the identity embedder")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory from make-data")

    p = sub.add_parser("train", help="train the translation networks")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory from make-data")
    p.add_argument("--embedder", type=Path, help="embedder weights from pretrain-embedder")
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint if present")

    p = sub.add_parser("evaluate", help="verification metrics and oracle fidelity of a trained run")
    _common(p)
    p.add_argument("--run", type=Path, required=True, help="train output directory")
    p.add_argument("--pairs", type=int, default=1000, help="positive and negative pairs each")

    p = sub.add_parser("ablate", help="train and compare the loss ablations")
    _common(p)
    p.add_argument("--pairs", type=int, default=1000, help="positive and negative pairs each")

    p = sub.add_parser("augment-exp", help="classifier training with and without generated images")
    _common(p)
    p.add_argument("--run", type=Path, required=True, help="train output directory")
    p.add_argument("--fractions", type=float, nargs="+", default=[0.2, 0.5, 1.0])
    p.add_argument("--classifier-iters", type=int, default=600)
    p.add_argument("--pairs", type=int, default=1000, help="positive and negative pairs each")

    p = sub.add_parser("emit-grids", help="sample, interpolation and illumination grids")
    _common(p)
    p.add_argument("--run", type=Path, help="train output directory (omit for raw renders)")
    return parser


# ---------------------------------------------------------------------------
# config resolution


def _parse_value(text: str):
    return yaml.safe_load(text)


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Defaults, then the config file, then flags."""
    data: dict = {}
    if args.config is not None:
        try:
            with open(args.config) as f:
                data = yaml.safe_load(f) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}", ["--config"]) from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {exc}", ["--config"]) from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping", ["<root>"])
    for dest, key in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            set_key(data, key, value)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}", [item])
        set_key(data, key, _parse_value(value))
    return from_dict(data)


def output_dir(args: argparse.Namespace) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


def write_manifest(out: Path, command: str, cfg: TrainConfig, artifacts: dict, started: float) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "config": to_dict(cfg),
    }
    path = out / MANIFEST
    path.write_text(yaml.safe_dump(manifest, sort_keys=False))
    return path


def read_manifest(path: str | Path) -> tuple[dict, TrainConfig]:
    """Load a run manifest and parse its config section."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    manifest = yaml.safe_load(path.read_text())
    return manifest, from_dict(manifest["config"])


# ---------------------------------------------------------------------------
# subcommands


def _bundle(args, cfg: TrainConfig):
    data = getattr(args, "data", None)
    return load_bundle(data) if data else build_datasets(cfg)


def _trained(run: Path):
    state = checkpoint_load(run / "checkpoint")
    data = run / "data"
    bundle = load_bundle(data) if data.exists() else build_datasets(state.config)
    return state, bundle


def cmd_make_data(args, cfg, out):
    path = save_bundle(build_datasets(cfg), out / "data")
    return {"data": path}


def cmd_pretrain_embedder(args, cfg, out):
    bundle = _bundle(args, cfg)
    w = pretrain_embedder(bundle.pretrain, cfg, all_training_ids(bundle))
    save_weights(w, out / "embedder", seed=cfg.seed)
    return {"embedder": out / "embedder.npz"}


def cmd_train(args, cfg, out):
    bundle = _bundle(args, cfg)
    ckpt = out / "checkpoint"
    metrics_path = out / "metrics.jsonl"
    state = None
    if args.resume and ckpt.exists():
        state = checkpoint_load(ckpt)
        if dump_config(state.config) != dump_config(cfg):
            raise ConfigError("resumed checkpoint was trained with a different config", ["--config"])
    embedder = load_weights(args.embedder) if args.embedder else None
    if state is None and not args.data:
        save_bundle(bundle, out / "data")
    cfg_out = cfg if state is None else state.config
    metrics = MetricsLog(metrics_path, resume_from=state.iteration if state else None)
    state, _ = train(cfg_out, bundle, embedder, out_dir=out, state=state, metrics=metrics)
    checkpoint_save(state, ckpt)
    report = ev.evaluate(state, bundle, seed=cfg.seed, **_pair_counts(bundle, 1000))
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    return {"checkpoint": ckpt, "metrics": metrics_path, "report": out / "report.json"}


def _pair_counts(bundle, requested: int) -> dict:
    """Requested positive/negative pair counts, capped by what the held-out split offers."""
    _, counts = np.unique(bundle.heldout.labels, return_counts=True)
    n = int(counts.sum())
    pos = int((counts * (counts - 1) // 2).sum())
    neg = n * (n - 1) // 2 - pos
    return {"n_pos": min(requested, pos), "n_neg": min(requested, neg)}


def cmd_evaluate(args, cfg, out):
    state, bundle = _trained(args.run)
    pairs = _pair_counts(bundle, args.pairs)
    report = ev.evaluate(state, bundle, seed=cfg.seed, **pairs)
    raw_eer, raw_acc, raw_hist = ev.verify(bundle.heldout.images, bundle.heldout.labels, state.embedder,
                                           seed=cfg.seed, **pairs)
    result = report.to_dict()
    result.update(synthetic_accuracy=raw_acc, synthetic_one_minus_eer=1.0 - raw_eer)
    (out / "report.json").write_text(json.dumps(result, indent=1))
    report.histogram.write(out / "histogram_generated.csv")
    raw_hist.write(out / "histogram_synthetic.csv")
    print(json.dumps(result, indent=1))
    return {"report": out / "report.json", "histogram": out / "histogram_generated.csv"}


def cmd_ablate(args, cfg, out):
    bundle = build_datasets(cfg)
    embedder = pretrain_embedder(bundle.pretrain, cfg, all_training_ids(bundle))
    rows = ev.run_ablation(cfg, bundle, embedder, **_pair_counts(bundle, args.pairs))
    with open(out / "ablation.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps({"variant": r.name, "data_fingerprint": r.data_fingerprint,
                                "config_fingerprint": r.config_fingerprint, "error": r.error,
                                **(r.report.to_dict() if r.report else {})}) + "\n")
    table = ev.format_table(rows)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return {"table": out / "ablation.txt"}


def cmd_augment_exp(args, cfg, out):
    state, bundle = _trained(args.run)
    synth = bundle.unpaired_synthetic
    generated = (translate(state.generator(), synth.images), synth.labels)
    real = (bundle.unpaired_real.images, bundle.unpaired_real.labels)
    test = (bundle.heldout.targets, bundle.heldout.labels)
    aug = ev.AugmentConfig(iters=args.classifier_iters, **_pair_counts(bundle, args.pairs))
    cells = ev.augmentation_experiment(args.fractions, generated, real, test, state.config, aug, seed=cfg.seed)
    with open(out / "augment.jsonl", "w") as f:
        for c in cells:
            f.write(json.dumps(vars(c)) + "\n")
    for c in cells:
        print(f"fraction {c.fraction:.2f} augmented {str(c.augmented):5} accuracy {c.accuracy:.4f} eer {c.eer:.4f}")
    return {"table": out / "augment.jsonl"}


def cmd_emit_grids(args, cfg, out):
    if args.run:
        state, bundle = _trained(args.run)
        G, cfg = state.generator(), state.config
    else:
        G, bundle = None, None
    size = cfg.data.image_size
    a, b = sample_params(cfg.seed, 2, 1, d_id=cfg.data.d_id, d_ex=cfg.data.d_ex, id_start=10 ** 6)
    paths = {"interpolation": out / "interpolation.png", "illumination": out / "illumination.png"}
    ev.emit_interpolation_grid(a, b, 6, np.linspace(-0.8, 0.8, 5), G, paths["interpolation"], size,
                               cfg.data.channels)
    ev.emit_illumination_strip(a, np.linspace(0, 1, 6), G, paths["illumination"], size, cfg.data.channels)
    if bundle is not None:
        held = bundle.heldout
        n = min(8, len(held))
        rows = np.concatenate([held.images[:n], translate(G, held.images[:n]), held.targets[:n]])
        paths["samples"] = out / "samples.png"
        ev.emit_grid(rows, 3, n, paths["samples"])
    return paths


_HANDLERS = {
    "make-data": cmd_make_data,
    "pretrain-embedder": cmd_pretrain_embedder,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "augment-exp": cmd_augment_exp,
    "emit-grids": cmd_emit_grids,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"synthreal: invalid configuration: {exc}", file=sys.stderr)
        print("offending keys: " + ", ".join(exc.keys), file=sys.stderr)
        return EXIT_CONFIG
    out = output_dir(args)
    started = time.time()
    try:
        out.mkdir(parents=True, exist_ok=True)
        artifacts = _HANDLERS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"synthreal: invalid configuration: {exc}", file=sys.stderr)
        print("offending keys: " + ", ".join(exc.keys), file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, TrainingDiverged, ev.DataError, OSError, ValueError) as exc:
        print(f"synthreal {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    write_manifest(out, args.command, cfg, artifacts, started)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
