"""Command-line entry point.

Every subcommand reads an optional ``--config`` file of ``key = value`` lines;
any key can also be given as ``--key value`` and the flag wins. Exit codes:
0 success, 2 configuration error, 3 data error, 4 registration failure
(``register`` only).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

from . import dataset, fileio, pipeline
from .errors import (ConfigError, DistregError, EmptyInput, InsufficientData, MalformedFile, NoPairInRange,
                     RegistrationFailed, SequenceTooShort, TooFewCorrespondences)
from .features import describe, embed, load_checkpoint, match_features
from .metrics import report_to_csv, report_to_json
from .scpcr import register

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_REGISTRATION = 0, 2, 3, 4
DATA_ERRORS = (MalformedFile, FileNotFoundError, SequenceTooShort, NoPairInRange, InsufficientData, EmptyInput)

logger = logging.getLogger("distreg")


def demo_checkpoint() -> Path:
    """Path of the checkpoint shipped with the package."""
    return Path(str(resources.files("distreg") / "data" / "demo_checkpoint.bin"))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file")
    group = p.add_argument_group("run settings (override the config file)")
    for f in fields(pipeline.RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar=f.name.upper())


def _run_config(args) -> pipeline.RunConfig:
    values = pipeline.read_config_file(args.config) if args.config else {}
    for f in fields(pipeline.RunConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            values[f.name] = v
    return pipeline.make_config(values)


def cmd_simulate(cfg, args) -> int:
    paths = pipeline.simulate_corpus(cfg.out_dir, cfg.n_sequences, cfg.n_frames, cfg.seed, cfg.speed,
                                     cfg.max_yaw_rate_deg, cfg.alpha, cfg.landmark_density)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_ingest_check(cfg, args) -> int:
    stores = dataset.ingest_corpus(_need(cfg.dataset, "dataset"), cfg.stride)
    for s in stores:
        pts = [len(s.load(i)) for i in range(len(s))]
        print(json.dumps({"sequence": s.name, "frames": len(s), "has_poses": s.poses is not None,
                          "points_min": min(pts), "points_max": max(pts)}, sort_keys=True))
    return EXIT_OK


def cmd_build_filter_map(cfg, args) -> int:
    _need(cfg.checkpoint, "checkpoint")
    _need(cfg.dataset, "dataset")
    sim_map = pipeline.filter_map(cfg)
    out = Path(args.output or Path(cfg.out_dir) / "similarity_map.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    sim_map.to_csv(out)
    print(out)
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    _need(cfg.dataset, "dataset")
    if cfg.filter == "adaptive":
        _need(cfg.map, "map")
    pipeline.train(cfg)
    print(Path(cfg.out_dir) / "checkpoint_final.bin")
    return EXIT_OK


def cmd_evaluate(cfg, args) -> int:
    _need(cfg.checkpoint, "checkpoint")
    _need(cfg.dataset, "dataset")
    report = pipeline.evaluate_checkpoint(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report_to_json(report))
    (out / "metrics.csv").write_text(report_to_csv(report))
    sys.stdout.write(report_to_json(report))
    return EXIT_OK


def cmd_register(cfg, args) -> int:
    student, _ = load_checkpoint(cfg.checkpoint or demo_checkpoint())
    src = fileio.read_cloud(args.src, cfg.stride)
    dst = fileio.read_cloud(args.dst, cfg.stride)
    f_s = embed(describe(src, cfg.descriptor_radius), student)
    f_t = embed(describe(dst, cfg.descriptor_radius), student)
    out = register(match_features(f_s, f_t), src, dst, cfg.registrar_config())
    for row in out.pose.matrix()[:3]:
        print(" ".join(f"{v:.9f}" for v in row))
    print(f"inliers {out.confidence}")
    return EXIT_OK


def cmd_ablate(cfg, args) -> int:
    _need(cfg.dataset, "dataset")
    rows = pipeline.ablate(cfg, _need(args.eval_dataset, "eval-dataset"))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.jsonl", "w") as fh:
        for r in rows:
            line = json.dumps(r, sort_keys=True)
            fh.write(line + "\n")
            print(line)
    return EXIT_OK


def _need(value, name):
    if not value:
        raise ConfigError(f"--{name} is required")
    return value


COMMANDS = {
    "simulate": (cmd_simulate, "write a synthetic LiDAR corpus"),
    "ingest-check": (cmd_ingest_check, "validate a dataset directory"),
    "build-filter-map": (cmd_build_filter_map, "record the adaptive-filter similarity map"),
    "train": (cmd_train, "self-supervised training"),
    "evaluate": (cmd_evaluate, "registration metrics per distance bucket"),
    "register": (cmd_register, "register two point-cloud files"),
    "ablate": (cmd_ablate, "sweep one training parameter"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distreg", description="Distant LiDAR registration toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        if name == "register":
            p.add_argument("src")
            p.add_argument("dst")
        if name == "build-filter-map":
            p.add_argument("--output", help="CSV path (default OUT_DIR/similarity_map.csv)")
        if name == "ablate":
            p.add_argument("--eval-dataset", dest="eval_dataset")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        cfg = _run_config(args)
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RegistrationFailed, TooFewCorrespondences) as exc:
        print(f"registration failed: {exc}", file=sys.stderr)
        return EXIT_REGISTRATION if args.command == "register" else EXIT_DATA
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DistregError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
