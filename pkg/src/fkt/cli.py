"""Command-line entry point: ``fkt {run,compare,cam,eval}``.

Exit codes: 0 success, 2 config, 3 divergence, 4 checkpoint, 5 I/O.
"""
from __future__ import annotations

import argparse
import datetime as dt
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import __version__
from .augment import eval_transform
from .config import RunConfig, read_config
from .errors import FKTError, IncompatibleCheckpoint, InvalidConfig, PersistenceError
from .evaluation import canonical_json, evaluate, grad_cam, render_cam_overlay
from .model import load_checkpoint, model_from_checkpoint
from .pipelines import configure_determinism, prepare_data, run_comparison, run_experiment, write_text
from .plots import plot_comparison_bars, plot_curves

log = logging.getLogger("fkt")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_CHECKPOINT, EXIT_IO = 0, 2, 3, 4, 5
CAM_MIN_SIZE = 64
RUN_SUBDIRS = ("checkpoints", "cams", "plots")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def make_run_dir(parent, regime: str, dataset: str) -> Path:
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path(parent) / f"{stamp}_{regime}_{dataset}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{k}")
        k += 1
    try:
        for sub in RUN_SUBDIRS:
            (path / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistenceError(f"cannot create run directory {path}: {exc}") from exc
    return path


def _artifacts(run_dir: Path) -> dict:
    return {"root": str(run_dir),
            "files": sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*") if p.is_file())}


def write_manifest(run_dir: Path, cfg: RunConfig, started: str, command: list, extra=None) -> Path:
    manifest = {"config_hash": cfg.hash(), "config": cfg.to_dict(), "start": started, "end": _now(),
                "framework_version": __version__, "torch_version": torch.__version__,
                "seeds": list(cfg.seeds), "command": command, **(extra or {})}
    write_text(run_dir / "config.json", canonical_json(cfg.to_dict()))
    manifest["artifacts"] = _artifacts(run_dir) | {"manifest": "manifest.json"}
    return write_text(run_dir / "manifest.json", canonical_json(manifest))


def _load_cfg(path, args) -> RunConfig:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides += [f"seeds=[{args.seed}]", "trials=1"]
    if args.device:
        overrides.append(f"device={args.device}")
    if args.determinism is not None:
        overrides.append(f"determinism={'true' if args.determinism else 'false'}")
    return read_config(path, overrides)


# ---------------------------------------------------------------- commands

def cmd_run(args) -> int:
    started = _now()
    cfg = _load_cfg(args.config, args)
    run_dir = make_run_dir(args.output_dir or cfg.output_dir, cfg.regime, cfg.dataset.name)
    log.info("run directory %s", run_dir)
    result = run_experiment(cfg, run_dir)
    plot_curves({f"seed{t.seed}": t.records for t in result.trials}, run_dir / "plots" / "curves.png",
                f"{cfg.regime} / {cfg.dataset.name}")
    write_manifest(run_dir, result.cfg, started, sys.argv)
    print(run_dir)
    return EXIT_OK


def cmd_compare(args) -> int:
    started = _now()
    cfg_rep = _load_cfg(args.representational, args)
    cfg_fun = _load_cfg(args.functional, args)
    run_dir = make_run_dir(args.output_dir or cfg_rep.output_dir, "compare", cfg_rep.dataset.name)
    report, results = run_comparison(cfg_rep, cfg_fun, run_dir)
    curves = {f"{regime}/seed{t.seed}": t.records for regime, res in results.items() for t in res.trials}
    plot_curves(curves, run_dir / "plots" / "curves.png", f"comparison / {cfg_rep.dataset.name}")
    plot_comparison_bars(report, run_dir / "plots" / "comparison_bars.png")
    write_manifest(run_dir, results["functional"].cfg, started, sys.argv,
                   {"representational_config_hash": results["representational"].cfg.hash()})
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _cam_targets(cfg: RunConfig, sample_ids):
    cfg, train, test = prepare_data(cfg)
    pool = {int(s): (split, i) for split in (test, train) for i, s in enumerate(split.sample_ids.tolist())}
    missing = [s for s in sample_ids if s not in pool]
    if missing:
        raise InvalidConfig("sample_ids", f"unknown sample ids {missing}")
    return cfg, [(s, *pool[s]) for s in sample_ids]


def cmd_cam(args) -> int:
    cfg = _load_cfg(args.config, args)
    if cfg.dataset.image_size < CAM_MIN_SIZE and not args.force:
        log.warning("CAM skipped: %dpx inputs are below the %dpx minimum (use --force to override)",
                    cfg.dataset.image_size, CAM_MIN_SIZE)
        return EXIT_OK
    models = []
    for path in args.checkpoint:
        ckpt = load_checkpoint(path)
        if ckpt.header.get("num_classes") != cfg.dataset.num_classes:
            raise IncompatibleCheckpoint(f"{path}: checkpoint has {ckpt.header.get('num_classes')} classes, "
                                         f"dataset has {cfg.dataset.num_classes}")
        models.append((ckpt.header.get("regime", Path(path).stem), model_from_checkpoint(ckpt).eval()))
    cfg, targets = _cam_targets(cfg, args.sample_ids)
    out_dir = Path(args.out_dir)
    unnormalized = replace(cfg.augment, normalization_mean=None, normalization_std=None)
    for sample_id, split, i in targets:
        raw = split.batch([i])
        x = eval_transform(raw, cfg.augment)
        for regime, model in models:
            target = int(raw.labels[0]) if args.target == "label" else int(model(x.pixels).argmax(1)[0])
            cam = grad_cam(model, x, target, sample_id)
            original = eval_transform(raw, unnormalized).pixels[0]
            path = render_cam_overlay(cam, original, out_dir / f"cam_{cfg.dataset.name}_{sample_id}_{regime}.png")
            print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args.config, args)
    configure_determinism(cfg.determinism)
    cfg, _, test = prepare_data(cfg)
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    report = evaluate(model, test, cfg.augment, cfg.eval_batch_size)
    text = canonical_json({"checkpoint": str(args.checkpoint), "dataset": cfg.dataset.name, **report.to_dict()})
    if args.out:
        write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fkt", description="Representational vs functional knowledge transfer")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--override", action="append", metavar="KEY=VALUE", help="dot-path override, repeatable")
        p.add_argument("--seed", type=int, help="run a single trial with this seed")
        p.add_argument("--device", choices=("cpu", "gpu"))
        p.add_argument("--determinism", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--output-dir", help="parent directory for run folders (default: config output_dir)")

    p = sub.add_parser("run", help="train one regime over its configured seeds")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="representational vs functional transfer over shared seeds")
    common(p, config=False)
    p.add_argument("--representational", required=True, metavar="CONFIG")
    p.add_argument("--functional", required=True, metavar="CONFIG")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("cam", help="Grad-CAM overlays for selected samples")
    common(p)
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--sample-ids", required=True, nargs="+", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--target", choices=("label", "prediction"), default="label")
    p.add_argument("--force", action="store_true", help="produce CAMs even for inputs below 64px")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FKTError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
