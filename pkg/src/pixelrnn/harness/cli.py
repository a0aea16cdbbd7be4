"""Command line: pixelrnn <subcommand> [--config run.json] [overrides].

Every subcommand writes line-delimited JSON records (also echoed to stdout)
and a final manifest.json into --output.  Failures exit nonzero after
printing one JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .. import __version__, container
from ..pearray import NoiseModel, PEArray, characterize_noise, clip_seed, encode_clips, run_clip
from ..train.fit import TrainConfig, evaluate, load_checkpoint, save_checkpoint
from .data import SynthSpec, synth_dataset
from .experiments import (
    POOL_GRID,
    Metrics,
    RunConfig,
    bandwidth_sweep,
    load_clips,
    noise_study,
    report_accounting,
    run_experiment,
    splits,
)

_RUN_FLAGS = ("arch", "cnn_layers", "precision", "regime", "K", "pool", "noise_sigma", "dataset", "output",
              "data_seed", "split_seed")
_TRAIN_FLAGS = ("epochs", "lr", "lr_max", "lr_min", "patience", "lr_factor", "batch_size", "m", "mode",
                "decoder_decay", "init_scale", "tau_init", "augment_shift", "augment_time",
                "encoder_lr_scale", "target_acc", "threads")


class Output:
    """JSONL sink plus manifest for one invocation."""

    def __init__(self, root, name: str, quiet: bool = False):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.path = self.root / f"{name}.jsonl"
        self.fh = open(self.path, "w")
        self.quiet = quiet
        self.t0 = time.perf_counter()
        self.files = [self.path.name]

    def emit(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        self.fh.write(line + "\n")
        self.fh.flush()
        if not self.quiet:
            print(line, flush=True)

    def add_file(self, name: str) -> None:
        self.files.append(name)

    def close(self, command: str, config: dict | None, extra: dict | None = None) -> None:
        self.fh.close()
        manifest = {
            "command": command,
            "version": __version__,
            "python": platform.python_version(),
            "config": config,
            "files": self.files,
            "wall_clock": time.perf_counter() - self.t0,
            **(extra or {}),
        }
        (self.root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--arch")
    p.add_argument("--cnn-layers", type=int)
    p.add_argument("--precision", choices=("binary", "full32"))
    p.add_argument("--regime", choices=("pm1", "01"))
    p.add_argument("--K", type=int)
    p.add_argument("--pool", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--dataset", help="directory with class/clip/frame images")
    p.add_argument("--synth", help="JSON object of synthetic-task settings")
    p.add_argument("--data-seed", type=int)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--output", help="output directory")
    types = {f.name: f.type for f in fields(TrainConfig)}
    for name in _TRAIN_FLAGS:
        kind = {"int": int, "float": float, "str": str}.get(str(types[name]).split(" ")[0], float)
        p.add_argument("--" + name.replace("_", "-"), type=kind, dest="t_" + name)
    p.add_argument("--augment-roll", action="store_true", default=None, dest="t_augment_roll")
    p.add_argument("--quiet", action="store_true")


def run_config(args) -> RunConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    for name in _RUN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            base[name] = v
    if args.seeds is not None:
        base["seeds"] = args.seeds
    if args.synth is not None:
        base["synth"] = {**base.get("synth", {}), **json.loads(args.synth)}
    train = dict(base.get("train", {}))
    for name in _TRAIN_FLAGS + ("augment_roll",):
        v = getattr(args, "t_" + name, None)
        if v is not None:
            train[name] = v
    base["train"] = train
    return RunConfig.from_dict(base)


def _out_dir(cfg: RunConfig, default: str) -> str:
    return cfg.output if cfg.output is not None else default


def cmd_train(args) -> None:
    cfg = run_config(args)
    out = Output(_out_dir(cfg, "runs/train"), "metrics", args.quiet)
    data = load_clips(cfg)
    for seed in cfg.seeds:
        metrics, res = run_experiment(cfg, seed, data=data, log=lambda r: out.emit({"type": "epoch", **r}))
        out.emit({"type": "metrics", **metrics.record()})
        name = f"checkpoint_seed{seed}.pxck"
        save_checkpoint(out.root / name, res.model, {"run": cfg.to_dict(), "seed": seed})
        out.add_file(name)
    out.close("train", cfg.to_dict())


def cmd_eval(args) -> None:
    cfg = run_config(args)
    model, header = load_checkpoint(args.checkpoint)
    out = Output(_out_dir(cfg, "runs/eval"), "eval", args.quiet)
    x, y, classes = load_clips(cfg)
    split = args.split
    if split == "all":
        xs, ys = x, y
    else:
        tr, va, te = splits(cfg, x, y)
        xs, ys = {"train": tr, "val": va, "test": te}[split]
    s = evaluate(model, xs, ys)
    out.emit({"type": "eval", "split": split, "accuracy": s["acc"], "loss": s["loss"],
              "per_class": s["per_class"], "n": int(len(ys)), "classes": classes})
    out.close("eval", cfg.to_dict(), {"checkpoint": str(args.checkpoint)})


def cmd_sweep(args) -> None:
    cfg = run_config(args)
    out = Output(_out_dir(cfg, "runs/sweep"), "sweep", args.quiet)
    pools = tuple(args.pools) if args.pools else POOL_GRID
    rows, timing = bandwidth_sweep(cfg, pools=pools, seeds=cfg.seeds if args.seeds else None, workers=args.workers)
    for row in rows:
        out.emit({"type": "sweep", **row})
    out.close("sweep-bandwidth", cfg.to_dict(), {"cell_wall_clock": timing})


def cmd_noise(args) -> None:
    cfg = run_config(args)
    out = Output(_out_dir(cfg, "runs/noise"), "noise_study", args.quiet)
    report = noise_study(cfg, sigma=args.sigma, finetune_epochs=args.finetune_epochs,
                         warm_start=not args.cold_start)
    for row in report["rows"]:
        out.emit({"type": "noise_study", "sigma": report["sigma"], **row})
    out.close("noise-study", cfg.to_dict())


def cmd_accounting(args) -> None:
    out = Output(args.output or "runs/accounting", "accounting", args.quiet)
    report = report_accounting()
    for row in report["rows"]:
        out.emit({"type": "accounting", **row})
    out.close("report-accounting", None, {"binary_tolerance": report["binary_tolerance"],
                                          "full32_tolerance": report["full32_tolerance"]})


def cmd_emulate(args) -> None:
    cfg = run_config(args)
    out = Output(_out_dir(cfg, "runs/emulate"), "emulate", args.quiet)
    model, _ = load_checkpoint(args.checkpoint)
    spec, params = model.encoder.spec, model.encoder.export_params()
    noise = NoiseModel(sigma=args.sigma) if args.sigma > 0 else NoiseModel.off()
    x, y, _ = load_clips(cfg)
    if args.limit:
        x, y = x[:args.limit], y[:args.limit]
    feats = encode_clips(spec, params, x, noise, seed=cfg.seeds[0], run=args.run)
    container.write_features(out.root / "features.pxck", feats, y,
                             {"sigma": args.sigma, "run": args.run, "seed": cfg.seeds[0]})
    out.add_file("features.pxck")
    out.emit({"type": "emulate", "clips": int(len(x)), "shape": list(feats.shape), "sigma": args.sigma,
              "run": args.run})
    if args.trace:
        array = PEArray(noise, seed=clip_seed(cfg.seeds[0], 0, args.run), trace=True)
        run_clip(array, spec, params, x[0])
        (out.root / "trace.txt").write_text(array.dump_trace() + "\n")
        out.add_file("trace.txt")
    if args.characterize:
        stats = characterize_noise(PEArray(noise, seed=cfg.seeds[0]), repetitions=args.characterize)
        out.emit({"type": "noise_characterization", "mean": stats["mean"], "std": stats["std"], "n": stats["n"],
                  "hist": stats["hist"].tolist(), "edges": stats["edges"].tolist()})
    out.close("emulate", cfg.to_dict(), {"checkpoint": str(args.checkpoint)})


def cmd_synth(args) -> None:
    from PIL import Image

    cfg = run_config(args)
    sspec = cfg.synth_spec()
    root = Path(_out_dir(cfg, "runs/synth"))
    out = Output(root, "synth", args.quiet)
    data_root = root / "clips"
    for clip in synth_dataset(sspec, cfg.data_seed):
        d = data_root / sspec.classes[clip.label] / clip.name
        d.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(clip.frames):
            Image.fromarray(frame).save(d / f"{t:03d}.png")
        out.emit({"type": "clip", "name": clip.name, "label": clip.label, "class": sspec.classes[clip.label]})
    out.close("synth-data", cfg.to_dict(), {"synth": sspec.to_dict(), "clips_dir": str(data_root)})


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pixelrnn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train one model per seed")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", help="score a checkpoint on a split")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("sweep-bandwidth", help="accuracy vs readout bandwidth over pooling sizes")
    _add_run_flags(p)
    p.add_argument("--pools", type=int, nargs="+")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("noise-study", help="noise-free vs noise-trained models through the noisy array")
    _add_run_flags(p)
    p.add_argument("--sigma", type=float, default=2.90)
    p.add_argument("--finetune-epochs", type=int, default=300)
    p.add_argument("--cold-start", action="store_true", help="train the noise-trained model from scratch")
    p.set_defaults(func=cmd_noise)
    p = sub.add_parser("report-accounting", help="parameter / memory / bandwidth manifest")
    p.add_argument("--output")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_accounting)
    p = sub.add_parser("emulate", help="run a checkpoint's encoder on the emulated array")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--run", type=int, default=0)
    p.add_argument("--limit", type=int, default=0, help="encode only the first N clips")
    p.add_argument("--trace", action="store_true", help="dump the primitive log of the first clip")
    p.add_argument("--characterize", type=int, default=0, metavar="REPS",
                   help="also characterize upload noise over REPS repetitions")
    p.set_defaults(func=cmd_emulate)
    p = sub.add_parser("synth-data", help="write the synthetic task as a clip directory")
    _add_run_flags(p)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error record
        print(json.dumps({"type": "error", "command": args.command, "error": type(exc).__name__,
                          "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
