"""
Command-line entry point::

    bridgesynth phantom-gen --cases 20 --seed 7 --out data
    bridgesynth prep --cases-file data/cases.json --variant AV --out data
    bridgesynth train --manifest data/manifest.json --epochs 2 --out run
    bridgesynth sample --manifest data/manifest.json --split test --ckpt run/ckpt --out synth
    bridgesynth eval --manifest data/manifest.json --split test --pred-dir synth --out eval
    bridgesynth schedule --dump --T 10 --s 1

Exit status: 0 on success, 1 on a module failure (JSON error record on
stderr), 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

from bridgesynth.config import ConfigError, RunConfig, build_config

logger = logging.getLogger("bridgesynth")

COMMANDS = ("phantom-gen", "prep", "train", "sample", "eval", "schedule")


def _shape(s: str):
    parts = tuple(int(p) for p in s.replace("x", ",").split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"shape must be Z,H,W, got {s!r}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bridgesynth", description="Slice-consistent Brownian bridge CT contrast synthesis")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="INI config file with one section per module")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("phantom-gen", help="generate a synthetic phantom dataset")
    common(sp)
    sp.add_argument("--cases", type=int)
    sp.add_argument("--shape", type=_shape)

    sp = sub.add_parser("prep", help="preprocess registered cases into an AV/CAV dataset")
    common(sp)
    sp.add_argument("--cases-file", help="JSON case listing")
    sp.add_argument("--variant", choices=("AV", "CAV"))
    sp.add_argument("--exclusions", help="file with one excluded case_id per line")
    sp.add_argument("--radius", type=float, help="dilation radius in voxels (default 10 for AV, 20 for CAV)")

    sp = sub.add_parser("train", help="train the denoiser")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-steps", type=int)

    sp = sub.add_parser("sample", help="synthesize contrast-enhanced volumes")
    common(sp)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="preprocessed native volume (.vol)")
    src.add_argument("--manifest")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--ckpt", required=True, help="checkpoint root or epoch directory")
    sp.add_argument("--style", default="train-avg", help="train-avg | gt | file:<path>")
    sp.add_argument("--gt", help="ground-truth arterial volume for --style gt with --input")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--M", type=int)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--png", action="store_true", help="also export windowed PNG slices (WW 350 / WL 50)")

    sp = sub.add_parser("eval", help="score synthesized volumes against ground truth")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--pred-dir", required=True, help="directory of <case_id>.vol predictions")
    sp.add_argument("--nz-mode", choices=("union", "intersection"))

    sp = sub.add_parser("schedule", help="inspect the bridge schedule")
    common(sp, out_required=False)
    sp.add_argument("--dump", action="store_true", help="print the per-step table")
    sp.add_argument("--T", type=int)
    sp.add_argument("--s", type=float)
    return p


def effective_config(args) -> RunConfig:
    cfg = build_config(args.config, args.overrides)
    seed_section = {"phantom-gen": "phantom", "prep": "prep", "train": "train", "sample": "sampler"}
    if args.seed is not None and args.command in seed_section:
        cfg.put(seed_section[args.command], "seed", args.seed)
    if args.command == "phantom-gen":
        cfg.put("phantom", "cases", args.cases)
        cfg.put("phantom", "shape", args.shape)
    elif args.command == "prep":
        cfg.put("prep", "cases", args.cases_file)
        cfg.put("prep", "variant", args.variant)
        cfg.put("prep", "exclusions", args.exclusions)
        cfg.put("prep", "radius", args.radius)
    elif args.command == "train":
        cfg.put("train", "manifest", args.manifest)
        cfg.put("train", "epochs", args.epochs)
        cfg.put("train", "max_steps", args.max_steps)
    elif args.command == "sample":
        cfg.put("sampler", "steps", args.steps)
        cfg.put("sampler", "M", args.M)
        cfg.put("sampler", "eta", args.eta)
    elif args.command == "eval":
        cfg.put("eval", "nz_mode", args.nz_mode)
    elif args.command == "schedule":
        cfg.put("schedule", "T", args.T)
        cfg.put("schedule", "s", args.s)
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(cfg: RunConfig, args) -> dict:
    from bridgesynth.phantom import PhantomConfig, generate_dataset

    p = cfg["phantom"]
    pc = PhantomConfig(shape=tuple(p["shape"]), radius_range=(p["radius_min"], p["radius_max"]),
                       noise_sigma=p["noise_sigma"], seed=p["seed"], cases=p["cases"],
                       dilation_radius=p["dilation_radius"])
    manifest = generate_dataset(pc, args.out)
    return {"manifest": str(Path(args.out) / "manifest.json"),
            "splits": {k: len(v) for k, v in manifest.splits.items()}}


def cmd_prep(cfg: RunConfig, args) -> dict:
    from bridgesynth.preprocess import build_dataset, load_cases, read_exclusions

    p = cfg["prep"]
    if not p["cases"]:
        raise ConfigError("prep needs a case listing (--cases-file or prep.cases)")
    exclusions = read_exclusions(p["exclusions"]) if p["exclusions"] else []
    manifest = build_dataset(load_cases(p["cases"]), p["variant"], args.out, seed=p["seed"], ratios=p["ratios"],
                             exclusions=exclusions, radius=p["radius"], target_shape=p["target_shape"],
                             target_spacing=p["target_spacing"])
    return {"manifest": str(Path(args.out) / "manifest.json"),
            "splits": {k: len(v) for k, v in manifest.splits.items()}, "excluded": manifest.excluded}


def _sampler_config(cfg: RunConfig):
    from bridgesynth.sampler import SamplerConfig

    return SamplerConfig(**cfg["sampler"])


def cmd_train(cfg: RunConfig, args) -> dict:
    from bridgesynth.model import DenoiserSpec
    from bridgesynth.preprocess import DatasetManifest
    from bridgesynth.trainer import TrainConfig, train

    t = dict(cfg["train"])
    if not t["manifest"]:
        raise ConfigError("train needs a dataset manifest (--manifest or train.manifest)")
    m, sc = cfg["model"], cfg["schedule"]
    n_out = 2 * m["N"] + 1
    spec = DenoiserSpec(image_size=m["image_size"], in_channels=2 * n_out, out_channels=n_out,
                        base_channels=m["base_channels"], channel_multipliers=tuple(m["channel_multipliers"]),
                        res_blocks_per_level=m["res_blocks_per_level"],
                        attention_resolutions=tuple(m["attention_resolutions"]), attention_heads=m["attention_heads"])
    manifest = DatasetManifest.load(t.pop("manifest"))
    validate = t.pop("validate") and bool(manifest.splits.get("val"))
    tc = TrainConfig(T=sc["T"], s=sc["s"], N=m["N"], **t)
    result = train(manifest, args.out, tc, spec, sampler_cfg=_sampler_config(cfg), validate=validate)
    return {"steps": len(result.losses), "final_loss": result.losses[-1] if result.losses else None,
            "best": result.best.path if result.best else None,
            "checkpoints": [{"epoch": r.epoch, **r.metrics} for r in result.records]}


def _style_for(mode: str, train_key, gt_path: Optional[str]):
    from bridgesynth.stylekey import StyleKey, compute_style_key
    from bridgesynth.volume import load_volume

    if mode == "train-avg":
        if train_key is None:
            raise ValueError("checkpoint carries no training-average style key")
        return train_key
    if mode == "gt":
        if not gt_path:
            raise ConfigError("--style gt needs a ground-truth volume")
        return compute_style_key(load_volume(gt_path))
    if mode.startswith("file:"):
        return StyleKey.load(mode[len("file:"):])
    raise ConfigError(f"unknown style mode {mode!r}; use train-avg, gt or file:<path>")


def cmd_sample(cfg: RunConfig, args) -> dict:
    from bridgesynth.preprocess import DatasetManifest
    from bridgesynth.sampler import sample_volume
    from bridgesynth.trainer import load_checkpoint
    from bridgesynth.volume import export_png, load_volume, save_volume

    scfg = _sampler_config(cfg)
    if not (args.style in ("train-avg", "gt") or args.style.startswith("file:")):
        raise ConfigError(f"unknown style mode {args.style!r}; use train-avg, gt or file:<path>")
    d, sched, meta, train_key = load_checkpoint(args.ckpt)
    if args.input:
        jobs = [(load_volume(args.input), args.gt)]
    else:
        manifest = DatasetManifest.load(args.manifest)
        jobs = [(load_volume(e["native"]), e["arterial"]) for e in manifest.cases(args.split)]
    out = Path(args.out)
    written = []
    for native, gt in jobs:
        key = _style_for(args.style, train_key, gt)
        synth = sample_volume(d, native, key, sched, scfg)
        written.append(str(save_volume(synth, out / native.case_id)))
        if args.png:
            export_png(synth, out / f"{native.case_id}_png")
        logger.info("sampled %s", native.case_id)
    return {"outputs": written, "checkpoint_epoch": meta["epoch"]}


def cmd_eval(cfg: RunConfig, args) -> dict:
    from bridgesynth.metrics import MetricsReport, evaluate_pair
    from bridgesynth.preprocess import DatasetManifest
    from bridgesynth.volume import load_volume

    e = cfg["eval"]
    manifest = DatasetManifest.load(args.manifest)
    report = MetricsReport()
    for entry in manifest.cases(args.split):
        gt = load_volume(entry["arterial"])
        pred = load_volume(Path(args.pred_dir) / f"{entry['case_id']}.vol")
        report.add(entry["case_id"], evaluate_pair(gt, pred, e["data_range"], e["nz_mode"]))
    out = Path(args.out)
    report.save(out / "report.json")
    table = report.table()
    (out / "report.tsv").write_text(table)
    sys.stdout.write(table)
    return {"report": str(out / "report.json"), "aggregate": report.to_dict()["aggregate"]}


def cmd_schedule(cfg: RunConfig, args) -> dict:
    from bridgesynth.schedule import build_schedule

    s = cfg["schedule"]
    sched = build_schedule(s["T"], s["s"], s["variance_mode"])
    if args.dump:
        sys.stdout.write(sched.table() + "\n")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "schedule.json").write_text(sched.dumps())
    return {"T": sched.T, "s": sched.s, "m_first": float(sched.m[1]), "m_last": float(sched.m[sched.T])}


HANDLERS = {
    "phantom-gen": cmd_phantom,
    "prep": cmd_prep,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "schedule": cmd_schedule,
}


def _error(command: str, exc: BaseException, out: Optional[str]) -> dict:
    record = {"status": "error", "command": command, "error_type": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(record) + "\n")
    if out and Path(out).is_dir():
        (Path(out) / "error.json").write_text(json.dumps(record, indent=2) + "\n")
    return record


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    threads = os.environ.get("BRIDGESYNTH_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg = effective_config(args)
    except ConfigError as exc:
        _error(args.command, exc, None)
        return 2
    if args.out:
        cfg_path = cfg.save(Path(args.out) / "effective_config.ini")
        logger.info("effective config written to %s", cfg_path)
    try:
        result = HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        _error(args.command, exc, args.out)
        return 2
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        _error(args.command, exc, args.out)
        return 1
    if args.out:
        (Path(args.out) / "result.json").write_text(json.dumps(result, indent=2, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
