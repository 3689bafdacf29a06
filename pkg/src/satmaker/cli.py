"""Command-line entry point: ``satmaker <synth|mask|train|infer|adapt|eval|sweep|report>``.

Every subcommand accepts ``--config FILE`` (JSON); keys use the long flag
names with dashes turned into underscores, and explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

log = logging.getLogger("satmaker")


def _parse_prompt(text: str, band: str | None = None):
    """Accept ``<satelliteMaker> Site, Band`` / ``... Location, Date, Day, Band`` or ``key=value`` pairs."""
    from satmaker.denoiser import PromptSpec

    text = text.strip()
    if "=" in text:
        d = dict(kv.split("=", 1) for kv in text.split(","))
        d = {k.strip(): v.strip() for k, v in d.items()}
        task = int(d.pop("task", 2 if "date" in d else 1))
        if "day" in d:
            d["day"] = int(d["day"])
        return PromptSpec(task, d.pop("band", band), **d)
    if text.startswith("<satelliteMaker>"):
        text = text[len("<satelliteMaker>"):]
    parts = [p.strip() for p in text.split(",")]
    if len(parts) == 2:
        return PromptSpec(1, parts[1], site=parts[0])
    if len(parts) == 4:
        return PromptSpec(2, parts[3], site=parts[0], date=parts[1], day=int(parts[2]))
    raise ValueError(f"cannot parse prompt {text!r}")


def _with_config(args, parser, argv):
    """Fill arguments not given on the command line from ``--config``."""
    if not getattr(args, "config", None):
        return args
    doc = json.loads(Path(args.config).read_text())
    explicit = {a.dest for a in parser._actions if a.option_strings and
                any(opt in argv for opt in a.option_strings)}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise SystemExit(f"unknown config key {key!r}")
        if dest not in explicit:
            setattr(args, dest, value)
    return args


# --- subcommands ------------------------------------------------------------------

def cmd_synth(args):
    from satmaker.harness import build_dataset, scene_configs
    from satmaker.raster_io import write_raster
    from satmaker.scene_synth import synth_dem, synth_scene

    out = Path(args.out)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    cfgs = scene_configs(args.scenes, args.size, args.seed, octaves=args.octaves)
    scenes = []
    for i, cfg in enumerate(cfgs):
        sid = f"s{i:03d}"
        dem = synth_dem(cfg)
        phase = (cfg.seed % cfg.season_period) / cfg.season_period
        bands = synth_scene(dem, phase, cfg, args.bands)
        write_raster(dem, out / "scenes" / f"{sid}.dem.rsr")
        write_raster(bands, out / "scenes" / f"{sid}.rsr")
        scenes.append({"id": sid, "seed": cfg.seed, "dem": f"scenes/{sid}.dem.rsr",
                       "bands": f"scenes/{sid}.rsr", "band_names": list(args.bands)})
    (out / "scenes.json").write_text(json.dumps({"seed": args.seed, "size": args.size,
                                                 "scenes": scenes}, indent=1))
    ds = build_dataset(args.task, cfgs, tuple(args.split), args.seed, args.bands,
                       args.tile_size, args.overlap, args.n_steps, out)
    print(f"{len(scenes)} scenes; {len(ds.train)} train / {len(ds.test)} test tiles -> {out}")


def cmd_mask(args):
    from satmaker.masking import random_mask, save_mask
    from satmaker.raster_io import read_raster

    if args.raster:
        shape = read_raster(args.raster).shape
    elif args.shape:
        shape = tuple(args.shape)
    else:
        raise SystemExit("mask needs --raster or --shape")
    m = random_mask(shape, args.ratio, args.seed)
    save_mask(m, args.out)
    Path(str(args.out) + ".json").write_text(json.dumps(
        {"shape": list(shape), "ratio": args.ratio, "seed": args.seed, "masked": int(m.data.sum())}))
    print(f"{int(m.data.sum())} of {m.data.size} pixels masked -> {args.out}")


def cmd_train(args):
    import torch

    from satmaker.denoiser import Arch
    from satmaker.plotting import training_curve
    from satmaker.training import TrainConfig, run_training

    torch.set_num_threads(args.threads)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch=args.batch, lambda_style=args.lambda_style,
                      phase_b_steps=args.phase_b_steps, phase_b_lr=args.phase_b_lr, seed=args.seed, optimizer=args.optimizer,
                      cond_drop=args.cond_drop, lora_rank=args.lora_rank,
                      arch=Arch(widths=tuple(args.widths)), checkpoint_every=args.checkpoint_every)
    res = run_training(args.manifest, cfg, args.out, resume=args.resume, init=args.init)
    with open(Path(args.out) / "train_log.csv", newline="") as fh:
        training_curve(list(csv.DictReader(fh)), Path(args.out) / "train_log.png")
    print(f"trained {len(res.log)} steps -> {res.checkpoint}")


def cmd_infer(args):
    from satmaker import checkpoint as ckpt
    from satmaker.denoiser import ConditionInput
    from satmaker.diffusion import SamplerConfig, inpaint, make_schedule
    from satmaker.masking import load_mask
    from satmaker.raster_io import export_preview, read_raster, write_raster

    model, _, _ = ckpt.load_model(args.model)
    if args.adapters:
        ckpt.load_adapters(args.adapters, model)
    model.eval()
    observed = read_raster(args.observed)
    if len(observed.bands) > 1:
        observed = observed.select(args.band or observed.bands[0])
    prompt = _parse_prompt(args.prompt, observed.bands[0])
    cond = ConditionInput(read_raster(args.dem))
    cfg = SamplerConfig(steps=args.steps, eta=args.eta, strength=args.strength, seed=args.seed)
    out = inpaint(model, observed, load_mask(args.mask), cond, prompt, cfg, make_schedule())
    write_raster(out, args.out)
    export_preview(out, out.bands[0], path=str(args.out) + ".png")
    print(f"wrote {args.out}")


def cmd_adapt(args):
    from satmaker.masking import load_mask
    from satmaker.perceptual import adapt
    from satmaker.raster_io import export_preview, read_raster, write_raster

    gen = read_raster(args.generated)
    ref = read_raster(args.reference)
    out = adapt(gen, ref, load_mask(args.mask), steps=args.steps, step_size=args.step_size,
                lambda_style=args.lambda_style, tol=args.tol)
    write_raster(out, args.out)
    export_preview(out, out.bands[0], path=str(args.out) + ".png")
    print(f"wrote {args.out}")


def _spec_from_args(args):
    from satmaker.harness import ExperimentSpec

    spec = ExperimentSpec.load(args.spec) if args.spec else ExperimentSpec()
    overrides = {}
    for key in ("task", "methods", "missing_ratios", "bands", "seeds", "adapter", "output_dir",
                "train_manifest", "test_manifest", "model", "autoencoder", "steps", "eta", "strength"):
        v = getattr(args, key, None)
        if key in ("methods", "bands") and v is not None:
            v = [item for part in v for item in part.split(",") if item]
        if v is not None:
            overrides[key] = v
    return replace(spec, **overrides) if overrides else spec


def cmd_eval(args, sweep: bool = False):
    import torch

    from satmaker.harness import run_experiment, sweep_report

    torch.set_num_threads(args.threads)
    spec = _spec_from_args(args)
    if not sweep and args.missing_ratios is None and not args.spec:
        spec = replace(spec, missing_ratios=(0.3,))
    res = run_experiment(spec)
    print(f"{len(res.rows)} rows -> {res.csv_path}")
    if sweep:
        written = sweep_report(res.csv_path, Path(spec.output_dir) / "report")
        print(f"{len(written)} tables and plots -> {Path(spec.output_dir) / 'report'}")


def cmd_report(args):
    from satmaker.harness import sweep_report

    out = args.out or str(Path(args.results).parent / "report")
    written = sweep_report(args.results, out, tuple(args.metrics))
    for stem, (tpath, _, table) in written.items():
        print(f"# {stem}")
        print(tpath.read_text().rstrip())
    print(f"{len(written)} tables and plots -> {out}")


# --- parser -----------------------------------------------------------------------

def _experiment_flags(p):
    p.add_argument("--spec", help="experiment JSON mirroring ExperimentSpec")
    p.add_argument("--task", type=int)
    p.add_argument("--methods", nargs="+")
    p.add_argument("--missing-ratios", nargs="+", type=float)
    p.add_argument("--bands", nargs="+")
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--adapter", choices=["on", "off"])
    p.add_argument("--output-dir")
    p.add_argument("--train-manifest")
    p.add_argument("--test-manifest")
    p.add_argument("--model")
    p.add_argument("--autoencoder")
    p.add_argument("--steps", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--strength", type=float)
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    from satmaker.perceptual import ADAPT_TOL, LAMBDA_STYLE
    from satmaker.scene_synth import DEFAULT_BANDS

    parser = argparse.ArgumentParser(prog="satmaker", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesise scenes and train/test manifests")
    p.add_argument("--config")
    p.add_argument("--out", required=False, default="data")
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--octaves", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task", type=int, default=1, choices=[1, 2])
    p.add_argument("--bands", nargs="+", default=list(DEFAULT_BANDS))
    p.add_argument("--split", nargs=2, type=float, default=[0.8, 0.2])
    p.add_argument("--tile-size", type=int)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--n-steps", type=int, default=6, help="frames per series (task 2)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mask", help="draw a random missing-pixel mask")
    p.add_argument("--config")
    p.add_argument("--raster")
    p.add_argument("--shape", nargs=2, type=int)
    p.add_argument("--ratio", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="mask.rsr")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="train the denoiser (or LoRA adapters)")
    p.add_argument("--config")
    p.add_argument("--manifest", default="data/train.json")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lambda-style", type=float, default=LAMBDA_STYLE)
    p.add_argument("--phase-b-steps", type=int, default=0)
    p.add_argument("--phase-b-lr", type=float, default=None, help="step size in phase B (default: --lr)")
    p.add_argument("--lora-rank", type=int, default=0)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    p.add_argument("--cond-drop", type=float, default=0.0)
    p.add_argument("--widths", nargs=3, type=int, default=[32, 64, 128])
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--init", help="base checkpoint (required with --lora-rank)")
    p.add_argument("--resume", help="checkpoint written by a previous run")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="inpaint one raster")
    p.add_argument("--config")
    p.add_argument("--model", default="run/model.smk")
    p.add_argument("--adapters")
    p.add_argument("--dem", required=False)
    p.add_argument("--observed", required=False)
    p.add_argument("--band")
    p.add_argument("--mask", required=False)
    p.add_argument("--prompt", default="<satelliteMaker> 01, nir")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--strength", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="filled.rsr")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("adapt", help="pull masked-region statistics towards the observed pixels")
    p.add_argument("--config")
    p.add_argument("--generated")
    p.add_argument("--reference")
    p.add_argument("--mask")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--lambda-style", type=float, default=LAMBDA_STYLE)
    p.add_argument("--tol", type=float, default=ADAPT_TOL)
    p.add_argument("--out", default="adapted.rsr")
    p.set_defaults(func=cmd_adapt)

    for name, helptext, sweep in (("eval", "compare methods at one or more ratios", False),
                                  ("sweep", "missing-ratio sweep plus report", True)):
        p = sub.add_parser(name, help=helptext)
        _experiment_flags(p)
        p.set_defaults(func=lambda a, _s=sweep: cmd_eval(a, _s))

    p = sub.add_parser("report", help="tables and plots from a results CSV")
    p.add_argument("--config")
    p.add_argument("--results", default="results/results.csv")
    p.add_argument("--metrics", nargs="+", default=["psnr", "rmse"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    args = _with_config(args, sub, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    for req in {"infer": ("dem", "observed", "mask"), "adapt": ("generated", "reference", "mask")}.get(
            args.command, ()):
        if getattr(args, req) is None:
            parser.error(f"{args.command} needs --{req}")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
