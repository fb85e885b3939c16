"""Command line entry point: ``spgcde <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

from .datasets import CaseStore, SynthSpec, write_synthetic
from .errors import ConfigError, SpgcdeError
from .harness.config import PRESETS, PRIOR_SOURCES, AblationConfig, RunConfig, TrainConfig, canonical_json, expand_presets
from .harness.evaluation import evaluate, predict, write_report
from .harness.grid import run_ablation_grid
from .harness.priors import train_prior
from .harness.training import dataset_classes, train

log = logging.getLogger("spgcde")


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return d


def _run_config(args, preset: Optional[str] = None) -> RunConfig:
    raw = _read_json(args.config)
    raw.setdefault("model", {})
    if "num_classes" not in raw["model"]:
        # default the class count to the dataset's
        cases = CaseStore(args.data).load_split("train")
        if cases:
            raw["model"]["num_classes"] = dataset_classes(cases)
    train_over = {k: v for k, v in {
        "seed": getattr(args, "seed", None), "max_steps": getattr(args, "max_steps", None),
    }.items() if v is not None}
    raw.setdefault("train", {}).update(train_over)
    if preset is not None:
        abl = dict(AblationConfig.preset(preset).to_dict())
        abl["prior_source"] = raw.get("ablation", {}).get("prior_source", abl["prior_source"])
        raw["ablation"] = abl
    if getattr(args, "prior_source", None):
        raw.setdefault("ablation", {})["prior_source"] = args.prior_source
    return RunConfig.from_dict(raw)


def cmd_gen_synth(args) -> int:
    spec = SynthSpec.from_dict(_read_json(args.spec))
    cases = write_synthetic(spec, args.out)
    print(f"wrote {len(cases)} cases to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args, args.preset)
    manifest = train(args.data, run, args.out, prior_model=args.prior_model)
    print(manifest.to_json(), end="")
    return 0


def cmd_eval(args) -> int:
    report = evaluate(args.data, args.ckpt, split=args.split, prior_source=args.prior_source,
                      which=args.which, prior_model=args.prior_model)
    name = Path(args.ckpt).name or "model"
    if args.report:
        print(write_report(report, args.report, row_name=name), end="")
    else:
        print(report.table(name), end="")
    return 0


def cmd_grid(args) -> int:
    run = _run_config(args)
    presets = expand_presets(args.presets)
    result = run_ablation_grid(args.data, presets, run.model, run.train, args.out, seeds=args.seeds,
                               split=args.split, which=args.which, prior_source=args.prior_source,
                               prior_model=args.prior_model)
    print(result.table, end="")
    return 0


def cmd_predict(args) -> int:
    bundle = predict(args.image, args.ckpt, prior_path=args.prior, out_dir=args.out, overlay=args.overlay,
                     which=args.which, prior_source=args.prior_source, prior_model=args.prior_model)
    print(json.dumps({"pred": str(Path(args.out) / "pred.u8"), "config_hash": bundle.config_hash,
                      "checkpoint_id": bundle.checkpoint_id}, sort_keys=True))
    return 0


def cmd_train_prior(args) -> int:
    raw = _read_json(args.config).get("train", {})
    if args.max_steps is not None:
        raw["max_steps"] = args.max_steps
    if args.seed is not None:
        raw["seed"] = args.seed
    out = train_prior(args.data, args.out, TrainConfig.from_dict(raw), base=args.base)
    print(f"prior model written to {out}")
    return 0


def cmd_defaults(args) -> int:
    print(canonical_json({**RunConfig().to_dict(), "synth": asdict(SynthSpec())}), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spgcde", description="Prior-gated dual-encoder segmentation harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add_prior_opts(sp):
        sp.add_argument("--prior-source", choices=PRIOR_SOURCES, default=None,
                        help="override the run's prior source (no retraining)")
        sp.add_argument("--prior-model", default=None, help="directory written by train-prior")

    sp = sub.add_parser("gen-synth", help="write a synthetic case store")
    sp.add_argument("--spec", default=None, help="JSON synth spec (defaults when omitted)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_synth)

    sp = sub.add_parser("train", help="train stage 2")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", default=None, help="JSON with model/train/ablation sections")
    sp.add_argument("--preset", choices=sorted(PRESETS), default=None,
                    help="ablation preset; replaces the config's ablation toggles")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--max-steps", type=int, default=None)
    add_prior_opts(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a run directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True, help="run directory")
    sp.add_argument("--report", default=None, help="JSON report path (a .txt table is written next to it)")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--which", default="best", choices=("best", "last"))
    add_prior_opts(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("grid", help="ablation grid over presets")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--presets", nargs="+", default=["components"],
                    help="preset names, or the groups 'components' / 'fusion'")
    sp.add_argument("--seeds", nargs="+", type=int, default=None)
    sp.add_argument("--max-steps", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="val", choices=("train", "val", "test"))
    sp.add_argument("--which", default="best", choices=("best", "last"))
    add_prior_opts(sp)
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("predict", help="segment one stored image")
    sp.add_argument("--image", required=True, help="image.f32 or its case directory")
    sp.add_argument("--ckpt", required=True, help="run directory")
    sp.add_argument("--prior", default=None, help="prior.u8 (defaults to the one beside the image)")
    sp.add_argument("--overlay", action="store_true", help="also write overlay.png")
    sp.add_argument("--out", default=".")
    sp.add_argument("--which", default="best", choices=("best", "last"))
    add_prior_opts(sp)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("train-prior", help="train the builtin coarse segmenter")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", default=None, help="JSON whose 'train' section configures the run")
    sp.add_argument("--out", required=True)
    sp.add_argument("--base", type=int, default=8, help="first-level channel count")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--max-steps", type=int, default=None)
    sp.set_defaults(func=cmd_train_prior)

    sp = sub.add_parser("defaults", help="print every configurable key with its default")
    sp.set_defaults(func=cmd_defaults)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SpgcdeError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
