"""``mammnet`` command line: synth, train, eval, infer.

Exit status is 0 on success, 2 for usage errors and 1 for runtime failures
(IO, bad config, corrupt checkpoint, diverged training).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ABLATIONS, load_config
from .errors import MammNetError
from .evaluation import DEFAULT_FPIS, evaluate, format_report, plot_froc, write_report
from .rng import torch_seeded

log = logging.getLogger("mammnet")


def _fpi_list(text: str):
    from .validation import parse_fpis

    try:
        return parse_fpis(text)
    except MammNetError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mammnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--config", help="YAML config; the 'phantom' section is used")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-cases", type=int, default=100)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", help="YAML config with 'model' and 'train' sections")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--ablation", choices=ABLATIONS, default="full")
    p.add_argument("--out", required=True, help="directory for checkpoint and metrics log")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--eval-data", help="dataset evaluated at every eval step")
    p.add_argument("--steps", type=int, help="override train.max_steps")
    p.add_argument("--seed", type=int, help="override train.seed")

    p = sub.add_parser("eval", help="score a checkpoint or a prediction file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="prediction interchange file")
    p.add_argument("--data", required=True)
    p.add_argument("--fpi", type=_fpi_list, default=DEFAULT_FPIS,
                   help="comma-separated FPI values (default 0.25,0.5,1.0)")
    p.add_argument("--out", default="eval_report", help="directory for report.json and froc.png")
    p.add_argument("--config", help="YAML config; train.score_floor and pair_threshold are used")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("infer", help="run a checkpoint on one CC/MLO pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cc", required=True, help="CC view PNG")
    p.add_argument("--mlo", required=True, help="MLO view PNG")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML config; train.score_floor and pair_threshold are used")
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_synth(args) -> int:
    from .datagen import generate_dataset

    _, _, phantom = load_config(args.config)
    if args.n_cases < 0:
        raise MammNetError(f"--n-cases must be non-negative, got {args.n_cases}")
    manifest = generate_dataset(args.seed, phantom, args.n_cases, args.out)
    print(f"{Path(args.out) / 'manifest.json'}")
    print(f"cases: {len(manifest['cases'])}")
    return 0


def cmd_train(args) -> int:
    from .datagen import load_dataset
    from .trainer import train, train_summary

    model_cfg, train_cfg, _ = load_config(args.config)
    overrides = {}
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    train_cfg = dataclasses.replace(train_cfg, **overrides)
    data = load_dataset(args.data)
    eval_data = load_dataset(args.eval_data) if args.eval_data else None
    result = train(model_cfg, train_cfg, data, ablation=args.ablation, out_dir=args.out,
                   resume=args.resume, eval_data=eval_data)
    summary = train_summary(result)
    print(json.dumps({k: summary[k] for k in ("step", "first_loss", "last_loss", "checkpoint")}))
    return 0


def cmd_eval(args) -> int:
    from .datagen import load_dataset
    from .predictions import read_predictions

    _, train_cfg, _ = load_config(args.config)
    data = load_dataset(args.data)
    if args.predictions:
        preds = read_predictions(args.predictions)
    else:
        from .trainer import load_model, predict

        model = load_model(args.checkpoint)
        with torch_seeded(args.seed):
            preds = predict(model, [p for p, _ in data], score_floor=train_cfg.score_floor,
                            pair_threshold=train_cfg.pair_threshold)
    report = evaluate(preds, data, args.fpi)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.json")
    plot_froc(report, out / "froc.png")
    print(format_report(report))
    return 0


def cmd_infer(args) -> int:
    from .datagen import read_png
    from .predictions import write_predictions
    from .trainer import infer, load_model, render_overlay
    from .validation import coerce_pair, resize_mask

    _, train_cfg, _ = load_config(args.config)
    model = load_model(args.checkpoint)
    originals = {"cc": read_png(args.cc), "mlo": read_png(args.mlo)}
    pair, resized = coerce_pair(originals["cc"], originals["mlo"], model.config.image_size,
                                case_id=Path(args.cc).stem)
    with torch_seeded(args.seed):
        pred = infer(model, pair, train_cfg.score_floor, train_cfg.pair_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    instances = []
    for view, image in originals.items():
        masks = [resize_mask(p.mask, image.shape) if resized else p.mask for p in pred.views[view]]
        Image.fromarray(render_overlay(image, masks)).save(out / f"{view}_overlay.png")
        for k, (p, m) in enumerate(zip(pred.views[view], masks)):
            instances.append({"view": view, "index": k, "query": p.query_index, "score": p.score,
                              "malignancy": p.malignancy, "area": int(np.count_nonzero(m))})
    report = {
        "case_id": pred.case_id,
        "resized": resized,
        "instances": instances,
        "links": [{"cc": i, "mlo": j, "score": s} for i, j, s in pred.links],
    }
    (out / "instances.json").write_text(json.dumps(report, indent=1))
    write_predictions(out / "predictions.json", [pred], pair.shape)
    print(f"{len(instances)} instances, {len(pred.links)} links -> {out}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (MammNetError, OSError) as exc:
        print(f"mammnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
