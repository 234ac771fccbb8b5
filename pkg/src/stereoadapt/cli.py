"""Command-line surface: toy-data generation, staged training, evaluation,
and translation export.

Exit codes: 0 success, 2 usage, 3 configuration/startup/checkpoint,
4 data format, 5 numerical abort.
"""

import argparse
import json
import shutil
import sys
from pathlib import Path

import torch

from .config import load_config, save_config
from .data import SHIFT_PROFILES, StereoDataset, generate_toy_dataset, load_manifest, write_image
from .errors import (
    CheckpointError,
    ConfigError,
    ContractViolationError,
    DataFormatError,
    NumericalAbortError,
    StartupError,
)
from .evaluation import evaluate, format_report_table
from .networks import StereoMatcher, load_net, make_noise
from .training import Trainer, disparity_predictor, substream_seed

STAGE_CHECKPOINTS = {
    "warmup_translation": "stage1_translation.pt",
    "warmup_stereo": "stage2_stereo.pt",
    "joint": "stage3_joint.pt",
}


def _parse_size(text):
    try:
        h, w = (int(p) for p in text.lower().split("x"))
        return h, w
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 128x256, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereoadapt",
        description="Joint domain translation and stereo matching for "
                    "unsupervised synthetic-to-real disparity estimation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="generate a procedural toy dataset pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=200, help="stereo pairs per domain")
    p.add_argument("--size", type=_parse_size, default=(128, 256), help="HxW, default 128x256")
    p.add_argument("--max-disparity", type=int, default=16)
    p.add_argument("--shift-profile", choices=sorted(SHIFT_PROFILES), default="default")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="run one or all training stages")
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--stage", choices=("warmup-translation", "warmup-stereo", "joint", "all"),
                   default="all")
    p.add_argument("--resume", help="continue from a training checkpoint")

    p = sub.add_parser("eval", help="evaluate a matcher checkpoint on a manifest")
    p.add_argument("--checkpoint", help="training or matcher checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--d1-mode", choices=("and", "or"), default="and")
    p.add_argument("--out", required=True, help="report path (.json; table written beside it)")
    p.add_argument("--tag", default="")
    p.add_argument("--oracle-gt", action="store_true",
                   help="evaluate the gt-echo predictor (harness self-check)")

    p = sub.add_parser("translate", help="export translated source images")
    p.add_argument("--checkpoint", required=True, help="training checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--second-seed", type=int, help="also export a second noise-seed variant")
    p.add_argument("--out-dir", required=True)
    return parser


def cmd_make_toy(args, parser) -> int:
    if args.count <= 0:
        parser.error("--count must be a positive integer")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source, target = generate_toy_dataset(
        args.seed, args.count, args.size, args.max_disparity, args.shift_profile, out
    )
    print(f"wrote {source.count} pairs per domain under {out}")
    print(f"source manifest: {out / 'source_manifest.json'}")
    print(f"target manifest: {out / 'target_manifest.json'}")
    return 0


def cmd_train(args, parser) -> int:
    config = load_config(args.config)
    run_dir = Path(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.config, run_dir / "config_input.yaml")
    save_config(config, run_dir / "config.yaml")

    if args.resume:
        trainer = Trainer.resume(args.resume, run_dir=run_dir)
    else:
        trainer = Trainer(config, run_dir=run_dir)

    stages = {
        "warmup-translation": ["warmup_translation"],
        "warmup-stereo": ["warmup_stereo"],
        "joint": ["joint"],
        "all": ["warmup_translation", "warmup_stereo", "joint"],
    }[args.stage]
    for stage in stages:
        getattr(trainer, stage if stage != "joint" else "joint_train")()
        trainer.checkpoint(run_dir / "checkpoints" / STAGE_CHECKPOINTS[stage])

    summary = {
        "stages_completed": [s for s, done in trainer.stage_done.items() if done],
        "steps_done": trainer.steps_done,
        "ablation": trainer.config.ablation_tag,
        "final_losses": trainer.records[-1]["terms"] if trainer.records else {},
        "seed": config.seed,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"run complete; summary at {run_dir / 'summary.json'}")
    return 0


def _load_matcher(path) -> StereoMatcher:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if isinstance(payload, dict) and payload.get("kind") == "training_state":
        from .config import config_from_dict

        matcher = StereoMatcher(config_from_dict(payload["config"]).matcher)
        matcher.load_state_dict(payload["nets"]["matcher"])
        return matcher
    return load_net(path, expect_kind="matcher")


def cmd_eval(args, parser) -> int:
    manifest = load_manifest(args.manifest)
    dataset = StereoDataset(manifest, with_gt_override=True)
    if args.oracle_gt:
        reference = [dataset.load(i) for i in range(len(dataset))]

        def predictor(left, right):
            # gt echo: find the sample this pair came from
            for s in reference:
                if torch.equal(s.left, left):
                    return s.disparity
            raise StartupError("oracle predictor could not match the input pair")

        tag = args.tag or "gt-oracle"
    else:
        if not args.checkpoint:
            parser.error("--checkpoint is required unless --oracle-gt is set")
        matcher = _load_matcher(args.checkpoint)
        matcher.eval()
        predictor = disparity_predictor(matcher)
        tag = args.tag or "model"
    report = evaluate(predictor, dataset, report_path=args.out, d1_combine=args.d1_mode, tag=tag)
    print(format_report_table(report))
    return 0


def cmd_translate(args, parser) -> int:
    path = Path(args.checkpoint)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not (isinstance(payload, dict) and payload.get("kind") == "training_state"):
        raise CheckpointError(f"{path} is not a training checkpoint")
    from .config import config_from_dict
    from .networks import GeneratorSpec, TranslationGenerator
    from dataclasses import asdict

    cfg = config_from_dict(payload["config"])
    gen = TranslationGenerator(GeneratorSpec(**{**asdict(cfg.generator), "accepts_noise": True}))
    gen.load_state_dict(payload["nets"]["g_syn2real"])
    gen.eval()

    manifest = load_manifest(args.manifest)
    dataset = StereoDataset(manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = [("", args.seed)] + ([("_s2", args.second_seed)] if args.second_seed is not None else [])
    with torch.no_grad():
        for i in range(len(dataset)):
            sample = dataset.load(i)
            for suffix, seed in seeds:
                for side, image in (("left", sample.left), ("right", sample.right)):
                    z = make_noise(
                        substream_seed(seed, f"translate:{i}:{side}") % (2**31 - 1),
                        image.shape[1], image.shape[2],
                    )
                    translated = gen(image, z).image
                    write_image(translated, out_dir / f"trans_{side}_{i:04d}{suffix}.png")
    print(f"wrote {len(dataset)} translated pairs to {out_dir}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "make-toy": cmd_make_toy,
        "train": cmd_train,
        "eval": cmd_eval,
        "translate": cmd_translate,
    }
    try:
        return handlers[args.command](args, parser)
    except (ConfigError, StartupError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataFormatError, ContractViolationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
