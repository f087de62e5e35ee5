"""Command-line surface for dataset generation, training, and studies.

Subcommands: generate, train, eval, degrade, ablate, sweep-t, gradcheck.
Config files are plain ``key = value`` lines with ``#`` comments; any
command-line flag overrides the file value. All CSVs carry a header row
and fixed six-decimal numbers.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .attention import IdetConfig
from .backbone import BasicChangeDetector, UNetConfig
from .checks import run_suite
from .data import SynthConfig, generate_synthetic, load_dataset, split_pairs
from .degrade import DEFAULT_ALPHAS, DegradeConfig, alpha_sweep
from .model import VARIANTS, MsIdetConfig, MultiScaleChangeDetector
from .nn import load_config_block
from .train import TrainConfig, evaluate, load_model, save_model, train_loop


def _metrics_row(dataset, variant, t, report):
    return (
        f"{dataset},{variant},{t},{report.precision:.6f},{report.recall:.6f},"
        f"{report.f1:.6f},{report.oa:.6f},{report.iou:.6f}"
    )

METRICS_HEADER = "dataset,variant,T,precision,recall,f1,oa,iou"


def _model_tags(model):
    if model.kind == "basic":
        return "basic", 0
    return model.cfg.variant, model.cfg.idet.iterations


def _pick(args_value, file_cfg, key, default, cast):
    if args_value is not None:
        return args_value
    if key in file_cfg:
        raw = file_cfg[key]
        return raw == "True" if cast is bool else cast(raw)
    return default


def _split_arg(pairs, which):
    train, val = split_pairs(pairs)
    return {"train": train, "val": val, "all": pairs}[which]


def _build_model(args, file_cfg, seed):
    kind = _pick(args.model, file_cfg, "model.kind", "msidet", str)
    unet = UNetConfig(
        base_channels=_pick(
            args.base_channels, file_cfg, "unet.base_channels", 16, int
        )
    )
    if kind == "basic":
        return BasicChangeDetector(unet, seed=seed)
    cfg = MsIdetConfig(
        unet=unet,
        idet=IdetConfig(
            channels=_pick(args.channels, file_cfg, "idet.channels", 32, int),
            heads=_pick(args.heads, file_cfg, "idet.heads", 4, int),
            iterations=_pick(
                args.iterations, file_cfg, "idet.iterations", 2, int
            ),
        ),
        variant=_pick(args.variant, file_cfg, "model.variant", "full", str),
    )
    return MultiScaleChangeDetector(cfg, seed=seed)


def _build_train_cfg(args, file_cfg):
    return TrainConfig(
        lr=_pick(args.lr, file_cfg, "train.lr", 1e-3, float),
        batch_size=_pick(args.batch_size, file_cfg, "train.batch_size", 4, int),
        epochs=_pick(args.epochs, file_cfg, "train.epochs", 20, int),
        loss_mode=_pick(args.loss_mode, file_cfg, "train.loss_mode", "multi_ce", str),
        focal_gamma=_pick(args.focal_gamma, file_cfg, "train.focal_gamma", 2.0, float),
        seed=_pick(args.seed, file_cfg, "train.seed", 0, int),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    cfg = SynthConfig(
        n_pairs=args.n_pairs,
        height=args.height,
        width=args.width,
        change_ratio_target=args.change_ratio,
        photometric_jitter=args.jitter,
        background_complexity=args.background_complexity,
        seed=args.seed,
    )
    ids = generate_synthetic(cfg, args.out)
    print(f"wrote {len(ids)} pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    file_cfg = load_config_block(args.config) if args.config else {}
    train_cfg = _build_train_cfg(args, file_cfg)
    if args.resume:
        model = load_model(args.resume)
        print(f"resumed {model.kind} model from {args.resume}")
    else:
        model = _build_model(args, file_cfg, seed=train_cfg.seed)
    if model.kind == "basic":
        train_cfg.loss_mode = "single_ce"
    pairs = load_dataset(args.dataset)
    train_pairs, val_pairs = split_pairs(pairs)
    log = train_loop(model, train_pairs, train_cfg, val_pairs, args.out)
    last = log.epochs[-1].report if log.epochs else None
    if last is not None:
        print(
            f"final held-out f1={last.f1:.4f} oa={last.oa:.4f} iou={last.iou:.4f}"
        )
    print(f"checkpoints and logs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    pairs = _split_arg(load_dataset(args.dataset), args.split)
    report, counts = evaluate(model, pairs)
    variant, t = _model_tags(model)
    row = _metrics_row(Path(args.dataset).name, variant, t, report)
    if args.out:
        Path(args.out).write_text(METRICS_HEADER + "\n" + row + "\n")
    print(METRICS_HEADER)
    print(row)
    print(f"pixels: tp={counts.tp} tn={counts.tn} fp={counts.fp} fn={counts.fn}")
    return 0


def cmd_degrade(args) -> int:
    model = load_model(args.checkpoint)
    pairs = _split_arg(load_dataset(args.dataset), args.split)
    enhancement = "none" if model.kind == "basic" else "idet"
    alphas = (
        tuple(float(a) for a in args.alphas.split(","))
        if args.alphas
        else DEFAULT_ALPHAS
    )
    cfg = DegradeConfig(alphas=alphas, seed=args.seed, enhancement=enhancement)
    curve = alpha_sweep(model, pairs, cfg)
    curve.write_csv(args.out)
    print(f"wrote {len(curve.records)} sweep records to {args.out}")
    if curve.skipped:
        print(f"skipped {curve.skipped} pairs with degenerate masks")
    return 0


def cmd_ablate(args) -> int:
    pairs = load_dataset(args.dataset)
    train_pairs, val_pairs = split_pairs(pairs)
    dataset = Path(args.dataset).name
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    rows = []
    for variant in variants:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        for seed in range(args.seeds):
            cfg = MsIdetConfig(
                unet=UNetConfig(base_channels=args.base_channels),
                idet=IdetConfig(iterations=args.iterations),
                variant=variant,
            )
            model = MultiScaleChangeDetector(cfg, seed=seed)
            train_cfg = TrainConfig(epochs=args.epochs, seed=seed)
            train_loop(model, train_pairs, train_cfg)
            report, _ = evaluate(model, val_pairs)
            rows.append(
                f"{dataset},{variant},{args.iterations},{seed},"
                f"{report.precision:.6f},{report.recall:.6f},{report.f1:.6f},"
                f"{report.oa:.6f},{report.iou:.6f}"
            )
            print(rows[-1])
    header = "dataset,variant,T,seed,precision,recall,f1,oa,iou"
    Path(args.out).write_text(header + "\n" + "\n".join(rows) + "\n")
    return 0


def cmd_sweep_t(args) -> int:
    pairs = load_dataset(args.dataset)
    train_pairs, val_pairs = split_pairs(pairs)
    dataset = Path(args.dataset).name
    rows = []
    for t in range(args.t_max + 1):
        cfg = MsIdetConfig(
            unet=UNetConfig(base_channels=args.base_channels),
            idet=IdetConfig(iterations=t),
        )
        model = MultiScaleChangeDetector(cfg, seed=args.seed)
        train_cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
        train_loop(model, train_pairs, train_cfg)
        report, _ = evaluate(model, val_pairs)
        rows.append(_metrics_row(dataset, "full", t, report))
        print(rows[-1])
    Path(args.out).write_text(METRICS_HEADER + "\n" + "\n".join(rows) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    ok = run_suite(verbose=True, include_full_model=not args.ops_only)
    print("gradient checks " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idet", description="change-detection experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-pairs", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--change-ratio", type=float, default=0.07)
    p.add_argument("--jitter", type=float, default=0.1)
    p.add_argument("--background-complexity", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--model", choices=("msidet", "basic"), default=None)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--base-channels", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--loss-mode", choices=("multi_ce", "single_ce", "multi_focal"),
                   default=None)
    p.add_argument("--focal-gamma", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("degrade", help="noise-severity sweep of the difference tap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alphas", default=None, help="comma-separated severities")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("ablate", help="train and score the variant matrix")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=None, help="comma-separated subset")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--iterations", type=int, default=2)
    p.add_argument("--base-channels", type=int, default=16)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-t", help="train at each iteration count")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t-max", type=int, default=5)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep_t)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--ops-only", action="store_true",
                   help="skip the end-to-end model check")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failure -> exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
