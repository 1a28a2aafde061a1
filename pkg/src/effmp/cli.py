"""Command-line entry point: ``effmp <subcommand> ...``.

Exit codes: 0 success, 1 runtime or validation failure, 2 usage error
(including missing input paths).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .efficiency import count_flops
from .evaluation import evaluate_bundles, evaluate_predictions, format_rows, predict_parallel
from .features import format_goals, parse_goals
from .models import ModelConfig, compute_goals, format_predictions, load_model_config, parse_predictions, with_config
from .plotting import plot_metric_histogram, plot_scene
from .scene import list_bundles, load_dataset, load_scene_bundle, save_scene_bundle
from .synthetic import SyntheticSpec, generate_dataset
from .training import NO_AUGMENT, AugmentConfig, TrainConfig, load_model, train


class UsageError(Exception):
    pass


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _model_config(args) -> ModelConfig:
    cfg = load_model_config(_existing(args.config, "--config")) if args.config else ModelConfig()
    changes = {}
    if getattr(args, "variant", None):
        changes["variant"] = args.variant
    if getattr(args, "k", None):
        changes["k"] = args.k
    if getattr(args, "no_goals", False):
        changes["use_goal_features"] = False
    return with_config(cfg, **changes) if changes else cfg


def _bundles(args):
    if getattr(args, "bundle", None):
        return [load_scene_bundle(_existing(args.bundle, "--bundle"))]
    data = _existing(args.data_dir, "--data-dir")
    if not list_bundles(data):
        raise RuntimeError(f"no scene bundles in {data}")
    return load_dataset(data)


def _checkpoint(args):
    path = _existing(args.checkpoint, "--checkpoint")
    cfg, params, meta = load_model(path)
    if args.config:
        wanted = load_model_config(_existing(args.config, "--config"))
        if wanted.digest() != meta.get("config_hash", cfg.digest()):
            raise RuntimeError(f"incompatible checkpoint: config hash {meta.get('config_hash')} != {wanted.digest()}")
    return cfg, params


def cmd_gen_data(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    spec = SyntheticSpec(template=args.template, agents=args.agents, noise=args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for b in generate_dataset(spec, args.count, args.seed or 0):
        save_scene_bundle(b, out / f"{b.scene.scene_id}.bundle")
    print(f"wrote {args.count} bundles to {out}")
    return 0


def cmd_train(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    if args.resume:
        _existing(args.resume, "--resume")
    data = _bundles(args)
    cfg = _model_config(args)
    aug = NO_AUGMENT if args.no_augment else AugmentConfig()
    tcfg = TrainConfig(
        batch_size=args.batch_size,
        lr=args.lr,
        max_steps=args.steps,
        eval_every=args.eval_every,
        early_stop=args.early_stop,
        aug=aug,
        val_fraction=args.val_fraction,
        seed=args.seed or 0,
    )
    state = train(data, cfg, tcfg, checkpoint=args.out, resume=args.resume, emit=lambda line: print(line, flush=True))
    print(f"checkpoint {state.checkpoint} step={state.step} best_val_minade={state.best_metric:.6f}")
    return 0


def cmd_predict(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    cfg, params = _checkpoint(args)
    preds = predict_parallel(_bundles(args), cfg, params)
    if args.k:
        preds = [p.top(min(args.k, p.k)) for p in preds]
    Path(args.out).write_text(format_predictions(preds))
    print(f"wrote {len(preds)} predictions to {args.out}")
    return 0


def cmd_eval(args) -> int:
    if args.pred:
        preds = parse_predictions(_existing(args.pred, "--pred").read_text())
        report, rows = evaluate_predictions(preds, _bundles(args), args.k)
    else:
        cfg, params = _checkpoint(args)
        report, rows = evaluate_bundles(_bundles(args), cfg, params, k=args.k)
    print(report.format())
    out = Path(args.out) if args.out else Path("eval.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_rows(rows))
    plot_metric_histogram(rows, out.with_suffix(".svg"))
    return 0


def cmd_extract_features(args) -> int:
    bundle = load_scene_bundle(_existing(args.bundle, "--bundle"))
    cfg = _model_config(args)
    if args.seed is not None:
        cfg = with_config(cfg, seed=args.seed)
    text = format_goals(compute_goals(bundle, cfg))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_flops(args) -> int:
    cfg = _model_config(args)
    sys.stdout.write(count_flops(cfg, args.agents, r=args.r).format())
    return 0


def cmd_plot(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    bundle = load_scene_bundle(_existing(args.bundle, "--bundle"))
    pred = None
    if args.pred:
        sid = bundle.scene.scene_id
        matches = [p for p in parse_predictions(_existing(args.pred, "--pred").read_text()) if p.scene_id == sid]
        if not matches:
            raise RuntimeError(f"no prediction for scene {sid} in {args.pred}")
        pred = matches[0]
    if args.goals:
        goals = parse_goals(_existing(args.goals, "--goals").read_text())
    else:
        goals = compute_goals(bundle, _model_config(args))
    plot_scene(bundle, args.out, pred, goals)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="effmp", description="Efficient multimodal motion prediction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, ckpt=False, model=False):
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data-dir")
            p.add_argument("--bundle")
        if ckpt:
            p.add_argument("--checkpoint")
        if model or ckpt:
            p.add_argument("--config")
        if model:
            p.add_argument("--variant", choices=("lstm_mhsa", "set_transformer"))
            p.add_argument("--no-goals", action="store_true", help="disable map-based goal features")
        p.add_argument("--k", type=int)

    p = sub.add_parser("gen-data", help="write a synthetic dataset of scene bundles")
    common(p, data=False)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--template", choices=("straight", "curve", "intersection"), default="intersection")
    p.add_argument("--agents", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p, model=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--early-stop", type=int, default=5)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write k-mode predictions for scenes")
    common(p, ckpt=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="print the EVAL line and write per-scene metrics")
    common(p, ckpt=True)
    p.add_argument("--pred", help="score an existing prediction file instead of running the model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract-features", help="sample goal points for a bundle")
    common(p, model=True)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("flops", help="parameter and multiply-accumulate counts")
    common(p, data=False, model=True)
    p.add_argument("--agents", type=int, default=10)
    p.add_argument("--r", type=int)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("plot", help="render a scene with predictions to SVG")
    common(p, model=True)
    p.add_argument("--pred")
    p.add_argument("--goals")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"effmp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"effmp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
