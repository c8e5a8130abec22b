"""Command line entry point: ``clfd <command> [options]``."""
import argparse
import logging
import shutil
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from CLfD.config import RunConfig, apply_overrides, load_run_config, write_resolved_config
from CLfD.ddpg import RandomPolicy, ScriptedPolicy, ddpg_train, evaluate_policy, load_policy
from CLfD.env import make_env
from CLfD.evaluation import alignment_suite, stage_probe_eval
from CLfD.exceptions import CLfDError, ConfigError
from CLfD.models import CLfDModel, build_model
from CLfD.plotting import plot_export
from CLfD.synth_data import generate_dataset, load_dataset
from CLfD.training import ModelCheckpoint, load_encoder, resume, train
from CLfD.utils import resolve_threads, rng_for, save_to_json, setup_logging

logger = logging.getLogger(__name__)


def prepare_out_dir(out: Path, force: bool, clear: Sequence[str] = ()) -> Path:
    """Refuse a non-empty ``out`` unless forced; when forced, remove the ``clear`` subdirectories."""
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
        for name in clear:
            if (out / name).exists():
                shutil.rmtree(out / name)
    out.mkdir(parents=True, exist_ok=True)
    return out


def resolve_encoder(args: argparse.Namespace, seed: int) -> CLfDModel:
    """Encoder from --checkpoint, or an untrained one with --random-init."""
    if getattr(args, "random_init", False):
        model = build_model(int(rng_for(seed, "init").integers(0, 2**62)))
        model.eval()
        return model
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required unless --random-init is given")
    return load_encoder(Path(args.checkpoint))


def cmd_gen_data(args: argparse.Namespace, run: RunConfig) -> int:
    seed = args.seed if args.seed is not None else run.seed
    config = apply_overrides(
        run.data, demos=args.demos, frames_per_demo=args.frames, workers=resolve_threads(args.threads)
    )
    config.validate()
    out = prepare_out_dir(Path(args.out), args.force, clear=("frames", "labels"))
    manifest = generate_dataset(seed, out, config)
    print(manifest.content_hash)
    return 0


def cmd_train(args: argparse.Namespace, run: RunConfig) -> int:
    out = Path(args.out)
    if args.resume:
        checkpoint = ModelCheckpoint.load(Path(args.resume))
        dataset = load_dataset(Path(args.dataset or checkpoint.config.dataset))
        result = resume(checkpoint, args.extra_epochs, dataset, out)
        config = checkpoint.config
    else:
        config = apply_overrides(
            run.train,
            dataset=args.dataset,
            objective=args.objective,
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
            train_views=args.train_views,
            use_projection_head=False if args.no_projection_head else None,
            record_wall_time=True if args.record_wall_time else None,
        ).resolved()
        config.validate()
        dataset = load_dataset(Path(config.dataset))
        prepare_out_dir(out, args.force)
        write_resolved_config(apply_overrides(run, train=config), out, "train")
        result = train(config, dataset, out)
    best = result.best_val_error
    print(f"epochs: {result.last.epoch}")
    if best is not None:
        print(f"best validation alignment error: {best * 100:.2f}% (epoch {result.last.best_epoch})")
    logger.info(f"Outputs written to {out} ({config.objective})")
    return 0


def cmd_eval_align(args: argparse.Namespace, run: RunConfig) -> int:
    seed = args.seed if args.seed is not None else run.seed
    encoder = resolve_encoder(args, seed)
    dataset = load_dataset(Path(args.dataset))
    report = alignment_suite(encoder, dataset, args.split, views=args.views, threads=resolve_threads(args.threads))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_frame().to_csv(out / "alignment.csv", index=False)
    summary = report.summary()
    summary["config"] = {
        "checkpoint": args.checkpoint,
        "random_init": args.random_init,
        "dataset": args.dataset,
        "split": args.split,
        "views": args.views,
        "seed": seed,
    }
    save_to_json(summary, out / "alignment.json")
    print(f"alignment error: {report.percent:.2f}%")
    return 0


def cmd_eval_stage(args: argparse.Namespace, run: RunConfig) -> int:
    probe_config = apply_overrides(
        run.probe,
        seed=args.seed,
        epochs=args.epochs,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        shuffle_labels=True if args.shuffle_labels else None,
    )
    encoder = resolve_encoder(args, probe_config.seed)
    dataset = load_dataset(Path(args.dataset))
    report = stage_probe_eval(encoder, dataset, probe_config, _views(args.views_train), _views(args.views_test))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    summary["config"] = {"checkpoint": args.checkpoint, "random_init": args.random_init, **vars(probe_config)}
    save_to_json(summary, out / "stage_probe.json")
    print(f"stage accuracy: {report.accuracy * 100:.2f}%")
    return 0


def _views(value: str):
    if "," in value or value.isdigit():
        return [int(v) for v in value.split(",")]
    return value


def cmd_train_rl(args: argparse.Namespace, run: RunConfig) -> int:
    ddpg_config = apply_overrides(
        run.ddpg,
        stage=args.stage,
        episodes=args.episodes,
        seed=args.seed,
        her_strategy=args.her_strategy,
    )
    env_config = apply_overrides(
        run.env, stage=ddpg_config.stage, goal_mode=args.goal_mode, reward_norm=ddpg_config.reward_norm
    )
    ddpg_config.validate()
    env_config.validate()
    encoder = resolve_encoder(args, ddpg_config.seed)
    dataset = load_dataset(Path(args.dataset))
    out = Path(args.out)
    prepare_out_dir(out, args.force)
    write_resolved_config(apply_overrides(run, ddpg=ddpg_config, env=env_config), out, "train-rl")
    result = ddpg_train(ddpg_config, make_env(encoder, dataset, env_config), out)
    last = result.episodes.tail(100)
    print(f"episodes: {len(result.episodes)}")
    print(f"success rate (last {len(last)} episodes): {last['success'].mean():.2f}")
    return 0


def cmd_eval_rl(args: argparse.Namespace, run: RunConfig) -> int:
    seed = args.seed if args.seed is not None else run.seed
    if args.policy:
        policy, _, env_config = load_policy(Path(args.policy))
    elif args.baseline:
        policy = RandomPolicy() if args.baseline == "random" else ScriptedPolicy()
        env_config = apply_overrides(run.env, stage=args.stage, goal_mode=args.goal_mode)
    else:
        raise ConfigError("eval-rl needs --policy or --baseline")
    encoder = resolve_encoder(args, seed)
    dataset = load_dataset(Path(args.dataset))
    base = make_env(encoder, dataset, env_config)
    report = evaluate_policy(policy, base.clone, args.episodes, seed, resolve_threads(args.threads))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_to_json({**report.summary(), "env": env_config.to_dict()}, out / "policy_eval.json")
    print(f"success rate: {report.success_rate:.2f} over {report.episodes} episodes")
    print(f"mean return: {report.mean_return:.3f}")
    return 0


def cmd_plot_export(args: argparse.Namespace, run: RunConfig) -> int:
    written = plot_export(Path(args.metrics), Path(args.out), args.window)
    for path in written:
        print(path)
    return 0


def _encoder_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", help="Encoder checkpoint (best.ckpt or last.ckpt)")
    parser.add_argument("--random-init", action="store_true", help="Use an untrained encoder as a baseline")


def _common_options(parser: argparse.ArgumentParser, default=None) -> None:
    # with SUPPRESS on the subcommands a value given before the command is kept
    parser.add_argument("--config", default=default, help="JSON run config")
    parser.add_argument("--threads", type=int, default=default, help="Worker threads (falls back to $CLFD_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clfd", description="Multi-view contrastive learning from demonstrations")
    parser.add_argument("--debug", action="store_true", help="Verbose logging")
    _common_options(parser)
    common = argparse.ArgumentParser(add_help=False)
    _common_options(common, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Generate the synthetic multi-view dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--demos", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="Train the encoder")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset")
    p.add_argument("--objective", choices=["ntxent", "triplet"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-views", type=int, nargs="+")
    p.add_argument("--no-projection-head", action="store_true")
    p.add_argument("--record-wall-time", action="store_true", help="Fill wall_time_s (makes logs run dependent)")
    p.add_argument("--resume", help="Checkpoint to continue from")
    p.add_argument("--extra-epochs", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval-align", parents=[common], help="Alignment error between synchronized views")
    _encoder_options(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--views", type=int, nargs="+")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="eval_align")
    p.set_defaults(handler=cmd_eval_align)

    p = sub.add_parser("eval-stage", parents=[common], help="Pick/place stage probe on frozen embeddings")
    _encoder_options(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--views-train", default="seen", help="seen, unseen, all or comma separated cameras")
    p.add_argument("--views-test", default="unseen", help="seen, unseen, all or comma separated cameras")
    p.add_argument("--shuffle-labels", action="store_true")
    p.add_argument("--train-per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="eval_stage")
    p.set_defaults(handler=cmd_eval_stage)

    p = sub.add_parser("train-rl", parents=[common], help="Train a DDPG+HER stage policy")
    _encoder_options(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--stage", choices=["pick", "place"])
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--her-strategy", choices=["final", "future"])
    p.add_argument("--goal-mode", choices=["demo", "scene"])
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_train_rl)

    p = sub.add_parser("eval-rl", parents=[common], help="Evaluate a stage policy or a baseline")
    _encoder_options(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--policy", help="Policy checkpoint written by train-rl")
    p.add_argument("--baseline", choices=["random", "scripted"])
    p.add_argument("--stage", choices=["pick", "place"], default="pick")
    p.add_argument("--goal-mode", choices=["demo", "scene"])
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_eval_rl)

    p = sub.add_parser("plot-export", parents=[common], help="Export (x, y) series from a metrics or episode log")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=1, help="Trailing moving-average window")
    p.set_defaults(handler=cmd_plot_export)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.debug)
    try:
        run = load_run_config(Path(args.config) if args.config else None)
        return args.handler(args, run)
    except CLfDError as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e.category}: {' '.join(str(e).split())}", file=sys.stderr)
        return 1
    except OSError as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: io: {' '.join(str(e).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
