"""Command-line front end.

Subcommands cover the full workflow: generating map pools, training a
stage, evaluating or replaying a run, sweeping the whole benchmark
matrix, the apple/texture ablation grid, trajectory analysis (saliency
maps and top-down renders), a uniform-random baseline, and a fast
install selftest.

Exit codes: 0 success, 1 usage, 2 validation (bad values, mismatched
hashes), 3 runtime failure. Every artifact-writing command stamps the
configuration hash, package version, and seeds into its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from . import analysis as analysis_mod
from . import benchmark as bench_mod
from . import metrics as metrics_mod
from .agent import CheckpointError, load_checkpoint, save_checkpoint
from .analysis import AnalysisError
from .benchmark import AblationFlags, BenchmarkError
from .config import ConfigError, RunConfig, config_hash, dump_config, load_config
from .maze import MapFormatError, annotate, assign_textures, default_apple_count, \
    build_pool, parse_manifest, write_manifest
from .metrics import MetricsError
from .seeding import derive_seed
from .selftest import run_selftest
from .world import read_trajectory


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(parser):
    parser.add_argument("--config", metavar="FILE",
                        help="INI-style configuration file")
    parser.add_argument("--set", dest="sets", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override one configuration knob (repeatable)")


def _add_pool_flag(parser):
    parser.add_argument("--pool", metavar="FILE",
                        help="map pool manifest (default: derive from config)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mazebench", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version",
                        version=f"mazebench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen-maps", help="generate a map pool manifest")
    _add_config_flags(p)
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("train", help="train one curriculum stage")
    _add_config_flags(p)
    _add_pool_flag(p)
    p.add_argument("--stage", type=int, required=True, choices=range(1, 6))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--map-id", help="train map for static-map stages")
    p.add_argument("--init-checkpoint", metavar="FILE",
                   help="warm-start parameters")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one stage")
    _add_config_flags(p)
    _add_pool_flag(p)
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, metavar="DIR")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--stage", type=int, choices=range(1, 6))
    group.add_argument("--replay", metavar="MANIFEST",
                       help="re-run a recorded stage evaluation")
    p.add_argument("--variant", choices=("seen", "unseen"), default="seen")
    p.add_argument("--no-apples", action="store_true")
    p.add_argument("--flat-textures", action="store_true")

    p = sub.add_parser("bench", help="run the full stage matrix and report")
    _add_config_flags(p)
    _add_pool_flag(p)
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--stages", default="1,2,3,4,5",
                   help="comma-separated stage ids (default: all)")

    p = sub.add_parser("ablate", help="2x2 apple/texture ablation grid")
    _add_config_flags(p)
    _add_pool_flag(p)
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--stage", type=int, choices=range(1, 6), default=4)

    p = sub.add_parser("analyze", help="saliency and render for one trajectory")
    _add_config_flags(p)
    _add_pool_flag(p)
    p.add_argument("--trajectory", required=True, metavar="FILE")
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--every", type=int, default=25,
                   help="write every Nth masked frame (default 25)")
    p.add_argument("--progress", metavar="FILE",
                   help="training progress file for a reward curve")

    p = sub.add_parser("baseline", help="uniform-random agent metrics")
    _add_config_flags(p)
    _add_pool_flag(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--map-id")

    p = sub.add_parser("dump-config", help="print the resolved configuration")
    _add_config_flags(p)

    p = sub.add_parser("selftest", help="fast install health check")

    return parser


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _parse_sets(pairs) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set needs SECTION.KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _resolve_config(args) -> tuple[RunConfig, str]:
    config = load_config(args.config, overrides=_parse_sets(args.sets))
    return config, config_hash(config)


def _load_pool(args, config: RunConfig):
    if getattr(args, "pool", None):
        try:
            text = Path(args.pool).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read pool manifest: {exc}") from exc
        return parse_manifest(text)
    b = config.bench
    return build_pool(b.pool_seed, b.n_train, b.n_test, b.cell_cols,
                      b.cell_rows, n_static=b.n_static)


def _load_checkpoint_for(config: RunConfig, cfg_hash: str, path):
    """Load parameters and enforce the checkpoint/config contract."""
    params, agent_config, meta = load_checkpoint(path)
    recorded = (meta or {}).get("config_hash")
    if recorded and recorded != cfg_hash:
        raise ConfigError(
            f"checkpoint was trained under config {recorded} but this "
            f"invocation resolves to {cfg_hash}; pass the matching --config/--set"
        )
    if agent_config != config.agent:
        raise ConfigError(
            "checkpoint network shape differs from the configured agent; "
            "pass the matching --config/--set"
        )
    return params, agent_config, meta or {}


def _print_summary(report) -> None:
    reward = report.summary.get("reward", {})
    print(f"episodes={report.summary['episodes']} "
          f"reward_mean={reward.get('mean'):.4f} "
          f"reward_std={reward.get('std'):.4f}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_gen_maps(args) -> int:
    config, cfg_hash = _resolve_config(args)
    pool = _load_pool(args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "maps.manifest").write_text(write_manifest(pool))
    info = {
        "config_hash": cfg_hash,
        "version": __version__,
        "pool_seed": config.bench.pool_seed,
        "pool_hash": bench_mod.pool_digest(pool),
        "train_maps": len(pool.train_ids),
        "test_maps": len(pool.test_ids),
        "static_maps": len(pool.static_ids),
    }
    (out / "pool_info.json").write_text(json.dumps(info, sort_keys=True,
                                                   indent=2) + "\n")
    print(f"wrote {len(pool.entries)} maps to {out / 'maps.manifest'} "
          f"(pool {info['pool_hash']})")
    return 0


def _cmd_train(args) -> int:
    config, cfg_hash = _resolve_config(args)
    pool = _load_pool(args, config)
    spec = bench_mod.stage(args.stage)
    initial = None
    if args.init_checkpoint:
        initial, init_agent, _ = load_checkpoint(args.init_checkpoint)
        if init_agent != config.agent:
            raise ConfigError("warm-start checkpoint has a different network shape")
    out = Path(args.out)
    result = bench_mod.train_stage(
        spec, pool, config.agent, config.train, config.env, config.bench,
        seed=args.seed, out_dir=out, map_id=args.map_id,
        initial_params=initial,
    )
    meta = {
        "config_hash": cfg_hash,
        "version": __version__,
        "seed": args.seed,
        "stage": args.stage,
        "pool_hash": bench_mod.pool_digest(pool),
        "env_steps": result.train.env_steps,
        "updates": result.train.updates,
        "episodes": result.train.episodes,
    }
    save_checkpoint(out / "final.ckpt", result.train.params, config.agent,
                    meta=meta)
    print(f"trained stage {args.stage}: {result.train.env_steps} env steps, "
          f"{result.train.updates} updates, {result.train.episodes} episodes")
    return 0


def _cmd_eval(args) -> int:
    config, cfg_hash = _resolve_config(args)
    pool = _load_pool(args, config)
    params, agent_config, _ = _load_checkpoint_for(config, cfg_hash,
                                                   args.checkpoint)
    out = Path(args.out)
    if args.replay:
        report = bench_mod.replay_from_manifest(args.replay, params,
                                                agent_config, pool, out_dir=out)
    else:
        flags = AblationFlags(apples_present=not args.no_apples,
                              textures_random=not args.flat_textures)
        report = bench_mod.run_stage(
            bench_mod.stage(args.stage), params, agent_config, pool,
            config.env, config.bench, args.seed, out,
            variant=args.variant, flags=flags, config_hash=cfg_hash,
        )
    _print_summary(report)
    return 0


def _cmd_bench(args) -> int:
    config, cfg_hash = _resolve_config(args)
    pool = _load_pool(args, config)
    params, agent_config, _ = _load_checkpoint_for(config, cfg_hash,
                                                   args.checkpoint)
    try:
        stage_ids = sorted({int(s) for s in args.stages.split(",") if s.strip()})
    except ValueError:
        raise ConfigError(f"--stages must be comma-separated ids, got "
                          f"{args.stages!r}") from None
    out = Path(args.out)
    rows = []
    for stage_id in stage_ids:
        spec = bench_mod.stage(stage_id)
        variants = ("seen", "unseen") if stage_id == 5 else ("seen",)
        for variant in variants:
            label = f"stage {stage_id}" + (f" {variant}" if stage_id == 5 else "")
            run_dir = out / (f"stage{stage_id}" if stage_id < 5
                             else f"stage5_{variant}")
            report = bench_mod.run_stage(
                spec, params, agent_config, pool, config.env, config.bench,
                args.seed, run_dir, variant=variant, config_hash=cfg_hash,
            )
            reward = report.summary["reward"]
            rows.append((label, reward["mean"], reward["std"]))
            print(f"{label}: reward {reward['mean']:.4f} +/- {reward['std']:.4f}")
    summary_path = out / "stage_summary.csv"
    with open(summary_path, "w") as f:
        f.write("label,reward_mean,reward_std\n")
        for label, mean, std in rows:
            f.write(f"{label},{mean!r},{std!r}\n")
    analysis_mod.plot_stage_bars(rows, out / "stage_reward.svg")
    print(f"summary written to {summary_path}")
    return 0


def _cmd_ablate(args) -> int:
    config, cfg_hash = _resolve_config(args)
    pool = _load_pool(args, config)
    params, agent_config, _ = _load_checkpoint_for(config, cfg_hash,
                                                   args.checkpoint)
    out = Path(args.out)
    grid = bench_mod.run_ablation_grid(
        params, agent_config, pool, config.env, config.bench, args.seed,
        out, stage_spec=bench_mod.stage(args.stage), config_hash=cfg_hash,
    )
    rows = []
    with open(out / "ablation_summary.csv", "w") as f:
        f.write("cell,reward_mean,reward_std\n")
        for name in sorted(grid):
            reward = grid[name].summary["reward"]
            rows.append((name, reward["mean"], reward["std"]))
            f.write(f"{name},{reward['mean']!r},{reward['std']!r}\n")
            print(f"{name}: reward {reward['mean']:.4f} +/- {reward['std']:.4f}")
    analysis_mod.plot_stage_bars(rows, out / "ablation_reward.svg",
                                 title="reward by ablation cell")
    return 0


def _cmd_analyze(args) -> int:
    config, cfg_hash = _resolve_config(args)
    pool = _load_pool(args, config)
    params, agent_config, _ = _load_checkpoint_for(config, cfg_hash,
                                                   args.checkpoint)
    header, records = read_trajectory(args.trajectory)
    for key in ("map_id", "stage", "episode_seed", "apples_present",
                "textures_random"):
        if key not in header:
            raise AnalysisError(f"trajectory header lacks {key!r}")
    try:
        maze = pool.build(header["map_id"])
    except KeyError:
        raise AnalysisError(
            f"trajectory map {header['map_id']!r} is not in the pool"
        ) from None
    spec = bench_mod.stage(int(header["stage"]))
    flags = AblationFlags(apples_present=bool(header["apples_present"]),
                          textures_random=bool(header["textures_random"]))
    ann = bench_mod.episode_annotations(
        maze, spec, flags, config.bench.apple_count, int(header["episode_seed"]),
    )
    env_config = bench_mod.stage_env_config(config.env, spec)
    replay = analysis_mod.replay_episode(
        maze, ann, env_config, records, int(header["episode_seed"]),
        depth_groups=agent_config.depth_groups,
    )
    result = analysis_mod.episode_saliency(params, agent_config, config.train,
                                           replay)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis_mod.write_saliency_frames(out / "frames", replay, result,
                                       every=args.every)
    analysis_mod.write_saliency_summary(out / "saliency.json", result)
    analysis_mod.write_topdown(out / "topdown.ppm", maze, records,
                               goal=ann.goal, apples=sorted(ann.apples))
    written = ["saliency.json", "topdown.ppm", "frames/"]
    if args.progress:
        analysis_mod.plot_reward_curve(args.progress, out / "reward_curve.svg")
        written += ["reward_curve.svg", "reward_curve.png"]
    info = {
        "config_hash": cfg_hash,
        "version": __version__,
        "trajectory": str(args.trajectory),
        "checkpoint_hash": bench_mod.params_digest(params),
        "zero_frames": len(result.zero_frames),
        "frames": int(result.masks.shape[0]),
    }
    (out / "analyze_info.json").write_text(json.dumps(info, sort_keys=True,
                                                      indent=2) + "\n")
    print(f"analyzed {info['frames']} frames "
          f"({info['zero_frames']} zero-gradient) into {out}")
    return 0


def _cmd_baseline(args) -> int:
    config, cfg_hash = _resolve_config(args)
    pool = _load_pool(args, config)
    map_id = args.map_id if args.map_id else pool.static_ids[0]
    maze = pool.build(map_id)
    count = config.bench.apple_count
    if count < 0:
        count = default_apple_count(maze)
    ann = annotate(maze, goal_static=True, spawn_static=True,
                   apple_count=count, rng_seed=derive_seed(args.seed, "annot"))
    ann = ann.with_textures(assign_textures(maze, derive_seed(args.seed, "tex")))
    report = metrics_mod.random_agent_baseline(
        maze, ann, config.env, episodes=args.episodes, seed=args.seed,
        map_id=map_id,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_report_csv(report, out / "metrics.csv")
    metrics_mod.write_report_json(report, out / "metrics.json")
    info = {
        "config_hash": cfg_hash,
        "version": __version__,
        "seed": args.seed,
        "map_id": map_id,
        "episodes": args.episodes,
    }
    (out / "baseline_info.json").write_text(json.dumps(info, sort_keys=True,
                                                       indent=2) + "\n")
    _print_summary(report)
    return 0


def _cmd_dump_config(args) -> int:
    config, cfg_hash = _resolve_config(args)
    print(f"# config hash: {cfg_hash}")
    print(dump_config(config), end="")
    return 0


_COMMANDS = {
    "gen-maps": _cmd_gen_maps,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "ablate": _cmd_ablate,
    "analyze": _cmd_analyze,
    "baseline": _cmd_baseline,
    "dump-config": _cmd_dump_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "selftest":
        return 3 if run_selftest() else 0
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, BenchmarkError, MetricsError, CheckpointError,
            MapFormatError, AnalysisError, ValueError) as exc:
        print(f"mazebench: validation error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"mazebench: {exc}", file=sys.stderr)
        return 3
    except RuntimeError as exc:
        print(f"mazebench: runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
