"""The five-stage benchmark matrix: training wiring, evaluation
protocol, apple/texture ablations, and replayable stage manifests.

A stage fixes which of spawn, goal, and map are randomized per episode.
Evaluation always walks a fixed map list — the pool's static subset for
stages 1-4 and for stage 5's "seen" variant, the held-out test maps for
stage 5's "unseen" variant — running a fixed number of episodes per
map. Episode seeds derive from (eval_seed, map_id, episode_index) only,
so ablation cells pair exactly: toggling apples or textures replays
identical spawn/goal sequences.

Every stage run emits per-episode trajectory logs, a metrics CSV/JSON
pair, and a plain-text manifest sufficient to replay the run
byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import agent as agent_mod
from . import trainer as trainer_mod
from .agent import AgentConfig, RecurrentState
from .maze import (
    MapAnnotations,
    MapPool,
    Maze,
    annotate,
    assign_textures,
    default_apple_count,
)
from .maze import write_manifest as maze_manifest_text
from .metrics import MetricsReport, build_report, compute_episode_metrics, \
    write_report_csv, write_report_json
from .seeding import derive_seed, rng_from
from .trainer import TrainConfig, TrainResult
from .world import EnvConfig, Environment, run_episode, write_trajectory


class BenchmarkError(Exception):
    """Raised for stage/checkpoint mismatches and malformed manifests."""


@dataclass(frozen=True)
class StageSpec:
    """One cell of the randomization matrix."""

    stage_id: int
    spawn_random: bool
    goal_random: bool
    map_random: bool

    def label(self) -> str:
        def word(flag):
            return "random" if flag else "static"

        return (f"stage {self.stage_id}: {word(self.goal_random)} goal, "
                f"{word(self.spawn_random)} spawn, {word(self.map_random)} map")


STAGES: tuple[StageSpec, ...] = (
    StageSpec(1, spawn_random=False, goal_random=False, map_random=False),
    StageSpec(2, spawn_random=True, goal_random=False, map_random=False),
    StageSpec(3, spawn_random=False, goal_random=True, map_random=False),
    StageSpec(4, spawn_random=True, goal_random=True, map_random=False),
    StageSpec(5, spawn_random=True, goal_random=True, map_random=True),
)


def stage(stage_id: int) -> StageSpec:
    if not 1 <= stage_id <= 5:
        raise BenchmarkError(f"stage must be 1..5, got {stage_id}")
    return STAGES[stage_id - 1]


@dataclass(frozen=True)
class AblationFlags:
    apples_present: bool = True
    textures_random: bool = True


@dataclass(frozen=True)
class BenchConfig:
    """Pool sizing and evaluation protocol knobs (desk-scale defaults)."""

    pool_seed: int = 7
    n_train: int = 100
    n_test: int = 10
    n_static: int = 10
    cell_cols: int = 3
    cell_rows: int = 3
    episodes_per_map: int = 10
    apple_count: int = -1  # -1 means one apple per six floor blocks
    action_mode: str = "sampled"  # sampled | greedy
    eval_workers: int = 4
    train_subset: int = 0  # 0 means the whole train split (stage 5)

    def validate(self) -> None:
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")
        if self.n_static < 1:
            raise ValueError("n_static must be >= 1")
        if self.cell_cols < 2 or self.cell_rows < 2:
            raise ValueError("cells must be at least 2x2")
        if self.episodes_per_map < 1:
            raise ValueError("episodes_per_map must be >= 1")
        if self.action_mode not in ("sampled", "greedy"):
            raise ValueError(f"unknown action_mode {self.action_mode!r}")
        if self.eval_workers < 1:
            raise ValueError("eval_workers must be >= 1")
        if self.train_subset < 0:
            raise ValueError("train_subset must be >= 0")


def episode_annotations(
    maze: Maze,
    stage_spec: StageSpec,
    flags: AblationFlags,
    apple_count: int,
    episode_seed: int,
) -> MapAnnotations:
    """Goal/spawn/apple/texture assignment for one episode."""
    count = 0
    if flags.apples_present:
        count = default_apple_count(maze) if apple_count < 0 else apple_count
    ann = annotate(
        maze,
        goal_static=not stage_spec.goal_random,
        spawn_static=not stage_spec.spawn_random,
        apple_count=count,
        rng_seed=episode_seed,
    )
    textures = assign_textures(
        maze, derive_seed(episode_seed, "texture"),
        randomized=flags.textures_random,
    )
    return ann.with_textures(textures)


def stage_env_config(base: EnvConfig, stage_spec: StageSpec) -> EnvConfig:
    return dataclasses.replace(
        base,
        spawn_mode="random" if stage_spec.spawn_random else "static",
        goal_mode="random" if stage_spec.goal_random else "static",
    )


def params_digest(params: dict[str, np.ndarray]) -> str:
    """16-hex identity of a parameter set (name-sorted raw float64)."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def pool_digest(pool: MapPool) -> str:
    """16-hex identity of a map pool (its canonical manifest text)."""
    text = maze_manifest_text(pool)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def check_compatibility(agent_config: AgentConfig, env_config: EnvConfig) -> None:
    """Reject checkpoint/environment mismatches before any episode runs."""
    if (agent_config.obs_height, agent_config.obs_width) != (
        env_config.obs_height, env_config.obs_width,
    ):
        raise BenchmarkError(
            f"checkpoint expects {agent_config.obs_height}x"
            f"{agent_config.obs_width} observations but the environment "
            f"produces {env_config.obs_height}x{env_config.obs_width}"
        )
    if agent_config.obs_channels != 3:
        raise BenchmarkError("checkpoint observation channels must be 3")


def make_policy_callback(
    params: dict[str, np.ndarray],
    agent_config: AgentConfig,
    act_rng: np.random.Generator,
    greedy: bool,
):
    """run_episode callback wrapping the network; state is the LSTM state."""
    const = agent_mod.wrap_params(params, requires_grad=False)

    def callback(obs, state):
        svars = state if state is not None else RecurrentState.zeros(agent_config).to_vars()
        out = agent_mod.forward(const, obs.image, obs.prev_action,
                                obs.prev_reward, svars, agent_config)
        action = agent_mod.sample_action(out.policy.value, act_rng, greedy=greedy)
        return action, out.state

    return callback


def eval_map_ids(pool: MapPool, stage_spec: StageSpec, variant: str) -> list[str]:
    if variant not in ("seen", "unseen"):
        raise BenchmarkError(f"unknown variant {variant!r}")
    if stage_spec.stage_id < 5:
        if variant == "unseen":
            raise BenchmarkError("the unseen variant exists only for stage 5")
        return list(pool.static_ids)
    return list(pool.static_ids if variant == "seen" else pool.test_ids)


# ---------------------------------------------------------------------------
# Stage evaluation
# ---------------------------------------------------------------------------


def _run_one_episode(
    maze: Maze,
    map_id: str,
    episode_index: int,
    stage_spec: StageSpec,
    variant: str,
    flags: AblationFlags,
    params: dict[str, np.ndarray],
    agent_config: AgentConfig,
    env_config: EnvConfig,
    bench_config: BenchConfig,
    eval_seed: int,
    header_extra: dict,
    traj_dir: Optional[Path],
):
    episode_seed = derive_seed(eval_seed, map_id, episode_index)
    ann = episode_annotations(maze, stage_spec, flags, bench_config.apple_count,
                              episode_seed)
    cfg = stage_env_config(env_config, stage_spec)
    act_rng = rng_from("eval-act", eval_seed, map_id, episode_index)
    callback = make_policy_callback(params, agent_config, act_rng,
                                    greedy=bench_config.action_mode == "greedy")
    records = run_episode(maze, ann, cfg, callback, episode_seed)
    row = compute_episode_metrics(
        map_id, episode_index, records, ann.goal, maze,
        goal_radius=cfg.goal_radius, block_size=cfg.block_size,
    )
    if traj_dir is not None:
        header = {
            "map_id": map_id,
            "episode": episode_index,
            "episode_seed": episode_seed,
            "stage": stage_spec.stage_id,
            "variant": variant,
            "goal": list(ann.goal),
            "apples_present": flags.apples_present,
            "textures_random": flags.textures_random,
            "action_mode": bench_config.action_mode,
        }
        header.update(header_extra)
        write_trajectory(traj_dir / f"{map_id}_ep{episode_index:04d}.jsonl",
                         header, records)
    return row


def run_stage(
    stage_spec: StageSpec,
    params: dict[str, np.ndarray],
    agent_config: AgentConfig,
    pool: MapPool,
    env_config: EnvConfig,
    bench_config: BenchConfig,
    eval_seed: int,
    out_dir: Optional[Path] = None,
    *,
    variant: str = "seen",
    flags: AblationFlags = AblationFlags(),
    config_hash: str = "",
) -> MetricsReport:
    """Evaluate a parameter set on one stage; see the module docstring.

    Episodes fan out over a thread pool but results reduce in
    (map_id, episode_index) order, so outputs are reproducible
    regardless of scheduling.
    """
    bench_config.validate()
    env_config.validate()
    agent_config.validate()
    check_compatibility(agent_config, env_config)
    map_ids = eval_map_ids(pool, stage_spec, variant)
    checkpoint_hash = params_digest(params)

    traj_dir: Optional[Path] = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        traj_dir = out_dir / "trajectories"
        traj_dir.mkdir(parents=True, exist_ok=True)

    header_extra = {
        "eval_seed": eval_seed,
        "config_hash": config_hash,
        "checkpoint_hash": checkpoint_hash,
    }
    jobs = [
        (map_id, ep)
        for map_id in map_ids
        for ep in range(bench_config.episodes_per_map)
    ]
    mazes = {map_id: pool.build(map_id) for map_id in map_ids}

    def job(args):
        map_id, ep = args
        return (map_id, ep), _run_one_episode(
            mazes[map_id], map_id, ep, stage_spec, variant, flags, params,
            agent_config, env_config, bench_config, eval_seed, header_extra,
            traj_dir,
        )

    results = {}
    if bench_config.eval_workers == 1:
        for j in jobs:
            key, row = job(j)
            results[key] = row
    else:
        with ThreadPoolExecutor(max_workers=bench_config.eval_workers) as pool_ex:
            for key, row in pool_ex.map(job, jobs):
                results[key] = row

    rows = [results[key] for key in sorted(results)]
    report = build_report(rows)

    if out_dir is not None:
        write_report_csv(report, out_dir / "metrics.csv")
        write_report_json(report, out_dir / "metrics.json")
        manifest = stage_manifest_entries(
            stage_spec, variant, flags, pool, bench_config, env_config,
            eval_seed, config_hash, checkpoint_hash,
        )
        write_stage_manifest(out_dir / "manifest.txt", manifest)
    return report


# ---------------------------------------------------------------------------
# Stage manifests (replayable run descriptions)
# ---------------------------------------------------------------------------


def stage_manifest_entries(
    stage_spec: StageSpec,
    variant: str,
    flags: AblationFlags,
    pool: MapPool,
    bench_config: BenchConfig,
    env_config: EnvConfig,
    eval_seed: int,
    config_hash: str,
    checkpoint_hash: str,
) -> dict[str, str]:
    entries: dict[str, str] = {
        "stage.id": str(stage_spec.stage_id),
        "stage.spawn_random": str(stage_spec.spawn_random).lower(),
        "stage.goal_random": str(stage_spec.goal_random).lower(),
        "stage.map_random": str(stage_spec.map_random).lower(),
        "run.variant": variant,
        "run.eval_seed": str(eval_seed),
        "run.config_hash": config_hash,
        "run.checkpoint_hash": checkpoint_hash,
        "flags.apples_present": str(flags.apples_present).lower(),
        "flags.textures_random": str(flags.textures_random).lower(),
        "pool.hash": pool_digest(pool),
    }
    for name in ("pool_seed", "n_train", "n_test", "n_static", "cell_cols",
                 "cell_rows", "episodes_per_map", "apple_count", "action_mode",
                 "eval_workers", "train_subset"):
        entries[f"bench.{name}"] = str(getattr(bench_config, name))
    for field in dataclasses.fields(env_config):
        entries[f"env.{field.name}"] = repr(getattr(env_config, field.name))
    return entries


def write_stage_manifest(path, entries: dict[str, str]) -> None:
    with open(path, "w") as f:
        for key in sorted(entries):
            value = entries[key]
            if "\t" in key or "\n" in key or "\n" in value:
                raise BenchmarkError(f"manifest entry {key!r} is not single-line")
            f.write(f"{key}\t{value}\n")


def read_stage_manifest(path) -> dict[str, str]:
    entries: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise BenchmarkError(f"{path}: line {lineno}: expected key<TAB>value")
            key, value = line.split("\t", 1)
            if key in entries:
                raise BenchmarkError(f"{path}: line {lineno}: duplicate key {key!r}")
            entries[key] = value
    return entries


def _parse_bool(text: str, key: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise BenchmarkError(f"manifest key {key!r} expects true/false, got {text!r}")


def replay_from_manifest(
    manifest_path,
    params: dict[str, np.ndarray],
    agent_config: AgentConfig,
    pool: MapPool,
    out_dir: Optional[Path] = None,
) -> MetricsReport:
    """Re-run the stage evaluation a manifest describes.

    The checkpoint and pool identities are verified against the
    manifest's hashes first, so a replay either reproduces the original
    bytes or refuses to run.
    """
    m = read_stage_manifest(manifest_path)
    try:
        spec = StageSpec(
            stage_id=int(m["stage.id"]),
            spawn_random=_parse_bool(m["stage.spawn_random"], "stage.spawn_random"),
            goal_random=_parse_bool(m["stage.goal_random"], "stage.goal_random"),
            map_random=_parse_bool(m["stage.map_random"], "stage.map_random"),
        )
        flags = AblationFlags(
            apples_present=_parse_bool(m["flags.apples_present"],
                                       "flags.apples_present"),
            textures_random=_parse_bool(m["flags.textures_random"],
                                        "flags.textures_random"),
        )
        bench_config = BenchConfig(
            pool_seed=int(m["bench.pool_seed"]),
            n_train=int(m["bench.n_train"]),
            n_test=int(m["bench.n_test"]),
            n_static=int(m["bench.n_static"]),
            cell_cols=int(m["bench.cell_cols"]),
            cell_rows=int(m["bench.cell_rows"]),
            episodes_per_map=int(m["bench.episodes_per_map"]),
            apple_count=int(m["bench.apple_count"]),
            action_mode=m["bench.action_mode"],
            eval_workers=int(m["bench.eval_workers"]),
            train_subset=int(m["bench.train_subset"]),
        )
        defaults = EnvConfig()
        env_kwargs = {}
        for field in dataclasses.fields(EnvConfig):
            raw = m[f"env.{field.name}"]
            default = getattr(defaults, field.name)
            if isinstance(default, bool):
                env_kwargs[field.name] = raw == "True"
            elif isinstance(default, int):
                env_kwargs[field.name] = int(raw)
            elif isinstance(default, float):
                env_kwargs[field.name] = float(raw)
            else:
                env_kwargs[field.name] = raw.strip("'\"")
        env_config = EnvConfig(**env_kwargs)
        eval_seed = int(m["run.eval_seed"])
        variant = m["run.variant"]
        config_hash = m["run.config_hash"]
    except KeyError as exc:
        raise BenchmarkError(f"{manifest_path}: missing manifest key {exc}") from exc

    if params_digest(params) != m["run.checkpoint_hash"]:
        raise BenchmarkError(
            "checkpoint does not match the manifest "
            f"(expected {m['run.checkpoint_hash']}, got {params_digest(params)})"
        )
    if pool_digest(pool) != m["pool.hash"]:
        raise BenchmarkError(
            f"map pool does not match the manifest "
            f"(expected {m['pool.hash']}, got {pool_digest(pool)})"
        )
    return run_stage(
        spec, params, agent_config, pool, env_config, bench_config, eval_seed,
        out_dir, variant=variant, flags=flags, config_hash=config_hash,
    )


# ---------------------------------------------------------------------------
# Stage training
# ---------------------------------------------------------------------------


@dataclass
class TrainStageResult:
    train: TrainResult
    map_usage: list[str]  # map_id per started episode, append order


def train_stage(
    stage_spec: StageSpec,
    pool: MapPool,
    agent_config: AgentConfig,
    train_config: TrainConfig,
    env_config: EnvConfig,
    bench_config: BenchConfig,
    seed: int,
    out_dir: Optional[Path] = None,
    *,
    flags: AblationFlags = AblationFlags(),
    map_id: Optional[str] = None,
    initial_params: Optional[dict[str, np.ndarray]] = None,
    probe=None,
) -> TrainStageResult:
    """Train on one stage. Static-map stages train on a single map
    (``map_id``, defaulting to the first static id); stage 5 samples a
    map for every episode from a deterministic train subset."""
    bench_config.validate()
    cfg = stage_env_config(env_config, stage_spec)
    check_compatibility(agent_config, cfg)

    if stage_spec.map_random:
        subset = list(pool.train_ids)
        if bench_config.train_subset:
            if bench_config.train_subset > len(subset):
                raise BenchmarkError("train_subset exceeds the train split")
            picker = rng_from("train-subset", seed)
            idx = picker.choice(len(subset), size=bench_config.train_subset,
                                replace=False)
            subset = [subset[i] for i in sorted(idx)]
        mazes = {mid: pool.build(mid) for mid in subset}
    else:
        single = map_id if map_id is not None else pool.static_ids[0]
        subset = [single]
        mazes = {single: pool.build(single)}

    usage: list[str] = []
    usage_lock = threading.Lock()

    def env_factory(worker_id: int, episode_index: int) -> Environment:
        if stage_spec.map_random:
            pick = rng_from("train-map", seed, worker_id, episode_index)
            mid = subset[int(pick.integers(len(subset)))]
        else:
            mid = subset[0]
        with usage_lock:
            usage.append(mid)
        episode_seed = derive_seed(seed, "train-ep", worker_id, episode_index)
        ann = episode_annotations(mazes[mid], stage_spec, flags,
                                  bench_config.apple_count, episode_seed)
        return Environment(mazes[mid], ann, cfg, episode_seed)

    result = trainer_mod.train(
        env_factory, agent_config, train_config, seed, out_dir=out_dir,
        initial_params=initial_params, probe=probe,
    )
    return TrainStageResult(train=result, map_usage=usage)


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------


def ablation_cell_name(flags: AblationFlags) -> str:
    return (f"apples_{'on' if flags.apples_present else 'off'}__"
            f"textures_{'on' if flags.textures_random else 'off'}")


def run_ablation_grid(
    params: dict[str, np.ndarray],
    agent_config: AgentConfig,
    pool: MapPool,
    env_config: EnvConfig,
    bench_config: BenchConfig,
    eval_seed: int,
    out_dir: Optional[Path] = None,
    *,
    stage_spec: Optional[StageSpec] = None,
    variant: str = "seen",
    config_hash: str = "",
) -> dict[str, MetricsReport]:
    """2x2 apples/textures grid with identical episode seeds per cell."""
    spec = stage_spec if stage_spec is not None else stage(4)
    grid: dict[str, MetricsReport] = {}
    for apples in (True, False):
        for textures in (True, False):
            flags = AblationFlags(apples_present=apples, textures_random=textures)
            name = ablation_cell_name(flags)
            cell_dir = None if out_dir is None else Path(out_dir) / name
            grid[name] = run_stage(
                spec, params, agent_config, pool, env_config, bench_config,
                eval_seed, cell_dir, variant=variant, flags=flags,
                config_hash=config_hash,
            )
    return grid
