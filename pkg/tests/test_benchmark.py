"""Stage matrix, evaluation protocol, ablation pairing, and manifests."""

import dataclasses
from pathlib import Path

import numpy as np
import pytest

from mazebench.agent import AgentConfig, init_params
from mazebench.benchmark import (
    STAGES,
    AblationFlags,
    BenchConfig,
    BenchmarkError,
    StageSpec,
    ablation_cell_name,
    check_compatibility,
    episode_annotations,
    eval_map_ids,
    params_digest,
    pool_digest,
    read_stage_manifest,
    replay_from_manifest,
    run_ablation_grid,
    run_stage,
    stage,
    stage_env_config,
    train_stage,
    write_stage_manifest,
)
from mazebench.maze import build_pool, generate_maze
from mazebench.seeding import derive_seed
from mazebench.trainer import TrainConfig
from mazebench.world import EnvConfig, Environment, read_trajectory

TINY_AGENT = AgentConfig(obs_height=20, obs_width=20, lstm1_size=16, lstm2_size=8)
TINY_ENV = EnvConfig(episode_len=40, obs_width=20, obs_height=20)
TINY_BENCH = BenchConfig(
    pool_seed=11,
    n_train=4,
    n_test=2,
    n_static=2,
    cell_cols=2,
    cell_rows=2,
    episodes_per_map=2,
    apple_count=1,
    eval_workers=2,
)


def tiny_pool():
    return build_pool(
        TINY_BENCH.pool_seed,
        TINY_BENCH.n_train,
        TINY_BENCH.n_test,
        TINY_BENCH.cell_cols,
        TINY_BENCH.cell_rows,
        n_static=TINY_BENCH.n_static,
    )


def tiny_params(seed=33):
    return init_params(TINY_AGENT, seed)


# ---------------------------------------------------------------------------
# Stage table and per-episode setup
# ---------------------------------------------------------------------------


def test_stage_table_matches_randomization_matrix():
    expected = {
        1: (False, False, False),
        2: (True, False, False),
        3: (False, True, False),
        4: (True, True, False),
        5: (True, True, True),
    }
    assert len(STAGES) == 5
    for spec in STAGES:
        assert expected[spec.stage_id] == (
            spec.spawn_random, spec.goal_random, spec.map_random,
        )
        assert stage(spec.stage_id) is spec
    for bad in (0, 6, -1):
        with pytest.raises(BenchmarkError):
            stage(bad)


def test_stage_env_config_sets_modes():
    cfg = stage_env_config(TINY_ENV, stage(1))
    assert (cfg.spawn_mode, cfg.goal_mode) == ("static", "static")
    cfg = stage_env_config(TINY_ENV, stage(2))
    assert (cfg.spawn_mode, cfg.goal_mode) == ("random", "static")
    cfg = stage_env_config(TINY_ENV, stage(4))
    assert (cfg.spawn_mode, cfg.goal_mode) == ("random", "random")


def test_static_stage_pins_goal_and_spawn_across_episodes():
    maze = generate_maze(5, 3, 3)
    flags = AblationFlags()
    anns = [
        episode_annotations(maze, stage(1), flags, 2, derive_seed(9, "ep", i))
        for i in range(6)
    ]
    assert len({a.goal for a in anns}) == 1
    assert len({a.spawn for a in anns}) == 1
    assert anns[0].spawn is not None


def test_random_goal_stage_varies_goal_per_episode():
    maze = generate_maze(5, 3, 3)
    flags = AblationFlags()
    anns = [
        episode_annotations(maze, stage(3), flags, 0, derive_seed(9, "ep", i))
        for i in range(12)
    ]
    assert len({a.goal for a in anns}) > 1
    # spawn stays pinned on stage 3; the environment draws nothing extra
    assert len({a.spawn for a in anns}) == 1


def test_random_spawn_stage_leaves_spawn_to_environment():
    maze = generate_maze(5, 3, 3)
    ann = episode_annotations(maze, stage(2), AblationFlags(), 0, 123)
    assert ann.spawn is None


def test_apples_off_flag_empties_apples():
    maze = generate_maze(5, 3, 3)
    flags = AblationFlags(apples_present=False)
    ann = episode_annotations(maze, stage(4), flags, 5, 77)
    assert ann.apples == frozenset()


def test_negative_apple_count_uses_floor_density_default():
    maze = generate_maze(5, 3, 3)
    ann = episode_annotations(maze, stage(1), AblationFlags(), -1, 77)
    assert len(ann.apples) == len(maze.floor_blocks()) // 6


def test_textures_flag_controls_randomization():
    maze = generate_maze(5, 3, 3)
    flat = episode_annotations(
        maze, stage(1), AblationFlags(textures_random=False), 0, 42,
    )
    assert flat.texture_ids is not None
    assert np.all(flat.texture_ids == 0)
    seen = [
        episode_annotations(maze, stage(1), AblationFlags(), 0, s).texture_ids
        for s in (1, 1, 2)
    ]
    assert np.array_equal(seen[0], seen[1])
    assert not np.array_equal(seen[0], seen[2])


def test_ablation_cells_share_goal_and_spawn_for_same_episode_seed():
    maze = generate_maze(6, 3, 3)
    spec = stage(4)
    episode_seed = derive_seed(21, "m0001", 3)
    cells = [
        AblationFlags(apples_present=a, textures_random=t)
        for a in (True, False)
        for t in (True, False)
    ]
    anns = [episode_annotations(maze, spec, f, 2, episode_seed) for f in cells]
    assert len({a.goal for a in anns}) == 1
    cfg = stage_env_config(TINY_ENV, spec)
    poses = []
    for ann in anns:
        env = Environment(maze, ann, cfg, episode_seed)
        env.reset()
        poses.append((env.pose.x, env.pose.y, env.pose.heading))
    assert len(set(poses)) == 1


# ---------------------------------------------------------------------------
# Compatibility and map selection
# ---------------------------------------------------------------------------


def test_compatibility_rejects_dimension_mismatch():
    big = AgentConfig()  # 42x42
    with pytest.raises(BenchmarkError, match="42x42"):
        check_compatibility(big, TINY_ENV)
    check_compatibility(TINY_AGENT, TINY_ENV)


def test_eval_map_ids_by_stage_and_variant():
    pool = tiny_pool()
    for sid in (1, 2, 3, 4):
        assert eval_map_ids(pool, stage(sid), "seen") == pool.static_ids
        with pytest.raises(BenchmarkError):
            eval_map_ids(pool, stage(sid), "unseen")
    assert eval_map_ids(pool, stage(5), "seen") == pool.static_ids
    assert eval_map_ids(pool, stage(5), "unseen") == pool.test_ids
    with pytest.raises(BenchmarkError):
        eval_map_ids(pool, stage(5), "held-out")


def test_bench_config_validation():
    with pytest.raises(ValueError):
        dataclasses.replace(TINY_BENCH, action_mode="argmax").validate()
    with pytest.raises(ValueError):
        dataclasses.replace(TINY_BENCH, episodes_per_map=0).validate()
    with pytest.raises(ValueError):
        dataclasses.replace(TINY_BENCH, cell_cols=1).validate()
    TINY_BENCH.validate()


# ---------------------------------------------------------------------------
# Digests
# ---------------------------------------------------------------------------


def test_params_digest_is_order_insensitive_and_value_sensitive():
    params = tiny_params()
    reversed_view = {k: params[k] for k in sorted(params, reverse=True)}
    assert params_digest(params) == params_digest(reversed_view)
    changed = {k: v.copy() for k, v in params.items()}
    changed["pi/b"][0] += 1e-9
    assert params_digest(changed) != params_digest(params)


def test_pool_digest_tracks_pool_identity():
    a = tiny_pool()
    b = tiny_pool()
    assert pool_digest(a) == pool_digest(b)
    other = build_pool(99, 4, 2, 2, 2, n_static=2)
    assert pool_digest(other) != pool_digest(a)


# ---------------------------------------------------------------------------
# Stage evaluation runs
# ---------------------------------------------------------------------------


def _tree(path: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(path)): p.read_bytes()
        for p in sorted(path.rglob("*"))
        if p.is_file()
    }


def test_run_stage_produces_expected_rows_and_files(tmp_path):
    pool = tiny_pool()
    report = run_stage(
        stage(1), tiny_params(), TINY_AGENT, pool, TINY_ENV, TINY_BENCH,
        eval_seed=5, out_dir=tmp_path / "run", config_hash="deadbeefdeadbeef",
    )
    n_expected = len(pool.static_ids) * TINY_BENCH.episodes_per_map
    assert len(report.episodes) == n_expected
    assert report.summary["episodes"] == n_expected
    run = tmp_path / "run"
    assert (run / "metrics.csv").is_file()
    assert (run / "metrics.json").is_file()
    assert (run / "manifest.txt").is_file()
    logs = sorted((run / "trajectories").iterdir())
    assert len(logs) == n_expected
    header, records = read_trajectory(logs[0])
    assert header["stage"] == 1
    assert header["config_hash"] == "deadbeefdeadbeef"
    assert header["checkpoint_hash"] == params_digest(tiny_params())
    assert len(records) == TINY_ENV.episode_len


def test_run_stage_is_byte_reproducible(tmp_path):
    pool = tiny_pool()
    for name in ("a", "b"):
        run_stage(
            stage(3), tiny_params(), TINY_AGENT, pool, TINY_ENV, TINY_BENCH,
            eval_seed=17, out_dir=tmp_path / name,
        )
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_run_stage_worker_count_does_not_change_episode_outputs(tmp_path):
    pool = tiny_pool()
    params = tiny_params()
    for name, workers in (("w1", 1), ("w3", 3)):
        bench = dataclasses.replace(TINY_BENCH, eval_workers=workers)
        run_stage(
            stage(2), params, TINY_AGENT, pool, TINY_ENV, bench,
            eval_seed=8, out_dir=tmp_path / name,
        )
    a, b = _tree(tmp_path / "w1"), _tree(tmp_path / "w3")
    # the manifest records the worker count; everything else must match
    del a["manifest.txt"], b["manifest.txt"]
    assert a == b


def test_run_stage_rejects_mismatched_checkpoint_before_writing(tmp_path):
    pool = tiny_pool()
    big_agent = AgentConfig()  # 42x42 observations
    params = init_params(big_agent, 1)
    out = tmp_path / "run"
    with pytest.raises(BenchmarkError):
        run_stage(
            stage(1), params, big_agent, pool, TINY_ENV, TINY_BENCH,
            eval_seed=5, out_dir=out,
        )
    assert not out.exists()


def test_stage5_unseen_runs_only_on_test_maps(tmp_path):
    pool = tiny_pool()
    run_stage(
        stage(5), tiny_params(), TINY_AGENT, pool, TINY_ENV,
        dataclasses.replace(TINY_BENCH, episodes_per_map=1),
        eval_seed=4, out_dir=tmp_path / "run", variant="unseen",
    )
    train_ids = set(pool.train_ids)
    seen_ids = set()
    for log in (tmp_path / "run" / "trajectories").iterdir():
        header, _ = read_trajectory(log)
        seen_ids.add(header["map_id"])
    assert seen_ids == set(pool.test_ids)
    assert not (seen_ids & train_ids)


def test_greedy_action_mode_changes_behavior(tmp_path):
    pool = tiny_pool()
    params = tiny_params()
    reports = {}
    for mode in ("sampled", "greedy"):
        bench = dataclasses.replace(TINY_BENCH, action_mode=mode,
                                    episodes_per_map=1)
        reports[mode] = run_stage(
            stage(1), params, TINY_AGENT, pool, TINY_ENV, bench, eval_seed=3,
        )
    sampled = [e.reward for e in reports["sampled"].episodes]
    greedy = [e.reward for e in reports["greedy"].episodes]
    assert sampled != greedy


# ---------------------------------------------------------------------------
# Manifests and replay
# ---------------------------------------------------------------------------


def test_stage_manifest_roundtrip(tmp_path):
    entries = {"stage.id": "3", "run.eval_seed": "17", "pool.hash": "aa" * 8}
    path = tmp_path / "manifest.txt"
    write_stage_manifest(path, entries)
    assert read_stage_manifest(path) == entries


def test_stage_manifest_rejects_malformed_lines(tmp_path):
    path = tmp_path / "manifest.txt"
    path.write_text("stage.id\t3\nbroken line\n")
    with pytest.raises(BenchmarkError, match="line 2"):
        read_stage_manifest(path)
    path.write_text("k\t1\nk\t2\n")
    with pytest.raises(BenchmarkError, match="duplicate"):
        read_stage_manifest(path)
    with pytest.raises(BenchmarkError):
        write_stage_manifest(path, {"key": "two\nlines"})


def test_replay_from_manifest_reproduces_run_bytes(tmp_path):
    pool = tiny_pool()
    params = tiny_params()
    run_stage(
        stage(4), params, TINY_AGENT, pool, TINY_ENV, TINY_BENCH,
        eval_seed=29, out_dir=tmp_path / "orig", config_hash="cafe0123cafe0123",
    )
    replay_from_manifest(
        tmp_path / "orig" / "manifest.txt", params, TINY_AGENT, pool,
        out_dir=tmp_path / "replay",
    )
    assert _tree(tmp_path / "orig") == _tree(tmp_path / "replay")


def test_replay_refuses_wrong_checkpoint_or_pool(tmp_path):
    pool = tiny_pool()
    params = tiny_params()
    run_stage(
        stage(1), params, TINY_AGENT, pool, TINY_ENV,
        dataclasses.replace(TINY_BENCH, episodes_per_map=1),
        eval_seed=2, out_dir=tmp_path / "orig",
    )
    manifest = tmp_path / "orig" / "manifest.txt"
    with pytest.raises(BenchmarkError, match="checkpoint"):
        replay_from_manifest(manifest, tiny_params(seed=99), TINY_AGENT, pool)
    other_pool = build_pool(500, 4, 2, 2, 2, n_static=2)
    with pytest.raises(BenchmarkError, match="pool"):
        replay_from_manifest(manifest, params, TINY_AGENT, other_pool)


# ---------------------------------------------------------------------------
# Stage training wiring
# ---------------------------------------------------------------------------


def _fast_train_config(max_env_steps):
    return TrainConfig(workers=2, t_max=10, max_env_steps=max_env_steps)


def test_train_stage_static_map_uses_one_map(tmp_path):
    pool = tiny_pool()
    result = train_stage(
        stage(1), pool, TINY_AGENT, _fast_train_config(300), TINY_ENV,
        TINY_BENCH, seed=6, out_dir=tmp_path,
    )
    assert result.train.env_steps >= 300
    assert set(result.map_usage) == {pool.static_ids[0]}


def test_train_stage_explicit_map_id(tmp_path):
    pool = tiny_pool()
    chosen = pool.train_ids[1]
    result = train_stage(
        stage(2), pool, TINY_AGENT, _fast_train_config(150), TINY_ENV,
        TINY_BENCH, seed=6, map_id=chosen,
    )
    assert set(result.map_usage) == {chosen}


def test_train_stage_random_map_samples_deterministic_subset():
    pool = tiny_pool()
    bench = dataclasses.replace(TINY_BENCH, train_subset=3)
    usages = []
    for _ in range(2):
        result = train_stage(
            stage(5), pool, TINY_AGENT, _fast_train_config(1200), TINY_ENV,
            bench, seed=13,
        )
        usages.append(result.map_usage)
    assert set(usages[0]) <= set(pool.train_ids)
    assert len(set(usages[0])) == 3
    # subset choice and per-episode sampling are seed-determined
    assert set(usages[0]) == set(usages[1])
    with pytest.raises(BenchmarkError, match="train_subset"):
        train_stage(
            stage(5), pool, TINY_AGENT, _fast_train_config(100), TINY_ENV,
            dataclasses.replace(TINY_BENCH, train_subset=99), seed=13,
        )


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------


def test_ablation_grid_runs_paired_cells(tmp_path):
    pool = tiny_pool()
    bench = dataclasses.replace(TINY_BENCH, episodes_per_map=1)
    env = dataclasses.replace(TINY_ENV, episode_len=30)
    grid = run_ablation_grid(
        tiny_params(), TINY_AGENT, pool, env, bench, eval_seed=9,
        out_dir=tmp_path,
    )
    names = {
        ablation_cell_name(AblationFlags(apples_present=a, textures_random=t))
        for a in (True, False)
        for t in (True, False)
    }
    assert set(grid) == names
    assert names == {
        "apples_on__textures_on", "apples_on__textures_off",
        "apples_off__textures_on", "apples_off__textures_off",
    }
    # identical episode seeds pair the cells: same goals per (map, episode)
    goals = {}
    for name in names:
        for log in sorted((tmp_path / name / "trajectories").iterdir()):
            header, _ = read_trajectory(log)
            key = (header["map_id"], header["episode"])
            goals.setdefault(key, set()).add(tuple(header["goal"]))
    assert all(len(v) == 1 for v in goals.values())
    # apples absent from the off cells' event streams
    for name in ("apples_off__textures_on", "apples_off__textures_off"):
        for log in (tmp_path / name / "trajectories").iterdir():
            _, records = read_trajectory(log)
            assert not any("AppleHit" in r.events for r in records)
