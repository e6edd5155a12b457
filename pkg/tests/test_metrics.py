"""Metric tests: hand-frozen values, brute-force oracles, and properties."""

import dataclasses
import json
import math

import numpy as np
import pytest

from mazebench import metrics
from mazebench.maze import (
    build_goal_map,
    build_square_map,
    generate_maze,
    goal_map_annotations,
    parse_map,
    square_map_annotations,
)
from mazebench.metrics import (
    EpisodeMetrics,
    MetricsError,
    aggregate,
    build_report,
    compute_episode_metrics,
    distance_inefficiency,
    extract_goal_hits,
    latency_ratio,
    random_agent_baseline,
    shorter_path_fraction,
    shortest_path_grid,
    simple_paths,
    write_report_csv,
    write_report_json,
)
from mazebench.seeding import derive_seed, rng_from
from mazebench.world import EnvConfig, TrajectoryRecord, run_episode

from oracle_helpers import floyd_warshall_block_distances

# A straight corridor long enough that the first-step and goal-radius
# offsets stay inside the 5% slack band: S at column 1, G at column 17.
LONG_CORRIDOR = "#" * 19 + "\n#S" + "." * 15 + "G#\n" + "#" * 19 + "\n"


def _forward(obs, state):
    return 0, state


def _run_corridor(episode_len=200):
    maze, ann = parse_map(LONG_CORRIDOR)
    cfg = EnvConfig(episode_len=episode_len, obs_width=24, obs_height=24,
                    render=False)
    records = run_episode(maze, ann, cfg, _forward, episode_seed=1)
    return maze, ann, records


def _fake_record(t, x, y, reward=0.0, events=()):
    return TrajectoryRecord(t=t, x=x, y=y, heading=0.0, action=0,
                            reward=reward, events=tuple(events))


# ---------------------------------------------------------------------------
# Latency ratio
# ---------------------------------------------------------------------------


def test_latency_hand_values():
    assert latency_ratio([100, 150]) == pytest.approx(2.0)
    assert latency_ratio([300, 600, 900]) == pytest.approx(1.0)


def test_latency_absent_below_two_hits():
    assert latency_ratio([]) is None
    assert latency_ratio([57]) is None


def test_latency_rejects_bad_sequences():
    with pytest.raises(MetricsError):
        latency_ratio([100, 100])
    with pytest.raises(MetricsError):
        latency_ratio([150, 100])
    with pytest.raises(MetricsError):
        latency_ratio([0, 10])


def test_latency_exceeds_one_iff_intervals_beat_first_hit():
    rng = rng_from("latency-prop", 0)
    for _ in range(200):
        n = int(rng.integers(2, 7))
        taus = np.cumsum(rng.integers(1, 50, size=n)).tolist()
        ratio = latency_ratio(taus)
        mean_interval_smaller = (n - 1) * taus[0] > (taus[-1] - taus[0])
        assert (ratio > 1.0) == mean_interval_smaller


# ---------------------------------------------------------------------------
# Shortest-path oracle
# ---------------------------------------------------------------------------


def test_shortest_path_same_block_is_zero():
    maze = generate_maze(0, 3, 3)
    blk = maze.floor_blocks()[0]
    assert shortest_path_grid(maze, blk, blk) == 0.0
    assert shortest_path_grid(maze, blk, blk, "manhattan") == 0.0


def test_bfs_matches_floyd_warshall_all_pairs():
    for seed in range(12):
        maze = generate_maze(seed, 4, 4)  # 9x9 blocks
        floors, dist = floyd_warshall_block_distances(maze)
        for i, a in enumerate(floors):
            for j, b in enumerate(floors):
                got = shortest_path_grid(maze, a, b)
                assert got == dist[i, j] * 100.0


def test_manhattan_never_exceeds_bfs():
    for seed in range(6):
        maze = generate_maze(seed, 4, 4)
        floors = maze.floor_blocks()
        rng = rng_from("manhattan-prop", seed)
        for _ in range(60):
            a = floors[int(rng.integers(len(floors)))]
            b = floors[int(rng.integers(len(floors)))]
            man = shortest_path_grid(maze, a, b, "manhattan")
            bfs = shortest_path_grid(maze, a, b, "bfs")
            assert man <= bfs


def test_shortest_path_validates_inputs():
    maze, _ = parse_map(LONG_CORRIDOR)
    with pytest.raises(MetricsError):
        shortest_path_grid(maze, (0, 0), (1, 1))
    with pytest.raises(MetricsError):
        shortest_path_grid(maze, (1, 1), (1, 2), mode="euclid")


def test_shortest_path_unreachable_pair_errors():
    text = (
        "#######\n"
        "#.#.#G#\n"
        "#######\n"
    )
    maze, _ = parse_map(text)
    with pytest.raises(MetricsError, match="no path"):
        shortest_path_grid(maze, (1, 1), (1, 3))


# ---------------------------------------------------------------------------
# Goal-hit extraction
# ---------------------------------------------------------------------------


def test_corridor_hits_are_one_based_step_counts():
    maze, ann, records = _run_corridor()
    hits = extract_goal_hits(records, ann.goal)
    assert hits == [63, 126, 189]


def test_no_goal_events_means_empty_hits():
    maze, ann, _ = _run_corridor()
    records = [_fake_record(0, 175.0, 150.0), _fake_record(1, 200.0, 150.0)]
    assert extract_goal_hits(records, ann.goal) == []


def test_goal_event_far_from_goal_is_rejected():
    _, ann, _ = _run_corridor()
    records = [_fake_record(0, 175.0, 150.0, 10.0, ("GoalHit",))]
    with pytest.raises(MetricsError, match="units from the goal"):
        extract_goal_hits(records, ann.goal)


def test_position_inside_radius_without_event_is_rejected():
    _, ann, _ = _run_corridor()
    records = [_fake_record(0, 1725.0, 150.0)]
    with pytest.raises(MetricsError, match="no goal event"):
        extract_goal_hits(records, ann.goal)


def test_logged_events_agree_with_geometry_on_random_episodes():
    maze = generate_maze(5, 3, 3)
    from mazebench.maze import annotate

    ann = annotate(maze, goal_static=True, spawn_static=True, apple_count=0,
                   rng_seed=0)
    cfg = EnvConfig(episode_len=300, render=False)
    for ep in range(20):
        rng = rng_from("xcheck", ep)

        def act(obs, state):
            return int(rng.integers(0, 4)), state

        records = run_episode(maze, ann, cfg, act, episode_seed=ep)
        hits = extract_goal_hits(records, ann.goal)  # raises on mismatch
        assert len(hits) == sum(1 for r in records if "GoalHit" in r.events)


# ---------------------------------------------------------------------------
# Distance inefficiency
# ---------------------------------------------------------------------------


def test_scripted_geodesic_inefficiency_near_one():
    maze, ann, records = _run_corridor()
    hits = extract_goal_hits(records, ann.goal)
    ineff = distance_inefficiency(records, hits, ann.goal, maze, "bfs")
    # two post-discovery segments, each 1550 traveled over a 1600 geodesic
    assert ineff == pytest.approx(0.96875)
    assert abs(ineff - 1.0) <= 0.05
    man = distance_inefficiency(records, hits, ann.goal, maze, "manhattan")
    assert man == pytest.approx(ineff)  # straight corridor: same denominator


def test_scripted_geodesic_latency_is_exactly_one():
    _, ann, records = _run_corridor()
    assert latency_ratio(extract_goal_hits(records, ann.goal)) == pytest.approx(1.0)


def _doubler_records():
    """Hand-built trajectory taking exactly double the geodesic after
    the first hit: forward to x=950, back to x=175, then to the goal."""
    records = []
    t = 0
    for k in range(63):  # 175 .. 1725, hit on the last step
        x = 175.0 + 25.0 * k
        hit = k == 62
        records.append(_fake_record(t, x, 150.0, 10.0 if hit else 0.0,
                                    ("GoalHit", "Respawn") if hit else ()))
        t += 1
    xs = (
        [175.0 + 25.0 * k for k in range(32)]      # out to 950
        + [950.0 - 25.0 * k for k in range(1, 32)]  # back to 175
        + [175.0 + 25.0 * k for k in range(1, 63)]  # to the goal
    )
    for i, x in enumerate(xs):
        hit = i == len(xs) - 1
        records.append(_fake_record(t, x, 150.0, 10.0 if hit else 0.0,
                                    ("GoalHit", "Respawn") if hit else ()))
        t += 1
    return records


def test_scripted_doubler_inefficiency_near_two():
    maze, ann = parse_map(LONG_CORRIDOR)
    records = _doubler_records()
    hits = extract_goal_hits(records, ann.goal)
    assert len(hits) == 2
    ineff = distance_inefficiency(records, hits, ann.goal, maze, "bfs")
    assert ineff == pytest.approx(3100.0 / 1600.0)
    assert abs(ineff - 2.0) <= 2.0 * 0.05


def test_inefficiency_absent_below_two_hits():
    maze, ann, records = _run_corridor(episode_len=70)  # single hit
    hits = extract_goal_hits(records, ann.goal)
    assert len(hits) == 1
    assert distance_inefficiency(records, hits, ann.goal, maze) is None


def test_manhattan_mode_ratio_at_least_bfs_mode_ratio():
    maze = generate_maze(8, 3, 3)
    from mazebench.maze import annotate

    ann = annotate(maze, goal_static=True, spawn_static=True, apple_count=0,
                   rng_seed=1)
    cfg = EnvConfig(episode_len=600, render=False)
    checked = 0
    for ep in range(12):
        rng = rng_from("mode-prop", ep)

        def act(obs, state):
            return int(rng.integers(0, 4)), state

        records = run_episode(maze, ann, cfg, act, episode_seed=100 + ep)
        hits = extract_goal_hits(records, ann.goal)
        if len(hits) < 2:
            continue
        bfs = distance_inefficiency(records, hits, ann.goal, maze, "bfs")
        man = distance_inefficiency(records, hits, ann.goal, maze, "manhattan")
        assert man >= bfs - 1e-12
        checked += 1
    assert checked >= 3


def test_metrics_recompute_exactly_from_serialized_log(tmp_path):
    from mazebench.world import read_trajectory, write_trajectory

    maze, ann, records = _run_corridor()
    direct = compute_episode_metrics("c17", 0, records, ann.goal, maze)
    path = tmp_path / "episode.jsonl"
    write_trajectory(path, {"map_id": "c17", "episode": 0}, records)
    _, loaded = read_trajectory(path)
    replayed = compute_episode_metrics("c17", 0, loaded, ann.goal, maze)
    assert replayed == direct


# ---------------------------------------------------------------------------
# Aggregation and reports
# ---------------------------------------------------------------------------


def _episode(map_id="m", ep=0, hits=3, lat=1.5, bfs=1.2, man=1.3, reward=12.0,
             steps=100):
    return EpisodeMetrics(map_id, ep, hits, lat, bfs, man, reward, steps)


def test_aggregate_single_episode():
    s = aggregate([_episode()])
    assert s["latency_ratio"]["mean"] == pytest.approx(1.5)
    assert s["latency_ratio"]["std"] == 0.0
    assert s["latency_ratio"]["count"] == 1
    assert s["latency_ratio"]["absent"] == 0


def test_aggregate_two_point_stats():
    eps = [_episode(ep=0, lat=1.0), _episode(ep=1, lat=3.0)]
    s = aggregate(eps)
    assert s["latency_ratio"]["mean"] == pytest.approx(2.0)
    assert s["latency_ratio"]["std"] == pytest.approx(1.0)


def test_aggregate_counts_absent_metrics():
    eps = [
        _episode(ep=0, hits=1, lat=None, bfs=None, man=None),
        _episode(ep=1),
        _episode(ep=2),
    ]
    s = aggregate(eps)
    assert s["latency_ratio"]["count"] == 2
    assert s["latency_ratio"]["absent"] == 1
    assert s["reward"]["count"] == 3


def test_aggregate_matches_independent_recomputation():
    rng = rng_from("agg-oracle", 0)
    eps = []
    for i in range(100):
        has = bool(rng.integers(0, 2))
        eps.append(_episode(
            ep=i,
            hits=int(rng.integers(0, 9)),
            lat=float(rng.uniform(0.5, 4.0)) if has else None,
            bfs=float(rng.uniform(0.9, 3.0)) if has else None,
            man=float(rng.uniform(0.9, 3.0)) if has else None,
            reward=float(rng.normal(10.0, 4.0)),
        ))
    s = aggregate(eps)
    lats = [e.latency_ratio for e in eps if e.latency_ratio is not None]
    assert s["latency_ratio"]["mean"] == pytest.approx(sum(lats) / len(lats))
    assert s["latency_ratio"]["std"] == pytest.approx(
        math.sqrt(sum((v - sum(lats) / len(lats)) ** 2 for v in lats) / len(lats))
    )
    rewards = [e.reward for e in eps]
    assert s["reward"]["mean"] == pytest.approx(sum(rewards) / 100.0)


def test_aggregate_rejects_empty_input():
    with pytest.raises(MetricsError):
        aggregate([])


def test_report_csv_layout(tmp_path):
    report = build_report([
        _episode(ep=0), _episode(ep=1, hits=1, lat=None, bfs=None, man=None),
    ])
    path = tmp_path / "report.csv"
    write_report_csv(report, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ("map_id,episode,N,latency_ratio,dist_ineff_bfs,"
                        "dist_ineff_manhattan,reward,goal_hits")
    assert lines[1].startswith("m,0,3,1.5,1.2,1.3,12.0,3")
    assert lines[2].startswith("m,1,1,,,,12.0,1")
    assert lines[3].startswith("aggregate_mean,")
    assert lines[4].startswith("aggregate_std,")
    assert lines[5].startswith("aggregate_count,")
    assert len(lines) == 6


def test_report_json_roundtrip(tmp_path):
    report = build_report([_episode()])
    path = tmp_path / "report.json"
    write_report_json(report, path)
    doc = json.loads(path.read_text())
    assert doc["episodes"][0]["latency_ratio"] == 1.5
    assert doc["summary"]["reward"]["mean"] == 12.0


def test_report_writing_is_byte_deterministic(tmp_path):
    report = build_report([_episode(ep=i) for i in range(5)])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_report_csv(report, a)
    write_report_csv(report, b)
    assert a.read_bytes() == b.read_bytes()
    ja, jb = tmp_path / "a.json", tmp_path / "b.json"
    write_report_json(report, ja)
    write_report_json(report, jb)
    assert ja.read_bytes() == jb.read_bytes()


# ---------------------------------------------------------------------------
# Random-agent baseline
# ---------------------------------------------------------------------------


def test_baseline_is_deterministic_per_seed(tmp_path):
    maze = generate_maze(2, 2, 2)
    from mazebench.maze import annotate

    ann = annotate(maze, goal_static=True, spawn_static=True, apple_count=0,
                   rng_seed=3)
    cfg = EnvConfig(episode_len=150)
    r1 = random_agent_baseline(maze, ann, cfg, episodes=4, seed=11)
    r2 = random_agent_baseline(maze, ann, cfg, episodes=4, seed=11)
    assert r1 == r2
    r3 = random_agent_baseline(maze, ann, cfg, episodes=4, seed=12)
    assert r3 != r1


def test_baseline_reward_nonnegative_without_wall_penalty():
    maze = generate_maze(2, 2, 2)
    from mazebench.maze import annotate

    ann = annotate(maze, goal_static=True, spawn_static=True, apple_count=1,
                   rng_seed=3)
    cfg = EnvConfig(episode_len=150, wall_penalty_cap=0.0)
    report = random_agent_baseline(maze, ann, cfg, episodes=5, seed=2)
    assert all(e.reward >= 0.0 for e in report.episodes)


# ---------------------------------------------------------------------------
# Two-route probe
# ---------------------------------------------------------------------------


def _blocks_to_records(block_path, goal, reward_last=10.0):
    """Fabricate a block-center trajectory ending inside the goal radius."""
    records = []
    for i, blk in enumerate(block_path):
        x, y = blk[1] * 100.0 + 50.0, blk[0] * 100.0 + 50.0
        last = i == len(block_path) - 1
        if last:
            assert blk == goal
            records.append(_fake_record(i, x, y, reward_last,
                                        ("GoalHit", "Respawn")))
        else:
            records.append(_fake_record(i, x, y))
    return records


def test_square_map_has_two_routes_of_known_lengths():
    maze = build_square_map()
    ann = square_map_annotations()
    paths = simple_paths(maze, ann.spawn, ann.goal)
    assert len(paths) == 2
    lens = sorted(len(p) - 1 for p in paths)
    assert lens == [3, 5]


def test_goal_map_has_two_routes_of_known_lengths():
    maze = build_goal_map()
    ann = goal_map_annotations()
    paths = simple_paths(maze, ann.spawn, ann.goal)
    assert len(paths) == 2
    # 3-hop stem to the junction, then arms of 7 and 11 hops
    lens = sorted(len(p) - 1 for p in paths)
    assert lens == [10, 14]


def test_scripted_shorter_arm_agent_scores_one():
    maze = build_square_map()
    ann = square_map_annotations()
    paths = simple_paths(maze, ann.spawn, ann.goal)
    shorter = min(paths, key=len)
    records = _blocks_to_records(shorter, ann.goal)
    stats = shorter_path_fraction([records], maze, ann.goal)
    assert stats.shorter_taken == 1
    assert stats.longer_taken == 0
    assert stats.fraction_mean == 1.0


def test_scripted_alternating_agent_scores_half():
    maze = build_square_map()
    ann = square_map_annotations()
    paths = simple_paths(maze, ann.spawn, ann.goal)
    shorter = min(paths, key=len)
    longer = max(paths, key=len)
    episodes = []
    for k in range(4):
        arm = shorter if k % 2 == 0 else longer
        episodes.append(_blocks_to_records(arm, ann.goal))
    stats = shorter_path_fraction(episodes, maze, ann.goal)
    assert stats.shorter_taken == 2 and stats.longer_taken == 2
    assert stats.fraction_mean == pytest.approx(0.5)


def test_multi_traversal_episode_classifies_each_leg():
    maze = build_square_map()
    ann = square_map_annotations()
    paths = simple_paths(maze, ann.spawn, ann.goal)
    shorter = min(paths, key=len)
    longer = max(paths, key=len)
    records = []
    t = 0
    for arm in (shorter, longer, shorter):
        for i, blk in enumerate(arm):
            x, y = blk[1] * 100.0 + 50.0, blk[0] * 100.0 + 50.0
            last = i == len(arm) - 1
            records.append(_fake_record(
                t, x, y, 10.0 if last else 0.0,
                ("GoalHit", "Respawn") if last else (),
            ))
            t += 1
    stats = shorter_path_fraction([records], maze, ann.goal)
    assert stats.shorter_taken == 2
    assert stats.longer_taken == 1
    assert stats.fraction_mean == pytest.approx(2.0 / 3.0)


def test_traversal_touching_no_arm_is_unresolved():
    maze = build_square_map()
    ann = square_map_annotations()
    # Teleport straight from the spawn block into the goal radius.
    sx, sy = ann.spawn[1] * 100.0 + 50.0, ann.spawn[0] * 100.0 + 50.0
    gx, gy = ann.goal[1] * 100.0 + 50.0, ann.goal[0] * 100.0 + 50.0
    records = [
        _fake_record(0, sx, sy),
        _fake_record(1, gx, gy, 10.0, ("GoalHit", "Respawn")),
    ]
    stats = shorter_path_fraction([records], maze, ann.goal)
    assert stats.unresolved == 1
    assert stats.resolved == 0
    assert stats.fraction_mean is None


def test_probe_rejects_single_route_maps():
    maze, ann = parse_map(LONG_CORRIDOR)
    records = [
        _fake_record(0, 150.0 + 25.0, 150.0),
        _fake_record(1, 1725.0, 150.0, 10.0, ("GoalHit", "Respawn")),
    ]
    with pytest.raises(MetricsError, match="exactly two routes"):
        shorter_path_fraction([records], maze, ann.goal)


def test_probe_on_env_random_walker_runs_cleanly():
    maze = build_square_map()
    ann = square_map_annotations()
    cfg = EnvConfig(episode_len=400, render=False)
    episodes = []
    for ep in range(6):
        rng = rng_from("probe-walk", ep)

        def act(obs, state):
            return int(rng.integers(0, 4)), state

        episodes.append(run_episode(maze, ann, cfg, act, episode_seed=ep))
    stats = shorter_path_fraction(episodes, maze, ann.goal)
    total = stats.resolved + stats.unresolved
    hits = sum(
        len(extract_goal_hits(r, ann.goal)) for r in episodes
    )
    assert total == hits
