"""Fast end-to-end health check, one PASS/FAIL line per probe.

Each probe re-derives its expected answer independently (brute-force
search, finite differences, closed forms) rather than trusting the
code under test, so a clean run certifies an install in well under a
minute without the full test suite.
"""

from __future__ import annotations

import math
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .agent import AgentConfig, init_params, load_checkpoint, save_checkpoint
from .maze import BLOCK_SIZE, annotate, generate_maze, parse_map, serialize_map
from .metrics import CSV_COLUMNS, build_report, latency_ratio, shortest_path_grid, \
    write_report_csv, compute_episode_metrics
from .raycast import cast_columns
from .seeding import rng_from
from .trainer import TrainConfig, train
from .world import Action, EnvConfig, Environment, Pose


def _check_maze_invariants() -> None:
    for seed in range(50):
        maze = generate_maze(seed, 4, 4)
        if not maze.is_perfect():
            raise AssertionError(f"maze seed {seed} is not a perfect maze")
        if maze.blocks.shape != (9, 9):
            raise AssertionError(f"maze seed {seed} has shape {maze.blocks.shape}")


def _check_map_roundtrip() -> None:
    for seed in range(10):
        maze = generate_maze(seed, 3, 3)
        back, _ = parse_map(serialize_map(maze))
        if not np.array_equal(back.blocks, maze.blocks):
            raise AssertionError(f"serialize/parse changed maze seed {seed}")


def _floyd_warshall_hops(maze):
    floors = maze.floor_blocks()
    index = {b: i for i, b in enumerate(floors)}
    n = len(floors)
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for (r, c), i in index.items():
        for nb in maze.floor_neighbors(r, c):
            dist[i, index[nb]] = 1.0
    for k in range(n):
        dist = np.minimum(dist, dist[:, k:k + 1] + dist[k:k + 1, :])
    return floors, dist


def _check_shortest_paths_against_floyd_warshall() -> None:
    for seed in range(5):
        maze = generate_maze(seed, 3, 3)
        floors, hops = _floyd_warshall_hops(maze)
        for i in range(0, len(floors), 3):
            for j in range(0, len(floors), 3):
                got = shortest_path_grid(maze, floors[i], floors[j])
                want = hops[i, j] * BLOCK_SIZE
                if got != want:
                    raise AssertionError(
                        f"seed {seed}: {floors[i]}->{floors[j]} gave {got}, "
                        f"search says {want}"
                    )


def _check_gradients_by_finite_differences() -> None:
    for seed in range(3):
        rng = rng_from("selftest-grad", seed)
        w = rng.normal(size=(5, 4)) * 0.5
        x = rng.normal(size=(2, 5))
        adv = [0.7, -0.3]
        acts = [1, 3]

        def loss_fn(values):
            wv = ad.parameter(values["w"])
            xv = ad.constant(x)
            logits = ad.matmul(xv, wv)
            rows = [
                ad.softmax(ad.slice_(logits, (t, slice(None))))
                for t in range(2)
            ]
            out = ad.policy_gradient_term(rows, acts, adv)
            return out, {"w": wv}

        with ad.Tape() as tape:
            out, params = loss_fn({"w": w})
            tape.backward(out)
        analytic = params["w"].grad

        def scalar(values):
            with ad.Tape():
                out, _ = loss_fn(values)
            return float(out.value)

        numeric = ad.finite_difference(scalar, {"w": w})["w"]
        denom = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), 1.0)
        err = float(np.abs(analytic - numeric).max()) / denom
        if err >= 1e-4:
            raise AssertionError(f"seed {seed}: gradient error {err:.2e}")


def _march_depth(maze, x, y, direction, step=0.02):
    bh, bw = maze.blocks.shape
    dx, dy = math.cos(direction), math.sin(direction)

    def inside_wall(t):
        r = int((y + dy * t) // BLOCK_SIZE)
        c = int((x + dx * t) // BLOCK_SIZE)
        if not (0 <= r < bh and 0 <= c < bw):
            return True
        return not maze.is_floor(r, c)

    lo, hi = 0.0, step
    while not inside_wall(hi):
        lo, hi = hi, hi + step
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if inside_wall(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _check_raycaster_against_marcher() -> None:
    maze = generate_maze(2, 3, 3)
    rng = rng_from("selftest-ray", 0)
    floors = maze.floor_blocks()
    width, fov = 9, math.pi / 2
    half = math.tan(fov / 2.0)
    worst = 0.0
    for _ in range(50):
        r, c = floors[int(rng.integers(len(floors)))]
        pose = Pose(
            x=(c + 0.5) * BLOCK_SIZE + float(rng.uniform(-20, 20)),
            y=(r + 0.5) * BLOCK_SIZE + float(rng.uniform(-20, 20)),
            heading=float(rng.uniform(-math.pi, math.pi)),
        )
        hits = cast_columns(maze, pose, width, fov)
        for i, hit in enumerate(hits):
            alpha = math.atan((2.0 * (i + 0.5) / width - 1.0) * half)
            euclid = _march_depth(maze, pose.x, pose.y, pose.heading + alpha)
            perp = euclid * math.cos(alpha)
            worst = max(worst, abs(hit.perp - perp))
    if worst >= 1e-3:
        raise AssertionError(f"raycast depth off by {worst:.2e} units")


def _check_metric_hand_values() -> None:
    if latency_ratio([100, 150]) != 2.0:
        raise AssertionError("latency of [100, 150] should be exactly 2.0")
    if latency_ratio([300, 600, 900]) != 1.0:
        raise AssertionError("latency of [300, 600, 900] should be exactly 1.0")
    if latency_ratio([500]) is not None:
        raise AssertionError("a single visit has no latency ratio")


def _check_environment_fuzz() -> None:
    maze = generate_maze(4, 3, 3)
    ann = annotate(maze, goal_static=True, spawn_static=False, apple_count=3,
                   rng_seed=5)
    config = EnvConfig(episode_len=100, obs_width=20, obs_height=20,
                       spawn_mode="random")
    env = Environment(maze, ann, config, episode_seed=9)
    obs = env.reset()
    rng = rng_from("selftest-env", 1)
    for t in range(100):
        action = int(rng.integers(len(Action)))
        result = env.step(action)
        rec = result.record
        if not (math.isfinite(rec.x) and math.isfinite(rec.y)
                and math.isfinite(rec.reward)):
            raise AssertionError(f"non-finite state at step {t}")
        block = (int(rec.y // BLOCK_SIZE), int(rec.x // BLOCK_SIZE))
        if not maze.is_floor(*block):
            raise AssertionError(f"agent inside a wall at step {t}: {block}")
        if not result.done:
            obs = env.observe()
            if obs.image.shape != (20, 20, 3):
                raise AssertionError("bad observation shape")


def _check_metrics_csv_header() -> None:
    maze = generate_maze(4, 3, 3)
    ann = annotate(maze, goal_static=True, spawn_static=True, apple_count=0,
                   rng_seed=5)
    config = EnvConfig(episode_len=30, obs_width=20, obs_height=20, render=False)
    env = Environment(maze, ann, config, episode_seed=2)
    env.reset()
    records = [env.step(Action.ROTATE_LEFT).record for _ in range(30)]
    row = compute_episode_metrics("m0000", 0, records, ann.goal, maze,
                                  goal_radius=config.goal_radius,
                                  block_size=config.block_size)
    report = build_report([row])
    with tempfile.TemporaryDirectory() as td:
        path = Path(td) / "metrics.csv"
        write_report_csv(report, path)
        header = path.read_text().split("\n", 1)[0]
    if header != ",".join(CSV_COLUMNS):
        raise AssertionError(f"metrics csv header drifted: {header}")


def _check_checkpoint_roundtrip() -> None:
    config = AgentConfig(obs_height=20, obs_width=20, lstm1_size=16, lstm2_size=8)
    params = init_params(config, 3)
    with tempfile.TemporaryDirectory() as td:
        path = Path(td) / "net.ckpt"
        save_checkpoint(path, params, config, meta={"note": "selftest"})
        loaded, loaded_config, meta = load_checkpoint(path)
    if loaded_config != config or meta.get("note") != "selftest":
        raise AssertionError("checkpoint header did not round-trip")
    for name, value in params.items():
        if not np.array_equal(loaded[name], value):
            raise AssertionError(f"tensor {name} did not round-trip")


def _check_training_determinism() -> None:
    agent_config = AgentConfig(obs_height=20, obs_width=20, lstm1_size=16,
                               lstm2_size=8)
    train_config = TrainConfig(workers=1, t_max=10, max_env_steps=200)
    maze = generate_maze(3, 2, 2)

    def env_factory(worker_id, episode_index):
        ann = annotate(maze, goal_static=True, spawn_static=True, apple_count=1,
                       rng_seed=7)
        cfg = EnvConfig(episode_len=50, obs_width=20, obs_height=20)
        return Environment(maze, ann, cfg, episode_seed=episode_index)

    blobs = []
    for _ in range(2):
        with tempfile.TemporaryDirectory() as td:
            train(env_factory, agent_config, train_config, seed=5,
                  out_dir=Path(td))
            blobs.append((Path(td) / "final.ckpt").read_bytes())
    if blobs[0] != blobs[1]:
        raise AssertionError("repeated single-worker training diverged")


CHECKS = (
    ("maze-invariants", _check_maze_invariants),
    ("map-roundtrip", _check_map_roundtrip),
    ("shortest-paths", _check_shortest_paths_against_floyd_warshall),
    ("gradients", _check_gradients_by_finite_differences),
    ("raycaster", _check_raycaster_against_marcher),
    ("metric-hand-values", _check_metric_hand_values),
    ("environment-fuzz", _check_environment_fuzz),
    ("metrics-csv-header", _check_metrics_csv_header),
    ("checkpoint-roundtrip", _check_checkpoint_roundtrip),
    ("training-determinism", _check_training_determinism),
)


def run_selftest(out=None) -> int:
    """Run every probe; return the number of failures."""
    out = out if out is not None else sys.stdout
    failures = 0
    for name, probe in CHECKS:
        try:
            probe()
        except Exception as exc:  # noqa: BLE001 - report and continue
            failures += 1
            print(f"FAIL {name}: {exc}", file=out)
        else:
            print(f"PASS {name}", file=out)
    print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed", file=out)
    return failures


if __name__ == "__main__":
    sys.exit(3 if run_selftest() else 0)
