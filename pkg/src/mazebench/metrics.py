"""Trajectory metrics: goal-hit times, latency ratio, distance
inefficiency, aggregation, and the two-route path-choice probe.

Hit times are 1-based step counts: a hit logged on trajectory record
``t`` (0-based) happened after ``t + 1`` environment steps, so a
scripted geodesic walker scores a latency ratio of exactly 1. All
metrics are pure functions of the trajectory log — recomputing them
from a serialized log gives identical values.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .maze import BLOCK_SIZE, MapAnnotations, Maze, block_center, block_of
from .seeding import derive_seed, rng_from
from .world import EVENT_GOAL, EnvConfig, TrajectoryRecord, run_episode

PATH_MODES = ("bfs", "manhattan")


class MetricsError(Exception):
    """Raised for inconsistent logs or invalid metric inputs."""


def extract_goal_hits(
    records: Sequence[TrajectoryRecord],
    goal: tuple[int, int],
    *,
    goal_radius: float = 50.0,
    block_size: float = BLOCK_SIZE,
) -> list[int]:
    """1-based step times of every goal hit, cross-checked two ways.

    Every logged goal event must sit within ``goal_radius`` of the goal
    block center, and every position within that radius must carry the
    event; either mismatch means the log and the claimed goal disagree.
    """
    if not records:
        raise MetricsError("empty trajectory")
    gx, gy = block_center(goal, block_size)
    hits: list[int] = []
    for idx, rec in enumerate(records):
        dist = math.hypot(rec.x - gx, rec.y - gy)
        logged = EVENT_GOAL in rec.events
        if logged and not dist < goal_radius:
            raise MetricsError(
                f"goal event at step {idx} but position is {dist:.3f} "
                f"units from the goal (radius {goal_radius})"
            )
        if dist < goal_radius and not logged:
            raise MetricsError(
                f"position at step {idx} is inside the goal radius "
                f"({dist:.3f} < {goal_radius}) but no goal event was logged"
            )
        if logged:
            hits.append(idx + 1)
    return hits


def latency_ratio(hit_times: Sequence[int]) -> Optional[float]:
    """(N-1) * t_first / (t_last - t_first); None below two hits."""
    n = len(hit_times)
    if n < 2:
        return None
    taus = list(hit_times)
    if any(b <= a for a, b in zip(taus, taus[1:])):
        raise MetricsError("hit times must be strictly increasing")
    if taus[0] <= 0:
        raise MetricsError("hit times are 1-based and must be positive")
    return (n - 1) * taus[0] / (taus[-1] - taus[0])


def shortest_path_grid(
    maze: Maze,
    a: tuple[int, int],
    b: tuple[int, int],
    mode: str = "bfs",
    block_size: float = BLOCK_SIZE,
) -> float:
    """Block-grid distance between two floor blocks, in world units.

    ``bfs`` counts corridor hops (a true geodesic in block world);
    ``manhattan`` ignores walls and takes |dr| + |dc|.
    """
    if mode not in PATH_MODES:
        raise MetricsError(f"unknown path mode {mode!r}")
    for blk in (a, b):
        if not maze.is_floor(*blk):
            raise MetricsError(f"block {blk} is not a floor block")
    if mode == "manhattan":
        return (abs(a[0] - b[0]) + abs(a[1] - b[1])) * block_size
    if a == b:
        return 0.0
    seen = {a: 0}
    frontier = deque([a])
    while frontier:
        cur = frontier.popleft()
        for nxt in maze.floor_neighbors(*cur):
            if nxt in seen:
                continue
            seen[nxt] = seen[cur] + 1
            if nxt == b:
                return seen[nxt] * block_size
            frontier.append(nxt)
    raise MetricsError(f"no path between {a} and {b}")


def path_length(records: Sequence[TrajectoryRecord], first: int, last: int) -> float:
    """Euclidean length of the polyline through records [first, last]."""
    total = 0.0
    for j in range(first, last):
        total += math.hypot(
            records[j + 1].x - records[j].x, records[j + 1].y - records[j].y
        )
    return total


def distance_inefficiency(
    records: Sequence[TrajectoryRecord],
    hit_times: Sequence[int],
    goal: tuple[int, int],
    maze: Maze,
    mode: str = "bfs",
    block_size: float = BLOCK_SIZE,
) -> Optional[float]:
    """Traveled distance between consecutive goal hits over summed
    shortest respawn-to-goal distances; None below two hits.

    Each segment runs from the first post-respawn record to the next
    hit record, so the respawn teleport itself is never counted, and
    the search segment before the first hit is excluded entirely.
    """
    n = len(hit_times)
    if n < 2:
        return None
    traveled = 0.0
    shortest = 0.0
    for prev_tau, next_tau in zip(hit_times, hit_times[1:]):
        # 1-based times: record prev_tau-1 is the hit; record prev_tau
        # is the first post-respawn step.
        start_rec = prev_tau
        end_rec = next_tau - 1
        traveled += path_length(records, start_rec, end_rec)
        spawn_block = block_of(records[start_rec].x, records[start_rec].y, block_size)
        shortest += shortest_path_grid(maze, spawn_block, goal, mode, block_size)
    if shortest == 0.0:
        raise MetricsError("degenerate zero-length shortest path sum")
    return traveled / shortest


# ---------------------------------------------------------------------------
# Per-episode bundles, aggregation, reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeMetrics:
    map_id: str
    episode: int
    goal_hits: int
    latency_ratio: Optional[float]
    dist_ineff_bfs: Optional[float]
    dist_ineff_manhattan: Optional[float]
    reward: float
    steps: int


def compute_episode_metrics(
    map_id: str,
    episode: int,
    records: Sequence[TrajectoryRecord],
    goal: tuple[int, int],
    maze: Maze,
    *,
    goal_radius: float = 50.0,
    block_size: float = BLOCK_SIZE,
) -> EpisodeMetrics:
    hits = extract_goal_hits(records, goal, goal_radius=goal_radius,
                             block_size=block_size)
    return EpisodeMetrics(
        map_id=map_id,
        episode=episode,
        goal_hits=len(hits),
        latency_ratio=latency_ratio(hits),
        dist_ineff_bfs=distance_inefficiency(records, hits, goal, maze, "bfs",
                                             block_size),
        dist_ineff_manhattan=distance_inefficiency(records, hits, goal, maze,
                                                   "manhattan", block_size),
        reward=float(sum(rec.reward for rec in records)),
        steps=len(records),
    )


_METRIC_FIELDS = ("latency_ratio", "dist_ineff_bfs", "dist_ineff_manhattan",
                  "reward", "goal_hits")


def aggregate(episodes: Sequence[EpisodeMetrics]) -> dict:
    """Population mean/std over present values per metric, plus counts
    of episodes where the metric was absent (fewer than two hits)."""
    if not episodes:
        raise MetricsError("nothing to aggregate")
    summary: dict = {"episodes": len(episodes)}
    for name in _METRIC_FIELDS:
        values = [getattr(e, name) for e in episodes]
        present = [float(v) for v in values if v is not None]
        entry = {"count": len(present), "absent": len(values) - len(present)}
        if present:
            arr = np.asarray(present)
            entry["mean"] = float(arr.mean())
            entry["std"] = float(arr.std(ddof=0))
        else:
            entry["mean"] = None
            entry["std"] = None
        summary[name] = entry
    return summary


@dataclass(frozen=True)
class MetricsReport:
    episodes: tuple[EpisodeMetrics, ...]
    summary: dict


def build_report(episodes: Sequence[EpisodeMetrics]) -> MetricsReport:
    return MetricsReport(episodes=tuple(episodes), summary=aggregate(episodes))


CSV_COLUMNS = ["map_id", "episode", "N", "latency_ratio", "dist_ineff_bfs",
               "dist_ineff_manhattan", "reward", "goal_hits"]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report_csv(report: MetricsReport, path) -> None:
    """One row per episode plus aggregate mean/std/count footer rows.
    The N and goal_hits columns both carry the hit count."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for e in report.episodes:
            w.writerow([
                e.map_id, e.episode, e.goal_hits, _cell(e.latency_ratio),
                _cell(e.dist_ineff_bfs), _cell(e.dist_ineff_manhattan),
                _cell(e.reward), e.goal_hits,
            ])
        s = report.summary
        for stat in ("mean", "std"):
            w.writerow([
                f"aggregate_{stat}", "",
                _cell(s["goal_hits"][stat]), _cell(s["latency_ratio"][stat]),
                _cell(s["dist_ineff_bfs"][stat]),
                _cell(s["dist_ineff_manhattan"][stat]),
                _cell(s["reward"][stat]), _cell(s["goal_hits"][stat]),
            ])
        w.writerow([
            "aggregate_count", "",
            s["goal_hits"]["count"], s["latency_ratio"]["count"],
            s["dist_ineff_bfs"]["count"], s["dist_ineff_manhattan"]["count"],
            s["reward"]["count"], s["goal_hits"]["count"],
        ])


def write_report_json(report: MetricsReport, path) -> None:
    doc = {
        "episodes": [dataclasses.asdict(e) for e in report.episodes],
        "summary": report.summary,
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# Random-agent baseline
# ---------------------------------------------------------------------------


def random_agent_baseline(
    maze: Maze,
    annotations: MapAnnotations,
    config: EnvConfig,
    episodes: int,
    seed: int,
    map_id: str = "baseline",
) -> MetricsReport:
    """Metrics for a uniform-random policy. Rendering is disabled (the
    policy never looks at the frame, and dynamics do not depend on it)."""
    if episodes < 1:
        raise MetricsError("episodes must be >= 1")
    fast = dataclasses.replace(config, render=False)
    rows = []
    for ep in range(episodes):
        rng = rng_from("baseline-act", seed, ep)

        def act(obs, state):
            return int(rng.integers(0, 4)), state

        records = run_episode(maze, annotations, fast, act,
                              derive_seed(seed, "baseline-ep", ep))
        rows.append(
            compute_episode_metrics(
                map_id, ep, records, annotations.goal, maze,
                goal_radius=config.goal_radius, block_size=config.block_size,
            )
        )
    return build_report(rows)


# ---------------------------------------------------------------------------
# Two-route path-choice probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShorterPathStats:
    """Arm-choice tallies on a map with exactly two goal routes."""

    shorter_taken: int
    longer_taken: int
    unresolved: int
    episode_fractions: tuple[Optional[float], ...]
    fraction_mean: Optional[float]
    fraction_std: Optional[float]

    @property
    def resolved(self) -> int:
        return self.shorter_taken + self.longer_taken


def simple_paths(maze: Maze, src: tuple[int, int], dst: tuple[int, int],
                 limit: int = 8) -> list[list[tuple[int, int]]]:
    """All simple block paths src->dst (DFS), stopping at ``limit``."""
    paths: list[list[tuple[int, int]]] = []
    trail = [src]
    on_trail = {src}

    def walk(cur):
        if len(paths) >= limit:
            return
        if cur == dst:
            paths.append(list(trail))
            return
        for nxt in maze.floor_neighbors(*cur):
            if nxt in on_trail:
                continue
            trail.append(nxt)
            on_trail.add(nxt)
            walk(nxt)
            trail.pop()
            on_trail.remove(nxt)

    walk(src)
    return paths


def _classify_traversal(
    records: Sequence[TrajectoryRecord],
    start_rec: int,
    end_rec: int,
    maze: Maze,
    goal: tuple[int, int],
    block_size: float,
) -> Optional[bool]:
    """True if the shorter arm's exclusive blocks were entered first,
    False for the longer arm, None when unresolved (tie-length arms or
    neither arm touched)."""
    spawn_block = block_of(records[start_rec].x, records[start_rec].y, block_size)
    if spawn_block == goal:
        raise MetricsError("traversal starts on the goal block")
    paths = simple_paths(maze, spawn_block, goal)
    if len(paths) != 2:
        raise MetricsError(
            f"path-choice probe needs exactly two routes from {spawn_block} "
            f"to {goal}, found {len(paths)}"
        )
    a, b = paths
    if len(a) == len(b):
        return None  # no shorter arm exists from this spawn
    shorter, longer = (a, b) if len(a) < len(b) else (b, a)
    shorter_only = set(shorter) - set(longer)
    longer_only = set(longer) - set(shorter)
    for j in range(start_rec, end_rec + 1):
        blk = block_of(records[j].x, records[j].y, block_size)
        if blk in shorter_only:
            return True
        if blk in longer_only:
            return False
    return None


def shorter_path_fraction(
    episode_records: Sequence[Sequence[TrajectoryRecord]],
    maze: Maze,
    goal: tuple[int, int],
    *,
    goal_radius: float = 50.0,
    block_size: float = BLOCK_SIZE,
) -> ShorterPathStats:
    """Classify every spawn-to-goal traversal by which arm's exclusive
    blocks were crossed first and tally how often the shorter arm won.

    A traversal that never enters either arm's exclusive blocks before
    hitting the goal — or whose two arms tie in length — counts as
    unresolved and is excluded from the fraction.
    """
    shorter_n = longer_n = unresolved = 0
    fractions: list[Optional[float]] = []
    for records in episode_records:
        hits = extract_goal_hits(records, goal, goal_radius=goal_radius,
                                 block_size=block_size)
        ep_short = ep_long = 0
        start_rec = 0
        for tau in hits:
            verdict = _classify_traversal(records, start_rec, tau - 1, maze,
                                          goal, block_size)
            if verdict is None:
                unresolved += 1
            elif verdict:
                ep_short += 1
            else:
                ep_long += 1
            start_rec = tau  # first post-respawn record
        shorter_n += ep_short
        longer_n += ep_long
        resolved = ep_short + ep_long
        fractions.append(ep_short / resolved if resolved else None)
    present = [f for f in fractions if f is not None]
    mean = float(np.mean(present)) if present else None
    std = float(np.std(present)) if present else None
    return ShorterPathStats(
        shorter_taken=shorter_n,
        longer_taken=longer_n,
        unresolved=unresolved,
        episode_fractions=tuple(fractions),
        fraction_mean=mean,
        fraction_std=std,
    )
