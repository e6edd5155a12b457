"""First-person navigation environment over block mazes.

The agent is a circle of fixed radius moving in continuous world
coordinates (x right, y down; heading 0 points along +x and grows
clockwise on screen). Four discrete actions: move forward/backward
along the heading at a fixed speed, or rotate in place by a fixed
increment. Movement is clamped axis-by-axis against wall blocks, so
sliding along a wall works and the agent's center never gets closer
than its radius to a wall face.

Per step the reward is the sum of three terms, each tracked separately:
an apple term (+1 the first time the agent enters an apple block), a
goal term (+10 when within the goal radius, after which the agent is
teleported to a spawn while the goal stays put), and a wall-proximity
term that ramps linearly from 0 at the penalty radius down to the cap
when touching.

Episodes run a fixed number of steps and produce one trajectory record
per step; a record carries the pre-teleport pose on goal steps so
distance metrics see the approach, not the jump.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Callable, Optional

import numpy as np

from . import raycast
from .maze import BLOCK_SIZE, FLOOR, MapAnnotations, Maze, block_center, block_of
from .seeding import rng_from

TWO_PI = 2.0 * math.pi


class Action(IntEnum):
    FORWARD = 0
    BACKWARD = 1
    ROTATE_LEFT = 2
    ROTATE_RIGHT = 3


ACTION_COUNT = 4


class EpisodeContractError(RuntimeError):
    """A caller violated the episode protocol (e.g. stepping when done)."""


class AgentCallbackError(RuntimeError):
    """An agent callback raised or returned garbage; carries the step index."""

    def __init__(self, step: int, message: str):
        super().__init__(f"agent callback failed at step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class Pose:
    """Agent position and heading; heading is normalized into [0, 2*pi)."""

    x: float
    y: float
    heading: float

    def __post_init__(self):
        r = math.remainder(self.heading, TWO_PI)
        if r < 0.0:
            r += TWO_PI
        object.__setattr__(self, "heading", r)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class EnvConfig:
    episode_len: int = 1200
    goal_reward: float = 10.0
    apple_reward: float = 1.0
    wall_penalty_cap: float = -0.2
    wall_penalty_radius: float = 32.0
    forward_speed: float = 25.0
    turn_increment: float = math.pi / 12
    agent_radius: float = 16.0
    goal_radius: float = 50.0
    spawn_mode: str = "static"  # static | random
    goal_mode: str = "static"  # static | random (placement owned by annotate)
    obs_width: int = 42
    obs_height: int = 42
    fov: float = math.pi / 2
    render: bool = True
    block_size: float = BLOCK_SIZE

    def validate(self) -> None:
        if self.episode_len < 1:
            raise ValueError("episode_len must be >= 1")
        if not (0.0 < self.fov < math.pi):
            raise ValueError(f"fov must be in (0, pi), got {self.fov}")
        if self.wall_penalty_cap > 0.0:
            raise ValueError("wall_penalty_cap must be <= 0")
        if self.spawn_mode not in ("static", "random"):
            raise ValueError(f"unknown spawn_mode {self.spawn_mode!r}")
        if self.goal_mode not in ("static", "random"):
            raise ValueError(f"unknown goal_mode {self.goal_mode!r}")
        if not (0.0 < self.agent_radius < self.block_size / 2):
            raise ValueError("agent_radius must fit inside a block")
        if not (0.0 < self.goal_radius < self.block_size):
            raise ValueError("goal_radius must be positive and below one block")
        if self.forward_speed <= 0.0 or self.forward_speed + self.agent_radius >= self.block_size:
            raise ValueError("forward_speed must be positive and below one block per step")
        if self.obs_width < 1 or self.obs_height < 2:
            raise ValueError("observation dims too small")


@dataclass(frozen=True)
class Observation:
    image: np.ndarray  # (obs_height, obs_width, 3) float64
    prev_action: int  # -1 on the first step of an episode
    prev_reward: float


@dataclass(frozen=True)
class StepResult:
    reward: float
    reward_apple: float
    reward_goal: float
    reward_wall: float
    events: tuple[str, ...]
    done: bool
    record: "TrajectoryRecord"


@dataclass(frozen=True)
class TrajectoryRecord:
    t: int
    x: float
    y: float
    heading: float
    action: int
    reward: float
    events: tuple[str, ...]

    def to_json(self) -> str:
        return json.dumps(
            {
                "t": self.t,
                "x": self.x,
                "y": self.y,
                "h": self.heading,
                "a": self.action,
                "r": self.reward,
                "e": "|".join(self.events),
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(line: str) -> "TrajectoryRecord":
        obj = json.loads(line)
        events = tuple(tok for tok in obj["e"].split("|") if tok)
        return TrajectoryRecord(
            t=int(obj["t"]),
            x=float(obj["x"]),
            y=float(obj["y"]),
            heading=float(obj["h"]),
            action=int(obj["a"]),
            reward=float(obj["r"]),
            events=events,
        )


EVENT_WALL = "WallContact"
EVENT_APPLE = "AppleHit"
EVENT_GOAL = "GoalHit"
EVENT_RESPAWN = "Respawn"


class Environment:
    """One episode's worth of simulator state.

    Construction wires a maze, its per-episode annotations, a config and
    the episode seed; identical inputs plus an identical action sequence
    reproduce the trajectory exactly. Spawn draws (initial and after
    goal hits) consume a dedicated per-episode stream.
    """

    def __init__(
        self,
        maze: Maze,
        annotations: MapAnnotations,
        config: EnvConfig,
        episode_seed: int,
    ):
        config.validate()
        if config.spawn_mode == "static" and annotations.spawn is None:
            raise ValueError("static spawn_mode requires an annotated spawn block")
        if not maze.is_floor(*annotations.goal):
            raise ValueError("goal block is not floor")
        self.maze = maze
        self.annotations = annotations
        self.config = config
        self.episode_seed = episode_seed
        self.goal_center = np.array(block_center(annotations.goal, config.block_size))
        self._floors = maze.floor_blocks()
        self._spawn_rng = rng_from("spawn", episode_seed)
        self._depth_edges = raycast.bucket_edges(maze, block_size=config.block_size)
        self._texture_ids = annotations.texture_ids
        self._history = np.zeros((config.episode_len + 1, 2), dtype=np.float64)
        self._last_depths: Optional[np.ndarray] = None
        self._started = False

    # -- episode protocol -------------------------------------------------

    def reset(self) -> Observation:
        self.apples = set(self.annotations.apples)
        self.steps = 0
        self.done = False
        self.prev_action = -1
        self.prev_reward = 0.0
        self.pose = self._draw_spawn()
        self._history[0] = (self.pose.x, self.pose.y)
        self._started = True
        self._last_depths = None
        return self.observe()

    def step(self, action: int) -> StepResult:
        if not self._started:
            raise EpisodeContractError("step() before reset()")
        if self.done:
            raise EpisodeContractError("step() after the episode finished")
        action = int(action)
        if not 0 <= action < ACTION_COUNT:
            raise EpisodeContractError(
                f"action {action} outside 0..{ACTION_COUNT - 1} at step {self.steps}"
            )

        cfg = self.config
        events: list[str] = []
        x, y, h = self.pose.x, self.pose.y, self.pose.heading
        if action == Action.FORWARD or action == Action.BACKWARD:
            sign = 1.0 if action == Action.FORWARD else -1.0
            dx = sign * cfg.forward_speed * math.cos(h)
            dy = sign * cfg.forward_speed * math.sin(h)
            x, y, contact = _move_circle(
                self.maze, x, y, dx, dy, cfg.agent_radius, cfg.block_size
            )
            if contact:
                events.append(EVENT_WALL)
        elif action == Action.ROTATE_LEFT:
            h -= cfg.turn_increment
        else:
            h += cfg.turn_increment

        r_wall = self._wall_penalty(x, y)
        r_apple = 0.0
        blk = block_of(x, y, cfg.block_size)
        if blk in self.apples:
            self.apples.discard(blk)
            r_apple = cfg.apple_reward
            events.append(EVENT_APPLE)

        r_goal = 0.0
        hit_pose = Pose(x, y, h)
        dist_goal = math.hypot(x - self.goal_center[0], y - self.goal_center[1])
        if dist_goal < cfg.goal_radius:
            r_goal = cfg.goal_reward
            events.append(EVENT_GOAL)
            events.append(EVENT_RESPAWN)
            self.pose = self._draw_spawn()
        else:
            self.pose = hit_pose

        reward = r_apple + r_goal + r_wall
        record = TrajectoryRecord(
            t=self.steps,
            x=hit_pose.x,
            y=hit_pose.y,
            heading=hit_pose.heading,
            action=action,
            reward=reward,
            events=tuple(events),
        )
        self.steps += 1
        self._history[self.steps] = (self.pose.x, self.pose.y)
        self.done = self.steps >= cfg.episode_len
        self.prev_action = action
        self.prev_reward = reward
        self._last_depths = None
        return StepResult(
            reward=reward,
            reward_apple=r_apple,
            reward_goal=r_goal,
            reward_wall=r_wall,
            events=tuple(events),
            done=self.done,
            record=record,
        )

    def observe(self) -> Observation:
        cfg = self.config
        if cfg.render:
            fr = raycast.frame(
                self.maze,
                self._texture_ids,
                self.pose,
                cfg.obs_width,
                cfg.obs_height,
                cfg.fov,
                goal=self.annotations.goal,
                apples=self.apples,
                block_size=cfg.block_size,
            )
            image = fr.image
            self._last_depths = fr.depths
        else:
            image = np.zeros((cfg.obs_height, cfg.obs_width, 3), dtype=np.float64)
        return Observation(
            image=image, prev_action=self.prev_action, prev_reward=self.prev_reward
        )

    # -- auxiliary ground truth -------------------------------------------

    def depth_targets(self, groups: int = 4) -> np.ndarray:
        """Bucketed column-group depths for the current pose."""
        if self._last_depths is None:
            dv = raycast.depth_truth(
                self.maze, self.pose, self.config.obs_width, self.config.fov,
                block_size=self.config.block_size,
            )
            self._last_depths = dv.depths
        return raycast.group_depth_targets(self._last_depths, self._depth_edges, groups)

    def loop_label(self) -> int:
        """Loop-closure label for the current (post-teleport) position."""
        return raycast.loop_closure_truth(self._history[: self.steps + 1])

    def position_history(self) -> np.ndarray:
        return self._history[: self.steps + 1].copy()

    # -- internals ----------------------------------------------------------

    def _draw_spawn(self) -> Pose:
        cfg = self.config
        if cfg.spawn_mode == "static":
            cx, cy = block_center(self.annotations.spawn, cfg.block_size)
            return Pose(cx, cy, 0.0)
        choices = [b for b in self._floors if b != self.annotations.goal]
        blk = choices[int(self._spawn_rng.integers(len(choices)))]
        cx, cy = block_center(blk, cfg.block_size)
        heading = float(self._spawn_rng.uniform(0.0, TWO_PI))
        return Pose(cx, cy, heading)

    def _wall_penalty(self, x: float, y: float) -> float:
        cfg = self.config
        d = _nearest_wall_distance(self.maze, x, y, cfg.block_size)
        if d >= cfg.wall_penalty_radius:
            return 0.0
        return cfg.wall_penalty_cap * (1.0 - d / cfg.wall_penalty_radius)


def _move_circle(
    maze: Maze, x: float, y: float, dx: float, dy: float, radius: float, B: float
) -> tuple[float, float, bool]:
    """Axis-separated clamp of a circle against wall blocks.

    The x displacement is applied first against the rows the circle
    overlaps at its current y, then y against the columns at the new x.
    Per-step displacement is below one block, so only the block the
    leading edge lands in needs checking. A hair of tolerance treats
    exact touching as non-overlap, letting the agent slide while flush.
    """
    eps = 1e-9
    bh, bw = maze.blocks.shape
    contact = False

    nx = x + dx
    if dx != 0.0:
        r_lo = int((y - radius + eps) // B)
        r_hi = int((y + radius - eps) // B)
        if dx > 0.0:
            col = int((nx + radius - eps) // B)
            for r in range(max(r_lo, 0), min(r_hi, bh - 1) + 1):
                if 0 <= col < bw and maze.blocks[r, col] != FLOOR:
                    nx = col * B - radius
                    contact = True
        else:
            col = int((nx - radius + eps) // B)
            for r in range(max(r_lo, 0), min(r_hi, bh - 1) + 1):
                if 0 <= col < bw and maze.blocks[r, col] != FLOOR:
                    nx = (col + 1) * B + radius
                    contact = True

    ny = y + dy
    if dy != 0.0:
        c_lo = int((nx - radius + eps) // B)
        c_hi = int((nx + radius - eps) // B)
        if dy > 0.0:
            row = int((ny + radius - eps) // B)
            for c in range(max(c_lo, 0), min(c_hi, bw - 1) + 1):
                if 0 <= row < bh and maze.blocks[row, c] != FLOOR:
                    ny = row * B - radius
                    contact = True
        else:
            row = int((ny - radius + eps) // B)
            for c in range(max(c_lo, 0), min(c_hi, bw - 1) + 1):
                if 0 <= row < bh and maze.blocks[row, c] != FLOOR:
                    ny = (row + 1) * B + radius
                    contact = True

    return nx, ny, contact


def _nearest_wall_distance(maze: Maze, x: float, y: float, B: float) -> float:
    """Distance from a point to the nearest wall face among nearby blocks.

    Only the 3x3 block neighborhood matters: anything farther is over
    half a block away, beyond every penalty radius this package uses.
    """
    br, bc = block_of(x, y, B)
    bh, bw = maze.blocks.shape
    best = math.inf
    for r in range(max(br - 1, 0), min(br + 1, bh - 1) + 1):
        for c in range(max(bc - 1, 0), min(bc + 1, bw - 1) + 1):
            if maze.blocks[r, c] == FLOOR:
                continue
            ddx = max(c * B - x, 0.0, x - (c + 1) * B)
            ddy = max(r * B - y, 0.0, y - (r + 1) * B)
            d = math.hypot(ddx, ddy)
            if d < best:
                best = d
    return best


# ---------------------------------------------------------------------------
# Episode driver
# ---------------------------------------------------------------------------

AgentCallback = Callable[[Observation, object], tuple[int, object]]


def run_episode(
    maze: Maze,
    annotations: MapAnnotations,
    config: EnvConfig,
    agent_callback: AgentCallback,
    episode_seed: int,
) -> list[TrajectoryRecord]:
    """Roll one full episode and return its records, one per step.

    The callback maps (observation, state) to (action, state), with
    state threaded through every step of the episode; it starts as None.
    Callback exceptions are re-raised with the step index attached.
    """
    env = Environment(maze, annotations, config, episode_seed)
    obs = env.reset()
    state: object = None
    records: list[TrajectoryRecord] = []
    for t in range(config.episode_len):
        try:
            action, state = agent_callback(obs, state)
        except Exception as exc:  # noqa: BLE001 - annotate and re-raise
            raise AgentCallbackError(t, repr(exc)) from exc
        result = env.step(action)
        records.append(result.record)
        if not result.done:
            obs = env.observe()
    return records


# ---------------------------------------------------------------------------
# Trajectory log files
# ---------------------------------------------------------------------------


def write_trajectory(path, header: dict, records: list[TrajectoryRecord]) -> None:
    """JSON-lines file: one header object, then one record per step."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            f.write(rec.to_json() + "\n")


def read_trajectory(path) -> tuple[dict, list[TrajectoryRecord]]:
    """Parse a trajectory log, validating the step sequence."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().split("\n")
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ValueError(f"{path}: empty trajectory file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line 1: bad header: {exc}") from exc
    if not isinstance(header, dict) or "t" in header:
        raise ValueError(f"{path}: line 1 must be a header object")
    records = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            records.append(TrajectoryRecord.from_json(line))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"{path}: line {i}: bad record: {exc}") from exc
    for i, rec in enumerate(records):
        if rec.t != i:
            raise ValueError(f"{path}: record {i} has t={rec.t}, expected {i}")
    return header, records
