"""First-person frame synthesis over block mazes.

Columns are cast through a pinhole camera: the view direction carries a
perpendicular camera plane of half-width tan(fov/2), each image column
i shoots the ray ``dir + plane * camx`` with camx at the pixel center,
and the grid is traversed with an integer DDA. Reported wall distances
are measured along the view axis (perpendicular to the camera plane),
which keeps flat walls flat instead of fisheyed.

Wall slice height for a wall at perpendicular distance d is
``round(height * block / d)`` clamped to the image height; the eye sits
at half wall height so slices are vertically centered. Goal and apple
blocks passed through by a ray are drawn as fixed-color markers (an
orange slab, green floor patches).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Optional

import numpy as np

from .maze import BLOCK_SIZE, FLOOR, Maze

if TYPE_CHECKING:  # pragma: no cover
    from .world import Pose

_INF = float("inf")

# Geometric depth-bucket span: from the default agent radius out to the
# maze diagonal. Eight buckets keep the auxiliary task a classification.
DEPTH_BUCKETS = 8
DEPTH_MIN = 16.0

# Loop-closure ground truth: a step closes a loop when some position at
# least LOOP_MIN_GAP steps older lies within LOOP_RADIUS world units.
LOOP_MIN_GAP = 30
LOOP_RADIUS = 50.0

GOAL_RGB = np.array([1.0, 140 / 255, 0.0])  # #FF8C00
APPLE_RGB = np.array([46 / 255, 139 / 255, 87 / 255])  # #2E8B57

_CEILING = np.array([0.22, 0.27, 0.34])
_FLOOR = np.array([0.33, 0.30, 0.26])

# id 0 is the plain untextured wall; ids 1..8 are the texture palette.
_WALL_PALETTE = np.array(
    [
        [0.55, 0.55, 0.55],
        [0.62, 0.44, 0.36],
        [0.42, 0.52, 0.62],
        [0.56, 0.58, 0.40],
        [0.52, 0.42, 0.58],
        [0.40, 0.58, 0.54],
        [0.60, 0.50, 0.30],
        [0.46, 0.46, 0.66],
        [0.64, 0.38, 0.46],
    ]
)
_STRIPES = 8
_STRIPE_DIM = 0.72
_YSIDE_DIM = 0.85


class RaycastError(RuntimeError):
    pass


def _check_fov(fov: float) -> None:
    if not (0.0 < fov < math.pi):
        raise ValueError(f"fov must be in (0, pi), got {fov}")


def _normalized_heading(h: float) -> float:
    # exact IEEE remainder keeps h and h + 2*pi byte-identical downstream
    r = math.remainder(h, 2.0 * math.pi)
    return r + 2.0 * math.pi if r < 0 else r


@dataclass
class ColumnHit:
    perp: float  # perpendicular wall distance, world units
    side: int  # 0 = crossed an x boundary, 1 = a y boundary
    wall_u: float  # fractional position along the wall face, [0, 1)
    texture: int
    goal_perp: float  # entry distance of the goal block, inf if not crossed
    apple_spans: list  # (entry, exit) perpendicular distances, world units


@dataclass
class Frame:
    image: np.ndarray  # (height, width, 3) float64 in [0, 1]
    depths: np.ndarray  # (width,) perpendicular wall distances


def cast_columns(
    maze: Maze,
    pose: "Pose",
    width: int,
    fov: float,
    *,
    texture_ids: Optional[np.ndarray] = None,
    goal: Optional[tuple[int, int]] = None,
    apples: Iterable[tuple[int, int]] = (),
    block_size: float = BLOCK_SIZE,
) -> list[ColumnHit]:
    """DDA-cast one ray per image column; the workhorse for everything."""
    _check_fov(fov)
    if width < 1:
        raise ValueError("width must be >= 1")
    h = _normalized_heading(pose.heading)
    dirx, diry = math.cos(h), math.sin(h)
    half = math.tan(fov / 2.0)
    planex, planey = -diry * half, dirx * half
    px, py = pose.x / block_size, pose.y / block_size
    blocks = maze.blocks
    bh, bw = blocks.shape
    apple_set = set(apples)
    out: list[ColumnHit] = []
    max_steps = 2 * (bh + bw)
    for i in range(width):
        camx = 2.0 * (i + 0.5) / width - 1.0
        rdx = dirx + planex * camx
        rdy = diry + planey * camx
        mapx, mapy = int(px), int(py)
        ddx = abs(1.0 / rdx) if rdx != 0.0 else _INF
        ddy = abs(1.0 / rdy) if rdy != 0.0 else _INF
        if rdx < 0.0:
            stepx, sdx = -1, (px - mapx) * ddx
        else:
            stepx, sdx = 1, (mapx + 1.0 - px) * ddx
        if rdy < 0.0:
            stepy, sdy = -1, (py - mapy) * ddy
        else:
            stepy, sdy = 1, (mapy + 1.0 - py) * ddy
        goal_perp = _INF
        spans: list = []
        side = 0
        perp = 0.0
        for _ in range(max_steps):
            if sdx < sdy:
                sdx += ddx
                mapx += stepx
                side = 0
                entry = sdx - ddx
            else:
                sdy += ddy
                mapy += stepy
                side = 1
                entry = sdy - ddy
            if not (0 <= mapx < bw and 0 <= mapy < bh):
                raise RaycastError("ray escaped the grid; border wall missing")
            if blocks[mapy, mapx] != FLOOR:
                perp = max(entry, 1e-9)
                break
            if goal is not None and math.isinf(goal_perp) and (mapy, mapx) == goal:
                goal_perp = max(entry, 1e-9)
            if apple_set and (mapy, mapx) in apple_set:
                spans.append((max(entry, 1e-9), min(sdx, sdy)))
        else:
            raise RaycastError("ray never hit a wall")
        if side == 0:
            u = (py + perp * rdy) % 1.0
        else:
            u = (px + perp * rdx) % 1.0
        tex = int(texture_ids[mapy, mapx]) if texture_ids is not None else 0
        out.append(
            ColumnHit(
                perp=perp * block_size,
                side=side,
                wall_u=u,
                texture=tex,
                goal_perp=_INF if math.isinf(goal_perp) else goal_perp * block_size,
                apple_spans=[(a * block_size, b * block_size) for a, b in spans],
            )
        )
    return out


def frame(
    maze: Maze,
    texture_ids: Optional[np.ndarray],
    pose: "Pose",
    width: int,
    height: int,
    fov: float,
    *,
    goal: Optional[tuple[int, int]] = None,
    apples: Iterable[tuple[int, int]] = (),
    block_size: float = BLOCK_SIZE,
) -> Frame:
    """Render one frame and return it with the per-column wall depths."""
    if height < 2:
        raise ValueError("height must be >= 2")
    hits = cast_columns(
        maze, pose, width, fov,
        texture_ids=texture_ids, goal=goal, apples=apples, block_size=block_size,
    )
    img = np.empty((height, width, 3), dtype=np.float64)
    img[: height // 2] = _CEILING
    img[height // 2 :] = _FLOOR
    depths = np.empty(width, dtype=np.float64)

    def _row_of(d: float) -> float:
        # screen row of a floor point at perpendicular distance d
        return height / 2.0 + height * block_size / (2.0 * d)

    for i, hit in enumerate(hits):
        d = hit.perp
        depths[i] = d
        sh = min(height, int(round(height * block_size / d)))
        top = (height - sh) // 2
        base = _WALL_PALETTE[hit.texture % len(_WALL_PALETTE)].copy()
        if hit.texture > 0:
            stripe = int(hit.wall_u * _STRIPES)
            if (stripe + hit.texture) % 2 == 1:
                base = base * _STRIPE_DIM
        if hit.side == 1:
            base = base * _YSIDE_DIM
        shade = 1.0 / (1.0 + d / block_size)
        img[top : top + sh, i] = base * shade
        for (ent, ex) in hit.apple_spans:
            if ent >= hit.goal_perp:
                continue  # behind the goal slab
            lo = int(round(_row_of(ex)))
            hi = int(round(_row_of(ent)))
            lo = max(lo, height // 2)
            hi = min(hi, height)
            if hi > lo:
                img[lo:hi, i] = APPLE_RGB / (1.0 + ent / block_size)
        if hit.goal_perp < d:
            gd = hit.goal_perp
            gsh = min(height, int(round(height * block_size / gd)))
            gtop = (height - gsh) // 2
            img[gtop : gtop + gsh, i] = GOAL_RGB / (1.0 + gd / block_size)
    np.clip(img, 0.0, 1.0, out=img)
    return Frame(image=img, depths=depths)


def render(
    maze: Maze,
    texture_ids: Optional[np.ndarray],
    pose: "Pose",
    width: int,
    height: int,
    fov: float,
    **kwargs,
) -> np.ndarray:
    """Convenience wrapper over :func:`frame` returning only the image."""
    return frame(maze, texture_ids, pose, width, height, fov, **kwargs).image


# ---------------------------------------------------------------------------
# Auxiliary-task ground truth
# ---------------------------------------------------------------------------


@dataclass
class DepthVector:
    depths: np.ndarray  # (width,) world units
    buckets: np.ndarray  # (width,) int bucket indices
    edges: np.ndarray  # (DEPTH_BUCKETS + 1,) bucket edges


def bucket_edges(
    maze: Maze,
    bucket_count: int = DEPTH_BUCKETS,
    d_min: float = DEPTH_MIN,
    block_size: float = BLOCK_SIZE,
) -> np.ndarray:
    """Geometric bucket edges from d_min out to the maze diagonal."""
    diag = math.hypot(maze.block_width * block_size, maze.block_height * block_size)
    return np.geomspace(d_min, diag, bucket_count + 1)


def bucketize(depths: np.ndarray, edges: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(edges, depths, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2).astype(np.int64)


def depth_truth(
    maze: Maze,
    pose: "Pose",
    width: int,
    fov: float,
    bucket_count: int = DEPTH_BUCKETS,
    block_size: float = BLOCK_SIZE,
) -> DepthVector:
    """Per-column perpendicular wall depth plus its bucketed form."""
    hits = cast_columns(maze, pose, width, fov, block_size=block_size)
    depths = np.array([h.perp for h in hits])
    edges = bucket_edges(maze, bucket_count, block_size=block_size)
    return DepthVector(depths=depths, buckets=bucketize(depths, edges), edges=edges)


def group_depth_targets(depths: np.ndarray, edges: np.ndarray, groups: int = 4) -> np.ndarray:
    """Bucketed mean depth over contiguous column groups (the aux target)."""
    means = np.array([chunk.mean() for chunk in np.array_split(depths, groups)])
    return bucketize(means, edges)


def loop_closure_truth(
    history: np.ndarray,
    t_min: int = LOOP_MIN_GAP,
    radius: float = LOOP_RADIUS,
) -> int:
    """1 when the newest position revisits somewhere at least t_min steps old.

    ``history`` holds positions x_0 .. x_t as an (t+1, 2) array; the
    label compares x_t against x_0 .. x_{t - t_min}.
    """
    t = len(history) - 1
    if t < t_min:
        return 0
    cur = history[-1]
    past = history[: t - t_min + 1]
    d2 = np.sum((past - cur) ** 2, axis=1)
    return int(np.any(d2 < radius * radius))


# ---------------------------------------------------------------------------
# Debug image output
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6), 8 bits per channel, from a float image in [0, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) image, got {image.shape}")
    h, w, _ = image.shape
    data = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of :func:`write_ppm`; used by tests and the CLI."""
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) != 4:
        raise ValueError("not a P6 ppm written by this package")
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0
