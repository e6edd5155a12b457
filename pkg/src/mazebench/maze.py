"""Block-grid mazes: generation, canonical planning maps, text format, pools.

A maze lives on a block grid of walls and floors. A maze with
``cell_cols`` x ``cell_rows`` lattice cells occupies ``2*cells + 1``
blocks per side: cells sit at odd block coordinates, corridors between
visited cells are carved from the wall block separating them, and the
outer ring is always wall. Each block is ``BLOCK_SIZE`` world units
across, so block (r, c) spans world x in [c*B, (c+1)*B) and y in
[r*B, (r+1)*B).

Generation is a depth-first backtracker whose neighbor choices come
from a seeded PCG64 stream, which makes every maze a pure function of
its 64-bit seed and its cell dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np

from .seeding import MASK64, derive_seed, rng_from

WALL = 0
FLOOR = 1

BLOCK_SIZE = 100.0

# Reject absurd grids before allocating: block side length cap.
MAX_BLOCK_SIDE = 2049

# Default apple budget: one apple per this many floor blocks.
APPLE_FLOOR_DIVISOR = 6

# Texture palette size used when randomized wall textures are on.
TEXTURE_COUNT = 8

_GLYPHS = {"#", ".", "G", "S", "A"}


class MapFormatError(ValueError):
    """Raised when map text violates the grid format; carries line/column."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        loc = ""
        if line is not None:
            loc = f"line {line}" + (f", column {col}" if col is not None else "")
            message = f"{loc}: {message}"
        super().__init__(message)
        self.line = line
        self.col = col


@dataclass(frozen=True)
class Maze:
    """An immutable block grid plus the parameters that produced it."""

    blocks: np.ndarray  # uint8, shape (block_height, block_width)
    cell_cols: int
    cell_rows: int
    seed: int

    def __post_init__(self):
        self.blocks.setflags(write=False)

    @property
    def block_width(self) -> int:
        return self.blocks.shape[1]

    @property
    def block_height(self) -> int:
        return self.blocks.shape[0]

    def is_floor(self, r: int, c: int) -> bool:
        return bool(self.blocks[r, c] == FLOOR)

    def floor_blocks(self) -> list[tuple[int, int]]:
        """All floor blocks in row-major order."""
        rr, cc = np.nonzero(self.blocks == FLOOR)
        return [(int(r), int(c)) for r, c in zip(rr, cc)]

    def floor_neighbors(self, r: int, c: int) -> list[tuple[int, int]]:
        out = []
        for dr, dc in ((-1, 0), (0, 1), (1, 0), (0, -1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < self.block_height and 0 <= nc < self.block_width:
                if self.blocks[nr, nc] == FLOOR:
                    out.append((nr, nc))
        return out

    def corridor_count(self) -> int:
        """Floor blocks that are not on the odd/odd cell lattice."""
        h, w = self.blocks.shape
        odd = np.zeros((h, w), dtype=bool)
        odd[1::2, 1::2] = True
        return int(np.count_nonzero((self.blocks == FLOOR) & ~odd))

    def _graph_stats(self) -> tuple[int, int, int]:
        """(floor count, adjacency edge count, connected component count)."""
        floors = self.floor_blocks()
        n = len(floors)
        if n == 0:
            return 0, 0, 0
        index = {b: i for i, b in enumerate(floors)}
        edges = 0
        parent = list(range(n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for (r, c), i in index.items():
            for nb in ((r + 1, c), (r, c + 1)):  # count each edge once
                j = index.get(nb)
                if j is not None:
                    edges += 1
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[ri] = rj
        comps = len({find(i) for i in range(n)})
        return n, edges, comps

    def is_connected(self) -> bool:
        n, _, comps = self._graph_stats()
        return n > 0 and comps == 1

    def is_perfect(self) -> bool:
        """True when the floor graph is a tree (connected, no cycles)."""
        n, edges, comps = self._graph_stats()
        return n > 0 and comps == 1 and edges == n - 1

    def cycle_rank(self) -> int:
        """Independent cycles in the floor graph (0 for perfect mazes)."""
        n, edges, comps = self._graph_stats()
        return edges - n + comps

    def __eq__(self, other):
        if not isinstance(other, Maze):
            return NotImplemented
        return (
            self.cell_cols == other.cell_cols
            and self.cell_rows == other.cell_rows
            and self.seed == other.seed
            and np.array_equal(self.blocks, other.blocks)
        )

    def __hash__(self):
        return hash((self.cell_cols, self.cell_rows, self.seed, self.blocks.tobytes()))


@dataclass(frozen=True)
class MapAnnotations:
    """Goal/spawn/apple placement for one episode on one maze.

    ``spawn`` is None when spawn placement is per-respawn random and
    therefore owned by the environment. ``texture_ids`` is attached by
    :func:`assign_textures` and is None until then.
    """

    goal: tuple[int, int]
    spawn: Optional[tuple[int, int]]
    apples: frozenset[tuple[int, int]]
    texture_ids: Optional[np.ndarray] = None

    def with_textures(self, texture_ids: np.ndarray) -> "MapAnnotations":
        return replace(self, texture_ids=texture_ids)


def generate_maze(seed: int, cell_cols: int, cell_rows: int) -> Maze:
    """Carve a perfect maze with a seeded depth-first backtracker.

    The walk starts at a seeded lattice cell, repeatedly tunnels to a
    uniformly chosen unvisited neighbor, and backtracks when stuck.
    Every cell is visited exactly once, so exactly cells-1 corridor
    blocks are opened and the floor graph is a spanning tree.
    """
    if cell_cols < 1 or cell_rows < 1:
        raise ValueError(f"cell dims must be >= 1, got {cell_cols}x{cell_rows}")
    bw, bh = 2 * cell_cols + 1, 2 * cell_rows + 1
    if bw > MAX_BLOCK_SIDE or bh > MAX_BLOCK_SIDE:
        raise ValueError(
            f"block dims {bw}x{bh} exceed maximum side {MAX_BLOCK_SIDE}"
        )
    blocks = np.full((bh, bw), WALL, dtype=np.uint8)
    rng = rng_from("maze-gen", seed & MASK64)

    start = (int(rng.integers(cell_rows)), int(rng.integers(cell_cols)))
    blocks[2 * start[0] + 1, 2 * start[1] + 1] = FLOOR
    visited = {start}
    stack = [start]
    while stack:
        r, c = stack[-1]
        candidates = [
            (r + dr, c + dc)
            for dr, dc in ((-1, 0), (0, 1), (1, 0), (0, -1))
            if 0 <= r + dr < cell_rows
            and 0 <= c + dc < cell_cols
            and (r + dr, c + dc) not in visited
        ]
        if not candidates:
            stack.pop()
            continue
        nr, nc = candidates[int(rng.integers(len(candidates)))]
        blocks[r + nr + 1, c + nc + 1] = FLOOR  # corridor block between cells
        blocks[2 * nr + 1, 2 * nc + 1] = FLOOR
        visited.add((nr, nc))
        stack.append((nr, nc))
    return Maze(blocks=blocks, cell_cols=cell_cols, cell_rows=cell_rows, seed=seed & MASK64)


# ---------------------------------------------------------------------------
# Canonical planning probe maps
# ---------------------------------------------------------------------------

# A single ring corridor: every floor block has exactly two neighbors and
# there is exactly one cycle. Spawn sits on the bottom edge, the goal in
# a corner, so the two ways around differ in length (3 hops one way, 5
# the other). The ring is kept this tight so that even an undirected
# random walker completes enough spawn-to-goal traversals per episode
# for the arm-choice fraction to be estimable.
SQUARE_MAP_TEXT = """\
#####
#G..#
#.#.#
#.S.#
#####
"""

# A loop with a stem: the spawn corridor meets the loop at the single
# junction block (4,4), from which two goal-reaching arms of unequal
# length (7 vs 11 hops) diverge. The choice point is therefore fixed by
# the map, not by the spawn heading.
GOAL_MAP_TEXT = """\
#########
#.G.....#
#.#####.#
#.#####.#
#.......#
####.####
####.####
####S####
#########
"""


def build_square_map() -> Maze:
    """The ring-corridor probe map (one cycle, two unequal arms)."""
    return parse_map(SQUARE_MAP_TEXT)[0]


def build_goal_map() -> Maze:
    """The stem-plus-loop probe map (single junction, two unequal arms)."""
    return parse_map(GOAL_MAP_TEXT)[0]


def square_map_annotations() -> MapAnnotations:
    ann = parse_map(SQUARE_MAP_TEXT)[1]
    assert ann is not None
    return ann


def goal_map_annotations() -> MapAnnotations:
    ann = parse_map(GOAL_MAP_TEXT)[1]
    assert ann is not None
    return ann


# ---------------------------------------------------------------------------
# Placement
# ---------------------------------------------------------------------------


def default_apple_count(maze: Maze) -> int:
    return len(maze.floor_blocks()) // APPLE_FLOOR_DIVISOR


def annotate(
    maze: Maze,
    *,
    goal_static: bool,
    spawn_static: bool,
    apple_count: int,
    rng_seed: int,
) -> MapAnnotations:
    """Place goal, spawn, and apples for one episode.

    Static placements are pure functions of the maze seed, so they hold
    still across episodes; random placements draw from the per-episode
    stream ``rng_seed``. Draw order is goal, then spawn, then apples.
    Apples never share a block with the goal or a known spawn. When
    spawn placement is random the returned spawn is None and the
    environment draws it (and every respawn) from its own episode
    stream.
    """
    floors = maze.floor_blocks()
    if len(floors) < 2:
        raise ValueError("maze needs at least two floor blocks for goal and spawn")

    # Static spawn must not depend on the (possibly per-episode) goal, so
    # it is drawn from all floors; a static goal then avoids the spawn and
    # a random goal avoids a static spawn.
    static_spawn: Optional[tuple[int, int]] = None
    if spawn_static:
        srng = rng_from("static-spawn", maze.seed)
        static_spawn = floors[int(srng.integers(len(floors)))]

    if goal_static:
        grng = rng_from("static-goal", maze.seed)
    else:
        grng = rng_from("goal", rng_seed)
    goal_choices = [b for b in floors if b != static_spawn] if static_spawn else floors
    goal = goal_choices[int(grng.integers(len(goal_choices)))]

    spawn: Optional[tuple[int, int]]
    if spawn_static:
        spawn = static_spawn
    else:
        spawn = None  # environment draws per respawn

    if apple_count < 0:
        raise ValueError("apple_count must be >= 0")
    apple_choices = [b for b in floors if b != goal and b != spawn]
    # with a per-episode spawn, leave at least one block free to spawn on
    room = len(apple_choices) - (1 if spawn is None else 0)
    if apple_count > room:
        raise ValueError(
            f"apple_count {apple_count} leaves no room on {len(floors)} floor blocks"
        )
    arng = rng_from("apples", rng_seed)
    picks = arng.choice(len(apple_choices), size=apple_count, replace=False)
    apples = frozenset(apple_choices[int(i)] for i in picks)
    return MapAnnotations(goal=goal, spawn=spawn, apples=apples)


def assign_textures(
    maze: Maze,
    texture_seed: int,
    *,
    randomized: bool = True,
    texture_count: int = TEXTURE_COUNT,
) -> np.ndarray:
    """Per-block wall texture ids, uint16, 0 meaning the plain default.

    Only wall blocks that touch at least one floor block (the only walls
    a ray can ever hit) receive ids, drawn uniformly from
    1..texture_count as a pure function of (maze seed, texture seed).
    With ``randomized`` off the whole grid is 0.
    """
    ids = np.zeros(maze.blocks.shape, dtype=np.uint16)
    if not randomized:
        return ids
    walls = maze.blocks == WALL
    floor = maze.blocks == FLOOR
    adj = np.zeros_like(floor)
    adj[1:, :] |= floor[:-1, :]
    adj[:-1, :] |= floor[1:, :]
    adj[:, 1:] |= floor[:, :-1]
    adj[:, :-1] |= floor[:, 1:]
    exposed = walls & adj
    rng = rng_from("textures", maze.seed, texture_seed)
    ids[exposed] = rng.integers(1, texture_count + 1, size=int(exposed.sum()), dtype=np.uint16)
    return ids


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------


def serialize_map(maze: Maze, annotations: Optional[MapAnnotations] = None) -> str:
    """Render the grid as '#'/'.' rows with G/S/A overlays, LF endings."""
    grid = [["#" if maze.blocks[r, c] == WALL else "." for c in range(maze.block_width)]
            for r in range(maze.block_height)]
    if annotations is not None:
        for (r, c) in sorted(annotations.apples):
            grid[r][c] = "A"
        if annotations.spawn is not None:
            r, c = annotations.spawn
            grid[r][c] = "S"
        r, c = annotations.goal
        grid[r][c] = "G"
    return "\n".join("".join(row) for row in grid) + "\n"


def parse_map(text: str) -> tuple[Maze, Optional[MapAnnotations]]:
    """Parse map text back into a maze and optional annotations.

    Validates rectangularity, the glyph set, odd dimensions, a solid
    wall border, and at-most-one G/S. Errors carry 1-based line and
    column numbers. Trailing blank lines are tolerated; nothing else is.
    """
    lines = text.split("\n")
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MapFormatError("empty map text")
    width = len(lines[0])
    goal: Optional[tuple[int, int]] = None
    spawn: Optional[tuple[int, int]] = None
    apples: set[tuple[int, int]] = set()
    blocks = np.full((len(lines), width), WALL, dtype=np.uint8)
    for r, line in enumerate(lines):
        if len(line) != width:
            raise MapFormatError(
                f"ragged row: expected width {width}, got {len(line)}", line=r + 1
            )
        for c, ch in enumerate(line):
            if ch not in _GLYPHS:
                raise MapFormatError(f"unknown glyph {ch!r}", line=r + 1, col=c + 1)
            if ch == "#":
                continue
            blocks[r, c] = FLOOR
            if ch == "G":
                if goal is not None:
                    raise MapFormatError("second goal glyph", line=r + 1, col=c + 1)
                goal = (r, c)
            elif ch == "S":
                if spawn is not None:
                    raise MapFormatError("second spawn glyph", line=r + 1, col=c + 1)
                spawn = (r, c)
            elif ch == "A":
                apples.add((r, c))
    h, w = blocks.shape
    if h < 3 or w < 3 or h % 2 == 0 or w % 2 == 0:
        raise MapFormatError(f"dimensions must be odd and at least 3x3, got {w}x{h}")
    border = np.concatenate([blocks[0], blocks[-1], blocks[:, 0], blocks[:, -1]])
    if np.any(border != WALL):
        bad = np.argwhere(blocks == FLOOR)
        for r, c in bad:
            if r in (0, h - 1) or c in (0, w - 1):
                raise MapFormatError("border must be wall", line=int(r) + 1, col=int(c) + 1)
    if not np.any(blocks == FLOOR):
        raise MapFormatError("map has no floor blocks")
    maze = Maze(blocks=blocks, cell_cols=(w - 1) // 2, cell_rows=(h - 1) // 2, seed=0)
    if goal is None:
        if spawn is not None or apples:
            raise MapFormatError("spawn/apple glyphs present without a goal glyph")
        return maze, None
    return maze, MapAnnotations(goal=goal, spawn=spawn, apples=frozenset(apples))


# ---------------------------------------------------------------------------
# Map pools
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolEntry:
    map_id: str
    seed: int
    cell_cols: int
    cell_rows: int
    role: str  # train | test | static

    def build(self) -> Maze:
        return generate_maze(self.seed, self.cell_cols, self.cell_rows)


@dataclass(frozen=True)
class MapPool:
    """A reproducible set of generated maps split into roles.

    ``static`` entries are the held-still subset of the training split;
    their role column records that membership.
    """

    entries: tuple[PoolEntry, ...]

    def __post_init__(self):
        ids = [e.map_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("pool has duplicate map ids")

    @property
    def train_ids(self) -> list[str]:
        return [e.map_id for e in self.entries if e.role in ("train", "static")]

    @property
    def test_ids(self) -> list[str]:
        return [e.map_id for e in self.entries if e.role == "test"]

    @property
    def static_ids(self) -> list[str]:
        return [e.map_id for e in self.entries if e.role == "static"]

    def entry(self, map_id: str) -> PoolEntry:
        for e in self.entries:
            if e.map_id == map_id:
                return e
        raise KeyError(f"map id {map_id!r} not in pool")

    def build(self, map_id: str) -> Maze:
        return self.entry(map_id).build()


def build_pool(
    pool_seed: int,
    n_train: int,
    n_test: int,
    cell_cols: int,
    cell_rows: int,
    n_static: int = 10,
) -> MapPool:
    """Derive per-map seeds from the pool seed and split train/test.

    The static subset is drawn without replacement from the training
    split by a dedicated stream, so the same pool seed always pins the
    same held-still maps.
    """
    if n_train < 1 or n_test < 0:
        raise ValueError("need n_train >= 1 and n_test >= 0")
    n_static = min(n_static, n_train)
    total = n_train + n_test
    seeds = [derive_seed(pool_seed, "map", i) for i in range(total)]
    if len(set(seeds)) != total:
        raise RuntimeError("seed derivation collision in pool build")
    static_rng = rng_from("static-subset", pool_seed)
    static_idx = set(
        int(i) for i in static_rng.choice(n_train, size=n_static, replace=False)
    )
    entries = []
    for i, seed in enumerate(seeds):
        if i < n_train:
            role = "static" if i in static_idx else "train"
        else:
            role = "test"
        entries.append(
            PoolEntry(
                map_id=f"m{i:04d}",
                seed=seed,
                cell_cols=cell_cols,
                cell_rows=cell_rows,
                role=role,
            )
        )
    return MapPool(entries=tuple(entries))


def write_manifest(pool: MapPool) -> str:
    """Tab-separated manifest: id, seed, cols, rows, role. One per line."""
    lines = [
        f"{e.map_id}\t{e.seed}\t{e.cell_cols}\t{e.cell_rows}\t{e.role}"
        for e in pool.entries
    ]
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> MapPool:
    entries = []
    for i, line in enumerate(text.split("\n")):
        if line == "":
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise MapFormatError(f"manifest row needs 5 fields, got {len(parts)}", line=i + 1)
        map_id, seed, cols, rows, role = parts
        if role not in ("train", "test", "static"):
            raise MapFormatError(f"unknown role {role!r}", line=i + 1)
        try:
            entries.append(
                PoolEntry(map_id, int(seed), int(cols), int(rows), role)
            )
        except ValueError as exc:
            raise MapFormatError(f"bad integer field: {exc}", line=i + 1) from exc
    if not entries:
        raise MapFormatError("empty manifest")
    return MapPool(entries=tuple(entries))


def block_center(block: tuple[int, int], block_size: float = BLOCK_SIZE) -> tuple[float, float]:
    """World coordinates of a block's center: (x, y) = ((c+.5)B, (r+.5)B)."""
    r, c = block
    return ((c + 0.5) * block_size, (r + 0.5) * block_size)


def block_of(x: float, y: float, block_size: float = BLOCK_SIZE) -> tuple[int, int]:
    """The block containing world point (x, y)."""
    return (int(y // block_size), int(x // block_size))


def iter_pool_mazes(pool: MapPool, ids: Iterable[str]) -> Iterable[tuple[PoolEntry, Maze]]:
    for map_id in ids:
        e = pool.entry(map_id)
        yield e, e.build()
