"""Independent oracles used by the test suite.

Everything here is deliberately written against the contracts rather
than the library internals: a brute-force ray marcher instead of the
grid DDA, dense all-pairs shortest paths instead of single-source BFS,
and plain finite differences instead of the reverse-mode tape.
"""

import math

import numpy as np

from mazebench.maze import FLOOR


def march_depth_oracle(maze, pose, width, fov, step=0.01, block_size=100.0):
    """Per-column perpendicular wall distance by fine ray marching.

    Marches each column's ray in `step`-unit increments until it lands
    inside a wall block, then bisects the crossing to ~1e-9. The ray
    angle comes from atan of the camera-plane offset, a formulation the
    DDA implementation never touches.
    """
    half = math.tan(fov / 2.0)
    bh, bw = maze.blocks.shape
    diag = math.hypot(bw * block_size, bh * block_size)
    blocks = maze.blocks

    def is_wall(px, py):
        c = int(px // block_size)
        r = int(py // block_size)
        if not (0 <= r < bh and 0 <= c < bw):
            return True
        return blocks[r, c] != FLOOR

    perps = np.empty(width)
    ts_all = np.arange(step, diag + step, step)
    for i in range(width):
        camx = 2.0 * (i + 0.5) / width - 1.0
        alpha = math.atan(camx * half)
        ang = pose.heading + alpha
        ux, uy = math.cos(ang), math.sin(ang)
        t_hit = None
        for lo_idx in range(0, len(ts_all), 4096):
            ts = ts_all[lo_idx : lo_idx + 4096]
            pxs = pose.x + ts * ux
            pys = pose.y + ts * uy
            cs = (pxs // block_size).astype(np.int64)
            rs = (pys // block_size).astype(np.int64)
            inside = (0 <= rs) & (rs < bh) & (0 <= cs) & (cs < bw)
            wall = ~inside | (blocks[np.clip(rs, 0, bh - 1), np.clip(cs, 0, bw - 1)] != FLOOR)
            if wall.any():
                k = int(np.argmax(wall))
                hi = float(ts[k])
                lo = hi - step
                for _ in range(48):
                    mid = 0.5 * (lo + hi)
                    if is_wall(pose.x + mid * ux, pose.y + mid * uy):
                        hi = mid
                    else:
                        lo = mid
                t_hit = hi
                break
        if t_hit is None:
            raise AssertionError("oracle ray never hit a wall")
        perps[i] = t_hit * math.cos(alpha)
    return perps


def floyd_warshall_block_distances(maze):
    """All-pairs hop counts over the floor graph, dense O(n^3)."""
    floors = maze.floor_blocks()
    n = len(floors)
    index = {b: i for i, b in enumerate(floors)}
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for b, i in index.items():
        for nb in maze.floor_neighbors(*b):
            dist[i, index[nb]] = 1.0
    for k in range(n):
        dist = np.minimum(dist, dist[:, k : k + 1] + dist[k : k + 1, :])
    return floors, dist


def finite_difference_grads(f, params, h=1e-5):
    """Central-difference gradients of a scalar function of named arrays.

    `f` maps {name: ndarray} -> float and must not mutate its input.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(params)
            flat[j] = orig - h
            fm = f(params)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric):
    """max over elements of |a - n| / max(|a|, |n|, 1)."""
    worst = 0.0
    for name in analytic:
        a = np.asarray(analytic[name], dtype=np.float64)
        n = np.asarray(numeric[name], dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
