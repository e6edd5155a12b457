"""Post-hoc analysis: input-saliency maps, top-down trajectory renders,
and report plots.

Saliency reuses the exact training loss assembly — identical window
length, bootstrap rule, and term weights — so a mask answers "which
pixels moved the training signal at this step" rather than some proxy
question. An episode is first re-simulated from its logged actions and
seed (and cross-checked against the log), then chunked into windows
whose image gradients are read off the tape.

Renders are written as binary PPM and plots as hand-assembled SVG;
report entry points also emit matplotlib PNG companions.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import agent as agent_mod
from . import autodiff as ad
from .agent import AgentConfig, RecurrentState
from .maze import BLOCK_SIZE, FLOOR, MapAnnotations, Maze
from .raycast import write_ppm
from .trainer import Rollout, TrainConfig, rollout_loss
from .world import EVENT_RESPAWN, EnvConfig, Environment, TrajectoryRecord

log = logging.getLogger(__name__)


class AnalysisError(Exception):
    """Raised for replay divergence and malformed report inputs."""


# ---------------------------------------------------------------------------
# Episode replay (log -> observations and targets)
# ---------------------------------------------------------------------------


@dataclass
class ReplayData:
    """Everything the network consumed during one logged episode."""

    images: list[np.ndarray]
    prev_actions: list[int]
    prev_rewards: list[float]
    actions: list[int]
    rewards: list[float]
    depth_targets: list[np.ndarray]
    loop_labels: list[int]
    records: list[TrajectoryRecord]

    def __len__(self) -> int:
        return len(self.actions)


def replay_episode(
    maze: Maze,
    annotations: MapAnnotations,
    config: EnvConfig,
    records: list[TrajectoryRecord],
    episode_seed: int,
    *,
    depth_groups: int = 4,
) -> ReplayData:
    """Re-simulate a logged episode and capture per-step network inputs.

    The environment is rebuilt from the episode seed and driven by the
    logged actions; every regenerated step is compared against the log,
    so a stale map, annotation set, or seed fails loudly instead of
    producing saliency for the wrong episode.
    """
    if not records:
        raise AnalysisError("cannot replay an empty trajectory")
    if not config.render:
        raise AnalysisError("replay needs render=True to regenerate frames")
    env = Environment(maze, annotations, config, episode_seed)
    obs = env.reset()
    data = ReplayData([], [], [], [], [], [], [], list(records))
    for t, rec in enumerate(records):
        data.images.append(obs.image)
        data.prev_actions.append(obs.prev_action)
        data.prev_rewards.append(obs.prev_reward)
        data.depth_targets.append(env.depth_targets(depth_groups))
        data.loop_labels.append(env.loop_label())
        result = env.step(rec.action)
        got = result.record
        if (got.x, got.y, got.heading, got.reward, got.events) != (
            rec.x, rec.y, rec.heading, rec.reward, rec.events,
        ):
            raise AnalysisError(
                f"replayed step {t} diverged from the log: "
                f"got ({got.x}, {got.y}, r={got.reward}), "
                f"logged ({rec.x}, {rec.y}, r={rec.reward})"
            )
        data.actions.append(rec.action)
        data.rewards.append(rec.reward)
        if result.done and t != len(records) - 1:
            raise AnalysisError(
                f"episode ended at step {t} but the log has {len(records)} steps"
            )
        if not result.done:
            obs = env.observe()
    return data


# ---------------------------------------------------------------------------
# Saliency through the training loss
# ---------------------------------------------------------------------------


@dataclass
class SaliencyResult:
    masks: np.ndarray  # (T, H, W), each frame in [0, 1]
    central_mass: np.ndarray  # (T,), NaN where a frame got zero gradient
    zero_frames: list[int]
    window_parts: list[dict]  # loss term values per window


def episode_saliency(
    params: dict[str, np.ndarray],
    agent_config: AgentConfig,
    train_config: TrainConfig,
    replay: ReplayData,
    *,
    t_max: Optional[int] = None,
) -> SaliencyResult:
    """Per-frame |d loss / d image| masks over a replayed episode.

    The episode is cut into the same fixed-length windows used by the
    optimizer, each bootstrapped with the value estimate of the
    observation that follows it. Gradients are summed over color
    channels and each frame is scaled by its own maximum, so nonzero
    frames peak at exactly 1.0; frames whose gradient vanishes are
    returned as all-zero and listed in ``zero_frames``.
    """
    steps = len(replay)
    window = t_max if t_max is not None else train_config.t_max
    if window < 1:
        raise AnalysisError("t_max must be >= 1")
    const = agent_mod.wrap_params(params, requires_grad=False)

    # One tape-free pass for window start states and bootstrap values.
    states: list[RecurrentState] = []
    values: list[float] = []
    svars = RecurrentState.zeros(agent_config).to_vars()
    for t in range(steps):
        states.append(svars.detach())
        out = agent_mod.forward(
            const, replay.images[t], replay.prev_actions[t],
            replay.prev_rewards[t], svars, agent_config,
        )
        svars = out.state
        values.append(float(out.value.value[0]))

    h, w = agent_config.obs_height, agent_config.obs_width
    masks = np.zeros((steps, h, w))
    zero_frames: list[int] = []
    window_parts: list[dict] = []
    for s in range(0, steps, window):
        e = min(s + window, steps)
        rollout = Rollout(
            start_state=states[s],
            images=replay.images[s:e],
            prev_actions=replay.prev_actions[s:e],
            prev_rewards=replay.prev_rewards[s:e],
            actions=replay.actions[s:e],
            rewards=replay.rewards[s:e],
            depth_targets=replay.depth_targets[s:e],
            loop_labels=replay.loop_labels[s:e],
            bootstrap_value=values[e] if e < steps else 0.0,
            done=e == steps,
        )
        with ad.Tape() as tape:
            loss, parts, image_vars = rollout_loss(
                const, rollout, agent_config, train_config, image_grad=True,
            )
            tape.backward(loss)
        window_parts.append(parts)
        for i, var in enumerate(image_vars):
            grad = var.grad
            frame = np.zeros((h, w)) if grad is None else np.abs(grad).sum(axis=2)
            peak = float(frame.max())
            if peak <= 0.0:
                zero_frames.append(s + i)
                log.info("saliency: frame %d has zero gradient, mask left blank",
                         s + i)
            else:
                masks[s + i] = frame / peak
    return SaliencyResult(
        masks=masks,
        central_mass=central_third_mass(masks),
        zero_frames=zero_frames,
        window_parts=window_parts,
    )


def central_third_mass(masks: np.ndarray) -> np.ndarray:
    """Fraction of each frame's mask mass in the central third of columns.

    NaN marks frames with no mass at all.
    """
    if masks.ndim != 3:
        raise AnalysisError(f"expected (t, h, w) masks, got {masks.shape}")
    w = masks.shape[2]
    c0, c1 = w // 3, w - w // 3
    total = masks.sum(axis=(1, 2))
    center = masks[:, :, c0:c1].sum(axis=(1, 2))
    out = np.full(masks.shape[0], np.nan)
    nz = total > 0
    out[nz] = center[nz] / total[nz]
    return out


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Multiplicative soft mask: dark where the loss never looked."""
    if image.shape[:2] != mask.shape:
        raise AnalysisError(
            f"mask {mask.shape} does not fit image {image.shape}"
        )
    return image * mask[:, :, None]


def write_saliency_frames(
    out_dir, replay: ReplayData, result: SaliencyResult, *, every: int = 1,
) -> list[Path]:
    """Masked observation frames as PPM files, one per sampled step."""
    if every < 1:
        raise AnalysisError("every must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for t in range(0, len(replay), every):
        path = out_dir / f"frame_{t:04d}.ppm"
        write_ppm(path, apply_mask(replay.images[t], result.masks[t]))
        written.append(path)
    return written


def write_saliency_summary(path, result: SaliencyResult) -> None:
    valid = result.central_mass[~np.isnan(result.central_mass)]
    payload = {
        "frames": int(result.masks.shape[0]),
        "zero_frames": list(result.zero_frames),
        "central_third_mass_mean": float(valid.mean()) if valid.size else None,
        "central_third_mass": [
            None if math.isnan(v) else float(v) for v in result.central_mass
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# Top-down trajectory renders
# ---------------------------------------------------------------------------

GOAL_COLOR = "#FF8C00"
TRAIL_COLOR = "#000000"
HEADING_COLOR = "#FF0000"
APPLE_COLOR = "#2E8B57"
_WALL_COLOR = "#303030"
_FLOOR_COLOR = "#FFFFFF"


def _rgb(hex_color: str) -> np.ndarray:
    value = hex_color.lstrip("#")
    return np.array([int(value[i:i + 2], 16) / 255.0 for i in (0, 2, 4)])


def _paint(canvas: np.ndarray, px: float, py: float, color: np.ndarray) -> None:
    """2x2 square at a float pixel position, clipped to the canvas."""
    h, w, _ = canvas.shape
    r, c = int(round(py)), int(round(px))
    for dr in (0, 1):
        for dc in (0, 1):
            if 0 <= r + dr < h and 0 <= c + dc < w:
                canvas[r + dr, c + dc] = color


def _paint_segment(canvas, x0, y0, x1, y1, color) -> None:
    n = max(2, int(math.hypot(x1 - x0, y1 - y0)) + 1)
    for i in range(n):
        f = i / (n - 1)
        _paint(canvas, x0 + f * (x1 - x0), y0 + f * (y1 - y0), color)


def render_topdown(
    maze: Maze,
    records: Sequence[TrajectoryRecord],
    goal: Optional[tuple[int, int]] = None,
    apples: Sequence[tuple[int, int]] = (),
    *,
    pixels_per_block: int = 24,
    block_size: float = BLOCK_SIZE,
) -> np.ndarray:
    """Overhead view: goal block filled orange, apples as green discs,
    the traveled path as a black trail, and a red tick showing the final
    heading. An empty record list renders the bare map."""
    s = pixels_per_block
    h, w = maze.block_height * s, maze.block_width * s
    canvas = np.empty((h, w, 3))
    wall, floor = _rgb(_WALL_COLOR), _rgb(_FLOOR_COLOR)
    for r in range(maze.block_height):
        for c in range(maze.block_width):
            color = floor if maze.blocks[r, c] == FLOOR else wall
            canvas[r * s:(r + 1) * s, c * s:(c + 1) * s] = color
    if goal is not None:
        gr, gc = goal
        canvas[gr * s:(gr + 1) * s, gc * s:(gc + 1) * s] = _rgb(GOAL_COLOR)
    if apples:
        radius = max(2.0, 0.18 * s)
        yy, xx = np.mgrid[0:h, 0:w]
        for ar, ac in apples:
            cy, cx = (ar + 0.5) * s, (ac + 0.5) * s
            disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
            canvas[disc] = _rgb(APPLE_COLOR)

    scale = s / block_size
    trail = _rgb(TRAIL_COLOR)
    pts = [(rec.x * scale, rec.y * scale) for rec in records]
    for i in range(len(pts) - 1):
        if EVENT_RESPAWN in records[i].events:
            continue  # teleport between these two records, not travel
        _paint_segment(canvas, *pts[i], *pts[i + 1], trail)
    if pts:
        _paint(canvas, *pts[0], trail)
        last = records[-1]
        tick = 0.45 * s
        _paint_segment(
            canvas,
            last.x * scale, last.y * scale,
            last.x * scale + tick * math.cos(last.heading),
            last.y * scale + tick * math.sin(last.heading),
            _rgb(HEADING_COLOR),
        )
    return canvas


def write_topdown(
    path,
    maze: Maze,
    records: Sequence[TrajectoryRecord],
    goal: Optional[tuple[int, int]] = None,
    apples: Sequence[tuple[int, int]] = (),
    *,
    pixels_per_block: int = 24,
    block_size: float = BLOCK_SIZE,
) -> None:
    write_ppm(path, render_topdown(
        maze, records, goal, apples,
        pixels_per_block=pixels_per_block, block_size=block_size,
    ))


# ---------------------------------------------------------------------------
# Report plots (hand-assembled SVG + matplotlib PNG companions)
# ---------------------------------------------------------------------------

_SVG_W, _SVG_H = 640, 400
_M_LEFT, _M_RIGHT, _M_TOP, _M_BOTTOM = 70, 20, 42, 52
_CURVE_COLOR = "#1F77B4"
_BAR_COLOR = "#4C78A8"


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:.6g}"


def _expand(lo: float, hi: float) -> tuple[float, float]:
    if lo == hi:
        pad = max(1.0, abs(lo) * 0.05)
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


class _SvgCanvas:
    """Line-by-line SVG assembly with fixed-precision coordinates."""

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.lines = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="#FFFFFF"/>',
        ]

    def line(self, x0, y0, x1, y1, color="#000000", width=1.0):
        self.lines.append(
            f'<line x1="{_fmt(x0)}" y1="{_fmt(y0)}" x2="{_fmt(x1)}" '
            f'y2="{_fmt(y1)}" stroke="{color}" stroke-width="{_fmt(width)}"/>'
        )

    def polyline(self, points, color, width=1.5):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        self.lines.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="{_fmt(width)}"/>'
        )

    def circle(self, x, y, r, color):
        self.lines.append(
            f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r)}" fill="{color}"/>'
        )

    def rect(self, x, y, w, h, color):
        self.lines.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" '
            f'height="{_fmt(h)}" fill="{color}"/>'
        )

    def text(self, x, y, s, *, anchor="middle", size=12):
        self.lines.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" text-anchor="{anchor}" '
            f'font-family="sans-serif" font-size="{size}">{escape(s)}</text>'
        )

    def render(self) -> str:
        return "\n".join(self.lines + ["</svg>"]) + "\n"


def _axes(svg: _SvgCanvas, x_lo, x_hi, y_lo, y_hi, title, xlabel, ylabel,
          *, x_ticks=True):
    """Draw frame, ticks, and labels; return data->pixel mappers."""
    px0, px1 = _M_LEFT, svg.width - _M_RIGHT
    py0, py1 = svg.height - _M_BOTTOM, _M_TOP

    def to_x(v):
        return px0 + (v - x_lo) / (x_hi - x_lo) * (px1 - px0)

    def to_y(v):
        return py0 + (v - y_lo) / (y_hi - y_lo) * (py1 - py0)

    svg.line(px0, py0, px1, py0)
    svg.line(px0, py0, px0, py1)
    if x_ticks:
        for v in np.linspace(x_lo, x_hi, 5):
            x = to_x(v)
            svg.line(x, py0, x, py0 + 4)
            svg.text(x, py0 + 18, _tick_label(float(v)), size=10)
    for v in np.linspace(y_lo, y_hi, 5):
        y = to_y(v)
        svg.line(px0 - 4, y, px0, y)
        svg.text(px0 - 8, y + 3, _tick_label(float(v)), anchor="end", size=10)
    svg.text((px0 + px1) / 2, _M_TOP - 16, title, size=14)
    svg.text((px0 + px1) / 2, svg.height - 12, xlabel, size=11)
    svg.text(14, (py0 + py1) / 2, ylabel, anchor="middle", size=11)
    return to_x, to_y


def read_series_csv(path, x_column: str, y_column: str) -> tuple[list[float], list[float]]:
    """Two numeric columns out of a delimited file, validated row by row."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise AnalysisError(f"{path}: empty file") from None
        for name in (x_column, y_column):
            if name not in header:
                raise AnalysisError(f"{path}: no column named {name!r}")
        xi, yi = header.index(x_column), header.index(y_column)
        xs: list[float] = []
        ys: list[float] = []
        for rowno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise AnalysisError(
                    f"{path}: row {rowno}: expected {len(header)} fields, "
                    f"got {len(row)}"
                )
            try:
                xs.append(float(row[xi]))
                ys.append(float(row[yi]))
            except ValueError as exc:
                raise AnalysisError(f"{path}: row {rowno}: {exc}") from exc
    if not xs:
        raise AnalysisError(f"{path}: no data rows")
    return xs, ys


def plot_curve_svg(
    xs: Sequence[float],
    ys: Sequence[float],
    path,
    *,
    title: str,
    xlabel: str,
    ylabel: str,
) -> None:
    """Polyline plot; a single point renders as a marker."""
    if len(xs) != len(ys) or not xs:
        raise AnalysisError("curve needs equal-length, non-empty series")
    order = sorted(range(len(xs)), key=lambda i: (xs[i], i))
    sx = [xs[i] for i in order]
    sy = [ys[i] for i in order]
    x_lo, x_hi = _expand(min(sx), max(sx))
    y_lo, y_hi = _expand(min(sy), max(sy))
    svg = _SvgCanvas(_SVG_W, _SVG_H)
    to_x, to_y = _axes(svg, x_lo, x_hi, y_lo, y_hi, title, xlabel, ylabel)
    if len(sx) == 1:
        svg.circle(to_x(sx[0]), to_y(sy[0]), 3.5, _CURVE_COLOR)
    else:
        svg.polyline([(to_x(x), to_y(y)) for x, y in zip(sx, sy)], _CURVE_COLOR)
    Path(path).write_text(svg.render())


def plot_bars_svg(
    rows: Sequence[tuple[str, float, Optional[float]]],
    path,
    *,
    title: str,
    ylabel: str,
) -> None:
    """Bar chart with optional std whiskers; bars rise from zero."""
    if not rows:
        raise AnalysisError("bar chart needs at least one row")
    lows = [m - (s or 0.0) for _, m, s in rows]
    highs = [m + (s or 0.0) for _, m, s in rows]
    y_lo, y_hi = _expand(min(0.0, min(lows)), max(0.0, max(highs)))
    svg = _SvgCanvas(_SVG_W, _SVG_H)
    to_x, to_y = _axes(svg, 0.0, float(len(rows)), y_lo, y_hi, title, "",
                       ylabel, x_ticks=False)
    base = to_y(0.0)
    for i, (label, mean, std) in enumerate(rows):
        center = to_x(i + 0.5)
        half = (to_x(0.8) - to_x(0.2)) / 2.0
        top = to_y(mean)
        svg.rect(center - half, min(top, base), 2 * half, abs(base - top),
                 _BAR_COLOR)
        if std is not None and std > 0.0:
            svg.line(center, to_y(mean - std), center, to_y(mean + std),
                     width=1.5)
            for v in (mean - std, mean + std):
                svg.line(center - half * 0.4, to_y(v), center + half * 0.4,
                         to_y(v), width=1.5)
        svg.text(center, svg.height - _M_BOTTOM + 18, label, size=10)
    Path(path).write_text(svg.render())


def _companion_png(path, draw: Callable) -> None:
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    fig, axis = plt.subplots(figsize=(6.4, 4.0), dpi=100)
    try:
        draw(axis)
        fig.tight_layout()
        fig.savefig(path)
    finally:
        plt.close(fig)


def plot_reward_curve(
    csv_path,
    out_svg,
    *,
    x_column: str = "env_steps",
    y_column: str = "episode_reward",
    title: str = "episode reward over training",
    png: bool = True,
) -> list[Path]:
    """Reward-vs-steps curve from a training progress file."""
    xs, ys = read_series_csv(csv_path, x_column, y_column)
    out_svg = Path(out_svg)
    plot_curve_svg(xs, ys, out_svg, title=title, xlabel=x_column,
                   ylabel=y_column)
    written = [out_svg]
    if png:
        out_png = out_svg.with_suffix(".png")

        def draw(axis):
            order = sorted(range(len(xs)), key=lambda i: (xs[i], i))
            axis.plot([xs[i] for i in order], [ys[i] for i in order],
                      color=_CURVE_COLOR, marker="." if len(xs) == 1 else None)
            axis.set_title(title)
            axis.set_xlabel(x_column)
            axis.set_ylabel(y_column)

        _companion_png(out_png, draw)
        written.append(out_png)
    return written


def plot_stage_bars(
    rows: Sequence[tuple[str, float, Optional[float]]],
    out_svg,
    *,
    title: str = "reward by stage",
    ylabel: str = "mean episode reward",
    png: bool = True,
) -> list[Path]:
    """Per-stage bar chart with std whiskers."""
    out_svg = Path(out_svg)
    plot_bars_svg(rows, out_svg, title=title, ylabel=ylabel)
    written = [out_svg]
    if png:
        out_png = out_svg.with_suffix(".png")

        def draw(axis):
            labels = [r[0] for r in rows]
            means = [r[1] for r in rows]
            stds = [r[2] or 0.0 for r in rows]
            axis.bar(labels, means, yerr=stds, color=_BAR_COLOR, capsize=4)
            axis.set_title(title)
            axis.set_ylabel(ylabel)

        _companion_png(out_png, draw)
        written.append(out_png)
    return written


def emit_plots(
    out_dir,
    *,
    progress_csv=None,
    stage_rows: Optional[Sequence[tuple[str, float, Optional[float]]]] = None,
    png: bool = True,
) -> list[Path]:
    """Render the report figures that apply to the inputs at hand."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if progress_csv is not None:
        written += plot_reward_curve(progress_csv, out_dir / "reward_curve.svg",
                                     png=png)
    if stage_rows is not None:
        written += plot_stage_bars(stage_rows, out_dir / "stage_reward.svg",
                                   png=png)
    return written
