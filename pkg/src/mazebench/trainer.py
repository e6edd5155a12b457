"""Asynchronous advantage actor-critic training with auxiliary losses.

Several worker threads act in their own environment instances, each
replaying its latest rollout window through the network under a tape to
get gradients, then applying them to a shared parameter store under a
lock (Hogwild-style: other workers may act on slightly stale
snapshots). The rollout loss lives in :func:`rollout_loss`, which the
saliency analysis reuses unchanged so gradients seen offline go through
the exact code path used in training.

A rollout window covers at most ``t_max`` environment steps. Returns
are discounted sums bootstrapped with the critic's value of the next
observation unless the episode ended inside the window. The advantage
entering the policy term is detached; the value head trains on squared
return error; the entropy of the policy, the two bucketed-depth heads,
and the loop-closure head contribute weighted auxiliary terms.
"""

from __future__ import annotations

import csv
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import agent as agent_mod
from . import autodiff as ad
from .agent import AgentConfig, RecurrentState
from .seeding import derive_seed, rng_from
from .world import EVENT_GOAL, Environment

_log = logging.getLogger(__name__)

CSV_COLUMNS = [
    "env_steps",
    "updates",
    "worker",
    "episode_index",
    "episode_reward",
    "episode_len",
    "goal_hits",
    "loss_total",
    "loss_policy",
    "loss_value",
    "loss_entropy",
    "loss_depth1",
    "loss_depth2",
    "loss_loop",
    "grad_norm",
    "wall_time_s",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. Loss weights multiply their terms; the
    entropy term is subtracted (it is a bonus)."""

    workers: int = 4
    t_max: int = 20
    gamma: float = 0.99
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    value_weight: float = 0.5
    entropy_weight: float = 0.01
    depth1_weight: float = 0.33
    depth2_weight: float = 0.33
    loop_weight: float = 0.33
    grad_clip: float = 40.0
    optimizer: str = "adam"
    max_env_steps: int = 100_000
    checkpoint_every_updates: int = 0  # 0 disables periodic checkpoints

    def validate(self) -> None:
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.lr <= 0.0 or self.grad_clip <= 0.0:
            raise ValueError("lr and grad_clip must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("value_weight", "entropy_weight", "depth1_weight",
                     "depth2_weight", "loop_weight"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if self.max_env_steps < 1:
            raise ValueError("max_env_steps must be >= 1")


def discounted_returns(
    rewards: list[float], bootstrap: float, gamma: float, done: bool
) -> list[float]:
    """Backward-accumulated discounted returns for one window."""
    acc = 0.0 if done else float(bootstrap)
    out = [0.0] * len(rewards)
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class Rollout:
    """Everything needed to replay a window through the network."""

    start_state: RecurrentState
    images: list[np.ndarray] = field(default_factory=list)
    prev_actions: list[int] = field(default_factory=list)
    prev_rewards: list[float] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    depth_targets: list[np.ndarray] = field(default_factory=list)
    loop_labels: list[int] = field(default_factory=list)
    bootstrap_value: float = 0.0
    done: bool = False

    def __len__(self) -> int:
        return len(self.actions)


def rollout_loss(
    params: dict[str, ad.Var],
    rollout: Rollout,
    agent_config: AgentConfig,
    train_config: TrainConfig,
    *,
    image_grad: bool = False,
) -> tuple[ad.Var, dict[str, float], list[ad.Var]]:
    """Replay a window and assemble the full training loss.

    Returns the scalar loss node, the unweighted term values for
    logging, and the per-step image nodes (which carry gradients after
    backward when ``image_grad`` is set).
    """
    state = rollout.start_state.to_vars()
    policies, values, d1s, d2s, loops, images = [], [], [], [], [], []
    for t in range(len(rollout)):
        out = agent_mod.forward(
            params,
            rollout.images[t],
            rollout.prev_actions[t],
            rollout.prev_rewards[t],
            state,
            agent_config,
            image_grad=image_grad,
        )
        state = out.state
        policies.append(out.policy)
        values.append(out.value)
        d1s.append(out.depth1)
        d2s.append(out.depth2)
        loops.append(out.loop)
        images.append(out.image)

    returns = discounted_returns(
        rollout.rewards, rollout.bootstrap_value, train_config.gamma, rollout.done
    )
    advantages = [r - float(v.value[0]) for r, v in zip(returns, values)]

    pg = ad.policy_gradient_term(policies, rollout.actions, advantages)
    vmse = ad.value_mse(values, returns)
    ent = ad.entropy_bonus(policies)
    d1 = ad.depth_ce(d1s, rollout.depth_targets)
    d2 = ad.depth_ce(d2s, rollout.depth_targets)
    lc = ad.loop_ce(loops, rollout.loop_labels)

    loss = pg
    loss = ad.add(loss, ad.mul(vmse, train_config.value_weight))
    loss = ad.add(loss, ad.mul(ent, -train_config.entropy_weight))
    loss = ad.add(loss, ad.mul(d1, train_config.depth1_weight))
    loss = ad.add(loss, ad.mul(d2, train_config.depth2_weight))
    loss = ad.add(loss, ad.mul(lc, train_config.loop_weight))

    parts = {
        "loss_total": float(loss.value),
        "loss_policy": float(pg.value),
        "loss_value": float(vmse.value),
        "loss_entropy": float(ent.value),
        "loss_depth1": float(d1.value),
        "loss_depth2": float(d2.value),
        "loss_loop": float(lc.value),
    }
    return loss, parts, images


def collect_gradients(
    params: dict[str, ad.Var], clip: float
) -> tuple[dict[str, np.ndarray], float]:
    """Gather grads (zeros where a tensor got none) and clip by global norm."""
    grads: dict[str, np.ndarray] = {}
    sq = 0.0
    for name, var in params.items():
        g = var.grad if var.grad is not None else np.zeros_like(var.value)
        grads[name] = g
        sq += float((g * g).sum())
    norm = float(np.sqrt(sq))
    if norm > clip:
        scale = clip / norm
        for g in grads.values():
            g *= scale
    return grads, norm


class SharedStore:
    """Parameter server shared by worker threads.

    ``apply`` performs one optimizer step under the lock; ``snapshot``
    returns a consistent copy for acting/replay.
    """

    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig):
        config.validate()
        self.lock = threading.Lock()
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.updates = 0
        self.env_steps = 0
        self.episodes = 0

    def snapshot(self) -> dict[str, np.ndarray]:
        with self.lock:
            return {k: v.copy() for k, v in self.params.items()}

    def add_env_steps(self, n: int) -> None:
        with self.lock:
            self.env_steps += n

    def apply(self, grads: dict[str, np.ndarray]) -> int:
        """One optimizer step; returns the update counter afterwards."""
        cfg = self.config
        with self.lock:
            self.updates += 1
            t = self.updates
            if cfg.optimizer == "adam":
                b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
                bc1 = 1.0 - b1 ** t
                bc2 = 1.0 - b2 ** t
                for k, g in grads.items():
                    m = self.m[k]
                    v = self.v[k]
                    m *= b1
                    m += (1.0 - b1) * g
                    v *= b2
                    v += (1.0 - b2) * g * g
                    self.params[k] -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
            else:
                for k, g in grads.items():
                    self.params[k] -= cfg.lr * g
            return self.updates


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    env_steps: int
    updates: int
    episodes: int
    csv_path: Optional[Path]
    checkpoint_path: Optional[Path]


def _worker_loop(
    worker_id: int,
    store: SharedStore,
    env_factory: Callable[[int, int], Environment],
    agent_config: AgentConfig,
    seed: int,
    stop: threading.Event,
    rows: "queue.Queue",
    errors: list,
    t0: float,
    run_dir: Optional[Path],
) -> None:
    cfg = store.config
    try:
        act_rng = rng_from("act", seed, worker_id)
        episode_index = 0
        env = env_factory(worker_id, episode_index)
        obs = env.reset()
        state = RecurrentState.zeros(agent_config)
        ep_reward = 0.0
        ep_len = 0
        ep_goal_hits = 0
        last_parts: dict[str, float] = {}
        last_norm = 0.0

        while not stop.is_set() and store.env_steps < cfg.max_env_steps:
            snapshot = store.snapshot()
            const_params = agent_mod.wrap_params(snapshot, requires_grad=False)
            rollout = Rollout(start_state=state.copy())
            state_vars = state.to_vars()

            for _ in range(cfg.t_max):
                fwd = agent_mod.forward(
                    const_params, obs.image, obs.prev_action, obs.prev_reward,
                    state_vars, agent_config,
                )
                state_vars = fwd.state
                action = agent_mod.sample_action(fwd.policy.value, act_rng)
                rollout.images.append(obs.image)
                rollout.prev_actions.append(obs.prev_action)
                rollout.prev_rewards.append(obs.prev_reward)
                rollout.depth_targets.append(env.depth_targets(agent_config.depth_groups))
                rollout.loop_labels.append(env.loop_label())
                rollout.actions.append(action)

                res = env.step(action)
                rollout.rewards.append(res.reward)
                ep_reward += res.reward
                ep_len += 1
                if EVENT_GOAL in res.events:
                    ep_goal_hits += 1
                if res.done:
                    rollout.done = True
                    break
                obs = env.observe()

            if not rollout.done:
                obs = env.observe()
                tail = agent_mod.forward(
                    const_params, obs.image, obs.prev_action, obs.prev_reward,
                    state_vars, agent_config,
                )
                rollout.bootstrap_value = float(tail.value.value[0])
            state = state_vars.detach()

            grad_params = agent_mod.wrap_params(snapshot, requires_grad=True)
            with ad.Tape() as tape:
                loss, parts, _ = rollout_loss(grad_params, rollout, agent_config, cfg)
                tape.backward(loss)
            grads, norm = collect_gradients(grad_params, cfg.grad_clip)

            store.add_env_steps(len(rollout))
            if all(np.all(np.isfinite(g)) for g in grads.values()):
                updates = store.apply(grads)
                last_parts, last_norm = parts, norm
                if (
                    run_dir is not None
                    and cfg.checkpoint_every_updates > 0
                    and updates % cfg.checkpoint_every_updates == 0
                ):
                    snap = store.snapshot()
                    agent_mod.save_checkpoint(
                        run_dir / f"ckpt_{updates:08d}.ckpt", snap, agent_config,
                        {"env_steps": store.env_steps, "updates": updates},
                    )
            else:
                _log.warning("worker %d: skipped update with non-finite gradients",
                             worker_id)

            if rollout.done:
                with store.lock:
                    store.episodes += 1
                row = {
                    "env_steps": store.env_steps,
                    "updates": store.updates,
                    "worker": worker_id,
                    "episode_index": episode_index,
                    "episode_reward": ep_reward,
                    "episode_len": ep_len,
                    "goal_hits": ep_goal_hits,
                    "grad_norm": last_norm,
                    "wall_time_s": time.monotonic() - t0,
                }
                for k in ("loss_total", "loss_policy", "loss_value", "loss_entropy",
                          "loss_depth1", "loss_depth2", "loss_loop"):
                    row[k] = last_parts.get(k, float("nan"))
                rows.put(row)
                episode_index += 1
                env = env_factory(worker_id, episode_index)
                obs = env.reset()
                state = RecurrentState.zeros(agent_config)
                ep_reward, ep_len, ep_goal_hits = 0.0, 0, 0
    except Exception as exc:  # propagate to the main thread
        errors.append((worker_id, exc))
        stop.set()


def train(
    env_factory: Callable[[int, int], Environment],
    agent_config: AgentConfig,
    train_config: TrainConfig,
    seed: int,
    out_dir: Optional[Path] = None,
    initial_params: Optional[dict[str, np.ndarray]] = None,
    probe: Optional[Callable[[SharedStore], bool]] = None,
    probe_interval_s: float = 0.5,
) -> TrainResult:
    """Run asynchronous training until the step budget, an early-stop
    probe, or a worker error ends it.

    ``env_factory(worker_id, episode_index)`` must build a fresh,
    unreset environment for each episode. Episode summaries stream to
    ``progress.csv`` under ``out_dir`` when given; the final parameters
    land in ``final.ckpt`` there too.
    """
    agent_config.validate()
    train_config.validate()
    if initial_params is None:
        initial_params = agent_mod.init_params(agent_config, derive_seed(seed, "init"))
    store = SharedStore(initial_params, train_config)

    run_dir: Optional[Path] = None
    csv_path: Optional[Path] = None
    csv_file = None
    writer = None
    if out_dir is not None:
        run_dir = Path(out_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        csv_path = run_dir / "progress.csv"
        csv_file = open(csv_path, "w", newline="")
        writer = csv.DictWriter(csv_file, fieldnames=CSV_COLUMNS)
        writer.writeheader()

    stop = threading.Event()
    rows: "queue.Queue" = queue.Queue()
    errors: list = []
    t0 = time.monotonic()
    threads = [
        threading.Thread(
            target=_worker_loop,
            args=(w, store, env_factory, agent_config, seed, stop, rows, errors,
                  t0, run_dir),
            name=f"worker-{w}",
            daemon=True,
        )
        for w in range(train_config.workers)
    ]
    for t in threads:
        t.start()

    next_probe = t0
    try:
        while any(t.is_alive() for t in threads):
            try:
                row = rows.get(timeout=0.05)
                if writer is not None:
                    writer.writerow(row)
                    csv_file.flush()
            except queue.Empty:
                pass
            now = time.monotonic()
            if probe is not None and now >= next_probe and not stop.is_set():
                next_probe = now + probe_interval_s
                if probe(store):
                    stop.set()
            if store.env_steps >= train_config.max_env_steps:
                stop.set()
    finally:
        stop.set()
        for t in threads:
            t.join()
        while True:
            try:
                row = rows.get_nowait()
            except queue.Empty:
                break
            if writer is not None:
                writer.writerow(row)
        if csv_file is not None:
            csv_file.close()

    if errors:
        worker_id, exc = errors[0]
        raise RuntimeError(f"training worker {worker_id} failed: {exc}") from exc

    params = store.snapshot()
    checkpoint_path: Optional[Path] = None
    if run_dir is not None:
        checkpoint_path = run_dir / "final.ckpt"
        agent_mod.save_checkpoint(
            checkpoint_path, params, agent_config,
            {"env_steps": store.env_steps, "updates": store.updates},
        )
    return TrainResult(
        params=params,
        env_steps=store.env_steps,
        updates=store.updates,
        episodes=store.episodes,
        csv_path=csv_path,
        checkpoint_path=checkpoint_path,
    )
