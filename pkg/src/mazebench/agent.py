"""Recurrent actor-critic network with auxiliary prediction heads.

The network maps a first-person RGB frame through two conv layers to a
flat feature vector, then through a stack of two LSTMs. The first LSTM
sees the visual features plus the previous reward; the second sees the
first LSTM's output, the visual features again (skip connection), and
the previous action one-hot. The policy and value heads read the second
LSTM; bucketed-depth heads read each LSTM; a loop-closure logit reads
the second.

Parameters live in a flat ``{name: array}`` dict so the trainer can
share, snapshot, and serialize them without touching this module's
internals. ``forward`` builds the graph from ``autodiff`` primitives;
run it under a ``Tape`` to get gradients, or without one for fast
evaluation while acting.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .seeding import rng_from

CHECKPOINT_MAGIC = b"MZBENCH-CKPT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Raised when a checkpoint file is malformed or mismatched."""


@dataclass(frozen=True)
class AgentConfig:
    """Network dimensions. Defaults are the small desk-scale setup;
    ``full_scale`` returns the large configuration."""

    obs_height: int = 42
    obs_width: int = 42
    obs_channels: int = 3
    conv1_filters: int = 16
    conv1_kernel: int = 8
    conv1_stride: int = 4
    conv2_filters: int = 32
    conv2_kernel: int = 4
    conv2_stride: int = 2
    lstm1_size: int = 64
    lstm2_size: int = 32
    action_count: int = 4
    depth_groups: int = 4
    depth_buckets: int = 8

    @staticmethod
    def full_scale() -> "AgentConfig":
        return AgentConfig(obs_height=84, obs_width=84, lstm1_size=256, lstm2_size=64)

    def conv_out_hw(self) -> tuple[int, int]:
        h = (self.obs_height - self.conv1_kernel) // self.conv1_stride + 1
        w = (self.obs_width - self.conv1_kernel) // self.conv1_stride + 1
        h = (h - self.conv2_kernel) // self.conv2_stride + 1
        w = (w - self.conv2_kernel) // self.conv2_stride + 1
        return h, w

    def flat_size(self) -> int:
        h, w = self.conv_out_hw()
        return h * w * self.conv2_filters

    def validate(self) -> None:
        if self.obs_height < 20 or self.obs_width < 20:
            raise ValueError("observation must be at least 20x20")
        for field in dataclasses.fields(self):
            if getattr(self, field.name) <= 0:
                raise ValueError(f"{field.name} must be positive")
        h, w = self.conv_out_hw()
        if h < 1 or w < 1:
            raise ValueError("conv stack collapses the observation to nothing")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parameter_shapes(config: AgentConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of every learnable tensor, keyed by name."""
    c = config
    flat = c.flat_size()
    in1 = flat + 1  # + previous reward
    in2 = c.lstm1_size + flat + c.action_count
    depth_out = c.depth_groups * c.depth_buckets
    return {
        "conv1/w": (c.conv1_kernel, c.conv1_kernel, c.obs_channels, c.conv1_filters),
        "conv1/b": (c.conv1_filters,),
        "conv2/w": (c.conv2_kernel, c.conv2_kernel, c.conv1_filters, c.conv2_filters),
        "conv2/b": (c.conv2_filters,),
        "lstm1/w": (in1 + c.lstm1_size, 4 * c.lstm1_size),
        "lstm1/b": (4 * c.lstm1_size,),
        "lstm2/w": (in2 + c.lstm2_size, 4 * c.lstm2_size),
        "lstm2/b": (4 * c.lstm2_size,),
        "pi/w": (c.lstm2_size, c.action_count),
        "pi/b": (c.action_count,),
        "v/w": (c.lstm2_size, 1),
        "v/b": (1,),
        "d1/w": (c.lstm1_size, depth_out),
        "d1/b": (depth_out,),
        "d2/w": (c.lstm2_size, depth_out),
        "d2/b": (depth_out,),
        "lc/w": (c.lstm2_size, 1),
        "lc/b": (1,),
    }


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("conv"):
        return shape[0] * shape[1] * shape[2]
    return shape[0]


def init_params(config: AgentConfig, seed: int) -> dict[str, np.ndarray]:
    """Fan-in-uniform weights, zero biases, forget-gate biases at +1."""
    config.validate()
    rng = rng_from("agent-init", seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("/b"):
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape))
            params[name] = rng.uniform(-bound, bound, size=shape)
    for key, hidden in (("lstm1/b", config.lstm1_size), ("lstm2/b", config.lstm2_size)):
        params[key][hidden : 2 * hidden] = 1.0
    return params


@dataclass
class RecurrentState:
    """Detached (numpy) LSTM state carried between rollout windows."""

    h1: np.ndarray
    c1: np.ndarray
    h2: np.ndarray
    c2: np.ndarray

    @staticmethod
    def zeros(config: AgentConfig) -> "RecurrentState":
        return RecurrentState(
            h1=np.zeros(config.lstm1_size),
            c1=np.zeros(config.lstm1_size),
            h2=np.zeros(config.lstm2_size),
            c2=np.zeros(config.lstm2_size),
        )

    def to_vars(self) -> "StateVars":
        return StateVars(
            h1=ad.constant(self.h1),
            c1=ad.constant(self.c1),
            h2=ad.constant(self.h2),
            c2=ad.constant(self.c2),
        )

    def copy(self) -> "RecurrentState":
        return RecurrentState(self.h1.copy(), self.c1.copy(), self.h2.copy(), self.c2.copy())


@dataclass
class StateVars:
    """Graph-linked LSTM state; gradients flow through it within a window."""

    h1: ad.Var
    c1: ad.Var
    h2: ad.Var
    c2: ad.Var

    def detach(self) -> RecurrentState:
        return RecurrentState(
            h1=self.h1.value.copy(),
            c1=self.c1.value.copy(),
            h2=self.h2.value.copy(),
            c2=self.c2.value.copy(),
        )


@dataclass
class ForwardOut:
    """One step's heads plus the state to carry into the next step."""

    policy: ad.Var  # (action_count,) simplex
    value: ad.Var  # (1,)
    depth1: ad.Var  # (groups, buckets) logits from the first LSTM
    depth2: ad.Var  # (groups, buckets) logits from the second LSTM
    loop: ad.Var  # (1,) logit
    state: StateVars
    image: ad.Var  # the input node; holds grads when image_grad=True


def forward(
    params: dict[str, ad.Var],
    image: Union[np.ndarray, ad.Var],
    prev_action: int,
    prev_reward: float,
    state: StateVars,
    config: AgentConfig,
    *,
    image_grad: bool = False,
) -> ForwardOut:
    """One decision step. ``prev_action`` of -1 means "no action yet"
    and feeds an all-zero one-hot."""
    if isinstance(image, ad.Var):
        img = image
    else:
        img = ad.Var(image, requires_grad=image_grad)
    c1 = ad.relu(ad.bias_add(ad.conv2d(img, params["conv1/w"], config.conv1_stride),
                             params["conv1/b"]))
    c2 = ad.relu(ad.bias_add(ad.conv2d(c1, params["conv2/w"], config.conv2_stride),
                             params["conv2/b"]))
    flat = ad.reshape(c2, (config.flat_size(),))

    x1 = ad.concat([flat, ad.constant(np.array([float(prev_reward)]))])
    h1, c1s = ad.lstm_cell(x1, state.h1, state.c1, params["lstm1/w"], params["lstm1/b"])

    onehot = np.zeros(config.action_count)
    if prev_action >= 0:
        if prev_action >= config.action_count:
            raise ValueError(f"prev_action {prev_action} out of range")
        onehot[prev_action] = 1.0
    x2 = ad.concat([h1, flat, ad.constant(onehot)])
    h2, c2s = ad.lstm_cell(x2, state.h2, state.c2, params["lstm2/w"], params["lstm2/b"])

    policy = ad.softmax(ad.bias_add(ad.matmul(h2, params["pi/w"]), params["pi/b"]))
    value = ad.bias_add(ad.matmul(h2, params["v/w"]), params["v/b"])
    shape = (config.depth_groups, config.depth_buckets)
    depth1 = ad.reshape(ad.bias_add(ad.matmul(h1, params["d1/w"]), params["d1/b"]), shape)
    depth2 = ad.reshape(ad.bias_add(ad.matmul(h2, params["d2/w"]), params["d2/b"]), shape)
    loop = ad.bias_add(ad.matmul(h2, params["lc/w"]), params["lc/b"])

    return ForwardOut(
        policy=policy,
        value=value,
        depth1=depth1,
        depth2=depth2,
        loop=loop,
        state=StateVars(h1=h1, c1=c1s, h2=h2, c2=c2s),
        image=img,
    )


def wrap_params(
    values: dict[str, np.ndarray], requires_grad: bool
) -> dict[str, ad.Var]:
    return {
        name: (ad.parameter(v) if requires_grad else ad.constant(v))
        for name, v in values.items()
    }


def sample_action(policy: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> int:
    """Draw an action index from a probability vector (or take the mode)."""
    p = np.asarray(policy, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("policy must be a vector")
    if np.any(p < -1e-9) or abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError("policy is not a probability distribution")
    if greedy:
        return int(np.argmax(p))
    p = np.maximum(p, 0.0)
    p = p / p.sum()
    return int(rng.choice(p.size, p=p))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path,
    params: dict[str, np.ndarray],
    config: AgentConfig,
    meta: Optional[dict] = None,
) -> None:
    """Binary checkpoint: magic, JSON header, then raw little-endian
    float64 tensors in name-sorted order."""
    names = sorted(params)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], AgentConfig, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        params: dict[str, np.ndarray] = {}
        for spec_ in header["tensors"]:
            shape = tuple(spec_["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"{path}: truncated tensor {spec_['name']}")
            params[spec_["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensors")
    config = AgentConfig(**header["config"])
    expected = parameter_shapes(config)
    got = {n: p.shape for n, p in params.items()}
    want = {n: tuple(s) for n, s in expected.items()}
    if got != want:
        raise CheckpointError(f"{path}: tensor shapes do not match the config")
    return params, config, header["meta"]
