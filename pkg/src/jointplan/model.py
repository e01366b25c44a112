"""World models behind one planning interface.

Two implementations: an exact tabular model wrapping ground-truth dynamics
(for oracles and ablations) and a learned differentiable model composed of
six shared-parameter functions: per-agent representation, attention-based
communication, residual per-agent dynamics, and centralized reward/value
plus decentralized policy heads.

Also home to the invertible scalar transform and the categorical-support
encoding used by the reward and value heads.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Hashable, Protocol

import numpy as np

from jointplan.autodiff import Tensor, concatenate, layer_norm, log_softmax, softmax
from jointplan.core import JointAction, RngStream, ShapeMismatchError

# ---------------------------------------------------------------------------
# scalar transform and categorical support
# ---------------------------------------------------------------------------

_EPS = 0.001


def value_transform(x):
    """Signed square-root compression with a small linear tail."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * (np.sqrt(np.abs(x) + 1.0) - 1.0) + _EPS * x


def value_transform_inv(y):
    """Closed-form inverse of :func:`value_transform`."""
    y = np.asarray(y, dtype=np.float64)
    a = np.abs(y)
    root = (np.sqrt(1.0 + 4.0 * _EPS * (a + 1.0 + _EPS)) - 1.0) / (2.0 * _EPS)
    return np.sign(y) * (root * root - 1.0)


@dataclass(frozen=True)
class Support:
    """Evenly spaced categorical support for scalar predictions."""

    num_bins: int = 10
    vmin: float = -5.0
    vmax: float = 5.0

    def centers(self) -> np.ndarray:
        return np.linspace(self.vmin, self.vmax, self.num_bins)


def scalar_to_support(x, support: Support) -> np.ndarray:
    """Two-hot weights over bin centers; expectation reproduces clamped x."""
    x = np.clip(np.asarray(x, dtype=np.float64), support.vmin, support.vmax)
    scalars = np.atleast_1d(x)
    step = (support.vmax - support.vmin) / (support.num_bins - 1)
    pos = (scalars - support.vmin) / step
    low = np.clip(np.floor(pos).astype(int), 0, support.num_bins - 2)
    frac = pos - low
    weights = np.zeros(scalars.shape + (support.num_bins,))
    idx = np.indices(scalars.shape)
    weights[(*idx, low)] = 1.0 - frac
    weights[(*idx, low + 1)] = frac
    return weights if np.ndim(x) else weights[0]


def support_to_scalar(weights, support: Support):
    w = np.asarray(weights, dtype=np.float64)
    return w @ support.centers()


def encode_target(x_raw, support: Support) -> np.ndarray:
    """Raw scalar -> transformed -> two-hot weights (training targets)."""
    return scalar_to_support(value_transform(x_raw), support)


def decode_logits(logits: np.ndarray, support: Support):
    """Support logits -> softmax expectation -> raw scalar."""
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return value_transform_inv(support_to_scalar(p, support))


# ---------------------------------------------------------------------------
# observation history
# ---------------------------------------------------------------------------

OBS_STACK = 4


class ObservationHistory:
    """Per-agent stacks of the last four local observations, zero-padded."""

    def __init__(self, n_agents: int, obs_len: int):
        self.n_agents = n_agents
        self.obs_len = obs_len
        self._frames: list[deque] = [
            deque(maxlen=OBS_STACK) for _ in range(n_agents)
        ]

    def reset(self, observations) -> None:
        for frames in self._frames:
            frames.clear()
        self.push(observations)

    def push(self, observations) -> None:
        if len(observations) != self.n_agents:
            raise ShapeMismatchError(
                f"expected {self.n_agents} observations, got {len(observations)}"
            )
        for frames, obs in zip(self._frames, observations):
            obs = np.asarray(obs, dtype=np.float64)
            if obs.shape != (self.obs_len,):
                raise ShapeMismatchError(
                    f"observation shape {obs.shape}, expected ({self.obs_len},)"
                )
            frames.append(obs)

    def stacked(self) -> np.ndarray:
        """(n_agents, 4*obs_len): oldest frame first, zeros before episode start."""
        out = np.zeros((self.n_agents, OBS_STACK * self.obs_len))
        for i, frames in enumerate(self._frames):
            for j, obs in enumerate(frames):
                offset = (OBS_STACK - len(frames) + j) * self.obs_len
                out[i, offset : offset + self.obs_len] = obs
        return out

    @staticmethod
    def stacked_dim(obs_len: int) -> int:
        return OBS_STACK * obs_len


def stack_episode_observations(per_step_obs: list, n_agents: int, obs_len: int) -> list[np.ndarray]:
    """Stacked view of every step of an episode's raw observations."""
    hist = ObservationHistory(n_agents, obs_len)
    out = []
    for t, obs in enumerate(per_step_obs):
        if t == 0:
            hist.reset(obs)
        else:
            hist.push(obs)
        out.append(hist.stacked())
    return out


# ---------------------------------------------------------------------------
# planning interface
# ---------------------------------------------------------------------------


class PlanningModel(Protocol):
    """What tree search needs from a model."""

    n_agents: int
    action_dims: tuple[int, ...]

    def initial_state(self, obs): ...

    def predict(self, state) -> tuple[float, tuple[np.ndarray, ...]]:
        """Value of the state and one action distribution per agent."""
        ...

    def step(self, state, action: JointAction) -> tuple[object, float]:
        """Next state and predicted team reward."""
        ...


class TabularModel:
    """Exact model for small problems: ground-truth transitions, pluggable
    value table and prior policy so search can be tested in isolation."""

    def __init__(
        self,
        n_agents: int,
        action_dims: tuple[int, ...],
        transition: Callable[[Hashable, JointAction], tuple[Hashable, float]],
        value_fn: Callable[[Hashable], float] | None = None,
        policy_fn: Callable[[Hashable], tuple[np.ndarray, ...]] | None = None,
    ):
        self.n_agents = n_agents
        self.action_dims = tuple(action_dims)
        self._transition = transition
        self._value_fn = value_fn or (lambda s: 0.0)
        self._policy_fn = policy_fn or (
            lambda s: tuple(np.full(d, 1.0 / d) for d in self.action_dims)
        )

    def initial_state(self, obs):
        # observation is the ground-truth state token; identity representation
        return obs

    def predict(self, state):
        return float(self._value_fn(state)), self._policy_fn(state)

    def step(self, state, action: JointAction):
        nxt, reward = self._transition(state, action)
        return nxt, float(reward)


# ---------------------------------------------------------------------------
# learned model
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    n_agents: int
    obs_dim: int  # stacked per-agent feature length
    action_dims: tuple[int, ...]
    latent_dim: int = 128
    trunk_hidden: tuple[int, ...] = (128, 128)
    head_hidden: tuple[int, ...] = (32,)
    attention_layers: int = 1
    positional_encoding: bool = True
    categorical: bool = True  # False: scalar reward/value heads, raw MSE training
    support: Support = field(default_factory=Support)

    @property
    def max_action_dim(self) -> int:
        return max(self.action_dims)

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["action_dims"] = list(self.action_dims)
        d["trunk_hidden"] = list(self.trunk_hidden)
        d["head_hidden"] = list(self.head_hidden)
        d["support"] = [self.support.num_bins, self.support.vmin, self.support.vmax]
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        d = json.loads(text)
        bins, vmin, vmax = d.pop("support")
        return ModelConfig(
            support=Support(int(bins), float(vmin), float(vmax)),
            **{
                k: tuple(v) if k in ("action_dims", "trunk_hidden", "head_hidden") else v
                for k, v in d.items()
            },
        )


def sinusoidal_encoding(n_positions: int, dim: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def _one_hot(actions: np.ndarray, dim: int) -> np.ndarray:
    """actions (..., ) int -> (..., dim) float64."""
    actions = np.asarray(actions)
    out = np.zeros(actions.shape + (dim,))
    np.put_along_axis(out, actions[..., None], 1.0, axis=-1)
    return out


class _MLP:
    """Linear/ReLU/LayerNorm hidden blocks, plain linear output."""

    def __init__(self, name: str, in_dim: int, hidden: tuple[int, ...], out_dim: int):
        self.name = name
        self.dims = [in_dim, *hidden, out_dim]
        self.n_hidden = len(hidden)

    def param_specs(self):
        for li in range(len(self.dims) - 1):
            d_in, d_out = self.dims[li], self.dims[li + 1]
            yield f"{self.name}.{li}.w", (d_in, d_out), d_in
            yield f"{self.name}.{li}.b", (d_out,), d_in
            if li < self.n_hidden:
                yield f"{self.name}.{li}.ln_g", (d_out,), None
                yield f"{self.name}.{li}.ln_b", (d_out,), None

    def __call__(self, params: dict[str, Tensor], x: Tensor) -> Tensor:
        for li in range(len(self.dims) - 1):
            x = x @ params[f"{self.name}.{li}.w"] + params[f"{self.name}.{li}.b"]
            if li < self.n_hidden:
                x = layer_norm(
                    x.relu(),
                    params[f"{self.name}.{li}.ln_g"],
                    params[f"{self.name}.{li}.ln_b"],
                )
        return x


class NanGradientError(RuntimeError):
    """A parameter gradient went non-finite; names the model block."""

    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in model block {block!r}")
        self.block = block


class LearnedModel:
    """Differentiable six-function model with parameters shared across agents.

    Tensor-suffixed methods build the gradient tape for training; the
    :class:`PlanningModel` methods run the same code for search without
    gradient tracking.
    """

    def __init__(self, config: ModelConfig, rng: RngStream | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.n_agents = config.n_agents
        self.action_dims = tuple(config.action_dims)
        self.version = 0

        c = config
        out_bins = c.support.num_bins if c.categorical else 1
        self._repr = _MLP("repr", c.obs_dim, c.trunk_hidden, c.latent_dim)
        self._dyn = _MLP(
            "dyn", c.latent_dim + c.max_action_dim + c.latent_dim, c.trunk_hidden, c.latent_dim
        )
        self._reward = _MLP(
            "reward",
            c.n_agents * (c.latent_dim + c.max_action_dim),
            c.head_hidden,
            out_bins,
        )
        self._value = _MLP("value", c.n_agents * c.latent_dim, c.head_hidden, out_bins)
        self._policy = _MLP("policy", c.latent_dim, c.head_hidden, c.max_action_dim)

        if params is None:
            params = self._init_params(rng or RngStream(0))
        self.params: dict[str, Tensor] = {
            k: Tensor(v, requires_grad=True) for k, v in params.items()
        }
        self._pos_enc = sinusoidal_encoding(c.n_agents, c.latent_dim)

    # -- parameters ---------------------------------------------------------

    def _param_specs(self):
        c = self.config
        yield "repr.in_ln_g", (c.obs_dim,), None
        yield "repr.in_ln_b", (c.obs_dim,), None
        yield "comm.enc.w", (c.latent_dim + c.max_action_dim, c.latent_dim), c.latent_dim + c.max_action_dim
        yield "comm.enc.b", (c.latent_dim,), c.latent_dim + c.max_action_dim
        for layer in range(c.attention_layers):
            for mat in ("q", "k", "v"):
                yield f"comm.{layer}.{mat}", (c.latent_dim, c.latent_dim), c.latent_dim
        for block in (self._repr, self._dyn, self._reward, self._value, self._policy):
            yield from block.param_specs()

    def _init_params(self, rng: RngStream) -> dict[str, np.ndarray]:
        gen = rng.split("model-init").generator()
        params = {}
        for name, shape, fan_in in self._param_specs():
            if fan_in is None:  # layer-norm affine: identity transform
                params[name] = (
                    np.ones(shape) if name.endswith("_g") or name.endswith("ln_g") else np.zeros(shape)
                )
            else:
                bound = 1.0 / np.sqrt(fan_in)
                params[name] = gen.uniform(-bound, bound, size=shape)
        return params

    def parameter_names(self) -> list[str]:
        return sorted(self.params)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def check_finite_grads(self) -> None:
        for name, t in self.params.items():
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise NanGradientError(name.split(".")[0])

    def clone(self) -> "LearnedModel":
        copy = LearnedModel(
            self.config, params={k: t.data.copy() for k, t in self.params.items()}
        )
        copy.version = self.version
        return copy

    def load_state(self, other: "LearnedModel") -> None:
        for name, t in self.params.items():
            t.data = other.params[name].data.copy()
        self.version = other.version

    # -- differentiable forward pieces ---------------------------------------

    def represent_t(self, obs: Tensor) -> Tensor:
        """(B, n, obs_dim) -> (B, n, D)."""
        x = layer_norm(obs, self.params["repr.in_ln_g"], self.params["repr.in_ln_b"])
        return self._repr(self.params, x)

    def communicate_t(self, states: Tensor, actions: np.ndarray) -> Tensor:
        """(B, n, D) + int actions (B, n) -> cooperative features (B, n, D)."""
        c = self.config
        onehot = _one_hot(actions, c.max_action_dim)
        tokens = (
            concatenate([states, Tensor(onehot)], axis=-1)
            @ self.params["comm.enc.w"]
            + self.params["comm.enc.b"]
        )
        if c.positional_encoding:
            tokens = tokens + Tensor(self._pos_enc)
        scale = 1.0 / np.sqrt(c.latent_dim)
        for layer in range(c.attention_layers):
            q = tokens @ self.params[f"comm.{layer}.q"]
            k = tokens @ self.params[f"comm.{layer}.k"]
            v = tokens @ self.params[f"comm.{layer}.v"]
            attn = softmax(q @ k.swapaxes(-1, -2) * scale, axis=-1)
            tokens = attn @ v
        return tokens

    def dynamics_t(self, states: Tensor, actions: np.ndarray, features: Tensor) -> Tensor:
        """Residual per-agent transition: (B, n, D) -> (B, n, D)."""
        onehot = Tensor(_one_hot(actions, self.config.max_action_dim))
        inp = concatenate([states, onehot, features], axis=-1)
        return states + self._dyn(self.params, inp)

    def reward_t(self, states: Tensor, actions: np.ndarray) -> Tensor:
        """(B, n, D) + actions -> reward head output (B, bins or 1)."""
        b = states.shape[0]
        onehot = _one_hot(actions, self.config.max_action_dim).reshape(b, -1)
        flat = concatenate(
            [states.reshape(b, -1), Tensor(onehot)], axis=-1
        )
        return self._reward(self.params, flat)

    def value_t(self, states: Tensor) -> Tensor:
        """(B, n, D) -> value head output (B, bins or 1); centralized."""
        return self._value(self.params, states.reshape(states.shape[0], -1))

    def policy_t(self, states: Tensor) -> Tensor:
        """(B, n, D) -> per-agent logits (B, n, max_action_dim); decentralized."""
        return self._policy(self.params, states)

    def step_t(self, states: Tensor, actions: np.ndarray) -> tuple[Tensor, Tensor]:
        """One latent transition: returns (next states, reward head output)."""
        features = self.communicate_t(states, actions)
        return self.dynamics_t(states, actions, features), self.reward_t(states, actions)

    def policy_log_probs_t(self, states: Tensor, agent: int) -> Tensor:
        """Log-softmax over agent's valid action slice: (B, action_dims[agent])."""
        logits = self.policy_t(states)[:, agent, : self.action_dims[agent]]
        return log_softmax(logits, axis=-1)

    # -- planning interface (no gradient tracking) ----------------------------

    def _decode_head(self, out: np.ndarray) -> float:
        if self.config.categorical:
            return float(decode_logits(out, self.config.support))
        return float(out.reshape(-1)[0])

    def initial_state(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (self.n_agents, self.config.obs_dim):
            raise ShapeMismatchError(
                f"observation shape {obs.shape}, expected "
                f"({self.n_agents}, {self.config.obs_dim})"
            )
        return self.represent_t(Tensor(obs[None])).data[0]

    def predict(self, state: np.ndarray):
        states = Tensor(state[None])
        value = self._decode_head(self.value_t(states).data[0])
        logits = self.policy_t(states).data[0]
        policies = []
        for i, dim in enumerate(self.action_dims):
            z = logits[i, :dim] - logits[i, :dim].max()
            p = np.exp(z)
            policies.append(p / p.sum())
        return value, tuple(policies)

    def step(self, state: np.ndarray, action: JointAction):
        states = Tensor(state[None])
        actions = np.asarray(action)[None]
        nxt, reward_out = self.step_t(states, actions)
        return nxt.data[0], self._decode_head(reward_out.data[0])


# ---------------------------------------------------------------------------
# optimizer and checkpoints
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-5,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(path, model: LearnedModel, extra: dict | None = None) -> None:
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": json.loads(model.config.to_json()),
        "version": model.version,
    }
    if extra:
        meta.update(extra)
    arrays = {k: t.data for k, t in model.params.items()}
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[LearnedModel, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format {meta.get('format_version')!r}"
            )
        params = {k: data[k] for k in data.files if k != "__meta__"}
    cfg_json = json.dumps(meta["config"], sort_keys=True)
    model = LearnedModel(ModelConfig.from_json(cfg_json), params=params)
    model.version = int(meta.get("version", 0))
    return model, meta
