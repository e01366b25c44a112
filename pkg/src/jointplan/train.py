"""End-to-end training: replay, targets, the unrolled loss, and the loop.

Self-play episodes are generated by tree search, stored whole, and
sampled by priority. Each gradient step unrolls the learned model K
steps from a sampled position and matches reward, value, latent
consistency, and the advantage-weighted policy targets. A delayed copy
of the parameters serves evaluation targets and optional target
refresh; the loop alternates episode collection with gradient steps at
a fixed ratio so runs are exactly reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, log_softmax
from .core import JointAction, RngStream, SearchConfig, replace_fields
from .model import (
    Adam,
    LearnedModel,
    ModelConfig,
    ObservationHistory,
    TabularModel,
    clip_grad_norm,
    decode_logits,
    encode_target,
)
from .policy_loss import (
    PolicyTarget,
    advantage_weights,
    joint_log_probs,
    weighted_policy_loss,
)
from .search import SearchModelError, act_from_result, run_search

PRIORITY_EPSILON = 1e-6

METRICS_COLUMNS = (
    "step",
    "env_steps",
    "loss_total",
    "loss_r",
    "loss_v",
    "loss_s",
    "loss_p",
    "buffer_size",
    "eval_return_mean",
    "eval_return_std",
    "wallclock_s",
)


class NanLossError(RuntimeError):
    """A loss component went non-finite; the step is aborted."""

    def __init__(self, component: str):
        super().__init__(f"non-finite loss in component {component!r}")
        self.component = component


@dataclass
class ReplayEntry:
    """One finished self-play episode with its search statistics.

    observations[t] is the stacked model input that produced action t;
    rewards[t] is the team reward returned by that step.
    """

    episode_id: int
    observations: np.ndarray  # (T, n_agents, obs_dim)
    actions: list[JointAction]
    rewards: np.ndarray  # (T,)
    root_values: np.ndarray  # (T,)
    search_actions: list[list[JointAction]]
    search_omega: list[np.ndarray]
    search_advantages: list[np.ndarray]
    priorities: np.ndarray | None = None

    def __post_init__(self):
        t = len(self.actions)
        lengths = (
            self.observations.shape[0],
            len(self.rewards),
            len(self.root_values),
            len(self.search_actions),
            len(self.search_omega),
            len(self.search_advantages),
        )
        if any(l != t for l in lengths):
            raise ValueError(f"episode field lengths {lengths} != {t}")
        if t == 0:
            raise ValueError("empty episode")

    @property
    def length(self) -> int:
        return len(self.actions)


def n_step_target(
    entry: ReplayEntry,
    t: int,
    n: int,
    gamma: float,
    values: np.ndarray | None = None,
) -> float:
    """Discounted n-step return with a search-value bootstrap.

    Rewards stop at the episode end and a terminal bootstraps zero;
    `values` overrides the stored root values (reanalysis).
    """
    length = entry.length
    if not 0 <= t < length:
        raise ValueError(f"position {t} outside episode of length {length}")
    if n < 0:
        raise ValueError("n must be >= 0")
    vals = entry.root_values if values is None else values
    z = 0.0
    for i in range(n):
        if t + i >= length:
            break
        z += gamma**i * float(entry.rewards[t + i])
    if t + n < length:
        z += gamma**n * float(vals[t + n])
    return z


def initial_priorities(
    entry: ReplayEntry, n: int, gamma: float
) -> np.ndarray:
    p = np.empty(entry.length)
    for t in range(entry.length):
        z = n_step_target(entry, t, n, gamma)
        p[t] = abs(float(entry.root_values[t]) - z) + PRIORITY_EPSILON
    return p


class ReplayBuffer:
    """Episode store with proportional prioritized sampling."""

    def __init__(
        self,
        td_steps: int,
        gamma: float,
        priority_exponent: float = 0.6,
        capacity: int | None = None,
    ):
        self.td_steps = td_steps
        self.gamma = gamma
        self.priority_exponent = priority_exponent
        self.capacity = capacity
        self._entries: list[ReplayEntry] = []

    def add(self, entry: ReplayEntry) -> None:
        if entry.priorities is None:
            entry.priorities = initial_priorities(entry, self.td_steps, self.gamma)
        self._entries.append(entry)
        if self.capacity is not None:
            while self.size() > self.capacity and len(self._entries) > 1:
                self._entries.pop(0)

    def size(self) -> int:
        return sum(e.length for e in self._entries)

    def episodes(self) -> int:
        return len(self._entries)

    def _flat(self) -> tuple[list[tuple[ReplayEntry, int]], np.ndarray]:
        positions, prios = [], []
        for e in self._entries:
            for t in range(e.length):
                positions.append((e, t))
            prios.append(e.priorities)
        return positions, np.concatenate(prios) if prios else np.zeros(0)

    def probabilities(self) -> np.ndarray:
        _, p = self._flat()
        scaled = p**self.priority_exponent
        return scaled / scaled.sum()

    def sample(self, batch_size: int, gen: np.random.Generator, is_beta: float):
        """Draw positions with replacement; returns (positions, indices, weights).

        Importance weights are (1/(P*size))^beta normalized by the
        largest weight in the buffer, so every weight lands in (0, 1].
        """
        positions, _ = self._flat()
        if not positions:
            raise ValueError("cannot sample from an empty buffer")
        probs = self.probabilities()
        idx = gen.choice(len(positions), size=batch_size, replace=True, p=probs)
        n = len(positions)
        weights = (1.0 / (n * probs[idx])) ** is_beta
        w_max = (1.0 / (n * probs.min())) ** is_beta
        weights = weights / w_max
        return [positions[i] for i in idx], idx, weights

    def update_priorities(self, indices: np.ndarray, new_p: np.ndarray) -> None:
        positions, _ = self._flat()
        for i, p in zip(indices, new_p):
            entry, t = positions[int(i)]
            entry.priorities[t] = max(float(p), PRIORITY_EPSILON)


def anneal_is_beta(beta0: float, step: int, total_steps: int) -> float:
    """Linear schedule from beta0 to 1 over the gradient-step budget."""
    if total_steps <= 1:
        return 1.0
    frac = min(step / (total_steps - 1), 1.0)
    return beta0 + (1.0 - beta0) * frac


@dataclass(frozen=True)
class TrainerConfig:
    """Loop hyperparameters; defaults follow the reference table."""

    unroll_steps: int = 5
    td_steps: int = 5
    gamma: float = 0.99
    lr: float = 1e-4
    batch_size: int = 256
    priority_exponent: float = 0.6
    is_beta: float = 0.4
    min_replay: int = 300
    target_interval: int = 200
    max_grad_norm: float = 5.0
    episodes_per_cycle: int = 1
    grad_steps_per_cycle: int = 20
    train_steps: int = 1000
    max_env_steps: int | None = None
    eval_interval: int = 0
    eval_episodes: int = 32
    reanalyze: bool = False
    policy_mode: str = "weighted"  # "weighted" or "cloning"
    squared_loss: bool = False
    buffer_capacity: int | None = None
    stop_at_eval_return: float | None = None
    wallclock: bool = False

    def validate(self) -> None:
        if self.unroll_steps < 0:
            raise ValueError("unroll_steps must be >= 0")
        if self.td_steps < 0:
            raise ValueError("td_steps must be >= 0")
        if not 0.0 < self.gamma <= 1.0 + 1e-12:
            raise ValueError("gamma must be in (0, 1]")
        for name in ("lr", "batch_size", "min_replay", "target_interval",
                     "max_grad_norm", "episodes_per_cycle",
                     "grad_steps_per_cycle", "eval_episodes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.is_beta <= 1.0:
            raise ValueError("is_beta must be in [0, 1]")
        if self.priority_exponent < 0.0:
            raise ValueError("priority_exponent must be >= 0")
        if self.train_steps < 0:
            raise ValueError("train_steps must be >= 0")
        if self.policy_mode not in ("weighted", "cloning"):
            raise ValueError("policy_mode must be 'weighted' or 'cloning'")


# ---------------------------------------------------------------------------
# unroll windows


@dataclass
class Window:
    """One training position with its K-step targets and masks."""

    entry: ReplayEntry
    t: int
    obs0: np.ndarray  # (n_agents, obs_dim)
    actions: np.ndarray  # (K, n_agents), zero-padded past the end
    reward_targets: np.ndarray  # (K,)
    reward_mask: np.ndarray
    value_targets: np.ndarray  # (K,)
    value_mask: np.ndarray
    state_target_obs: np.ndarray  # (K, n_agents, obs_dim)
    state_mask: np.ndarray
    policy_targets: list  # length K+1 of PolicyTarget | None


def make_window(
    entry: ReplayEntry,
    t: int,
    unroll_steps: int,
    td_steps: int,
    gamma: float,
    alpha: float,
    policy_mode: str = "weighted",
    values: np.ndarray | None = None,
    refreshed: dict | None = None,
) -> Window:
    """Assemble targets for a K-step unroll starting at position t.

    Offsets past the episode end are masked out; the position exactly
    at the terminal still supplies its reward and a zero value target.
    `refreshed` maps unroll offsets to replacement search statistics.
    """
    k_steps = unroll_steps
    length = entry.length
    n_agents = entry.observations.shape[1]
    obs_dim = entry.observations.shape[2]

    actions = np.zeros((k_steps, n_agents), dtype=np.int64)
    reward_targets = np.zeros(k_steps)
    reward_mask = np.zeros(k_steps)
    value_targets = np.zeros(k_steps)
    value_mask = np.zeros(k_steps)
    state_target_obs = np.zeros((k_steps, n_agents, obs_dim))
    state_mask = np.zeros(k_steps)

    def target_at(offset: int) -> PolicyTarget:
        if refreshed is not None and offset in refreshed:
            acts, omega, adv = refreshed[offset]
        else:
            pos = t + offset
            acts = entry.search_actions[pos]
            omega = entry.search_omega[pos]
            adv = entry.search_advantages[pos]
        if policy_mode == "cloning":
            adv = np.zeros_like(np.asarray(adv, dtype=float))
        return PolicyTarget(list(acts), np.asarray(omega), np.asarray(adv), alpha)

    policy_targets: list = [target_at(0)]
    for k in range(1, k_steps + 1):
        pos = t + k
        if pos <= length:
            # action a_{t+k-1} drives the k-th latent transition
            actions[k - 1] = np.asarray(entry.actions[pos - 1])
            reward_targets[k - 1] = entry.rewards[pos - 1]
            reward_mask[k - 1] = 1.0
            value_mask[k - 1] = 1.0
            if pos < length:
                value_targets[k - 1] = n_step_target(
                    entry, pos, td_steps, gamma, values=values
                )
            # pos == length is the terminal state: value target 0
        if pos < length:
            state_target_obs[k - 1] = entry.observations[pos]
            state_mask[k - 1] = 1.0
            policy_targets.append(target_at(k))
        else:
            policy_targets.append(None)

    return Window(
        entry=entry,
        t=t,
        obs0=entry.observations[t],
        actions=actions,
        reward_targets=reward_targets,
        reward_mask=reward_mask,
        value_targets=value_targets,
        value_mask=value_mask,
        state_target_obs=state_target_obs,
        state_mask=state_mask,
        policy_targets=policy_targets,
    )


def selfplay_stream(root_rng: RngStream, episode_id: int, t: int) -> RngStream:
    """The search stream used at position t of a self-play episode.

    Reanalysis derives the identical stream from the stored episode id,
    so refreshing under unchanged parameters reproduces the stored
    statistics bit for bit.
    """
    return root_rng.split("self-play").split(f"ep-{episode_id}").split(f"t-{t}")


def reanalyze(
    target_model,
    entry: ReplayEntry,
    t: int,
    unroll_steps: int,
    search_cfg: SearchConfig,
    root_rng: RngStream,
) -> tuple[dict, np.ndarray, int]:
    """Re-run search at each unroll offset under the delayed parameters.

    Returns (refreshed stats by offset, value array with refreshed
    entries spliced over the stored ones, dropped-position count).
    Bootstrap positions beyond the unroll window keep their stored
    values.
    """
    refreshed: dict = {}
    values = entry.root_values.copy().astype(float)
    dropped = 0
    for k in range(unroll_steps + 1):
        pos = t + k
        if pos >= entry.length:
            break
        stream = selfplay_stream(root_rng, entry.episode_id, pos)
        try:
            result = run_search(
                target_model, entry.observations[pos], search_cfg, stream
            )
        except SearchModelError:
            dropped += 1
            continue
        refreshed[k] = (result.actions, result.omega, result.advantages)
        values[pos] = result.root_value
    return refreshed, values, dropped


# ---------------------------------------------------------------------------
# unrolled loss


def _head_loss(out: Tensor, targets: np.ndarray, weights: np.ndarray,
               model, squared: bool) -> Tensor:
    """Per-sample reward/value head loss, weighted and masked.

    Categorical mode: cross-entropy against the two-hot encoding of the
    transformed target. Squared mode: plain MSE on the raw scalar.
    """
    if squared or not model.config.categorical:
        pred = out.reshape((out.shape[0],))
        diff = pred - Tensor(targets)
        per_sample = diff * diff
    else:
        enc = encode_target(targets, model.config.support)
        per_sample = -(Tensor(enc) * log_softmax(out, axis=-1)).sum(axis=-1)
    return (per_sample * Tensor(weights)).sum()


def consistency_targets(model, windows: list["Window"]) -> dict[int, np.ndarray]:
    """Detached representation targets per unroll offset.

    The consistency term treats these as constants. Precomputing them
    lets a finite-difference check perturb parameters while holding the
    targets fixed, matching what the analytic gradient differentiates.
    """
    targets: dict[int, np.ndarray] = {}
    k_steps = windows[0].actions.shape[0] if windows else 0
    for k in range(1, k_steps + 1):
        if any(w.state_mask[k - 1] for w in windows):
            obs = np.stack([w.state_target_obs[k - 1] for w in windows])
            targets[k] = model.represent_t(Tensor(obs)).data
    return targets


def unrolled_loss(
    model: LearnedModel,
    windows: list[Window],
    is_weights: np.ndarray,
    alpha: float,
    squared_loss: bool = False,
    state_targets: dict[int, np.ndarray] | None = None,
) -> tuple[Tensor, dict]:
    """Batched K-step loss; returns (total Tensor, component means).

    Reward, value, and consistency terms run over unroll offsets 1..K
    and are scaled by 1/K; the policy term also covers the root offset
    unscaled. Raises NanLossError naming the first non-finite part.
    `state_targets` overrides the stop-gradient consistency targets
    (normally computed fresh from the current parameters).
    """
    if not windows:
        raise ValueError("empty batch")
    b = len(windows)
    k_steps = windows[0].actions.shape[0]
    is_weights = np.asarray(is_weights, dtype=float)
    scale = 1.0 / max(k_steps, 1)
    inv_b = 1.0 / b

    obs0 = np.stack([w.obs0 for w in windows])
    states = model.represent_t(Tensor(obs0))
    n_agents = obs0.shape[1]
    latent_entries = n_agents * model.config.latent_dim

    total = None
    parts = {"loss_r": 0.0, "loss_v": 0.0, "loss_s": 0.0, "loss_p": 0.0}

    def accumulate(term: Tensor, name: str):
        nonlocal total
        total = term if total is None else total + term
        parts[name] += float(term.data)

    def policy_term(k: int, current_states: Tensor):
        live = [
            (i, w.policy_targets[k])
            for i, w in enumerate(windows)
            if w.policy_targets[k] is not None
        ]
        if not live:
            return
        lps = [
            model.policy_log_probs_t(current_states, agent)
            for agent in range(n_agents)
        ]
        term = None
        for i, target in live:
            sample_lps = [lp[i] for lp in lps]
            jlp = joint_log_probs(sample_lps, target.actions)
            piece = weighted_policy_loss(advantage_weights(target), jlp)
            piece = piece * float(is_weights[i])
            term = piece if term is None else term + piece
        factor = inv_b * (scale if k >= 1 else 1.0)
        accumulate(term * factor, "loss_p")

    policy_term(0, states)

    for k in range(1, k_steps + 1):
        acts = np.stack([w.actions[k - 1] for w in windows])
        states, reward_out = model.step_t(states, acts)

        r_mask = np.array([w.reward_mask[k - 1] for w in windows])
        r_targets = np.array([w.reward_targets[k - 1] for w in windows])
        accumulate(
            _head_loss(reward_out, r_targets, is_weights * r_mask, model,
                       squared_loss) * (scale * inv_b),
            "loss_r",
        )

        v_mask = np.array([w.value_mask[k - 1] for w in windows])
        v_targets = np.array([w.value_targets[k - 1] for w in windows])
        accumulate(
            _head_loss(model.value_t(states), v_targets, is_weights * v_mask,
                       model, squared_loss) * (scale * inv_b),
            "loss_v",
        )

        s_mask = np.array([w.state_mask[k - 1] for w in windows])
        if np.any(s_mask):
            if state_targets is not None:
                target_latents = state_targets[k]
            else:
                target_obs = np.stack(
                    [w.state_target_obs[k - 1] for w in windows]
                )
                # stop-gradient representation target
                target_latents = model.represent_t(Tensor(target_obs)).data
            diff = states - Tensor(target_latents)
            per_sample = (diff * diff).sum(axis=-1).sum(axis=-1) * (
                1.0 / latent_entries
            )
            accumulate(
                (per_sample * Tensor(is_weights * s_mask)).sum() * (scale * inv_b),
                "loss_s",
            )

        policy_term(k, states)

    for name in ("loss_r", "loss_v", "loss_s", "loss_p"):
        if not np.isfinite(parts[name]):
            raise NanLossError(name.removeprefix("loss_"))
    parts["loss_total"] = float(total.data)
    return total, parts


# ---------------------------------------------------------------------------
# acting, evaluation, the loop


def tabular_matrix_model(payoff: np.ndarray) -> TabularModel:
    """Exact one-step model of a cooperative matrix game."""
    payoff = np.asarray(payoff, dtype=float)
    terminal = "terminal"

    def transition(state, action):
        # the root state is the raw observation array; anything after
        # one step is the absorbing terminal token
        if isinstance(state, str) and state == terminal:
            return terminal, 0.0
        return terminal, float(payoff[tuple(int(a) for a in action)])

    return TabularModel(
        n_agents=payoff.ndim,
        action_dims=tuple(int(m) for m in payoff.shape),
        transition=transition,
    )


def model_config_for_env(env, **overrides) -> ModelConfig:
    """ModelConfig matching an environment's stacked observation shape."""
    return ModelConfig(
        n_agents=env.n_agents,
        obs_dim=ObservationHistory.stacked_dim(env.obs_len),
        action_dims=tuple(env.action_dims),
        **overrides,
    )


def self_play_episode(
    env,
    model,
    search_cfg: SearchConfig,
    root_rng: RngStream,
    episode_id: int,
    temperature: float | None = None,
) -> ReplayEntry:
    """Run one search-driven episode and package it for replay."""
    temp = search_cfg.temperature if temperature is None else temperature
    history = ObservationHistory(env.n_agents, env.obs_len)
    history.reset(env.reset())
    observations, actions, rewards = [], [], []
    root_values, s_actions, s_omega, s_adv = [], [], [], []
    done = False
    t = 0
    while not done:
        stacked = history.stacked()
        stream = selfplay_stream(root_rng, episode_id, t)
        result = run_search(model, stacked, search_cfg, stream)
        action = act_from_result(result, temp, stream.split("act"))
        obs, reward, done = env.step(action)
        history.push(obs)
        observations.append(stacked)
        actions.append(action)
        rewards.append(reward)
        root_values.append(result.root_value)
        s_actions.append(result.actions)
        s_omega.append(result.omega)
        s_adv.append(result.advantages)
        t += 1
    return ReplayEntry(
        episode_id=episode_id,
        observations=np.stack(observations),
        actions=actions,
        rewards=np.asarray(rewards),
        root_values=np.asarray(root_values),
        search_actions=s_actions,
        search_omega=s_omega,
        search_advantages=s_adv,
    )


def greedy_policy_action(model, stacked_obs: np.ndarray) -> JointAction:
    """Decentralized acting: per-agent argmax of the prior policy."""
    state = model.initial_state(stacked_obs)
    _, policies = model.predict(state)
    return tuple(int(np.argmax(p)) for p in policies)


def evaluate(
    model,
    env,
    search_cfg: SearchConfig,
    mode: str = "with-search",
    episodes: int = 32,
    rng: RngStream | None = None,
) -> tuple[float, float, np.ndarray]:
    """Mean/std undiscounted return over evaluation episodes.

    with-search runs the full planner and acts at temperature zero;
    raw-policy acts greedily per agent from the prior alone. Root
    exploration noise is always off here: it is a self-play device.
    """
    if mode not in ("with-search", "raw-policy"):
        raise ValueError("mode must be 'with-search' or 'raw-policy'")
    if search_cfg.root_noise:
        search_cfg = replace_fields(search_cfg, root_noise=False)
    rng = rng if rng is not None else RngStream(0).split("eval")
    returns = np.zeros(episodes)
    for e in range(episodes):
        ep_rng = rng.split(f"episode-{e}")
        history = ObservationHistory(env.n_agents, env.obs_len)
        history.reset(env.reset())
        total, done, t = 0.0, False, 0
        while not done:
            stacked = history.stacked()
            if mode == "with-search":
                result = run_search(
                    model, stacked, search_cfg, ep_rng.split(f"t-{t}")
                )
                action = act_from_result(result, 0.0, ep_rng.split(f"act-{t}"))
            else:
                action = greedy_policy_action(model, stacked)
            obs, reward, done = env.step(action)
            history.push(obs)
            total += reward
            t += 1
        returns[e] = total
    return float(returns.mean()), float(returns.std()), returns


@dataclass
class TrainResult:
    model: LearnedModel
    target_model: LearnedModel
    rows: list[dict]
    env_steps: int
    grad_steps: int
    episodes: int
    env_errors: int
    dropped_positions: int
    buffer: ReplayBuffer


def train_loop(
    env,
    model: LearnedModel,
    trainer_cfg: TrainerConfig,
    search_cfg: SearchConfig,
    seed: int = 0,
    on_row: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Sequential self-play / learning loop with periodic evaluation.

    Collects `episodes_per_cycle` episodes, then runs
    `grad_steps_per_cycle` Adam steps once the buffer passes the replay
    floor; the delayed parameter copy syncs every `target_interval`
    steps. One metrics row is emitted per gradient step. The loop ends
    at the gradient budget, or at `max_env_steps` when that is set.
    """
    trainer_cfg.validate()
    search_cfg.validate()
    t0 = time.monotonic()
    root_rng = RngStream(seed)
    buffer = ReplayBuffer(
        td_steps=trainer_cfg.td_steps,
        gamma=trainer_cfg.gamma,
        priority_exponent=trainer_cfg.priority_exponent,
        capacity=trainer_cfg.buffer_capacity,
    )
    optimizer = Adam(model.params, lr=trainer_cfg.lr)
    target = model.clone()
    rows: list[dict] = []
    step = env_steps = episode_id = env_errors = dropped = 0
    stop = False

    def budget_left() -> bool:
        # the env-step budget governs when set; otherwise the grad budget
        if trainer_cfg.max_env_steps is not None:
            return env_steps < trainer_cfg.max_env_steps
        return step < trainer_cfg.train_steps

    def run_eval(at_step: int):
        mean, std, _ = evaluate(
            model,
            env,
            search_cfg,
            mode="with-search",
            episodes=trainer_cfg.eval_episodes,
            rng=root_rng.split("eval").split(f"step-{at_step}"),
        )
        return mean, std

    while budget_left() and not stop:
        cycle_env_steps, cycle_grad_steps = env_steps, step
        for _ in range(trainer_cfg.episodes_per_cycle):
            try:
                entry = self_play_episode(
                    env, model, search_cfg, root_rng, episode_id
                )
            except Exception:
                env_errors += 1
                episode_id += 1
                continue
            buffer.add(entry)
            env_steps += entry.length
            episode_id += 1

        if buffer.size() < trainer_cfg.min_replay:
            continue

        for _ in range(trainer_cfg.grad_steps_per_cycle):
            if step >= trainer_cfg.train_steps or stop:
                break
            beta = anneal_is_beta(
                trainer_cfg.is_beta, step, trainer_cfg.train_steps
            )
            gen = root_rng.split("sample").split(f"step-{step}").generator()
            positions, indices, weights = buffer.sample(
                trainer_cfg.batch_size, gen, beta
            )

            windows = []
            kept_idx, kept_w = [], []
            for j, (entry, t) in enumerate(positions):
                refreshed = values = None
                if trainer_cfg.reanalyze:
                    refreshed, values, d = reanalyze(
                        target,
                        entry,
                        t,
                        trainer_cfg.unroll_steps,
                        search_cfg,
                        root_rng,
                    )
                    dropped += d
                    if not refreshed:
                        continue
                windows.append(
                    make_window(
                        entry,
                        t,
                        trainer_cfg.unroll_steps,
                        trainer_cfg.td_steps,
                        trainer_cfg.gamma,
                        search_cfg.alpha,
                        policy_mode=trainer_cfg.policy_mode,
                        values=values,
                        refreshed=refreshed,
                    )
                )
                kept_idx.append(indices[j])
                kept_w.append(weights[j])
            if not windows:
                continue

            model.zero_grads()
            total, parts = unrolled_loss(
                model,
                windows,
                np.asarray(kept_w),
                search_cfg.alpha,
                squared_loss=trainer_cfg.squared_loss,
            )
            total.backward()
            model.check_finite_grads()
            clip_grad_norm(model.params, trainer_cfg.max_grad_norm)
            optimizer.step()

            new_p = np.empty(len(windows))
            v0 = model.value_t(
                model.represent_t(Tensor(np.stack([w.obs0 for w in windows])))
            ).data
            for j, w in enumerate(windows):
                if model.config.categorical and not trainer_cfg.squared_loss:
                    nu = float(decode_logits(v0[j], model.config.support))
                else:
                    nu = float(v0[j].reshape(-1)[0])
                z = n_step_target(
                    w.entry, w.t, trainer_cfg.td_steps, trainer_cfg.gamma
                )
                new_p[j] = abs(nu - z) + PRIORITY_EPSILON
            buffer.update_priorities(np.asarray(kept_idx), new_p)

            step += 1
            if step % trainer_cfg.target_interval == 0:
                target.load_state(model)

            eval_mean = eval_std = None
            if trainer_cfg.eval_interval > 0 and step % trainer_cfg.eval_interval == 0:
                eval_mean, eval_std = run_eval(step)
                if (
                    trainer_cfg.stop_at_eval_return is not None
                    and eval_mean >= trainer_cfg.stop_at_eval_return
                ):
                    stop = True

            row = {
                "step": step,
                "env_steps": env_steps,
                "loss_total": parts["loss_total"],
                "loss_r": parts["loss_r"],
                "loss_v": parts["loss_v"],
                "loss_s": parts["loss_s"],
                "loss_p": parts["loss_p"],
                "buffer_size": buffer.size(),
                "eval_return_mean": eval_mean,
                "eval_return_std": eval_std,
                "wallclock_s": (
                    time.monotonic() - t0 if trainer_cfg.wallclock else 0.0
                ),
            }
            rows.append(row)
            if on_row is not None:
                on_row(row)

        if env_steps == cycle_env_steps and step == cycle_grad_steps:
            # a whole cycle made no progress (failing env, exhausted
            # budgets); bail out rather than spin forever
            break

    return TrainResult(
        model=model,
        target_model=target,
        rows=rows,
        env_steps=env_steps,
        grad_steps=step,
        episodes=episode_id,
        env_errors=env_errors,
        dropped_positions=dropped,
        buffer=buffer,
    )
