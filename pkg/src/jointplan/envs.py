"""Desk-scale cooperative environments and their exact oracles.

Every environment here is deterministic, episodic, and small enough to
check against closed-form or tabular ground truth: a 100-armed bandit
with analytic expected losses, a one-shot cooperative matrix game with
an exhaustive payoff scan, and a two-agent gridworld solved exactly by
value iteration over the time-expanded joint state space.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .core import JointAction, RngStream, ShapeMismatchError


class EpisodeDoneError(RuntimeError):
    """Raised when step() is called after the episode has ended."""


class TabularSizeError(ValueError):
    """Raised when a tabular oracle would exceed its size budget."""


@runtime_checkable
class DecPomdpEnv(Protocol):
    """Cooperative multi-agent environment with a shared team reward.

    reset() returns one observation vector per agent; step() consumes a
    joint action and returns (observations, team reward, done).  All
    implementations are deterministic given their construction args.
    """

    n_agents: int
    action_dims: tuple[int, ...]
    obs_len: int
    horizon: int

    def reset(self) -> list[np.ndarray]: ...

    def step(self, action: JointAction) -> tuple[list[np.ndarray], float, bool]: ...


def _validate_action(action: JointAction, action_dims: tuple[int, ...]) -> None:
    if len(action) != len(action_dims):
        raise ShapeMismatchError(
            f"joint action has {len(action)} entries, expected {len(action_dims)}"
        )
    for i, (a, m) in enumerate(zip(action, action_dims)):
        if not 0 <= int(a) < m:
            raise ValueError(f"agent {i} action {a} outside [0, {m})")


# ---------------------------------------------------------------------------
# 100-armed bandit: closed-form expected losses and the convergence experiment


BANDIT_ARMS = 100
BANDIT_SAMPLE_K = 2


def bandit_values() -> np.ndarray:
    """Arm values: value(a) = a for the 100-armed testbed."""
    return np.arange(BANDIT_ARMS, dtype=float)


def _softmax(theta: np.ndarray) -> np.ndarray:
    z = theta - np.max(theta)
    e = np.exp(z)
    return e / e.sum()


def _log_softmax(theta: np.ndarray) -> np.ndarray:
    z = theta - np.max(theta)
    return z - np.log(np.exp(z).sum())


def bandit_t(pi: np.ndarray, k_b: int = BANDIT_SAMPLE_K) -> np.ndarray:
    """Distribution of the best arm among k_b i.i.d. draws from pi.

    Arm values increase with index, so the best of a sample is the
    largest index drawn: t(a) = (sum_{b<=a} pi_b)^k - (sum_{b<a} pi_b)^k.
    """
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 1:
        raise ShapeMismatchError("pi must be a vector")
    if k_b < 1:
        raise ValueError("k_b must be >= 1")
    upper = np.cumsum(pi)
    lower = upper - pi
    return upper**k_b - lower**k_b


def bandit_adv() -> np.ndarray:
    """Standardized arm advantages: (a - 49.5) * sqrt(3/2525).

    sqrt(3/2525) is exactly 1 over the Bessel-corrected standard
    deviation of 0..99, so the vector has mean 0 and sample variance 1.
    """
    a = np.arange(BANDIT_ARMS, dtype=float)
    return (a - 49.5) * np.sqrt(3.0 / 2525.0)


def bandit_expected_losses(
    theta_bc: np.ndarray,
    theta_weighted: np.ndarray,
    k_b: int = BANDIT_SAMPLE_K,
    alpha: float = 1.0,
    adv: np.ndarray | None = None,
) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Closed-form cloning and advantage-weighted losses with gradients.

    loss_bc       = -sum_a t(a) log pi(a)
    loss_weighted = -sum_a t(a) exp(adv(a)/alpha) log pi(a)

    t is the best-of-k distribution evaluated at the respective policy
    and treated as a constant (no gradient flows through it), matching
    how search statistics enter the learning loss.  Returns
    (loss_bc, loss_weighted, grad_bc, grad_weighted).
    """
    theta_bc = np.asarray(theta_bc, dtype=float)
    theta_weighted = np.asarray(theta_weighted, dtype=float)
    if theta_bc.shape != (BANDIT_ARMS,) or theta_weighted.shape != (BANDIT_ARMS,):
        raise ShapeMismatchError("parameter vectors must have length 100")
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    if adv is None:
        adv = bandit_adv()
    adv = np.asarray(adv, dtype=float)

    pi_bc = _softmax(theta_bc)
    log_bc = _log_softmax(theta_bc)
    t_bc = bandit_t(pi_bc, k_b)
    loss_bc = float(-(t_bc * log_bc).sum())
    # d(-sum t log pi)/dtheta_j with t constant: -t_j + pi_j * sum(t)
    grad_bc = -t_bc + pi_bc * t_bc.sum()

    pi_w = _softmax(theta_weighted)
    log_w = _log_softmax(theta_weighted)
    c = bandit_t(pi_w, k_b) * np.exp(adv / alpha)
    loss_weighted = float(-(c * log_w).sum())
    grad_weighted = -c + pi_w * c.sum()

    return loss_bc, loss_weighted, grad_bc, grad_weighted


@dataclass(frozen=True)
class BanditRun:
    """Per-seed descent record; index s holds the state after s updates."""

    seed: int
    steps: np.ndarray
    loss_bc: np.ndarray
    value_bc: np.ndarray
    loss_weighted: np.ndarray
    value_weighted: np.ndarray


def bandit_expected_value(pi: np.ndarray) -> float:
    return float(np.asarray(pi, dtype=float) @ bandit_values())


def bandit_experiment(
    lr: float = 0.1,
    steps: int = 1500,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    k_b: int = BANDIT_SAMPLE_K,
    alpha: float = 1.0,
) -> list[BanditRun]:
    """Full-gradient descent on both bandit losses from shared inits.

    Both parameter vectors start identical per seed; each record row s
    reflects the losses and expected arm values after s gradient steps
    (row 0 is the shared initialization).
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    runs = []
    for seed in seeds:
        gen = RngStream(int(seed)).split("bandit-init").generator()
        theta0 = gen.standard_normal(BANDIT_ARMS)
        th_bc = theta0.copy()
        th_w = theta0.copy()
        rec = np.zeros((steps + 1, 4))
        for s in range(steps + 1):
            l_bc, l_w, g_bc, g_w = bandit_expected_losses(th_bc, th_w, k_b, alpha)
            rec[s] = (
                l_bc,
                bandit_expected_value(_softmax(th_bc)),
                l_w,
                bandit_expected_value(_softmax(th_w)),
            )
            if s < steps:
                th_bc = th_bc - lr * g_bc
                th_w = th_w - lr * g_w
        runs.append(
            BanditRun(
                seed=int(seed),
                steps=np.arange(steps + 1),
                loss_bc=rec[:, 0].copy(),
                value_bc=rec[:, 1].copy(),
                loss_weighted=rec[:, 2].copy(),
                value_weighted=rec[:, 3].copy(),
            )
        )
    return runs


def steps_to_value(values: np.ndarray, threshold: float) -> int | None:
    """First record index at which the expected value reaches threshold."""
    hits = np.nonzero(np.asarray(values) >= threshold)[0]
    return int(hits[0]) if hits.size else None


class BanditEnv:
    """Single-agent, single-step environment over the 100 arms."""

    def __init__(self) -> None:
        self.n_agents = 1
        self.action_dims = (BANDIT_ARMS,)
        self.obs_len = 1
        self.horizon = 1
        self._done = True

    def reset(self) -> list[np.ndarray]:
        self._done = False
        return [np.zeros(self.obs_len)]

    def step(self, action: JointAction) -> tuple[list[np.ndarray], float, bool]:
        if self._done:
            raise EpisodeDoneError("step() after episode end; call reset()")
        _validate_action(action, self.action_dims)
        self._done = True
        return [np.zeros(self.obs_len)], float(action[0]), True


# ---------------------------------------------------------------------------
# Cooperative matrix game


class MatrixGame:
    """One-step cooperative game: team reward is payoff[joint action]."""

    def __init__(self, payoff: np.ndarray) -> None:
        payoff = np.asarray(payoff, dtype=float)
        if payoff.ndim < 1:
            raise ShapeMismatchError("payoff must have one axis per agent")
        if not np.all(np.isfinite(payoff)):
            raise ValueError("payoffs must be finite")
        self.payoff = payoff
        self.n_agents = payoff.ndim
        self.action_dims = tuple(int(m) for m in payoff.shape)
        self.obs_len = 1
        self.horizon = 1
        self._done = True

    def reset(self) -> list[np.ndarray]:
        self._done = False
        return [np.zeros(self.obs_len) for _ in range(self.n_agents)]

    def step(self, action: JointAction) -> tuple[list[np.ndarray], float, bool]:
        if self._done:
            raise EpisodeDoneError("step() after episode end; call reset()")
        _validate_action(action, self.action_dims)
        self._done = True
        obs = [np.zeros(self.obs_len) for _ in range(self.n_agents)]
        return obs, float(self.payoff[tuple(int(a) for a in action)]), True


MATRIX_SCAN_LIMIT = 1_000_000


def matrix_optimal(payoff: np.ndarray) -> tuple[JointAction, float]:
    """Exhaustive argmax over the payoff tensor, cross-checked twice.

    A second scan in reversed flat order must find the same maximum
    value; ties resolve to the lexicographically smallest joint action.
    """
    payoff = np.asarray(payoff, dtype=float)
    if payoff.size == 0:
        raise ValueError("empty payoff tensor")
    if payoff.size > MATRIX_SCAN_LIMIT:
        raise TabularSizeError(
            f"payoff tensor has {payoff.size} entries, limit {MATRIX_SCAN_LIMIT}"
        )
    flat = payoff.reshape(-1)
    best = int(np.argmax(flat))
    rev_best_from_end = int(np.argmax(flat[::-1]))
    if flat[flat.size - 1 - rev_best_from_end] != flat[best]:
        raise AssertionError("forward and reversed scans disagree on the maximum")
    action = tuple(int(i) for i in np.unravel_index(best, payoff.shape))
    return action, float(flat[best])


# ---------------------------------------------------------------------------
# Two-agent gridworld


@dataclass(frozen=True)
class GridworldSpec:
    """Board geometry and reward scheme for the cooperative gridworld.

    The team earns +1 (less the step cost) the moment every agent
    stands on a goal cell simultaneously, which also ends the episode.
    """

    width: int = 5
    height: int = 5
    starts: tuple[tuple[int, int], ...] = ((0, 0), (4, 0))
    goals: tuple[tuple[int, int], ...] = ((0, 4), (4, 4))
    horizon: int = 20
    window_radius: int = 1
    step_penalty: float = -0.01
    success_reward: float = 1.0

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("board must be at least 1x1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.window_radius < 0:
            raise ValueError("window radius must be >= 0")
        if len(self.starts) < 1:
            raise ValueError("need at least one agent")
        for x, y in self.starts + self.goals:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"cell ({x}, {y}) off the board")

    @property
    def n_agents(self) -> int:
        return len(self.starts)


# joint moves: stay, north, south, west, east
GRID_MOVES = ((0, 0), (0, 1), (0, -1), (-1, 0), (1, 0))


def _move_agent(spec: GridworldSpec, pos: tuple[int, int], a: int) -> tuple[int, int]:
    dx, dy = GRID_MOVES[a]
    x = min(max(pos[0] + dx, 0), spec.width - 1)
    y = min(max(pos[1] + dy, 0), spec.height - 1)
    return (x, y)


def gridworld_move(
    spec: GridworldSpec,
    positions: tuple[tuple[int, int], ...],
    action: JointAction,
) -> tuple[tuple[int, int], ...]:
    """Joint transition: each agent moves independently, walls clamp."""
    return tuple(_move_agent(spec, p, int(a)) for p, a in zip(positions, action))


def _is_success(spec: GridworldSpec, positions) -> bool:
    goal_set = set(spec.goals)
    return all(p in goal_set for p in positions)


class Gridworld:
    """Partially observed cooperative navigation on a small board.

    Each agent sees a (2r+1)^2 egocentric window (out-of-bounds, goal,
    other-agent flags per cell) plus its own normalized coordinates;
    nothing outside the window reveals the other agent.
    """

    def __init__(self, spec: GridworldSpec | None = None) -> None:
        self.spec = spec if spec is not None else GridworldSpec()
        self.spec.validate()
        self.n_agents = self.spec.n_agents
        self.action_dims = tuple(len(GRID_MOVES) for _ in range(self.n_agents))
        side = 2 * self.spec.window_radius + 1
        self.obs_len = 3 * side * side + 2
        self.horizon = self.spec.horizon
        self._positions: tuple[tuple[int, int], ...] = self.spec.starts
        self._t = 0
        self._done = True
        self._goal_set = set(self.spec.goals)

    def reset(self) -> list[np.ndarray]:
        self._positions = self.spec.starts
        self._t = 0
        self._done = False
        return self._observe()

    def step(self, action: JointAction) -> tuple[list[np.ndarray], float, bool]:
        if self._done:
            raise EpisodeDoneError("step() after episode end; call reset()")
        _validate_action(action, self.action_dims)
        self._positions = gridworld_move(self.spec, self._positions, action)
        self._t += 1
        success = _is_success(self.spec, self._positions)
        reward = self.spec.step_penalty + (self.spec.success_reward if success else 0.0)
        self._done = success or self._t >= self.horizon
        return self._observe(), float(reward), self._done

    @property
    def positions(self) -> tuple[tuple[int, int], ...]:
        return self._positions

    def _observe(self) -> list[np.ndarray]:
        return gridworld_observations(self.spec, self._positions)


def gridworld_observations(
    spec: GridworldSpec, positions: tuple[tuple[int, int], ...]
) -> list[np.ndarray]:
    """Stationary observation function: depends on the joint state only."""
    goal_set = set(spec.goals)
    r = spec.window_radius
    side = 2 * r + 1
    obs = []
    for i, (x, y) in enumerate(positions):
        feats = np.zeros(3 * side * side + 2)
        j = 0
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                cx, cy = x + dx, y + dy
                inside = 0 <= cx < spec.width and 0 <= cy < spec.height
                if not inside:
                    feats[j] = 1.0
                else:
                    if (cx, cy) in goal_set:
                        feats[j + 1] = 1.0
                    if any(
                        k != i and positions[k] == (cx, cy)
                        for k in range(len(positions))
                    ):
                        feats[j + 2] = 1.0
                j += 3
        feats[j] = x / max(spec.width - 1, 1)
        feats[j + 1] = y / max(spec.height - 1, 1)
        obs.append(feats)
    return obs


VALUE_ITERATION_STATE_LIMIT = 100_000


def value_iteration(
    next_state: np.ndarray,
    reward: np.ndarray,
    terminal_after: np.ndarray,
    gamma: float,
    tol: float = 1e-10,
    max_sweeps: int = 1_000_000,
) -> np.ndarray:
    """Deterministic-MDP value iteration to sup-norm convergence.

    next_state, reward, terminal_after are (S, A) tables; transitions
    flagged terminal contribute no bootstrap.  Returns the optimal
    state values.
    """
    n_states, _ = next_state.shape
    if n_states > VALUE_ITERATION_STATE_LIMIT:
        raise TabularSizeError(
            f"{n_states} states exceeds the {VALUE_ITERATION_STATE_LIMIT} limit"
        )
    live = ~terminal_after
    v = np.zeros(n_states)
    for _ in range(max_sweeps):
        q = reward + gamma * v[next_state] * live
        v_new = q.max(axis=1)
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta <= tol:
            return v
    raise RuntimeError("value iteration did not converge")


@lru_cache(maxsize=8)
def _gridworld_tables(spec: GridworldSpec):
    """Flat joint-position indexing plus one-step transition tables."""
    spec.validate()
    cells = spec.width * spec.height
    n = spec.n_agents
    n_joint_pos = cells**n
    n_actions = len(GRID_MOVES) ** n

    def pos_index(positions) -> int:
        idx = 0
        for x, y in positions:
            idx = idx * cells + (y * spec.width + x)
        return idx

    all_positions = []
    for idx in range(n_joint_pos):
        pos = []
        for k in range(n - 1, -1, -1):
            c = (idx // (cells**k)) % cells
            pos.append((c % spec.width, c // spec.width))
        all_positions.append(tuple(pos))

    actions = []
    for a_idx in range(n_actions):
        rem, acts = a_idx, []
        for k in range(n - 1, -1, -1):
            acts.append((rem // (len(GRID_MOVES) ** k)) % len(GRID_MOVES))
        actions.append(tuple(acts))

    nxt = np.zeros((n_joint_pos, n_actions), dtype=np.int64)
    rew = np.zeros((n_joint_pos, n_actions))
    success_after = np.zeros((n_joint_pos, n_actions), dtype=bool)
    for s, positions in enumerate(all_positions):
        for a_idx, acts in enumerate(actions):
            moved = gridworld_move(spec, positions, acts)
            nxt[s, a_idx] = pos_index(moved)
            ok = _is_success(spec, moved)
            success_after[s, a_idx] = ok
            rew[s, a_idx] = spec.step_penalty + (spec.success_reward if ok else 0.0)
    return pos_index, actions, nxt, rew, success_after


def gridworld_value_iteration(
    spec: GridworldSpec, gamma: float = 1.0, tol: float = 1e-10
) -> tuple[np.ndarray, float]:
    """Exact optimal values on the time-expanded joint state space.

    Returns (values, optimal_return): values[t, s] is the best
    discounted return-to-go from joint position s with t steps already
    taken, and optimal_return is values at the start configuration.
    The expanded space is a DAG in t, so the sweeps reach the tolerance
    after at most horizon iterations.
    """
    cells = spec.width * spec.height
    n_joint = cells**spec.n_agents
    total = spec.horizon * n_joint
    if total > VALUE_ITERATION_STATE_LIMIT:
        raise TabularSizeError(
            f"time-expanded space has {total} states, "
            f"limit {VALUE_ITERATION_STATE_LIMIT}"
        )
    pos_index, _, nxt, rew, success_after = _gridworld_tables(spec)

    # row `horizon` stays zero, so the final step bootstraps nothing
    values = np.zeros((spec.horizon + 1, n_joint))
    while True:
        prev = values.copy()
        for t in range(spec.horizon):
            q = rew + gamma * prev[t + 1][nxt] * ~success_after
            values[t] = q.max(axis=1)
        if float(np.max(np.abs(values - prev))) <= tol:
            break
    return values, float(values[0, pos_index(spec.starts)])


def gridworld_greedy_action(
    spec: GridworldSpec,
    values: np.ndarray,
    t: int,
    positions: tuple[tuple[int, int], ...],
    gamma: float = 1.0,
) -> JointAction:
    """One-step lookahead under a value table from gridworld_value_iteration."""
    if not 0 <= t < spec.horizon:
        raise ValueError(f"t={t} outside the horizon {spec.horizon}")
    pos_index, actions, nxt, rew, success_after = _gridworld_tables(spec)
    s = pos_index(positions)
    if t + 1 >= spec.horizon:
        q = rew[s]
    else:
        q = rew[s] + gamma * values[t + 1][nxt[s]] * ~success_after[s]
    return actions[int(np.argmax(q))]


# ---------------------------------------------------------------------------
# Registry


def _make_bandit(**kwargs) -> BanditEnv:
    if kwargs:
        raise ValueError(f"bandit takes no options, got {sorted(kwargs)}")
    return BanditEnv()


def _make_matrix(**kwargs) -> MatrixGame:
    payoff = kwargs.pop("payoff", None)
    if payoff is None:
        seed = int(kwargs.pop("seed", 0))
        dims = kwargs.pop("dims", (5, 5))
        gen = RngStream(seed).split("matrix-payoff").generator()
        payoff = gen.uniform(-1.0, 1.0, size=tuple(dims))
    if kwargs:
        raise ValueError(f"unknown matrix options {sorted(kwargs)}")
    return MatrixGame(payoff)


def _make_gridworld(**kwargs) -> Gridworld:
    spec = kwargs.pop("spec", None)
    if spec is None:
        spec = GridworldSpec(**kwargs)
    elif kwargs:
        raise ValueError("pass either spec or keyword fields, not both")
    return Gridworld(spec)


ENV_REGISTRY = {
    "bandit": _make_bandit,
    "matrix": _make_matrix,
    "gridworld": _make_gridworld,
}


def make_env(name: str, **kwargs):
    """Construct a registered environment by name."""
    try:
        factory = ENV_REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(ENV_REGISTRY))
        raise ValueError(f"unknown environment {name!r}; known: {known}") from None
    return factory(**kwargs)
