"""Sampled Monte-Carlo tree search over joint action spaces.

Each node holds a sampled subset of joint actions with empirical-prior
correction ratios. Selection runs prior-corrected pUCT where the value score
is either the optimistic advantage (default) or a classic mean Q (ablation
mode). Backups delegate to the depth-bucket machinery in
:mod:`jointplan.optimistic`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from jointplan.core import (
    EmptyActionSetError,
    JointAction,
    PolicyDistribution,
    RngStream,
    SearchConfig,
    joint_prob,
)
from jointplan.optimistic import DepthBuckets, backup_path, optimistic_advantage


class SearchModelError(RuntimeError):
    """Model failure during search, tagged with the simulation index."""

    def __init__(self, simulation: int):
        where = "root expansion" if simulation < 0 else f"simulation {simulation}"
        super().__init__(f"model failure during {where}")
        self.simulation = simulation


@dataclass
class MinMaxStats:
    """Running extremes of one score kind, for min-max normalization."""

    lo: float = np.inf
    hi: float = -np.inf

    def update(self, x: float) -> None:
        self.lo = min(self.lo, x)
        self.hi = max(self.hi, x)

    def normalize(self, x: float) -> float:
        if self.hi > self.lo:
            return (x - self.lo) / (self.hi - self.lo)
        return 0.0


def sample_action_set(
    policy: PolicyDistribution, k: int, rng: RngStream
) -> tuple[list[JointAction], np.ndarray, np.ndarray]:
    """Sampled action subset with empirical and true prior probabilities.

    Draws k joint actions agent-wise i.i.d. from the policy and merges
    duplicates (empirical probability = draw count / k). When k covers the
    whole joint space the subset is the full enumeration and the empirical
    probabilities equal the true ones, so the correction ratio drops out.
    Returned actions are sorted for deterministic iteration order.
    """
    if k < 1:
        raise EmptyActionSetError("need at least one sampled action")
    dims = [len(p) for p in policy]
    total = int(np.prod(dims))
    if k >= total:
        actions = sorted(
            a for a in itertools.product(*(range(d) for d in dims))
            if joint_prob(policy, a) > 0.0
        )
        beta = np.array([joint_prob(policy, a) for a in actions])
        return actions, beta.copy(), beta

    gen = rng.generator() if isinstance(rng, RngStream) else rng
    draws = np.stack(
        [gen.choice(dims[i], size=k, p=np.asarray(policy[i], dtype=np.float64))
         for i in range(len(policy))],
        axis=1,
    )
    counts: dict[JointAction, int] = {}
    for row in draws:
        a = tuple(int(x) for x in row)
        counts[a] = counts.get(a, 0) + 1
    actions = sorted(counts)
    beta_hat = np.array([counts[a] / k for a in actions])
    beta = np.array([joint_prob(policy, a) for a in actions])
    return actions, beta_hat, beta


class TreeNode:
    """One expanded state: sampled actions, per-edge statistics, buckets."""

    __slots__ = (
        "state", "value", "buckets", "actions", "index", "priors", "ratios",
        "children", "edge_rewards", "counts", "qsums", "node_visits",
        "value_sum",
    )

    def __init__(self, state, value: float, actions: list[JointAction],
                 priors: np.ndarray, ratios: np.ndarray):
        if not actions:
            raise EmptyActionSetError("node created with no sampled actions")
        self.state = state
        self.value = float(value)
        self.buckets = DepthBuckets(value)
        self.actions = actions
        self.index = {a: i for i, a in enumerate(actions)}
        self.priors = np.asarray(priors, dtype=np.float64)
        self.ratios = np.asarray(ratios, dtype=np.float64)
        self.children: list[TreeNode | None] = [None] * len(actions)
        self.edge_rewards = np.zeros(len(actions))
        self.counts = np.zeros(len(actions), dtype=np.int64)
        self.qsums = np.zeros(len(actions))
        self.node_visits = 1  # the expansion itself
        self.value_sum = float(value)

    def mean_q(self, i: int) -> float:
        return self.qsums[i] / self.counts[i]


def _edge_score(node: TreeNode, i: int, cfg: SearchConfig) -> float | None:
    """Raw (unnormalized) value score of edge i, or None if unvisited."""
    child = node.children[i]
    if child is None or node.counts[i] == 0:
        return None
    if cfg.backup == "optimistic":
        return optimistic_advantage(
            node.edge_rewards[i], child.buckets, node.value,
            cfg.rho, cfg.lam, cfg.gamma,
        )
    return node.mean_q(i)


def puct_select(node: TreeNode, cfg: SearchConfig, minmax: MinMaxStats) -> JointAction:
    """Prior-corrected pUCT argmax over the node's sampled actions."""
    return node.actions[select_index(node, cfg, minmax)]


def select_index(node: TreeNode, cfg: SearchConfig, minmax: MinMaxStats) -> int:
    edge_sum = int(node.counts.sum())
    # the +1 counts the node's own expansion visit, so a fresh node still
    # explores by prior instead of zeroing the whole bonus
    sqrt_visits = np.sqrt(edge_sum + 1.0)
    c = cfg.c1 + np.log((edge_sum + cfg.c2 + 1.0) / cfg.c2)
    # corrected prior, normalized over the sampled set so a common rescaling
    # of the correction ratios cannot change the argmax (with beta equal to
    # the prior the product is already normalized and this is a no-op)
    corrected = node.ratios * node.priors
    total = corrected.sum()
    if total > 0:
        corrected = corrected / total
    best_i = 0
    best_score = -np.inf
    raw_scores = [_edge_score(node, i, cfg) for i in range(len(node.actions))]
    for raw in raw_scores:
        if raw is not None:
            minmax.update(raw)
    for i, raw in enumerate(raw_scores):
        value_score = 0.0 if raw is None else minmax.normalize(raw)
        explore = corrected[i] * sqrt_visits / (1.0 + node.counts[i]) * c
        score = value_score + explore
        if score > best_score:
            best_score = score
            best_i = i
    return best_i


@dataclass
class SearchResult:
    """Root statistics of one finished search."""

    actions: list[JointAction]
    omega: np.ndarray
    advantages: np.ndarray  # 0.0 for root actions never visited
    root_value: float
    chosen_action: JointAction
    tree: TreeNode | None = field(default=None, repr=False)


def _make_node(state, value, policies, cfg: SearchConfig, rng) -> TreeNode:
    actions, beta_hat, beta = sample_action_set(policies, cfg.num_sampled_actions, rng)
    priors = np.array([joint_prob(policies, a) for a in actions])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(beta > 0, beta_hat / np.where(beta > 0, beta, 1.0), 0.0)
    return TreeNode(state, value, actions, priors, ratios)


def run_search(
    model, root_obs, cfg: SearchConfig, rng: RngStream, keep_tree: bool = False
) -> SearchResult:
    """Grow a tree for the configured number of simulations and summarize
    the root. Deterministic given (model, observation, config, rng)."""
    cfg = cfg.validate()
    gen = rng.split("search").generator()

    try:
        state = model.initial_state(root_obs)
        value, policies = model.predict(state)
    except Exception as err:
        raise SearchModelError(-1) from err
    root = _make_node(state, value, policies, cfg, gen)
    if cfg.root_noise:
        noise = gen.dirichlet(np.full(len(root.actions), cfg.root_noise_alpha))
        root.priors = (
            (1.0 - cfg.root_noise_frac) * root.priors + cfg.root_noise_frac * noise
        )
    minmax = MinMaxStats()

    for sim in range(cfg.num_simulations):
        node = root
        path_nodes: list[TreeNode] = []
        path_indices: list[int] = []
        while True:
            i = select_index(node, cfg, minmax)
            path_nodes.append(node)
            path_indices.append(i)
            child = node.children[i]
            if child is None:
                break
            node = child

        parent, i = path_nodes[-1], path_indices[-1]
        action = parent.actions[i]
        try:
            child_state, reward = model.step(parent.state, action)
            child_value, child_policies = model.predict(child_state)
        except Exception as err:
            raise SearchModelError(sim) from err
        child = _make_node(child_state, child_value, child_policies, cfg, gen)
        parent.children[i] = child
        parent.edge_rewards[i] = reward

        rewards = [
            path_nodes[j].edge_rewards[path_indices[j]]
            for j in range(len(path_nodes))
        ]
        backup_path([n.buckets for n in path_nodes], rewards, child_value, cfg.gamma)

        child.node_visits = 1
        g = child_value
        for j in range(len(path_nodes) - 1, -1, -1):
            n, idx = path_nodes[j], path_indices[j]
            g = rewards[j] + cfg.gamma * g
            n.counts[idx] += 1
            n.qsums[idx] += g
            n.node_visits += 1
            raw = _edge_score(n, idx, cfg)
            if raw is not None:
                minmax.update(raw)

    total = root.counts.sum()
    omega = root.counts / total
    advantages = np.zeros(len(root.actions))
    for i, child in enumerate(root.children):
        if child is None:
            continue
        if cfg.backup == "optimistic":
            advantages[i] = optimistic_advantage(
                root.edge_rewards[i], child.buckets, root.value,
                cfg.rho, cfg.lam, cfg.gamma,
            )
        else:
            advantages[i] = root.mean_q(i) - root.value
    if cfg.backup == "optimistic":
        root_value = root.buckets.value(cfg.rho, cfg.lam)
    else:
        root_value = root.value_sum / root.node_visits
    chosen = root.actions[int(np.argmax(omega))]
    return SearchResult(
        actions=root.actions,
        omega=omega,
        advantages=advantages,
        root_value=float(root_value),
        chosen_action=chosen,
        tree=root if keep_tree else None,
    )


def act_from_result(result: SearchResult, temperature: float, rng: RngStream) -> JointAction:
    """Visit-count acting: argmax at temperature 0, else sample from
    omega^(1/temperature)."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature == 0:
        return result.actions[int(np.argmax(result.omega))]
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    weights = np.power(result.omega, 1.0 / temperature)
    weights /= weights.sum()
    return result.actions[int(gen.choice(len(result.actions), p=weights))]


def dump_tree(root: TreeNode, cfg: SearchConfig) -> str:
    """Textual dump, one node per line, breadth-first ids.

    Columns: depth, node-id, parent-id, action, N, r, v, A, where action is
    the incoming joint action (indices joined by '|', '-' for the root), N
    the node's visit count, r the incoming edge reward, v the node's own
    predicted value, and A the incoming edge's selection score (0 for the
    root and for the mean-backup ablation's unvisited edges).
    """
    lines = []
    queue: list[tuple[TreeNode, int, int, str, float, float]] = [
        (root, 0, -1, "-", 0.0, 0.0)
    ]
    next_id = 0
    while queue:
        node, depth, parent_id, action, reward, adv = queue.pop(0)
        node_id = next_id
        next_id += 1
        lines.append(
            f"{depth}, {node_id}, {parent_id}, {action}, {node.node_visits}, "
            f"{reward:.6f}, {node.value:.6f}, {adv:.6f}"
        )
        for i, child in enumerate(node.children):
            if child is None:
                continue
            a_txt = "|".join(str(x) for x in node.actions[i])
            if cfg.backup == "optimistic":
                a_val = optimistic_advantage(
                    node.edge_rewards[i], child.buckets, node.value,
                    cfg.rho, cfg.lam, cfg.gamma,
                )
            else:
                a_val = node.mean_q(i) - node.value if node.counts[i] else 0.0
            queue.append(
                (child, depth + 1, node_id, a_txt, float(node.edge_rewards[i]), a_val)
            )
    return "\n".join(lines)


def visit_invariant_violations(root: TreeNode) -> list[str]:
    """Nodes where edge visits do not equal node visits minus the expansion."""
    bad = []
    stack = [root]
    while stack:
        node = stack.pop()
        if int(node.counts.sum()) != node.node_visits - 1:
            bad.append(
                f"edge sum {int(node.counts.sum())} != visits {node.node_visits} - 1"
            )
        for child in node.children:
            if child is not None:
                stack.append(child)
    return bad
