"""Self-check suites: each pits a module against an independent oracle.

The tree suite regrows random search trees through the incremental
backup and recomputes every estimate from scratch by enumerating the
subtree. The policy suites check the closed-form improved distribution
against its first-order optimality condition and the loss gradient
against central differences. The transform suite round-trips the scalar
codecs. Results are plain records so the command layer can serialize
them however it likes.
"""

from dataclasses import dataclass
import math

import numpy as np

from .autodiff import Tensor, log_softmax
from .core import RngStream
from .model import (
    Support,
    scalar_to_support,
    support_to_scalar,
    value_transform,
    value_transform_inv,
)
from .optimistic import DepthBuckets, backup_path, optimistic_advantage
from .policy_loss import (
    PolicyTarget,
    advantage_weights,
    joint_log_probs,
    stationarity_residual,
    tilted_policy,
    weighted_policy_loss,
)

__all__ = [
    "SuiteResult",
    "optimistic_tree_suite",
    "stationarity_suite",
    "constant_advantage_suite",
    "policy_gradient_suite",
    "transform_suite",
    "support_suite",
    "run_all",
]

TREE_GAMMAS = (0.5, 0.99)
TREE_RHOS = (0.0, 0.5, 0.75)
TREE_LAMBDAS = (0.5, 0.8, 1.0)


@dataclass
class SuiteResult:
    suite: str
    cases: int
    failures: int
    max_err: float
    tolerance: float

    def __post_init__(self):
        # plain Python scalars so the record serializes anywhere
        self.cases = int(self.cases)
        self.failures = int(self.failures)
        self.max_err = float(self.max_err)
        self.tolerance = float(self.tolerance)

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.cases > 0

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "cases": self.cases,
            "failures": self.failures,
            "max_err": self.max_err,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }


class _Node:
    __slots__ = ("value", "depth", "children", "buckets")

    def __init__(self, value: float, depth: int):
        self.value = value
        self.depth = depth
        self.children: list[tuple[float, "_Node"]] = []
        self.buckets = DepthBuckets(value)


def _grow_tree(gen, gamma: float, max_depth: int = 6, max_branch: int = 4,
               max_nodes: int = 40) -> _Node:
    """Random tree built one node at a time through the real backup."""
    root = _Node(float(gen.uniform(-1, 1)), 0)
    nodes = [root]
    paths = {id(root): ([root], [])}  # node -> (ancestor chain, edge rewards)
    target = int(gen.integers(2, max_nodes + 1))
    while len(nodes) < target:
        open_nodes = [
            n for n in nodes
            if n.depth < max_depth and len(n.children) < max_branch
        ]
        if not open_nodes:
            break
        parent = open_nodes[int(gen.integers(len(open_nodes)))]
        reward = float(gen.uniform(-1, 1))
        child = _Node(float(gen.uniform(-1, 1)), parent.depth + 1)
        parent.children.append((reward, child))
        chain, rewards = paths[id(parent)]
        paths[id(child)] = (chain + [child], rewards + [reward])
        nodes.append(child)
        backup_path([n.buckets for n in chain], rewards + [reward],
                    child.value, gamma)
    return root


def _subtree_returns(node: _Node, gamma: float) -> dict[int, list[float]]:
    """Bootstrapped returns below node keyed by depth, by recursion."""
    per_depth: dict[int, list[float]] = {0: [node.value]}
    for reward, child in node.children:
        for d, vals in _subtree_returns(child, gamma).items():
            bucket = per_depth.setdefault(d + 1, [])
            bucket.extend(reward + gamma * v for v in vals)
    return per_depth

def _oracle_value(returns: dict[int, list[float]], rho: float, lam: float) -> float:
    num = 0.0
    den = 0.0
    for d, vals in returns.items():
        keep = max(1, math.ceil((1.0 - rho) * len(vals)))
        top = sorted(vals, reverse=True)[:keep]
        num += lam**d * sum(top)
        den += lam**d * keep
    return num / den


def optimistic_tree_suite(n_trees: int = 1000, seed: int = 0,
                          floor_mode: bool = False,
                          tol: float = 1e-9) -> SuiteResult:
    """Incremental estimates vs full recomputation on random trees.

    floor_mode is forwarded to the implementation side only, so turning
    it on must make this suite fail (the negative control).
    """
    gen = RngStream(seed).split("verify-trees").generator()
    cases = failures = 0
    max_err = 0.0
    for _ in range(max(0, n_trees)):
        gamma = TREE_GAMMAS[int(gen.integers(len(TREE_GAMMAS)))]
        root = _grow_tree(gen, gamma)
        root_returns = _subtree_returns(root, gamma)
        child_returns = [
            (r, c, _subtree_returns(c, gamma)) for r, c in root.children
        ]
        for rho in TREE_RHOS:
            for lam in TREE_LAMBDAS:
                expect = _oracle_value(root_returns, rho, lam)
                got = root.buckets.value(rho, lam, floor_mode)
                err = abs(got - expect)
                cases += 1
                max_err = max(max_err, err)
                failures += err > tol
                for reward, child, returns in child_returns:
                    expect_a = (
                        reward + gamma * _oracle_value(returns, rho, lam)
                        - root.value
                    )
                    got_a = optimistic_advantage(
                        reward, child.buckets, root.value, rho, lam, gamma,
                        floor_mode,
                    )
                    err = abs(got_a - expect_a)
                    cases += 1
                    max_err = max(max_err, err)
                    failures += err > tol
    return SuiteResult("optimistic-tree", cases, failures, max_err, tol)


def _random_instance(gen):
    m = int(gen.integers(2, 33))
    pi = gen.dirichlet(np.ones(m))
    advantages = gen.normal(0.0, 3.0, m)
    alpha = float(gen.uniform(0.2, 5.0))
    return pi, advantages, alpha


def stationarity_suite(n_instances: int = 1000, seed: int = 0,
                       tol: float = 1e-8) -> SuiteResult:
    """First-order optimality of the tilted distribution."""
    gen = RngStream(seed).split("verify-stationarity").generator()
    cases = failures = 0
    max_err = 0.0
    for _ in range(max(0, n_instances)):
        pi, advantages, alpha = _random_instance(gen)
        eta, _ = tilted_policy(pi, advantages, alpha)
        res = stationarity_residual(eta, pi, advantages, alpha)
        cases += 1
        max_err = max(max_err, res)
        failures += res > tol
    return SuiteResult("tilted-stationarity", cases, failures, max_err, tol)


def constant_advantage_suite(n_instances: int = 200, seed: int = 0) -> SuiteResult:
    """Constant advantages must leave the distribution exactly unchanged."""
    gen = RngStream(seed).split("verify-constant").generator()
    cases = failures = 0
    max_err = 0.0
    for _ in range(max(0, n_instances)):
        pi, _, alpha = _random_instance(gen)
        const = float(gen.normal(0.0, 3.0))
        eta, _ = tilted_policy(pi, np.full(pi.shape, const), alpha)
        err = float(np.max(np.abs(eta - pi)))
        cases += 1
        max_err = max(max_err, err)
        failures += not np.array_equal(eta, pi)
    return SuiteResult("constant-advantage", cases, failures, max_err, 0.0)


def policy_gradient_suite(n_instances: int = 200, seed: int = 0,
                          tol: float = 1e-5) -> SuiteResult:
    """Weighted-loss gradient in the logits vs central differences."""
    gen = RngStream(seed).split("verify-gradient").generator()
    cases = failures = 0
    max_err = 0.0
    h = 1e-6
    for _ in range(max(0, n_instances)):
        m = int(gen.integers(2, 9))
        actions = [(j,) for j in range(m)]
        target = PolicyTarget(
            actions=actions,
            omega=gen.dirichlet(np.ones(m)),
            advantages=gen.normal(0.0, 2.0, m),
            alpha=float(gen.uniform(0.5, 4.0)),
        )
        weights = advantage_weights(target)
        theta = gen.normal(0.0, 1.0, m)

        def loss_at(vec):
            t = Tensor(vec.copy(), requires_grad=True)
            lp = joint_log_probs([log_softmax(t)], actions)
            return t, weighted_policy_loss(weights, lp)

        t, loss = loss_at(theta)
        loss.backward()
        analytic = t.grad.copy()
        cases += 1
        worst = 0.0
        for j in range(m):
            up = theta.copy()
            up[j] += h
            dn = theta.copy()
            dn[j] -= h
            fd = (float(loss_at(up)[1].data) - float(loss_at(dn)[1].data)) / (2 * h)
            rel = abs(fd - analytic[j]) / max(abs(fd), abs(analytic[j]), 1.0)
            worst = max(worst, rel)
        max_err = max(max_err, worst)
        failures += worst > tol
    return SuiteResult("policy-gradient", cases, failures, max_err, tol)


def transform_suite(tol: float = 1e-9) -> SuiteResult:
    """Compression transform round trip on a fixed grid."""
    xs = np.arange(-100.0, 100.0 + 1e-9, 0.25)
    err = np.abs(value_transform_inv(value_transform(xs)) - xs)
    return SuiteResult(
        "transform-roundtrip", xs.size, int(np.sum(err > tol)),
        float(err.max()), tol,
    )


def support_suite(tol: float = 1e-12) -> SuiteResult:
    """Scalar to two-hot and back on a grid across the support range."""
    support = Support()
    vs = np.arange(-5.0, 5.0 + 1e-9, 0.01)
    back = support_to_scalar(scalar_to_support(vs, support), support)
    err = np.abs(back - vs)
    return SuiteResult(
        "support-roundtrip", vs.size, int(np.sum(err > tol)),
        float(err.max()), tol,
    )


def run_all(trees: int = 1000, instances: int = 1000, seed: int = 0,
            floor_mode: bool = False) -> list[SuiteResult]:
    return [
        optimistic_tree_suite(trees, seed, floor_mode=floor_mode),
        stationarity_suite(instances, seed),
        constant_advantage_suite(min(instances, 200), seed),
        policy_gradient_suite(min(instances, 200), seed),
        transform_suite(),
        support_suite(),
    ]
