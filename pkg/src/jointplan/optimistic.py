"""Optimistic value backup for tree search.

Each node keeps, per relative depth d below it, the multiset of bootstrapped
returns discovered so far: discounted path reward plus discounted bootstrap
value of the node at that depth. The node's value estimate filters every
depth bucket to its top (1-rho) share and averages the survivors with depth
weights lambda^d. Advantages built from these estimates replace mean-Q in
the selection rule.
"""

from __future__ import annotations

import bisect
import math
from typing import Sequence

from jointplan.core import EmptyActionSetError


class EmptyBucketError(ValueError):
    """Quantile filtering requested on an empty return set."""


def quantile_keep_count(n: int, rho: float, floor_mode: bool = False) -> int:
    """How many of n returns survive top-(1-rho) filtering; at least one.

    floor_mode flips ceil to floor and exists only as a fault-injection hook
    for the verification suite's negative control.
    """
    if n < 1:
        raise EmptyBucketError("quantile of empty return set")
    raw = (1.0 - rho) * n
    kept = math.floor(raw) if floor_mode else math.ceil(raw)
    return max(1, kept)


def top_quantile(values: Sequence[float], rho: float, floor_mode: bool = False) -> list[float]:
    """The kept (largest) elements, descending; permutation-invariant."""
    ordered = sorted(values, reverse=True)
    return ordered[: quantile_keep_count(len(ordered), rho, floor_mode)]


class DepthBuckets:
    """Bootstrapped-return buckets for one node, with a cached estimate.

    Depth 0 holds exactly the node's own predicted value, so a leaf's
    estimate is that value and deeper discoveries refine it.
    """

    __slots__ = ("_buckets", "_cache", "_dirty")

    def __init__(self, own_value: float):
        self._buckets: dict[int, list[float]] = {0: [float(own_value)]}
        self._cache: dict[tuple, float] = {}
        self._dirty = False

    @property
    def own_value(self) -> float:
        return self._buckets[0][0]

    def depths(self) -> list[int]:
        return sorted(self._buckets)

    def bucket(self, depth: int) -> list[float]:
        """Ascending-sorted copy of one depth's returns."""
        return list(self._buckets.get(depth, []))

    def size(self, depth: int) -> int:
        return len(self._buckets.get(depth, ()))

    def insert(self, depth: int, bootstrapped_return: float) -> None:
        if depth < 1:
            raise ValueError("depth 0 holds only the node's own value")
        bisect.insort(
            self._buckets.setdefault(depth, []), float(bootstrapped_return)
        )
        self._dirty = True

    def value(self, rho: float, lam: float, floor_mode: bool = False) -> float:
        """Depth-weighted mean of quantile-filtered returns; cached per
        (rho, lam) until the next insert."""
        key = (rho, lam, floor_mode)
        if self._dirty:
            self._cache.clear()
            self._dirty = False
        if key not in self._cache:
            num = 0.0
            den = 0.0
            for d, values in self._buckets.items():
                keep = quantile_keep_count(len(values), rho, floor_mode)
                weight = lam**d
                # values ascending: the kept elements are the tail
                num += weight * sum(values[len(values) - keep :])
                den += weight * keep
            self._cache[key] = num / den
        return self._cache[key]


def optimistic_advantage(
    edge_reward: float,
    child: DepthBuckets,
    parent_value: float,
    rho: float,
    lam: float,
    gamma: float,
    floor_mode: bool = False,
) -> float:
    """edge reward + discounted child estimate, relative to the parent's
    own predicted value."""
    return edge_reward + gamma * child.value(rho, lam, floor_mode) - parent_value


def backup_path(
    ancestors: Sequence[DepthBuckets],
    edge_rewards: Sequence[float],
    leaf_value: float,
    gamma: float,
) -> None:
    """Record one newly expanded node in every ancestor's buckets.

    ancestors[j] sits at distance len(ancestors)-j above the new node;
    edge_rewards[j] is the reward on the edge leaving ancestors[j] along
    the path. Each ancestor receives one element: the discounted rewards
    below it plus the discounted leaf value.
    """
    if len(ancestors) != len(edge_rewards):
        raise ValueError(
            f"{len(ancestors)} ancestors but {len(edge_rewards)} edge rewards"
        )
    if not ancestors:
        raise EmptyActionSetError("backup needs at least one ancestor")
    g = float(leaf_value)
    for j in range(len(ancestors) - 1, -1, -1):
        g = edge_rewards[j] + gamma * g
        ancestors[j].insert(len(ancestors) - j, g)
