"""Shared domain types, configuration, and the deterministic randomness contract.

Every stochastic component in the package draws from an :class:`RngStream`,
which is split by label so that enabling or reordering optional parallelism
can never change results.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

# A joint action is one discrete action index per agent, hashable so it can
# key tree edges and replay entries.
JointAction = tuple[int, ...]

# Per-agent categorical distributions; entry i has that agent's action-space
# cardinality. The joint probability of a JointAction is the product.
PolicyDistribution = Sequence[np.ndarray]

PROB_TOL = 1e-9


class ShapeMismatchError(ValueError):
    """Inputs whose agent counts or action dimensions disagree."""


class EmptyActionSetError(ValueError):
    """An operation that needs at least one sampled action got none."""


def joint_prob(policy: PolicyDistribution, action: JointAction) -> float:
    """Probability of ``action`` under the product of per-agent policies."""
    if len(policy) != len(action):
        raise ShapeMismatchError(
            f"policy has {len(policy)} agents, action has {len(action)}"
        )
    prob = 1.0
    for dist, a in zip(policy, action):
        if not 0 <= a < len(dist):
            raise ShapeMismatchError(
                f"action index {a} out of range for {len(dist)} actions"
            )
        prob *= float(dist[a])
    return prob


def assert_distribution(p: np.ndarray, tol: float = PROB_TOL) -> None:
    """Raise if ``p`` is not a probability vector (nonnegative, sums to 1)."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeMismatchError(f"expected 1-d probability vector, got shape {arr.shape}")
    if np.any(arr < 0):
        raise ValueError(f"negative probability entry: min={arr.min()}")
    total = float(arr.sum())
    if abs(total - 1.0) > tol:
        raise ValueError(f"probabilities sum to {total}, not 1")


def _hash64(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class RngStream:
    """A named, forkable random stream.

    Identical ``(seed, stream)`` pairs produce identical draw sequences on
    every platform (Philox is counter-based and version-stable). Streams are
    single-owner: fork a child per logical actor instead of sharing.
    """

    seed: int
    stream: int = 0

    def split(self, label: str) -> "RngStream":
        """Child stream deterministic in (self, label)."""
        return RngStream(self.seed, _hash64(f"{self.seed}:{self.stream}:{label}"))

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed % 2**64, self.stream % 2**64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def split_rng(parent: RngStream, label: str) -> RngStream:
    return parent.split(label)


@dataclass
class SearchConfig:
    """Knobs for sampled tree search and its optimistic backup.

    ``backup`` selects the value statistic used during selection:
    ``"optimistic"`` ranks actions by the quantile-filtered depth-discounted
    advantage, ``"mean"`` is the classic mean-value backup kept for ablations.
    """

    num_sampled_actions: int = 10
    num_simulations: int = 100
    rho: float = 0.75
    lam: float = 0.8
    alpha: float = 3.0
    gamma: float = 0.99
    c1: float = 1.25
    c2: float = 19652.0
    temperature: float = 1.0
    backup: str = "optimistic"
    root_noise: bool = False
    root_noise_alpha: float = 0.3
    root_noise_frac: float = 0.25

    def validate(self) -> "SearchConfig":
        if self.num_sampled_actions < 1:
            raise ValueError("num_sampled_actions must be >= 1")
        if self.num_simulations < 1:
            raise ValueError("num_simulations must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must be in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 <= self.gamma < 1.0 + 1e-12:
            raise ValueError("gamma must be in [0, 1]")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.backup not in ("optimistic", "mean"):
            raise ValueError(f"unknown backup mode {self.backup!r}")
        return self


def replace_fields(cfg, **updates):
    """Dataclass copy-with-updates that rejects unknown field names."""
    names = {f.name for f in fields(cfg)}
    unknown = set(updates) - names
    if unknown:
        raise KeyError(f"unknown config fields: {sorted(unknown)}")
    kwargs = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    kwargs.update(updates)
    return type(cfg)(**kwargs)
