"""Sampled tree search with optimistic backups for cooperative multi-agent RL."""

from jointplan.core import (
    JointAction,
    PolicyDistribution,
    RngStream,
    SearchConfig,
    joint_prob,
)

__all__ = [
    "JointAction",
    "PolicyDistribution",
    "RngStream",
    "SearchConfig",
    "joint_prob",
]

__version__ = "0.1.0"
