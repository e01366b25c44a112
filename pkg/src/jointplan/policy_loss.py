"""Advantage-weighted policy improvement.

The search result gives a visit distribution omega and per-action advantages
over the sampled set. The policy loss is a weighted behavior-cloning
cross-entropy with weights omega * exp(advantage / alpha); its non-parametric
optimum is the exponentially tilted distribution eta ~ omega * exp(A/alpha),
which the stationarity residual verifies to first order.

Advantages are shifted by their maximum before exponentiation. The tilted
distribution is invariant to this shift and the loss only picks up a positive
constant factor, so semantics are unchanged while overflow becomes impossible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from jointplan.autodiff import Tensor
from jointplan.core import JointAction

# exp(-700) is still a normal double; logs below this are clamped
CLAMP_LOG_FLOOR = -700.0

_clamp_events = 0


def clamp_event_count() -> int:
    return _clamp_events


def reset_clamp_events() -> None:
    global _clamp_events
    _clamp_events = 0


class SupportMismatchError(ValueError):
    """Distributions that do not share a common strictly positive support."""


@dataclass
class PolicyTarget:
    """Search-derived target for one root state."""

    actions: list[JointAction]
    omega: np.ndarray
    advantages: np.ndarray
    alpha: float

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        if len(self.actions) != len(self.omega) or len(self.omega) != len(
            self.advantages
        ):
            raise SupportMismatchError("actions, omega, advantages lengths differ")
        if not np.all(np.isfinite(self.omega)) or not np.all(
            np.isfinite(self.advantages)
        ):
            raise ValueError("non-finite policy target")
        if abs(float(self.omega.sum()) - 1.0) > 1e-9 or np.any(self.omega < 0):
            raise ValueError("omega is not a distribution")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


def advantage_weights(target: PolicyTarget) -> np.ndarray:
    """Per-action loss weights omega * exp((A - max A) / alpha)."""
    shifted = target.advantages - target.advantages.max()
    return target.omega * np.exp(shifted / target.alpha)


def tilted_policy(pi: np.ndarray, advantages: np.ndarray, alpha: float):
    """The closed-form improved distribution eta ~ pi * exp(A/alpha).

    Returns (eta, Z) where Z normalizes the max-shifted product. Constant
    advantages leave pi untouched.
    """
    pi = np.asarray(pi, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    if pi.shape != advantages.shape:
        raise SupportMismatchError(
            f"pi shape {pi.shape} != advantages shape {advantages.shape}"
        )
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    shifted = advantages - advantages.max()
    if not shifted.any():
        # constant advantages: the tilt is a uniform factor, so the input
        # distribution is already the answer (and stays bit-identical even
        # when its float sum is off by an ulp)
        return pi.copy(), float(pi.sum())
    w = pi * np.exp(shifted / alpha)
    z = float(w.sum())
    if z <= 0:
        raise ValueError("tilted distribution has zero mass")
    return w / z, z


def stationarity_residual(
    eta: np.ndarray, pi: np.ndarray, advantages: np.ndarray, alpha: float
) -> float:
    """First-order optimality check for the tilted distribution.

    For each action the combination A + alpha*log(pi) - alpha*log(eta) must
    be constant at the optimum; returns the max deviation from the support
    mean. Zero (to rounding) iff eta is the tilted policy.
    """
    eta = np.asarray(eta, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    if not (eta.shape == pi.shape == advantages.shape):
        raise SupportMismatchError("eta, pi, advantages shapes differ")
    if np.any(eta <= 0) or np.any(pi <= 0):
        raise SupportMismatchError("supports must be strictly positive")
    g = advantages + alpha * np.log(pi) - alpha * np.log(eta)
    return float(np.max(np.abs(g - g.mean())))


def joint_log_probs(per_agent_log_probs, actions: list[JointAction]) -> Tensor:
    """Sum per-agent log-probabilities into joint-action log-probs.

    per_agent_log_probs[i] is a Tensor of log-softmax values over agent i's
    actions; result is a Tensor with one entry per joint action.
    """
    total = None
    for i, lp in enumerate(per_agent_log_probs):
        idx = np.array([a[i] for a in actions])
        term = lp[idx]
        total = term if total is None else total + term
    if total is None:
        raise SupportMismatchError("no agents")
    return total


def weighted_policy_loss(weights: np.ndarray, log_probs: Tensor) -> Tensor:
    """-sum_a w(a) * log pi(a), with log-probs clamped at a floor.

    A clamp should never trigger for softmax policies at sane scales; each
    occurrence bumps a module counter so training can surface it.
    """
    global _clamp_events
    weights = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(weights)):
        raise ValueError("non-finite loss weights")
    if np.any(log_probs.data < CLAMP_LOG_FLOOR):
        _clamp_events += 1
        log_probs = CLAMP_LOG_FLOOR + (log_probs - CLAMP_LOG_FLOOR).relu()
    return -(Tensor(weights) * log_probs).sum()
