"""
Turns a fitted Q function into a policy-value estimate and scores it
against the dynamic-programming ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Tuple, Union

import numpy as np

from tools.env import Policy, TabularMdp, TabularPolicy
from tools.utils import rng_stream

StateSampler = Callable[[int, np.random.Generator], np.ndarray]


class FittedQ(Protocol):
    def q(self, states, actions) -> np.ndarray: ...


@dataclass(frozen=True)
class ValueEstimate:
    rho_hat: float
    rho_min: float
    rho_max: float
    rho_true: Optional[float] = None
    normalized_error: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "rho_hat": self.rho_hat,
            "rho_true": self.rho_true,
            "rho_min": self.rho_min,
            "rho_max": self.rho_max,
            "normalized_error": self.normalized_error,
        }


def q_table(fitted: FittedQ, mdp: TabularMdp) -> np.ndarray:
    """Q-hat evaluated at every (state, action) pair, shape (S, A)."""
    S, A = mdp.n_states, mdp.n_actions
    states = np.repeat(mdp.state_inputs, A, axis=0)
    actions = np.tile(np.arange(A), S)
    return np.asarray(fitted.q(states, actions), dtype=float).reshape(S, A)


def initial_state_sampler(mdp: TabularMdp) -> StateSampler:
    def sample(n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(mdp.n_states, size=n, p=mdp.initial_dist).astype(float)[:, None]
    return sample


def monte_carlo_value(
    fitted: FittedQ,
    sampler: StateSampler,
    policy: Policy,
    n_samples: int,
    seed: int = 0,
) -> Tuple[float, float]:
    """Sample mean of Q-hat over (s, a) ~ mu0 x pi, with its standard error."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rng_stream(seed, "policy_value")
    states = sampler(n_samples, rng)
    actions = policy.sample(states, rng)
    values = np.asarray(fitted.q(states, actions), dtype=float).reshape(-1)
    stderr = float(values.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return float(values.mean()), stderr


def estimate_policy_value(
    fitted: FittedQ,
    source: Union[TabularMdp, StateSampler],
    policy: Policy,
    n_samples: int = 10_000,
    seed: int = 0,
) -> float:
    """
    rho-hat = E_{s ~ mu0, a ~ pi}[Q-hat(s, a)]. Exact when both the initial
    distribution and the policy are tabular, Monte Carlo otherwise.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if isinstance(source, TabularMdp) and isinstance(policy, TabularPolicy):
        q = q_table(fitted, source)
        return float(source.initial_dist @ np.sum(policy.probs * q, axis=1))
    sampler = initial_state_sampler(source) if isinstance(source, TabularMdp) else source
    return monte_carlo_value(fitted, sampler, policy, n_samples, seed)[0]


def normalize(rho: float, rho_min: float, rho_max: float) -> float:
    if not rho_max > rho_min:
        raise ValueError(f"normalization needs rho_max > rho_min, got [{rho_min}, {rho_max}]")
    return (rho - rho_min) / (rho_max - rho_min)


def abs_error(rho_hat_norm: float, rho_true_norm: float) -> float:
    return abs(rho_hat_norm - rho_true_norm)


def chain_value_range(mdp: TabularMdp) -> Tuple[float, float]:
    """[0, sum_{t<H} gamma^t] with H = n_states - 1 (unit peak reward)."""
    horizon = mdp.n_states - 1
    return 0.0, float(np.sum(mdp.discount ** np.arange(horizon)))


def score(rho_hat: float, rho_true: Optional[float], rho_min: float, rho_max: float) -> ValueEstimate:
    error = None
    if rho_true is not None:
        error = abs_error(normalize(rho_hat, rho_min, rho_max), normalize(rho_true, rho_min, rho_max))
    return ValueEstimate(float(rho_hat), float(rho_min), float(rho_max),
                         None if rho_true is None else float(rho_true), error)


def td_error_metric(fitted: FittedQ, data, policy: Policy, discount: float, seed: int = 0) -> float:
    """Mean squared one-sample TD error of a fitted Q on logged transitions (a' ~ pi, fixed draw)."""
    next_actions = policy.sample(data.next_states, rng_stream(seed, "valid_actions"))
    q_next = np.zeros(len(data))
    live = ~data.terminals
    if live.any():
        q_next[live] = fitted.q(data.next_states[live], next_actions[live])
    residual = data.rewards - fitted.q(data.states, data.actions) + discount * q_next
    return float(np.mean(residual ** 2))
