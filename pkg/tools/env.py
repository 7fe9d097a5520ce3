"""
Finite MDPs, the stochastic chain task, policies, and an exact
dynamic-programming oracle for ground-truth Q functions and policy values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
import scipy.linalg

from tools.errors import MdpError
from tools.utils import log_warning

ROW_TOL = 1e-12
CHAIN_REWARD_WIDTH = 0.2


def _frozen(array, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def state_index(states) -> np.ndarray:
    """Tabular states travel as (n, 1) float columns holding the index."""
    arr = np.asarray(states)
    if arr.ndim == 2:
        arr = arr[:, 0]
    return np.rint(arr).astype(np.int64)


@dataclass(frozen=True)
class StateEmbedding:
    """Places state i at -2 + (4 / n_states) * i on [low, high]."""

    n_states: int
    low: float = -2.0
    high: float = 2.0

    def embed(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=float)
        return self.low + ((self.high - self.low) / self.n_states) * idx

    @property
    def positions(self) -> np.ndarray:
        return self.embed(np.arange(self.n_states))


@dataclass(frozen=True, eq=False)
class TabularMdp:
    n_states: int
    n_actions: int
    transition: np.ndarray  # P[s, a, s']
    reward: np.ndarray  # r[s, a]
    initial_dist: np.ndarray
    terminal: np.ndarray
    discount: float
    action_names: tuple = ()
    embedding: Optional[StateEmbedding] = None

    def __post_init__(self):
        S, A = self.n_states, self.n_actions
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "initial_dist", _frozen(self.initial_dist))
        object.__setattr__(self, "terminal", _frozen(self.terminal, dtype=bool))
        if not self.action_names:
            object.__setattr__(self, "action_names", tuple(f"a{i}" for i in range(A)))

        if self.transition.shape != (S, A, S):
            raise MdpError(f"transition table must have shape {(S, A, S)}, got {self.transition.shape}")
        if self.reward.shape != (S, A):
            raise MdpError(f"reward table must have shape {(S, A)}, got {self.reward.shape}")
        if self.initial_dist.shape != (S,) or self.terminal.shape != (S,):
            raise MdpError("initial_dist and terminal must have one entry per state")
        if np.any(self.transition < 0) or np.any(self.initial_dist < 0):
            raise MdpError("probabilities must be non-negative")
        row_err = np.max(np.abs(self.transition.sum(axis=2) - 1.0))
        if row_err > ROW_TOL:
            raise MdpError(f"transition rows must sum to 1 (max deviation {row_err:.3e})")
        if abs(self.initial_dist.sum() - 1.0) > ROW_TOL:
            raise MdpError("initial distribution must sum to 1")
        if not np.all(np.isfinite(self.reward)):
            raise MdpError("rewards must be finite")
        for s in np.flatnonzero(self.terminal):
            if np.any(self.transition[s, :, s] != 1.0) or np.any(self.reward[s] != 0.0):
                raise MdpError(f"terminal state {s} must self-loop with zero reward")
        if not 0.0 <= self.discount <= 1.0:
            raise MdpError(f"discount must lie in [0, 1], got {self.discount}")

    @property
    def state_inputs(self) -> np.ndarray:
        """Every state as the (S, 1) index column datasets use."""
        return np.arange(self.n_states, dtype=float)[:, None]


class Policy(Protocol):
    n_actions: int

    def action_probs(self, state: int) -> np.ndarray: ...

    def sample(self, states, rng: np.random.Generator) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray  # pi[s, a]

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(self.probs))
        if self.probs.ndim != 2:
            raise MdpError("policy table must be 2-D (states x actions)")
        err = np.max(np.abs(self.probs.sum(axis=1) - 1.0))
        if err > ROW_TOL or np.any(self.probs < 0):
            raise MdpError(f"policy rows must be probability vectors (max deviation {err:.3e})")
        object.__setattr__(self, "_cdf", _frozen(np.cumsum(self.probs, axis=1)))

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def action_probs(self, state: int) -> np.ndarray:
        return self.probs[int(state)]

    def sample(self, states, rng: np.random.Generator) -> np.ndarray:
        idx = state_index(states)
        u = rng.random(idx.shape[0])
        actions = (u[:, None] >= self._cdf[idx]).sum(axis=1)
        return np.minimum(actions, self.n_actions - 1).astype(np.int64)


def uniform_policy(n_states: int, n_actions: int) -> TabularPolicy:
    return TabularPolicy(np.full((n_states, n_actions), 1.0 / n_actions))


def epsilon_greedy_policy(q: np.ndarray, epsilon: float = 0.1) -> TabularPolicy:
    q = np.asarray(q, dtype=float)
    n_actions = q.shape[1]
    probs = np.full(q.shape, epsilon / n_actions)
    probs[np.arange(q.shape[0]), np.argmax(q, axis=1)] += 1.0 - epsilon
    return TabularPolicy(probs)


# ---------------------------------------------------------------------------
# The chain task
# ---------------------------------------------------------------------------

def make_chain_mdp(n_states: int = 100, p_advance: float = 0.5, discount: float = 0.99) -> TabularMdp:
    """
    Single-action chain on [-2, 2]. From state i < n-1 the action "right"
    moves to i+1 with probability p_advance and stays otherwise; state n-1
    is terminal. Reward exp(-s_i^2 / 0.2^2) is paid on acting from s_i.
    """
    if n_states < 2:
        raise MdpError(f"chain needs at least 2 states, got {n_states}")
    if p_advance == 0:
        raise MdpError("p_advance = 0 gives a non-terminating chain")
    if not 0.0 < p_advance <= 1.0:
        raise MdpError(f"p_advance must lie in (0, 1], got {p_advance}")

    embedding = StateEmbedding(n_states)
    positions = embedding.positions
    last = n_states - 1

    transition = np.zeros((n_states, 1, n_states))
    reward = np.zeros((n_states, 1))
    for i in range(last):
        transition[i, 0, i + 1] = p_advance
        transition[i, 0, i] += 1.0 - p_advance
        reward[i, 0] = np.exp(-positions[i] ** 2 / CHAIN_REWARD_WIDTH ** 2)
    transition[last, 0, last] = 1.0

    initial = np.zeros(n_states)
    initial[0] = 1.0
    terminal = np.zeros(n_states, dtype=bool)
    terminal[last] = True

    return TabularMdp(
        n_states=n_states,
        n_actions=1,
        transition=transition,
        reward=reward,
        initial_dist=initial,
        terminal=terminal,
        discount=discount,
        action_names=("right",),
        embedding=embedding,
    )


def single_action_policy(mdp: TabularMdp) -> TabularPolicy:
    return TabularPolicy(np.ones((mdp.n_states, 1)))


def chain_advance_probability(mdp: TabularMdp) -> float:
    if mdp.n_actions != 1 or not mdp.terminal[-1]:
        raise MdpError("not a chain MDP")
    return float(mdp.transition[0, 0, 1])


# ---------------------------------------------------------------------------
# Dynamic-programming oracle
# ---------------------------------------------------------------------------

def bootstrap_operator(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """M[(s,a), (s',a')] = P(s'|s,a) pi(a'|s') with terminal states zeroed."""
    S, A = mdp.n_states, mdp.n_actions
    live = (~mdp.terminal).astype(float)
    next_state = mdp.transition.reshape(S * A, S) * live[None, :]
    spread = np.zeros((S, S * A))
    for s in range(S):
        spread[s, s * A:(s + 1) * A] = policy.probs[s]
    op = next_state @ spread
    op[np.repeat(mdp.terminal, A)] = 0.0
    return op


def _masked_reward(mdp: TabularMdp) -> np.ndarray:
    r = mdp.reward.copy()
    r[mdp.terminal] = 0.0
    return r.reshape(-1)


def bellman_residual(mdp: TabularMdp, policy: TabularPolicy, q: np.ndarray) -> float:
    q = np.asarray(q, dtype=float).reshape(-1)
    target = _masked_reward(mdp) + mdp.discount * bootstrap_operator(mdp, policy) @ q
    return float(np.max(np.abs(q - target)))


def value_iteration(
    mdp: TabularMdp,
    policy: TabularPolicy,
    tol: float = 1e-10,
    max_iters: int = 100_000,
    q0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Iterate Q <- r + gamma P_pi Q until successive iterates differ by <= tol in L-inf."""
    op = mdp.discount * bootstrap_operator(mdp, policy)
    r = _masked_reward(mdp)
    q = np.zeros_like(r) if q0 is None else np.asarray(q0, dtype=float).reshape(-1).copy()
    for _ in range(max_iters):
        q_next = r + op @ q
        if np.max(np.abs(q_next - q)) <= tol:
            return q_next.reshape(mdp.n_states, mdp.n_actions)
        q = q_next
    raise MdpError(
        f"value iteration did not reach tolerance {tol} within the cap of {max_iters} iterations",
        max_iters=max_iters,
    )


def exact_q(mdp: TabularMdp, policy: TabularPolicy, tol: float = 1e-10, max_iters: int = 100_000) -> np.ndarray:
    """
    Ground-truth Q for `policy`. Solves (I - gamma M) q = r directly and then
    polishes with value iteration from that start, so the returned table is
    a Bellman fixed point to `tol` whenever the iteration converges at all.
    """
    SA = mdp.n_states * mdp.n_actions
    op = mdp.discount * bootstrap_operator(mdp, policy)
    q0 = None
    try:
        q0 = scipy.linalg.solve(np.eye(SA) - op, _masked_reward(mdp))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        log_warning("direct Bellman solve failed; falling back to value iteration from zero")
    return value_iteration(mdp, policy, tol=tol, max_iters=max_iters, q0=q0)


def chain_q_closed_form(mdp: TabularMdp) -> np.ndarray:
    """Backward recursion Q(s_i) = (r(s_i) + gamma p Q(s_{i+1})) / (1 - gamma (1 - p))."""
    p = chain_advance_probability(mdp)
    gamma = mdp.discount
    q = np.zeros((mdp.n_states, 1))
    for i in range(mdp.n_states - 2, -1, -1):
        q[i, 0] = (mdp.reward[i, 0] + gamma * p * q[i + 1, 0]) / (1.0 - gamma * (1.0 - p))
    return q


def policy_value_exact(mdp: TabularMdp, policy: TabularPolicy, q: Optional[np.ndarray] = None) -> float:
    if q is None:
        q = exact_q(mdp, policy)
    return float(mdp.initial_dist @ np.sum(policy.probs * q, axis=1))


def perturb_discrete_actions(mdp: TabularMdp, p_random: float) -> TabularMdp:
    """With probability p_random the agent's action is replaced by a uniform one."""
    if not 0.0 <= p_random <= 1.0:
        raise MdpError(f"p_random must lie in [0, 1], got {p_random}")
    mean_transition = mdp.transition.mean(axis=1, keepdims=True)
    mean_reward = mdp.reward.mean(axis=1, keepdims=True)
    return TabularMdp(
        n_states=mdp.n_states,
        n_actions=mdp.n_actions,
        transition=(1.0 - p_random) * mdp.transition + p_random * mean_transition,
        reward=(1.0 - p_random) * mdp.reward + p_random * mean_reward,
        initial_dist=mdp.initial_dist,
        terminal=mdp.terminal,
        discount=mdp.discount,
        action_names=mdp.action_names,
        embedding=mdp.embedding,
    )


def pooled_state_distribution(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """
    Fraction of logged transitions that start in each state when episodes
    from mu0 are pooled (normalized expected visit counts). Terminal states
    get zero mass. Without terminal states the normalized discounted
    occupancy is used instead.
    """
    S = mdp.n_states
    p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    live = ~mdp.terminal
    if not live.all() and mdp.terminal.any():
        sub = p_pi[np.ix_(live, live)]
        visits_live = scipy.linalg.solve((np.eye(sub.shape[0]) - sub).T, mdp.initial_dist[live])
        visits = np.zeros(S)
        visits[live] = visits_live
    else:
        visits = scipy.linalg.solve((np.eye(S) - mdp.discount * p_pi).T, mdp.initial_dist)
    total = float(visits.sum())
    if not total > 0.0:
        raise MdpError("no live state is reachable from the initial distribution; pooled episodes would be empty")
    return visits / total


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_mdp(mdp: TabularMdp, path: str) -> None:
    payload = {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "discount": mdp.discount,
        "action_names": list(mdp.action_names),
        "initial_dist": mdp.initial_dist.tolist(),
        "terminal": mdp.terminal.tolist(),
        "reward": mdp.reward.tolist(),
        "transition": mdp.transition.tolist(),
        "embedding": None if mdp.embedding is None else {
            "n_states": mdp.embedding.n_states,
            "low": mdp.embedding.low,
            "high": mdp.embedding.high,
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)


def load_mdp(path: str) -> TabularMdp:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    try:
        embedding = payload.get("embedding")
        return TabularMdp(
            n_states=int(payload["n_states"]),
            n_actions=int(payload["n_actions"]),
            transition=np.array(payload["transition"], dtype=float),
            reward=np.array(payload["reward"], dtype=float),
            initial_dist=np.array(payload["initial_dist"], dtype=float),
            terminal=np.array(payload["terminal"], dtype=bool),
            discount=float(payload["discount"]),
            action_names=tuple(payload.get("action_names", ())),
            embedding=None if embedding is None else StateEmbedding(**embedding),
        )
    except KeyError as e:
        raise MdpError(f"MDP file {path} is missing field {e}")
