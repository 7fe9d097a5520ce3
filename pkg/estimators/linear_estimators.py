"""
Linear-in-features Q estimators.

Every estimator here works on the same design: Phi holds phi(s, a) rows,
PhiPrime holds phi(s', a') rows with a' ~ pi(.|s') drawn once at fit time,
and R holds rewards. Terminal rows bootstrap from a zero next-feature.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.linalg

from tools.data import TransitionDataset
from tools.env import Policy
from tools.errors import DivergenceError, SolverError
from tools.features import FeatureMap, RffSpec, rff_features
from tools.utils import log, rng_stream

MAX_CONDITION = 1e12
DIVERGENCE_NORM = 1e8
KIV_CHUNK_ROWS = 8192


@dataclass(frozen=True, eq=False)
class LinearQ:
    feature_map: FeatureMap
    theta: np.ndarray
    curve: tuple = ()  # CurvePoint rows, one per FQE iteration

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.feature_map.dim:
            raise ValueError(f"theta has {theta.shape[0]} entries, feature map has {self.feature_map.dim}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def q(self, states, actions) -> np.ndarray:
        return self.feature_map.apply(states, actions) @ self.theta


@dataclass(frozen=True, eq=False)
class KernelIvQ(LinearQ):
    """LinearQ over random Fourier features plus the stage-1 map it was fitted with."""

    instrument_map: Optional[FeatureMap] = None
    stage1_weights: Optional[np.ndarray] = None  # (treatment dim, instrument dim)
    discount: float = 0.99


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    Phi: np.ndarray
    PhiPrime: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        n = self.Phi.shape[0]
        if self.PhiPrime.shape[0] != n or self.R.shape[0] != n:
            raise ValueError("design matrices must have equal row counts")


def next_features(
    data: TransitionDataset,
    policy: Policy,
    phi: FeatureMap,
    rng: np.random.Generator,
) -> np.ndarray:
    """phi(s', a') with a' ~ pi(.|s'); terminal rows are left at zero."""
    next_actions = policy.sample(data.next_states, rng)
    out = np.zeros((len(data), phi.dim))
    live = ~data.terminals
    if live.any():
        out[live] = phi.apply(data.next_states[live], next_actions[live])
    return out


def build_design(
    data: TransitionDataset,
    policy: Policy,
    phi: FeatureMap,
    seed: int,
) -> DesignMatrices:
    rng = rng_stream(seed, "actions")
    return DesignMatrices(
        Phi=phi.apply(data.states, data.actions),
        PhiPrime=next_features(data, policy, phi, rng),
        R=np.asarray(data.rewards, dtype=float),
    )


def _check_condition(matrix: np.ndarray, what: str) -> float:
    cond = float(np.linalg.cond(matrix))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SolverError(
            f"{what} is singular or ill-conditioned (condition number {cond:.3e} > {MAX_CONDITION:.0e})",
            condition=cond if np.isfinite(cond) else None,
        )
    return cond


def two_stage_least_squares(Z: np.ndarray, X: np.ndarray, Y: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """theta = (Z'X + ridge I)^{-1} Z'Y, by pivoted LU."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float).T).T
    X = np.atleast_2d(np.asarray(X, dtype=float).T).T
    Y = np.asarray(Y, dtype=float).reshape(-1)
    if Z.shape != X.shape:
        raise ValueError(f"instrument shape {Z.shape} must match regressor shape {X.shape}")
    if Y.shape[0] != X.shape[0]:
        raise ValueError("outcome and regressor row counts differ")
    moment = Z.T @ X
    if ridge:
        moment = moment + ridge * np.eye(moment.shape[0])
    _check_condition(moment, "instrument cross-moment Z'X")
    return scipy.linalg.lu_solve(scipy.linalg.lu_factor(moment), Z.T @ Y)


def ordinary_least_squares(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return two_stage_least_squares(X, X, Y)


def make_confounded_data(n: int, seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z ~ N(0,1), eps ~ N(0,1), X = Z + eps, Y = 2X - 2 eps. Returns (Z, X, Y)."""
    rng = rng_stream(seed, "confounded")
    z = rng.standard_normal(n)
    eps = rng.standard_normal(n)
    x = z + eps
    return z[:, None], x[:, None], 2.0 * x - 2.0 * eps


def lstd_q(
    data: TransitionDataset,
    policy: Policy,
    phi: FeatureMap,
    discount: float,
    seed: int,
    ridge: float = 0.0,
) -> LinearQ:
    design = build_design(data, policy, phi, seed)
    try:
        theta = two_stage_least_squares(design.Phi, design.Phi - discount * design.PhiPrime, design.R, ridge)
    except SolverError as e:
        raise SolverError(f"LSTD-Q: {e}; try a positive ridge", **e.details) from e
    log(f"LSTD-Q fitted on {len(data)} rows with {phi.name}")
    return LinearQ(phi, theta)


def linear_dbrm(
    data: TransitionDataset,
    policy: Policy,
    phi: FeatureMap,
    discount: float,
    seed: int,
    ridge: float = 0.0,
) -> LinearQ:
    """
    Minimizes mean[(r - Q(s,a) + g Q(s',a1)) (r - Q(s,a) + g Q(s',a2))] over
    theta. With X_i = Phi - g Phi'_i the objective is
    theta' M theta - 2 b' theta + c, M = sym(X1'X2)/n, b = (X1 + X2)' r / 2n.
    """
    rng = rng_stream(seed, "actions")
    Phi = phi.apply(data.states, data.actions)
    x1 = Phi - discount * next_features(data, policy, phi, rng)
    x2 = Phi - discount * next_features(data, policy, phi, rng)
    r = np.asarray(data.rewards, dtype=float)
    n = len(data)

    cross = x1.T @ x2 / n
    m = 0.5 * (cross + cross.T) + ridge * np.eye(phi.dim)
    b = (x1 + x2).T @ r / (2.0 * n)
    _check_condition(m, "DBRM moment matrix")
    try:
        theta = scipy.linalg.cho_solve(scipy.linalg.cho_factor(m), b)
    except np.linalg.LinAlgError as e:
        raise SolverError("DBRM moment matrix is not positive definite; the objective has no minimum") from e
    return LinearQ(phi, theta)


def linear_fqe(
    data: TransitionDataset,
    policy: Policy,
    phi: FeatureMap,
    discount: float,
    n_iters: int,
    seed: int,
    ridge: float = 0.0,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
) -> LinearQ:
    """theta_k = (Phi'Phi + ridge I)^{-1} Phi'(R + g Phi' theta_{k-1}) from theta_0 = 0."""
    design = build_design(data, policy, phi, seed)
    gram = design.Phi.T @ design.Phi + ridge * np.eye(phi.dim)
    _check_condition(gram, "FQE regression Gram matrix")
    factor = scipy.linalg.cho_factor(gram)
    reward_part = design.Phi.T @ design.R
    bootstrap = discount * (design.Phi.T @ design.PhiPrime)

    theta = np.zeros(phi.dim)
    for k in range(1, n_iters + 1):
        theta = scipy.linalg.cho_solve(factor, reward_part + bootstrap @ theta)
        norm = float(np.linalg.norm(theta))
        if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
            raise DivergenceError(
                f"linear FQE diverged at iteration {k} (|theta| = {norm:.3e}); features are unstable",
                iteration=k,
            )
        if callback is not None:
            callback(k, theta)
    return LinearQ(phi, theta)


# ---------------------------------------------------------------------------
# Kernel IV over random Fourier features
# ---------------------------------------------------------------------------

def _ridge_solve(gram: np.ndarray, cross: np.ndarray, lam: float) -> np.ndarray:
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram + lam * np.eye(gram.shape[0])), cross)
    except np.linalg.LinAlgError as e:
        raise SolverError(f"ridge system is not positive definite (lambda={lam})") from e


def _chunks(n: int, size: int = KIV_CHUNK_ROWS):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def kernel_iv(
    data: TransitionDataset,
    policy: Policy,
    encoder: FeatureMap,
    rff_x: RffSpec,
    rff_z: RffSpec,
    lambda1: float,
    lambda2: float,
    discount: float,
    seed: int,
) -> KernelIvQ:
    """
    Stage 1 ridge-regresses phi(s', a') on psi(s, a); stage 2 ridge-regresses
    r on phi(s, a) - g V psi(s, a). Moments are accumulated in row chunks.
    `encoder` maps (s, a) to the RFF input space.
    """
    if lambda1 <= 0 or lambda2 <= 0:
        raise ValueError("kernel IV regularizers must be positive")
    treatment = rff_features(rff_x, encoder)
    instrument = rff_features(rff_z, encoder)

    n = len(data)
    rng = rng_stream(seed, "actions")
    next_actions = policy.sample(data.next_states, rng)

    psi_gram = np.zeros((rff_z.n_features, rff_z.n_features))
    psi_cross = np.zeros((rff_z.n_features, rff_x.n_features))
    for rows in _chunks(n):
        psi = instrument.apply(data.states[rows], data.actions[rows])
        phi_next = np.zeros((psi.shape[0], rff_x.n_features))
        live = ~data.terminals[rows]
        if live.any():
            phi_next[live] = treatment.apply(data.next_states[rows][live], next_actions[rows][live])
        psi_gram += psi.T @ psi
        psi_cross += psi.T @ phi_next
    v_t = _ridge_solve(psi_gram / n, psi_cross / n, lambda1)  # (m_z, m_x)

    x_gram = np.zeros((rff_x.n_features, rff_x.n_features))
    x_cross = np.zeros(rff_x.n_features)
    for rows in _chunks(n):
        x = treatment.apply(data.states[rows], data.actions[rows])
        x = x - discount * instrument.apply(data.states[rows], data.actions[rows]) @ v_t
        x_gram += x.T @ x
        x_cross += x.T @ data.rewards[rows]
    theta = _ridge_solve(x_gram / n, x_cross / n, lambda2)

    log(f"KIV fitted: m_x={rff_x.n_features}, m_z={rff_z.n_features}, lambda1={lambda1:g}, lambda2={lambda2:g}")
    return KernelIvQ(treatment, theta, instrument_map=instrument, stage1_weights=v_t.T, discount=discount)


def kiv_stage2_loss(model: KernelIvQ, data: TransitionDataset) -> float:
    """Unregularized stage-2 loss mean[(r - theta'(phi - g V psi))^2] on held-out rows."""
    total = 0.0
    for rows in _chunks(len(data)):
        x = model.feature_map.apply(data.states[rows], data.actions[rows])
        x = x - model.discount * model.instrument_map.apply(data.states[rows], data.actions[rows]) @ model.stage1_weights.T
        total += float(np.sum((data.rewards[rows] - x @ model.theta) ** 2))
    return total / max(len(data), 1)


def save_theta(model: LinearQ, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# features={model.feature_map.name}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["index", "theta"])
        for i, value in enumerate(model.theta):
            writer.writerow([i, repr(float(value))])
    log(f"Coefficients written to: {path}")
