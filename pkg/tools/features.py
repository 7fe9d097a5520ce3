"""
Feature maps over (state, action) pairs.

Every map takes a (n, d) state array and an optional (n,) action array and
returns an (n, dim) float64 matrix. Tabular states arrive as index columns;
maps that need geometry take a StateEmbedding to turn indices into positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.spatial.distance import pdist

from tools.env import StateEmbedding, state_index
from tools.utils import rng_stream

GRID_WIDTH = 0.1


@dataclass(frozen=True, eq=False)
class FeatureMap:
    dim: int
    fn: Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]
    name: str = "features"

    def apply(self, states, actions=None) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        out = np.asarray(self.fn(states, actions), dtype=float)
        if out.shape != (states.shape[0], self.dim):
            raise ValueError(f"{self.name}: expected output shape {(states.shape[0], self.dim)}, got {out.shape}")
        if not np.all(np.isfinite(out)):
            raise ValueError(f"{self.name}: non-finite feature values")
        return out

    __call__ = apply


def _positions(states: np.ndarray, embedding: Optional[StateEmbedding]) -> np.ndarray:
    if embedding is None:
        return states[:, 0]
    return embedding.embed(state_index(states))


def position_features(embedding: Optional[StateEmbedding] = None) -> FeatureMap:
    """The raw scalar position s, used as network input on the chain."""
    return FeatureMap(1, lambda s, a: _positions(s, embedding)[:, None], name="position")


def tabular_features(n_states: int, exclude=()) -> FeatureMap:
    """
    One-hot state indicators. States listed in `exclude` (typically the
    terminal ones, which never start a logged transition) get no column and
    map to the zero vector.
    """
    keep = np.ones(n_states, dtype=bool)
    keep[list(exclude)] = False
    column = np.full(n_states, -1, dtype=np.int64)
    column[keep] = np.arange(int(keep.sum()))
    dim = int(keep.sum())

    def fn(states, actions):
        idx = state_index(states)
        if np.any(idx < 0) or np.any(idx >= n_states):
            raise ValueError(f"state index out of range [0, {n_states})")
        out = np.zeros((states.shape[0], dim))
        hit = column[idx] >= 0
        out[np.flatnonzero(hit), column[idx[hit]]] = 1.0
        return out

    return FeatureMap(dim, fn, name=f"tabular[{dim}/{n_states}]")


def gaussian_grid_features(
    n_centers: int,
    embedding: Optional[StateEmbedding] = None,
    width: float = GRID_WIDTH,
    low: float = -2.0,
    high: float = 2.0,
) -> FeatureMap:
    """phi_j(s) = exp(-(s - c_j)^2 / width^2) with c_j = low + (high - low) / D * j."""
    if n_centers < 1:
        raise ValueError("n_centers must be >= 1")
    centers = low + ((high - low) / n_centers) * np.arange(n_centers)

    def fn(states, actions):
        s = _positions(states, embedding)
        return np.exp(-((s[:, None] - centers[None, :]) ** 2) / width ** 2)

    return FeatureMap(n_centers, fn, name=f"grid[{n_centers},w={width}]")


@dataclass(frozen=True, eq=False)
class RffSpec:
    n_features: int
    bandwidth: float
    frequencies: np.ndarray  # (input_dim, n_features)
    phases: np.ndarray
    seed: int

    @property
    def input_dim(self) -> int:
        return self.frequencies.shape[0]


def make_rff_spec(n_features: int, input_dim: int, bandwidth: float, seed: int, stream: str = "rff") -> RffSpec:
    """Frequencies ~ N(0, 1/bandwidth^2), phases ~ U[0, 2 pi)."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    rng = rng_stream(seed, stream)
    freqs = rng.normal(0.0, 1.0 / bandwidth, size=(input_dim, n_features))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    return RffSpec(n_features, float(bandwidth), freqs, phases, seed)


def median_bandwidth(inputs: np.ndarray, seed: int = 0, max_rows: int = 1000) -> float:
    """Median pairwise distance over at most max_rows rows."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    if inputs.shape[0] > max_rows:
        rows = rng_stream(seed, "bandwidth").choice(inputs.shape[0], max_rows, replace=False)
        inputs = inputs[rows]
    dists = pdist(inputs)
    dists = dists[dists > 0]
    return float(np.median(dists)) if dists.size else 1.0


def rff_features(spec: RffSpec, base: Optional[FeatureMap] = None) -> FeatureMap:
    """
    sqrt(2/m) cos(x W + b) over the base map's output, approximating the
    kernel exp(-|x - y|^2 / (2 bandwidth^2)).
    """
    scale = np.sqrt(2.0 / spec.n_features)

    def fn(states, actions):
        x = states if base is None else base.apply(states, actions)
        if x.shape[1] != spec.input_dim:
            raise ValueError(f"rff expects input dim {spec.input_dim}, got {x.shape[1]}")
        return scale * np.cos(x @ spec.frequencies + spec.phases)

    return FeatureMap(spec.n_features, fn, name=f"rff[{spec.n_features},bw={spec.bandwidth:.4g}]")


def state_action_concat(state_encoder: FeatureMap, n_actions: int) -> FeatureMap:
    """[state features || one-hot(a)]."""
    def fn(states, actions):
        if actions is None:
            raise ValueError("state_action_concat needs actions")
        actions = np.asarray(actions, dtype=np.int64).reshape(-1)
        if np.any(actions < 0) or np.any(actions >= n_actions):
            raise ValueError(f"action index out of range [0, {n_actions})")
        one_hot = np.zeros((actions.shape[0], n_actions))
        one_hot[np.arange(actions.shape[0]), actions] = 1.0
        return np.concatenate([state_encoder.apply(states), one_hot], axis=1)

    return FeatureMap(state_encoder.dim + n_actions, fn, name=f"{state_encoder.name}+onehot[{n_actions}]")


def action_features(state_map: FeatureMap, n_actions: int) -> FeatureMap:
    """phi(s, a); a singleton action set contributes nothing, so phi(s, a) = phi(s)."""
    if n_actions == 1:
        return state_map
    return state_action_concat(state_map, n_actions)
