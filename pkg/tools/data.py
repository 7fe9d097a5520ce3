"""
Offline datasets: pooled episode generation from a behavior process,
shifted-distribution resampling, train/valid splitting and CSV round trips.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional, Tuple

import numpy as np

from tools.env import TabularMdp, TabularPolicy, single_action_policy, state_index
from tools.errors import DatasetFormatError
from tools.utils import log, rng_stream


class Transition(NamedTuple):
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """
    Column-oriented store of logged transitions. Tabular states are held as
    (n, 1) float columns containing the state index; vector states use d columns.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    seed: int = 0
    source: str = ""
    split: Optional[np.ndarray] = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        next_states = np.asarray(self.next_states, dtype=float)
        if next_states.ndim == 1:
            next_states = next_states[:, None]
        columns = {
            "states": states,
            "actions": np.asarray(self.actions, dtype=np.int64).reshape(-1),
            "rewards": np.asarray(self.rewards, dtype=float).reshape(-1),
            "next_states": next_states,
            "terminals": np.asarray(self.terminals, dtype=bool).reshape(-1),
        }
        if self.split is not None:
            columns["split"] = np.asarray(self.split, dtype=object).reshape(-1)
        n = states.shape[0]
        for name, col in columns.items():
            if col.shape[0] != n:
                raise ValueError(f"column {name} has {col.shape[0]} rows, expected {n}")
            if col.dtype != object:
                col.setflags(write=False)
            object.__setattr__(self, name, col)
        if not np.all(np.isfinite(columns["rewards"])):
            raise ValueError("rewards must be finite")

    def __len__(self) -> int:
        return self.states.shape[0]

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield Transition(
                self.states[i], int(self.actions[i]), float(self.rewards[i]),
                self.next_states[i], bool(self.terminals[i]),
            )

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def subset(self, rows, split_tag: Optional[str] = None) -> "TransitionDataset":
        rows = np.asarray(rows, dtype=np.int64)
        split = None
        if split_tag is not None:
            split = np.full(rows.shape[0], split_tag, dtype=object)
        elif self.split is not None:
            split = self.split[rows]
        return TransitionDataset(
            states=self.states[rows],
            actions=self.actions[rows],
            rewards=self.rewards[rows],
            next_states=self.next_states[rows],
            terminals=self.terminals[rows],
            seed=self.seed,
            source=self.source,
            split=split,
        )


def _simulate_step(mdp: TabularMdp, states: np.ndarray, actions: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(mdp.transition[states, actions], axis=1)
    nxt = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(nxt, mdp.n_states - 1)


def generate_dataset(
    mdp: TabularMdp,
    behavior: TabularPolicy,
    n_transitions: int,
    seed: int,
    source: str = "",
) -> TransitionDataset:
    """
    Roll episodes from mu0 under `behavior` until each hits a terminal state,
    pool their transitions, and keep exactly the first n_transitions
    (a trailing partial episode is truncated, never padded).
    """
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    if not mdp.terminal.any():
        raise ValueError("pooled episode generation needs a terminal state")

    rng = rng_stream(seed, "transitions")
    init_cdf = np.cumsum(mdp.initial_dist)
    trans_cdf = np.cumsum(mdp.transition, axis=2)
    act_cdf = np.cumsum(behavior.probs, axis=1)

    states = np.empty(n_transitions, dtype=np.int64)
    actions = np.empty(n_transitions, dtype=np.int64)
    next_states = np.empty(n_transitions, dtype=np.int64)
    draws = rng.random((n_transitions, 2))

    s = min(int(np.searchsorted(init_cdf, rng.random(), side="right")), mdp.n_states - 1)
    episodes = 1
    for t in range(n_transitions):
        a = min(int(np.searchsorted(act_cdf[s], draws[t, 0], side="right")), mdp.n_actions - 1)
        s_next = min(int(np.searchsorted(trans_cdf[s, a], draws[t, 1], side="right")), mdp.n_states - 1)
        states[t], actions[t], next_states[t] = s, a, s_next
        if mdp.terminal[s_next]:
            s = min(int(np.searchsorted(init_cdf, rng.random(), side="right")), mdp.n_states - 1)
            episodes += 1
        else:
            s = s_next

    log(f"Generated {n_transitions} transitions from {episodes} episodes (seed={seed})")
    return TransitionDataset(
        states=states.astype(float)[:, None],
        actions=actions,
        rewards=mdp.reward[states, actions],
        next_states=next_states.astype(float)[:, None],
        terminals=mdp.terminal[next_states],
        seed=seed,
        source=source or f"rollout:n={n_transitions}",
    )


def generate_chain_dataset(mdp: TabularMdp, n_transitions: int, seed: int) -> TransitionDataset:
    return generate_dataset(
        mdp,
        single_action_policy(mdp),
        n_transitions,
        seed,
        source=f"chain:p={mdp.transition[0, 0, 1]!r}:n={n_transitions}",
    )


def shifted_state_weights(mdp: TabularMdp, alpha: float) -> np.ndarray:
    """Sampling weights proportional to exp(alpha * s_i) over non-terminal states."""
    positions = mdp.embedding.positions if mdp.embedding is not None else np.arange(mdp.n_states, dtype=float)
    logits = np.where(mdp.terminal, -np.inf, alpha * positions)
    logits = logits - np.max(logits)
    weights = np.exp(logits)
    return weights / weights.sum()


def resample_shifted(
    mdp: TabularMdp,
    alpha: float,
    n: int,
    seed: int,
    behavior: Optional[TabularPolicy] = None,
) -> TransitionDataset:
    """Draw states i.i.d. with weight exp(alpha * s) and simulate one step from each."""
    behavior = behavior or single_action_policy(mdp)
    rng = rng_stream(seed, "dataset")
    weights = shifted_state_weights(mdp, alpha)
    states = rng.choice(mdp.n_states, size=n, p=weights)
    actions = behavior.sample(states, rng)
    next_states = _simulate_step(mdp, states, actions, rng.random(n))
    return TransitionDataset(
        states=states.astype(float)[:, None],
        actions=actions,
        rewards=mdp.reward[states, actions],
        next_states=next_states.astype(float)[:, None],
        terminals=mdp.terminal[next_states],
        seed=seed,
        source=f"shifted:alpha={alpha!r}:n={n}",
    )


def split(dataset: TransitionDataset, ratio: float = 0.9, seed: int = 0) -> Tuple[TransitionDataset, TransitionDataset]:
    """
    Random disjoint train/valid partition. The train side gets
    floor(ratio * n) rows (clamped so both sides are non-empty); ties round
    toward the validation side.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(dataset)
    if n < 2:
        raise ValueError(f"cannot split a dataset with {n} rows")
    n_train = min(max(int(math.floor(ratio * n + 1e-9)), 1), n - 1)
    order = rng_stream(seed, "split").permutation(n)
    train_rows = np.sort(order[:n_train])
    valid_rows = np.sort(order[n_train:])
    return dataset.subset(train_rows, "train"), dataset.subset(valid_rows, "valid")


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------

def _header(state_dim: int, with_split: bool) -> list:
    cols = [f"s_{i}" for i in range(state_dim)] + ["a", "r"]
    cols += [f"sp_{i}" for i in range(state_dim)] + ["terminal"]
    if with_split:
        cols.append("split")
    return cols


def save_dataset(dataset: TransitionDataset, path: str) -> None:
    d = dataset.state_dim
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# seed={dataset.seed}\n")
        f.write(f"# source={dataset.source}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(_header(d, dataset.split is not None))
        for i in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.states[i]]
            row += [str(int(dataset.actions[i])), repr(float(dataset.rewards[i]))]
            row += [repr(float(v)) for v in dataset.next_states[i]]
            row.append("1" if dataset.terminals[i] else "0")
            if dataset.split is not None:
                row.append(str(dataset.split[i]))
            writer.writerow(row)
    log(f"Dataset written to: {path} ({len(dataset)} rows)")


def _parse_float(text: str, field: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DatasetFormatError(f"field {field!r} is not a number: {text!r}", line)
    if not math.isfinite(value):
        raise DatasetFormatError(f"field {field!r} is not finite: {text!r}", line)
    return value


def load_dataset(path: str) -> TransitionDataset:
    meta = {"seed": "0", "source": ""}
    with open(path, "r", encoding="utf-8", newline="") as f:
        lines = f.read().split("\n")

    line_no = 0
    while line_no < len(lines) and lines[line_no].startswith("#"):
        key, _, value = lines[line_no][1:].strip().partition("=")
        meta[key.strip()] = value
        line_no += 1
    if line_no >= len(lines) or not lines[line_no]:
        raise DatasetFormatError("missing header row", line_no + 1)

    header = next(csv.reader([lines[line_no]]))
    header_line = line_no + 1
    state_cols = [c for c in header if c.startswith("s_")]
    d = len(state_cols)
    with_split = header[-1] == "split"
    if d == 0 or header != _header(d, with_split):
        raise DatasetFormatError(f"unexpected header {header}", header_line)

    states, actions, rewards, next_states, terminals, splits = [], [], [], [], [], []
    for offset, text in enumerate(lines[line_no + 1:]):
        current = header_line + offset + 1
        if not text:
            continue
        row = next(csv.reader([text]))
        if len(row) != len(header):
            raise DatasetFormatError(f"expected {len(header)} fields, got {len(row)}", current)
        states.append([_parse_float(row[i], f"s_{i}", current) for i in range(d)])
        try:
            actions.append(int(row[d]))
        except ValueError:
            raise DatasetFormatError(f"field 'a' is not an integer: {row[d]!r}", current)
        rewards.append(_parse_float(row[d + 1], "r", current))
        next_states.append([_parse_float(row[d + 2 + i], f"sp_{i}", current) for i in range(d)])
        flag = row[2 * d + 2]
        if flag not in ("0", "1"):
            raise DatasetFormatError(f"field 'terminal' must be 0 or 1, got {flag!r}", current)
        terminals.append(flag == "1")
        if with_split:
            splits.append(row[-1])

    try:
        seed = int(meta["seed"])
    except ValueError:
        raise DatasetFormatError(f"seed comment is not an integer: {meta['seed']!r}", 1)

    return TransitionDataset(
        states=np.array(states, dtype=float).reshape(-1, d),
        actions=np.array(actions, dtype=np.int64),
        rewards=np.array(rewards, dtype=float),
        next_states=np.array(next_states, dtype=float).reshape(-1, d),
        terminals=np.array(terminals, dtype=bool),
        seed=seed,
        source=meta["source"],
        split=np.array(splits, dtype=object) if with_split else None,
    )


def state_histogram(dataset: TransitionDataset, n_states: int) -> np.ndarray:
    counts = np.bincount(state_index(dataset.states), minlength=n_states)
    return counts / max(len(dataset), 1)
