"""
Neural Q estimators: the shared training contract plus neural DBRM, FQE with
a target network, and the two-stage deep-feature IV variant (DFIV).

Deep IV lives in estimators/deep_iv.py, the adversarial GMM family in
estimators/adversarial.py. All of them share the config, batching, curve
and abort handling defined here.
"""

from __future__ import annotations

import csv
import dataclasses
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np

from tools import nn
from tools.data import TransitionDataset
from tools.env import Policy
from tools.errors import ConfigError, TrainingAborted
from tools.features import FeatureMap, action_features
from tools.utils import log, rng_stream

ValueProbe = Callable[["NeuralQ"], float]


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorParams:
    """Hyperparameters of one estimator; `from_dict` rejects unknown keys."""

    seed: int = 0
    discount: float = 0.99

    @classmethod
    def from_dict(cls, params: Optional[dict] = None):
        params = dict(params or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(params) - known)
        if unknown:
            raise ConfigError(f"unknown hyperparameters for {cls.__name__}: {unknown}", unknown=unknown)
        for f in dataclasses.fields(cls):
            if isinstance(params.get(f.name), list):
                params[f.name] = tuple(params[f.name])
        config = cls(**params)
        config.validate()
        return config

    def validate(self) -> None:
        if not 0.0 <= self.discount < 1.0:
            raise ConfigError(f"discount must lie in [0, 1), got {self.discount}")

    def scaled(self, factor: float):
        """Shrink every step budget, and the eval/checkpoint intervals with it, by `factor`."""
        updates = {f.name: max(1, int(round(getattr(self, f.name) * factor)))
                   for f in dataclasses.fields(self) if f.name.endswith(("_steps", "_interval"))}
        return dataclasses.replace(self, **updates)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


@dataclass(frozen=True)
class TrainConfig(EstimatorParams):
    n_steps: int = 100_000
    batch_size: int = 1024
    learning_rate: float = 1e-4
    hidden: Tuple[int, ...] = (50, 50)
    activation: str = "relu"
    layer_norm: bool = False
    weight_decay: float = 0.0
    eval_interval: int = 1000

    def validate(self) -> None:
        super().validate()
        if self.n_steps < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("n_steps, batch_size and eval_interval must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")


@dataclass(frozen=True)
class DbrmConfig(TrainConfig):
    pass


@dataclass(frozen=True)
class FqeConfig(TrainConfig):
    target_update_period: int = 100


@dataclass(frozen=True)
class DfivConfig(TrainConfig):
    batch_size: int = 2048
    lambda1: float = 1e-4
    lambda2: float = 1e-4
    value_reg: float = 1e-6
    instrument_reg: float = 1e-6
    instrument_learning_rate: float = 1e-4
    instrument_hidden: Tuple[int, ...] = (50, 50)


# ---------------------------------------------------------------------------
# Fitted Q functions
# ---------------------------------------------------------------------------

class CurvePoint(NamedTuple):
    step: int
    train_loss: float
    valid_metric: float
    q_s0: float


@dataclass(frozen=True, eq=False)
class NeuralQ:
    net: nn.Mlp
    encoder: FeatureMap
    curve: Tuple[CurvePoint, ...] = ()
    validation: Optional[float] = None

    def q(self, states, actions) -> np.ndarray:
        return self.net.predict(self.encoder.apply(states, actions))[:, 0]

    def save(self, path: str) -> None:
        nn.save_checkpoint(self.net, path)


@dataclass(frozen=True, eq=False)
class FeatureQ:
    """Q(s, a) = phi(s, a) . theta over learned features."""

    net: nn.Mlp
    theta: np.ndarray
    encoder: FeatureMap
    curve: Tuple[CurvePoint, ...] = ()
    validation: Optional[float] = None
    instrument_net: Optional[nn.Mlp] = None
    stage1_weights: Optional[np.ndarray] = None

    def q(self, states, actions) -> np.ndarray:
        return self.net.predict(self.encoder.apply(states, actions)) @ self.theta

    def save(self, path: str) -> None:
        nn.save_checkpoint(self.net, path)


def write_curve(curve, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CurvePoint._fields)
        for point in curve:
            writer.writerow([point.step] + [repr(float(v)) for v in point[1:]])


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def default_encoder(state_dim: int, n_actions: int) -> FeatureMap:
    raw = FeatureMap(state_dim, lambda s, a: s, name="raw")
    return action_features(raw, n_actions)


class Batch(NamedTuple):
    inputs: np.ndarray  # encoded (s, a)
    rewards: np.ndarray
    live: np.ndarray  # 1.0 where s' is not terminal
    next_inputs: np.ndarray  # encoded (s', a'), a' ~ pi
    next_inputs_alt: Optional[np.ndarray] = None  # second independent draw of a'


class EpochBatcher:
    """Minibatch row indices; the row order is reshuffled at every epoch."""

    def __init__(self, n_rows: int, batch_size: int, rng: np.random.Generator):
        if n_rows < 1:
            raise ValueError("cannot batch an empty dataset")
        self.n_rows = n_rows
        self.batch_size = min(batch_size, n_rows)
        self.rng = rng
        self.epoch = 0
        self._order = rng.permutation(n_rows)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n_rows:
            self._order = self.rng.permutation(self.n_rows)
            self._pos = 0
            self.epoch += 1
        rows = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return rows


def make_batch(
    data: TransitionDataset,
    rows: np.ndarray,
    encoder: FeatureMap,
    policy: Policy,
    rng: np.random.Generator,
    two_draws: bool = False,
) -> Batch:
    next_states = data.next_states[rows]
    next_inputs = encoder.apply(next_states, policy.sample(next_states, rng))
    alt = encoder.apply(next_states, policy.sample(next_states, rng)) if two_draws else None
    return Batch(
        inputs=encoder.apply(data.states[rows], data.actions[rows]),
        rewards=np.asarray(data.rewards[rows], dtype=float),
        live=(~data.terminals[rows]).astype(float),
        next_inputs=next_inputs,
        next_inputs_alt=alt,
    )


def full_batch(data, encoder, policy, seed, stream="valid_actions", two_draws=False) -> Batch:
    return make_batch(data, np.arange(len(data)), encoder, policy, rng_stream(seed, stream), two_draws)


# ---------------------------------------------------------------------------
# Training loop plumbing
# ---------------------------------------------------------------------------

def check_finite(method: str, step: int, value: float, **diagnostics) -> None:
    if not np.isfinite(value):
        raise TrainingAborted(method, step, "non-finite loss", diagnostics={"loss": str(value), **diagnostics})


class CurveRecorder:
    def __init__(self, method: str, n_steps: int, eval_interval: int, value_probe: Optional[ValueProbe]):
        self.method = method
        self.n_steps = n_steps
        self.eval_interval = eval_interval
        self.value_probe = value_probe
        self.points: List[CurvePoint] = []

    def due(self, step: int) -> bool:
        return step % self.eval_interval == 0 or step == self.n_steps

    def record(self, step: int, train_loss: float, valid_metric: float, fitted) -> None:
        q_s0 = float(self.value_probe(fitted)) if self.value_probe is not None else float("nan")
        self.points.append(CurvePoint(step, float(train_loss), float(valid_metric), q_s0))
        log(f"[{self.method}] step {step}/{self.n_steps}: train_loss={train_loss:.6g} valid={valid_metric:.6g} q(s0)={q_s0:.6g}")


def q_network(input_dim: int, config: TrainConfig, stream: str = "q_init") -> nn.Mlp:
    return nn.Mlp([input_dim, *config.hidden, 1], config.activation, config.layer_norm, seed=config.seed, stream=stream)


def _apply_gradients(opt, params, loss):
    nn.step(opt, params, nn.gradient(loss, params))


def _with_decay(loss: nn.Tensor, params, weight: float) -> nn.Tensor:
    return loss + weight * nn.l2_penalty(params) if weight else loss


# ---------------------------------------------------------------------------
# Estimator contract
# ---------------------------------------------------------------------------

class QEstimator(ABC):
    """fit(train, valid, policy) -> fitted Q; validation_metric: lower is better."""

    name = ""
    config_cls = TrainConfig

    def __init__(self, config=None, encoder: Optional[FeatureMap] = None, value_probe: Optional[ValueProbe] = None):
        self.config = config if isinstance(config, self.config_cls) else self.config_cls.from_dict(config)
        self.encoder = encoder
        self.value_probe = value_probe

    def _encoder(self, data: TransitionDataset, policy: Policy) -> FeatureMap:
        return self.encoder or default_encoder(data.state_dim, getattr(policy, "n_actions", 1))

    @abstractmethod
    def fit(self, train: TransitionDataset, valid: TransitionDataset, policy: Policy): ...

    @abstractmethod
    def validation_metric(self, fitted, valid: TransitionDataset, policy: Policy) -> float: ...


# ---------------------------------------------------------------------------
# Neural DBRM
# ---------------------------------------------------------------------------

def dbrm_loss(net: nn.Mlp, batch: Batch, discount: float) -> nn.Tensor:
    """mean[(r - Q(s,a) + g Q(s',a1)) (r - Q(s,a) + g Q(s',a2))]."""
    q = net(batch.inputs)[:, 0]
    alt = batch.next_inputs if batch.next_inputs_alt is None else batch.next_inputs_alt
    delta1 = batch.rewards - q + discount * batch.live * net(batch.next_inputs)[:, 0]
    delta2 = batch.rewards - q + discount * batch.live * net(alt)[:, 0]
    return nn.mean(delta1 * delta2)


def fit_dbrm_neural(
    train: TransitionDataset,
    valid: TransitionDataset,
    policy: Policy,
    config: DbrmConfig,
    encoder: Optional[FeatureMap] = None,
    value_probe: Optional[ValueProbe] = None,
) -> NeuralQ:
    encoder = encoder or default_encoder(train.state_dim, getattr(policy, "n_actions", 1))
    net = q_network(encoder.dim, config)
    params = net.parameters
    opt = nn.make_optimizer("adam", params, config.learning_rate)
    batcher = EpochBatcher(len(train), config.batch_size, rng_stream(config.seed, "batches"))
    action_rng = rng_stream(config.seed, "actions")
    valid_batch = full_batch(valid, encoder, policy, config.seed, two_draws=True)
    recorder = CurveRecorder("dbrm", config.n_steps, config.eval_interval, value_probe)

    for step in range(1, config.n_steps + 1):
        batch = make_batch(train, batcher.next(), encoder, policy, action_rng, two_draws=True)
        loss = dbrm_loss(net, batch, config.discount)
        check_finite("dbrm", step, float(loss.value))
        _apply_gradients(opt, params, _with_decay(loss, params, config.weight_decay))
        if recorder.due(step):
            metric = float(dbrm_loss(net, valid_batch, config.discount).value)
            recorder.record(step, float(loss.value), metric, NeuralQ(net, encoder))

    metric = float(dbrm_loss(net, valid_batch, config.discount).value)
    return NeuralQ(net.copy(), encoder, tuple(recorder.points), metric)


class DbrmEstimator(QEstimator):
    name = "dbrm"
    config_cls = DbrmConfig

    def fit(self, train, valid, policy):
        return fit_dbrm_neural(train, valid, policy, self.config, self._encoder(train, policy), self.value_probe)

    def validation_metric(self, fitted, valid, policy):
        batch = full_batch(valid, fitted.encoder, policy, self.config.seed, two_draws=True)
        return float(dbrm_loss(fitted.net, batch, self.config.discount).value)


# ---------------------------------------------------------------------------
# FQE with a target network
# ---------------------------------------------------------------------------

def fqe_targets(target_net: nn.Mlp, batch: Batch, discount: float) -> np.ndarray:
    return batch.rewards + discount * batch.live * target_net.predict(batch.next_inputs)[:, 0]


def fqe_loss(net: nn.Mlp, batch: Batch, targets: np.ndarray) -> nn.Tensor:
    return nn.mean(nn.square(net(batch.inputs)[:, 0] - targets))


def td_error(net: nn.Mlp, batch: Batch, discount: float) -> float:
    """Mean squared one-sample TD error of the current net."""
    return float(np.mean((fqe_targets(net, batch, discount) - net.predict(batch.inputs)[:, 0]) ** 2))


def fit_fqe(
    train: TransitionDataset,
    valid: TransitionDataset,
    policy: Policy,
    config: FqeConfig,
    encoder: Optional[FeatureMap] = None,
    value_probe: Optional[ValueProbe] = None,
) -> NeuralQ:
    encoder = encoder or default_encoder(train.state_dim, getattr(policy, "n_actions", 1))
    net = q_network(encoder.dim, config)
    target = net.copy()
    params = net.parameters
    opt = nn.make_optimizer("adam", params, config.learning_rate)
    batcher = EpochBatcher(len(train), config.batch_size, rng_stream(config.seed, "batches"))
    action_rng = rng_stream(config.seed, "actions")
    valid_batch = full_batch(valid, encoder, policy, config.seed)
    recorder = CurveRecorder("fqe", config.n_steps, config.eval_interval, value_probe)

    for step in range(1, config.n_steps + 1):
        batch = make_batch(train, batcher.next(), encoder, policy, action_rng)
        loss = fqe_loss(net, batch, fqe_targets(target, batch, config.discount))
        check_finite("fqe", step, float(loss.value))
        _apply_gradients(opt, params, _with_decay(loss, params, config.weight_decay))
        if step % config.target_update_period == 0:
            target = net.copy()
        if recorder.due(step):
            recorder.record(step, float(loss.value), td_error(net, valid_batch, config.discount), NeuralQ(net, encoder))

    return NeuralQ(net.copy(), encoder, tuple(recorder.points), td_error(net, valid_batch, config.discount))


class FqeEstimator(QEstimator):
    name = "fqe"
    config_cls = FqeConfig

    def fit(self, train, valid, policy):
        return fit_fqe(train, valid, policy, self.config, self._encoder(train, policy), self.value_probe)

    def validation_metric(self, fitted, valid, policy):
        return td_error(fitted.net, full_batch(valid, fitted.encoder, policy, self.config.seed), self.config.discount)


# ---------------------------------------------------------------------------
# DFIV (stage 1 regresses phi(s,a) - g phi(s',a') on psi(s,a))
# ---------------------------------------------------------------------------

def _ridge(features: nn.Tensor, targets, lam: float) -> nn.Tensor:
    """Closed-form ridge weights W (dim_f, dim_t) minimizing mean|t - f W|^2 + lam |W|^2."""
    n = features.shape[0]
    gram = nn.matmul(features.T, features) * (1.0 / n) + lam * np.eye(features.shape[1])
    return nn.solve(gram, nn.matmul(features.T, targets) * (1.0 / n))


def dfiv_treatment(phi_net: nn.Mlp, batch: Batch, discount: float) -> nn.Tensor:
    return phi_net(batch.inputs) - discount * batch.live[:, None] * phi_net(batch.next_inputs)


def dfiv_stage1_loss(psi_net: nn.Mlp, treatment: np.ndarray, batch: Batch, lambda1: float) -> nn.Tensor:
    psi = psi_net(batch.inputs)
    v_t = _ridge(psi, treatment, lambda1)
    residual = treatment - nn.matmul(psi, v_t)
    return nn.mean(nn.sum(nn.square(residual), axis=1)) + lambda1 * nn.sum(nn.square(v_t))


def dfiv_stage2_loss(phi_net: nn.Mlp, psi: np.ndarray, batch: Batch, discount: float,
                     lambda1: float, lambda2: float) -> nn.Tensor:
    treatment = dfiv_treatment(phi_net, batch, discount)
    predicted = nn.matmul(psi, _ridge(nn.as_tensor(psi), treatment, lambda1))
    theta = _ridge(predicted, batch.rewards[:, None], lambda2)
    residual = batch.rewards[:, None] - nn.matmul(predicted, theta)
    return nn.mean(nn.square(residual)) + lambda2 * nn.sum(nn.square(theta))


def dfiv_closed_form(phi_net: nn.Mlp, psi_net: nn.Mlp, batch: Batch, discount: float,
                     lambda1: float, lambda2: float) -> Tuple[np.ndarray, np.ndarray]:
    """(V, theta) of both ridge stages for fixed feature nets; V is (dim_phi, dim_psi)."""
    treatment = phi_net.predict(batch.inputs) - discount * batch.live[:, None] * phi_net.predict(batch.next_inputs)
    psi = psi_net.predict(batch.inputs)
    v_t = _ridge(nn.as_tensor(psi), treatment, lambda1).value
    predicted = psi @ v_t
    theta = _ridge(nn.as_tensor(predicted), batch.rewards[:, None], lambda2).value[:, 0]
    return v_t.T, theta


def dfiv_validation_loss(fitted: FeatureQ, batch: Batch) -> float:
    """Unregularized stage-2 loss mean[(r - theta' V psi(s,a))^2]."""
    predicted = fitted.instrument_net.predict(batch.inputs) @ fitted.stage1_weights.T
    return float(np.mean((batch.rewards - predicted @ fitted.theta) ** 2))


def fit_dfiv(
    train: TransitionDataset,
    valid: TransitionDataset,
    policy: Policy,
    config: DfivConfig,
    encoder: Optional[FeatureMap] = None,
    value_probe: Optional[ValueProbe] = None,
) -> FeatureQ:
    encoder = encoder or default_encoder(train.state_dim, getattr(policy, "n_actions", 1))
    phi_net = nn.Mlp([encoder.dim, *config.hidden], config.activation, config.layer_norm,
                     activate_output=True, seed=config.seed, stream="value_init")
    psi_net = nn.Mlp([encoder.dim, *config.instrument_hidden], config.activation, config.layer_norm,
                     activate_output=True, seed=config.seed, stream="instrument_init")
    phi_params, psi_params = phi_net.parameters, psi_net.parameters
    phi_opt = nn.make_optimizer("adam", phi_params, config.learning_rate)
    psi_opt = nn.make_optimizer("adam", psi_params, config.instrument_learning_rate)
    batcher = EpochBatcher(len(train), config.batch_size, rng_stream(config.seed, "batches"))
    action_rng = rng_stream(config.seed, "actions")
    train_batch = full_batch(train, encoder, policy, config.seed, stream="final_actions")
    valid_batch = full_batch(valid, encoder, policy, config.seed)
    recorder = CurveRecorder("dfiv", config.n_steps, config.eval_interval, value_probe)

    def solved() -> FeatureQ:
        v, theta = dfiv_closed_form(phi_net, psi_net, train_batch, config.discount, config.lambda1, config.lambda2)
        return FeatureQ(phi_net, theta, encoder, instrument_net=psi_net, stage1_weights=v)

    for step in range(1, config.n_steps + 1):
        batch = make_batch(train, batcher.next(), encoder, policy, action_rng)
        try:
            treatment = dfiv_treatment(phi_net, batch, config.discount).value
            loss1 = dfiv_stage1_loss(psi_net, treatment, batch, config.lambda1)
            check_finite("dfiv", step, float(loss1.value), stage=1)
            _apply_gradients(psi_opt, psi_params, _with_decay(loss1, psi_params, config.instrument_reg))

            psi = psi_net.predict(batch.inputs)
            loss2 = dfiv_stage2_loss(phi_net, psi, batch, config.discount, config.lambda1, config.lambda2)
            check_finite("dfiv", step, float(loss2.value), stage=2)
            _apply_gradients(phi_opt, phi_params, _with_decay(loss2, phi_params, config.value_reg))
        except np.linalg.LinAlgError as e:
            raise TrainingAborted("dfiv", step, f"ridge solve failed: {e}") from e
        if recorder.due(step):
            current = solved()
            recorder.record(step, float(loss2.value), dfiv_validation_loss(current, valid_batch), current)

    final = solved()
    return FeatureQ(
        phi_net.copy(), final.theta, encoder, tuple(recorder.points),
        dfiv_validation_loss(final, valid_batch), psi_net.copy(), final.stage1_weights,
    )


class DfivEstimator(QEstimator):
    name = "dfiv"
    config_cls = DfivConfig

    def fit(self, train, valid, policy):
        return fit_dfiv(train, valid, policy, self.config, self._encoder(train, policy), self.value_probe)

    def validation_metric(self, fitted, valid, policy):
        return dfiv_validation_loss(fitted, full_batch(valid, fitted.encoder, policy, self.config.seed))
