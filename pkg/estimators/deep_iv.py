"""
Deep IV: stage 1 learns P(s' | s, a) by maximum likelihood, stage 2 fits Q
against Monte Carlo next-state samples drawn from that model.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import log_softmax as np_log_softmax
from scipy.special import softmax

from estimators.neural_estimators import (
    CurveRecorder,
    EpochBatcher,
    NeuralQ,
    QEstimator,
    TrainConfig,
    ValueProbe,
    check_finite,
    default_encoder,
    q_network,
)
from tools import nn
from tools.data import TransitionDataset
from tools.env import Policy, TabularMdp, state_index
from tools.errors import ConfigError, TrainingAborted
from tools.features import FeatureMap
from tools.utils import log, rng_stream

MIN_MIXTURE_SCALE = 1e-6


@dataclass(frozen=True)
class DeepIvConfig(TrainConfig):
    n_mc_samples: int = 3
    model: str = "categorical"
    n_states: Optional[int] = None
    n_components: int = 3
    stage1_steps: int = 100_000
    stage1_hidden: Tuple[int, ...] = (64, 64)
    stage1_learning_rate: float = 1e-3

    def validate(self) -> None:
        super().validate()
        if self.model not in ("categorical", "mixture"):
            raise ConfigError(f"unknown Deep IV treatment model {self.model!r}")
        if self.n_mc_samples < 1 or self.n_components < 1 or self.stage1_steps < 1:
            raise ConfigError("n_mc_samples, n_components and stage1_steps must be positive")


# ---------------------------------------------------------------------------
# Treatment (transition) models
# ---------------------------------------------------------------------------

class TransitionModel(ABC):
    @abstractmethod
    def sample(self, states, actions, n_samples: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Next states (n, k, d) and terminal flags (n, k)."""

    @abstractmethod
    def log_likelihood(self, data: TransitionDataset) -> float:
        """Mean log-likelihood of the logged next states."""


def _sample_rows(probs: np.ndarray, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], n_samples))
    idx = (u[:, :, None] >= cdf[:, None, :]).sum(axis=2)
    return np.minimum(idx, probs.shape[1] - 1)


class ExactTransitionModel(TransitionModel):
    """The true tabular P(s' | s, a), for oracle stage-2 runs."""

    def __init__(self, mdp: TabularMdp):
        self.mdp = mdp

    def sample(self, states, actions, n_samples, rng):
        probs = self.mdp.transition[state_index(states), np.asarray(actions, dtype=np.int64)]
        nxt = _sample_rows(probs, n_samples, rng)
        return nxt.astype(float)[:, :, None], self.mdp.terminal[nxt]

    def log_likelihood(self, data):
        p = self.mdp.transition[state_index(data.states), data.actions, state_index(data.next_states)]
        return float(np.mean(np.log(np.maximum(p, 1e-300))))


class CategoricalTransitionModel(TransitionModel):
    """Softmax over next-state indices for tabular environments."""

    def __init__(self, net: nn.Mlp, encoder: FeatureMap, terminal_states: np.ndarray):
        self.net = net
        self.encoder = encoder
        self.terminal_states = np.asarray(terminal_states, dtype=bool)

    @property
    def n_states(self) -> int:
        return self.net.output_dim

    def loss(self, inputs: np.ndarray, next_states: np.ndarray) -> nn.Tensor:
        return -nn.mean(nn.categorical_logprob(self.net(inputs), state_index(next_states)))

    def probs(self, states, actions) -> np.ndarray:
        return softmax(self.net.predict(self.encoder.apply(states, actions)), axis=1)

    def sample(self, states, actions, n_samples, rng):
        nxt = _sample_rows(self.probs(states, actions), n_samples, rng)
        return nxt.astype(float)[:, :, None], self.terminal_states[nxt]

    def log_likelihood(self, data):
        logits = self.net.predict(self.encoder.apply(data.states, data.actions))
        logp = np_log_softmax(logits, axis=1)
        return float(np.mean(logp[np.arange(len(data)), state_index(data.next_states)]))


class MixtureTransitionModel(TransitionModel):
    """
    Diagonal Gaussian mixture over s' plus a Bernoulli head for termination.
    Network output: [mixture logits | means | log scales | terminal logit].
    """

    def __init__(self, net: nn.Mlp, encoder: FeatureMap, n_components: int, state_dim: int):
        self.net = net
        self.encoder = encoder
        self.n_components = n_components
        self.state_dim = state_dim

    def _split(self, out: nn.Tensor):
        head = nn.mixture_head_size(self.n_components, self.state_dim)
        mixture = nn.split_mixture_output(out[:, :head], self.n_components, self.state_dim)
        return mixture, out[:, head:head + 1]

    def row_logprob(self, out: nn.Tensor, next_states: np.ndarray, terminals: np.ndarray) -> nn.Tensor:
        mixture, term_logit = self._split(out)
        # log sigmoid(z) for t=1 and log(1 - sigmoid(z)) for t=0, as t z - log(1 + e^z)
        softplus = nn.logsumexp(nn.concat([np.zeros((term_logit.shape[0], 1)), term_logit], axis=1), axis=1)
        bernoulli = term_logit[:, 0] * np.asarray(terminals, dtype=float) - softplus
        return nn.mixture_logprob(mixture, next_states) + bernoulli

    def loss(self, inputs, next_states, terminals) -> nn.Tensor:
        return -nn.mean(self.row_logprob(self.net(inputs), next_states, terminals))

    def min_scale(self, inputs: np.ndarray) -> float:
        mixture, _ = self._split(nn.as_tensor(self.net.predict(inputs)))
        return float(np.exp(mixture.log_scales.value).min())

    def sample(self, states, actions, n_samples, rng):
        out = self.net.predict(self.encoder.apply(states, actions))
        mixture, term_logit = self._split(nn.as_tensor(out))
        n = out.shape[0]
        comp = _sample_rows(softmax(mixture.weight_logits.value, axis=1), n_samples, rng)  # (n, k)
        rows = np.arange(n)[:, None]
        means = mixture.means.value[rows, comp]  # (n, k, d)
        scales = np.exp(mixture.log_scales.value[rows, comp])
        nxt = means + scales * rng.standard_normal(means.shape)
        p_term = softmax(np.concatenate([np.zeros((n, 1)), term_logit.value], axis=1), axis=1)[:, 1]
        terminals = rng.random((n, n_samples)) < p_term[:, None]
        return nxt, terminals

    def log_likelihood(self, data):
        out = nn.as_tensor(self.net.predict(self.encoder.apply(data.states, data.actions)))
        return float(np.mean(self.row_logprob(out, data.next_states, data.terminals).value))


def fit_transition_model(
    train: TransitionDataset,
    valid: TransitionDataset,
    config: DeepIvConfig,
    encoder: FeatureMap,
) -> Tuple[TransitionModel, float]:
    """Stage 1. Returns the model and its validation log-likelihood."""
    if config.model == "categorical":
        n_states = config.n_states or int(max(state_index(train.next_states).max(), state_index(train.states).max()) + 1)
        terminal_states = np.zeros(n_states, dtype=bool)
        terminal_states[state_index(train.next_states[train.terminals])] = True
        net = nn.Mlp([encoder.dim, *config.stage1_hidden, n_states], config.activation,
                     seed=config.seed, stream="treatment_init")
        model = CategoricalTransitionModel(net, encoder, terminal_states)
    else:
        out_dim = nn.mixture_head_size(config.n_components, train.state_dim) + 1
        net = nn.Mlp([encoder.dim, *config.stage1_hidden, out_dim], config.activation,
                     seed=config.seed, stream="treatment_init")
        model = MixtureTransitionModel(net, encoder, config.n_components, train.state_dim)

    params = net.parameters
    opt = nn.make_optimizer("adam", params, config.stage1_learning_rate)
    batcher = EpochBatcher(len(train), config.batch_size, rng_stream(config.seed, "stage1_batches"))
    inputs = encoder.apply(train.states, train.actions)

    for step in range(1, config.stage1_steps + 1):
        rows = batcher.next()
        if config.model == "categorical":
            loss = model.loss(inputs[rows], train.next_states[rows])
        else:
            loss = model.loss(inputs[rows], train.next_states[rows], train.terminals[rows])
        check_finite("deep_iv", step, float(loss.value), stage=1)
        nn.step(opt, params, nn.gradient(loss, params))
        if config.model == "mixture" and model.min_scale(inputs[rows]) < MIN_MIXTURE_SCALE:
            raise TrainingAborted("deep_iv", step, "degenerate mixture: component scale underflow",
                                  diagnostics={"stage": 1, "min_scale": model.min_scale(inputs[rows])})
        if step % config.eval_interval == 0 or step == config.stage1_steps:
            log(f"[deep_iv] stage 1 step {step}/{config.stage1_steps}: nll={float(loss.value):.6g}")

    valid_ll = model.log_likelihood(valid)
    log(f"[deep_iv] stage 1 validation log-likelihood {valid_ll:.6g}")
    return model, valid_ll


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def sample_next_inputs(
    model: TransitionModel,
    states,
    actions,
    n_samples: int,
    encoder: FeatureMap,
    policy: Policy,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Encoded (s'~, a'~) rows, k consecutive samples per input row, and their live mask."""
    nxt, terminals = model.sample(states, actions, n_samples, rng)
    flat = nxt.reshape(-1, nxt.shape[2])
    next_actions = policy.sample(flat, rng)
    return encoder.apply(flat, next_actions), (~terminals.reshape(-1)).astype(float)


def deep_iv_stage2_loss(
    net: nn.Mlp,
    inputs: np.ndarray,
    rewards: np.ndarray,
    next_inputs: np.ndarray,
    live: np.ndarray,
    n_samples: int,
    discount: float,
) -> nn.Tensor:
    """mean[(r - Q(s,a) + g mean_k Q(s'_k, a'_k))^2]."""
    q = net(inputs)[:, 0]
    q_next = nn.reshape(net(next_inputs)[:, 0] * live, (inputs.shape[0], n_samples))
    residual = rewards - q + discount * nn.mean(q_next, axis=1)
    return nn.mean(nn.square(residual))


@dataclass(frozen=True, eq=False)
class DeepIvQ(NeuralQ):
    stage1_log_likelihood: Optional[float] = None
    transition_model: Optional[TransitionModel] = None


def _stage2_metric(net, model, data, encoder, policy, config) -> float:
    rng = rng_stream(config.seed, "valid_samples")
    next_inputs, live = sample_next_inputs(model, data.states, data.actions, config.n_mc_samples, encoder, policy, rng)
    inputs = encoder.apply(data.states, data.actions)
    return float(deep_iv_stage2_loss(net, inputs, data.rewards, next_inputs, live,
                                     config.n_mc_samples, config.discount).value)


def fit_deep_iv(
    train: TransitionDataset,
    valid: TransitionDataset,
    policy: Policy,
    config: DeepIvConfig,
    encoder: Optional[FeatureMap] = None,
    value_probe: Optional[ValueProbe] = None,
    transition_model: Optional[TransitionModel] = None,
) -> DeepIvQ:
    encoder = encoder or default_encoder(train.state_dim, getattr(policy, "n_actions", 1))
    if transition_model is None:
        transition_model, stage1_ll = fit_transition_model(train, valid, config, encoder)
    else:
        stage1_ll = transition_model.log_likelihood(valid)

    net = q_network(encoder.dim, config)
    params = net.parameters
    opt = nn.make_optimizer("adam", params, config.learning_rate)
    batcher = EpochBatcher(len(train), config.batch_size, rng_stream(config.seed, "batches"))
    sample_rng = rng_stream(config.seed, "mc_samples")
    inputs = encoder.apply(train.states, train.actions)
    recorder = CurveRecorder("deep_iv", config.n_steps, config.eval_interval, value_probe)

    for step in range(1, config.n_steps + 1):
        rows = batcher.next()
        next_inputs, live = sample_next_inputs(transition_model, train.states[rows], train.actions[rows],
                                               config.n_mc_samples, encoder, policy, sample_rng)
        loss = deep_iv_stage2_loss(net, inputs[rows], train.rewards[rows], next_inputs, live,
                                   config.n_mc_samples, config.discount)
        check_finite("deep_iv", step, float(loss.value), stage=2)
        grads = nn.gradient(loss + config.weight_decay * nn.l2_penalty(params) if config.weight_decay else loss, params)
        nn.step(opt, params, grads)
        if recorder.due(step):
            metric = _stage2_metric(net, transition_model, valid, encoder, policy, config)
            recorder.record(step, float(loss.value), metric, NeuralQ(net, encoder))

    metric = _stage2_metric(net, transition_model, valid, encoder, policy, config)
    return DeepIvQ(net.copy(), encoder, tuple(recorder.points), metric, stage1_ll, transition_model)


class DeepIvEstimator(QEstimator):
    name = "deep_iv"
    config_cls = DeepIvConfig

    def __init__(self, config=None, encoder=None, value_probe=None, transition_model=None):
        super().__init__(config, encoder, value_probe)
        self.transition_model = transition_model

    def fit(self, train, valid, policy):
        return fit_deep_iv(train, valid, policy, self.config, self._encoder(train, policy),
                           self.value_probe, self.transition_model)

    def fit_stage1(self, train, valid, policy) -> Tuple[TransitionModel, float]:
        return fit_transition_model(train, valid, self.config, self._encoder(train, policy))

    def stage1_metric(self, stage1_log_likelihood: float) -> float:
        return -stage1_log_likelihood

    def validation_metric(self, fitted, valid, policy):
        return _stage2_metric(fitted.net, fitted.transition_model, valid, fitted.encoder, policy, self.config)
