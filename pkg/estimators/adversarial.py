"""
Adversarial moment estimators (DeepGMM, AGMM, ASEM).

A test function g(s, a) looks for the largest moment of the TD error while
Q drives that moment to zero:

    psi = mean[(r - Q(s,a) + g Q(s',a')) * g(s,a)]

Both players take optimistic Adam steps; g moves first on every batch.
Checkpoints feed the validation-set model selection at the bottom of the file.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from estimators.neural_estimators import (
    Batch,
    CurveRecorder,
    EpochBatcher,
    NeuralQ,
    QEstimator,
    TrainConfig,
    ValueProbe,
    default_encoder,
    full_batch,
    make_batch,
    q_network,
)
from tools import nn
from tools.data import TransitionDataset
from tools.env import Policy, TabularMdp, TabularPolicy, bootstrap_operator, pooled_state_distribution
from tools.errors import ConfigError, MdpError, TrainingAborted
from tools.evaluation import FittedQ, q_table
from tools.features import FeatureMap
from tools.utils import log, rng_stream

METHODS = ("deepgmm", "agmm", "asem")


@dataclass(frozen=True)
class AdversarialConfig(TrainConfig):
    method: str = "agmm"
    n_steps: int = 200_000
    g_hidden: Tuple[int, ...] = (50, 50)
    lr_multiplier: float = 1.0
    beta1: float = 0.5
    beta2: float = 0.9
    q_reg: float = 1e-6
    g_reg: float = 1e-6
    alpha: float = 1e-4
    checkpoint_interval: int = 1000
    max_checkpoints: int = 50
    select_checkpoint: bool = True

    def validate(self) -> None:
        super().validate()
        if self.method not in METHODS:
            raise ConfigError(f"unknown adversarial method {self.method!r}; expected one of {list(METHODS)}")
        if self.checkpoint_interval < 1 or self.max_checkpoints < 2:
            raise ConfigError("checkpoint_interval must be >= 1 and max_checkpoints >= 2")


@dataclass(frozen=True)
class AdversarialConstants:
    discount: float = 0.99
    q_reg: float = 0.0  # a
    g_reg: float = 0.0  # b
    alpha: float = 0.0  # ASEM only

    @classmethod
    def from_config(cls, config: AdversarialConfig) -> "AdversarialConstants":
        return cls(config.discount, config.q_reg, config.g_reg, config.alpha)


def adversarial_objective(
    q_out,
    g_out,
    r,
    q_next_out,
    method: str,
    constants: AdversarialConstants,
    q_params: Sequence[nn.Tensor] = (),
    g_params: Sequence[nn.Tensor] = (),
    tilde_residual: Optional[np.ndarray] = None,
) -> Tuple[nn.Tensor, nn.Tensor]:
    """
    (loss for Q, loss for g). `q_next_out` is Q(s', a') already zeroed on
    terminal rows. For DeepGMM the residual weighting uses `tilde_residual`
    (the TD error under the latest Q snapshot, no gradient); it defaults to
    the detached residual of the given outputs.
    """
    q_out, g_out, q_next_out = nn.as_tensor(q_out), nn.as_tensor(g_out), nn.as_tensor(q_next_out)
    r = np.asarray(r, dtype=float)
    residual = r - q_out + constants.discount * q_next_out
    psi = nn.mean(residual * g_out)

    if method == "agmm":
        loss_q = psi + constants.q_reg * nn.l2_penalty(q_params)
        loss_g = -psi + constants.g_reg * nn.l2_penalty(g_params) + nn.mean(nn.square(g_out))
    elif method == "asem":
        loss_q = psi + (constants.alpha / 2.0) * nn.mean(nn.square(q_out)) + constants.q_reg * nn.l2_penalty(q_params)
        loss_g = -psi + 0.5 * nn.mean(nn.square(g_out)) + constants.g_reg * nn.l2_penalty(g_params)
    elif method == "deepgmm":
        if tilde_residual is None:
            tilde_residual = residual.value
        loss_q = psi
        loss_g = -psi + 0.25 * nn.mean(nn.square(g_out) * np.square(tilde_residual))
    else:
        raise ConfigError(f"unknown adversarial method {method!r}; expected one of {list(METHODS)}")
    return loss_q, loss_g


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    step: int
    q_params: np.ndarray
    g_params: np.ndarray


@dataclass
class CheckpointSet:
    """
    Snapshots every `interval` steps. When `cap` is reached the set keeps
    every other snapshot and the interval doubles; the final step is always kept.
    """

    interval: int
    cap: int = 50
    entries: List[Checkpoint] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i) -> Checkpoint:
        return self.entries[i]

    @property
    def last(self) -> Optional[Checkpoint]:
        return self.entries[-1] if self.entries else None

    def offer(self, step: int, q_net: nn.Mlp, g_net: nn.Mlp, final: bool = False) -> bool:
        if self.entries and self.entries[-1].step == step:
            return False
        if not final and step % self.interval:
            return False
        if len(self.entries) >= self.cap:
            self.interval *= 2
            self.entries = [c for c in self.entries if c.step % self.interval == 0]
            if not final and step % self.interval:
                return False
        self.entries.append(Checkpoint(step, q_net.get_flat(), g_net.get_flat()))
        return True


def restore(template: nn.Mlp, flat: np.ndarray) -> nn.Mlp:
    net = template.copy()
    net.set_flat(flat)
    return net


@dataclass(frozen=True, eq=False)
class AdversarialQ(NeuralQ):
    g_net: Optional[nn.Mlp] = None
    checkpoints: Optional[CheckpointSet] = None
    selected_step: Optional[int] = None


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _valid_moment(net: nn.Mlp, g_net: nn.Mlp, batch: Batch, discount: float) -> float:
    residual = batch.rewards - net.predict(batch.inputs)[:, 0] + discount * batch.live * net.predict(batch.next_inputs)[:, 0]
    return float(np.mean(residual * g_net.predict(batch.inputs)[:, 0]))


def adversarial_step(
    net: nn.Mlp,
    g_net: nn.Mlp,
    q_opt: nn.OptimizerState,
    g_opt: nn.OptimizerState,
    batch: Batch,
    method: str,
    constants: AdversarialConstants,
) -> Tuple[float, float]:
    """One g ascent step followed by one Q descent step; returns both losses."""
    q_params, g_params = net.parameters, g_net.parameters
    q_vals = net.predict(batch.inputs)[:, 0]
    q_next = batch.live * net.predict(batch.next_inputs)[:, 0]
    tilde = batch.rewards - q_vals + constants.discount * q_next

    _, loss_g = adversarial_objective(q_vals, g_net(batch.inputs)[:, 0], batch.rewards, q_next, method,
                                      constants, g_params=g_params, tilde_residual=tilde)
    nn.step(g_opt, g_params, nn.gradient(loss_g, g_params))

    g_vals = g_net.predict(batch.inputs)[:, 0]
    loss_q, _ = adversarial_objective(net(batch.inputs)[:, 0], g_vals, batch.rewards,
                                      net(batch.next_inputs)[:, 0] * batch.live, method, constants,
                                      q_params=q_params, tilde_residual=tilde)
    nn.step(q_opt, q_params, nn.gradient(loss_q, q_params))
    return float(loss_q.value), float(loss_g.value)


def fit_adversarial(
    train: TransitionDataset,
    valid: TransitionDataset,
    policy: Policy,
    method: str,
    config: AdversarialConfig,
    encoder: Optional[FeatureMap] = None,
    value_probe: Optional[ValueProbe] = None,
) -> Tuple[AdversarialQ, CheckpointSet]:
    if method not in METHODS:
        raise ConfigError(f"unknown adversarial method {method!r}; expected one of {list(METHODS)}")
    encoder = encoder or default_encoder(train.state_dim, getattr(policy, "n_actions", 1))
    net = q_network(encoder.dim, config)
    g_net = nn.Mlp([encoder.dim, *config.g_hidden, 1], config.activation, config.layer_norm,
                   seed=config.seed, stream="g_init")
    q_opt = nn.make_optimizer("oadam", net.parameters, config.learning_rate, config.beta1, config.beta2)
    g_opt = nn.make_optimizer("oadam", g_net.parameters, config.learning_rate * config.lr_multiplier,
                              config.beta1, config.beta2)
    constants = AdversarialConstants.from_config(config)
    batcher = EpochBatcher(len(train), config.batch_size, rng_stream(config.seed, "batches"))
    action_rng = rng_stream(config.seed, "actions")
    valid_batch = full_batch(valid, encoder, policy, config.seed)
    checkpoints = CheckpointSet(config.checkpoint_interval, config.max_checkpoints)
    recorder = CurveRecorder(method, config.n_steps, config.eval_interval, value_probe)

    for step in range(1, config.n_steps + 1):
        batch = make_batch(train, batcher.next(), encoder, policy, action_rng)
        loss_q, loss_g = adversarial_step(net, g_net, q_opt, g_opt, batch, method, constants)
        if not (np.isfinite(loss_q) and np.isfinite(loss_g)):
            raise TrainingAborted(method, step, "non-finite loss",
                                  diagnostics={"loss_q": str(loss_q), "loss_g": str(loss_g)},
                                  checkpoints=checkpoints)
        checkpoints.offer(step, net, g_net, final=step == config.n_steps)
        if recorder.due(step):
            recorder.record(step, loss_q, _valid_moment(net, g_net, valid_batch, config.discount), NeuralQ(net, encoder))

    log(f"[{method}] kept {len(checkpoints)} checkpoints (interval {checkpoints.interval})")
    fitted = AdversarialQ(net.copy(), encoder, tuple(recorder.points), None, g_net.copy(), checkpoints, config.n_steps)
    return fitted, checkpoints


# ---------------------------------------------------------------------------
# Checkpoint selection on the validation set
# ---------------------------------------------------------------------------

def _candidate_outputs(checkpoints: CheckpointSet, q_template: nn.Mlp, g_template: nn.Mlp,
                       batch: Batch, discount: float) -> Tuple[np.ndarray, np.ndarray]:
    """TD residuals (n_ckpt, n) of every Q candidate and outputs (n_ckpt, n) of every g candidate."""
    residuals, g_outs = [], []
    for ckpt in checkpoints:
        q_net = restore(q_template, ckpt.q_params)
        residuals.append(batch.rewards - q_net.predict(batch.inputs)[:, 0]
                         + discount * batch.live * q_net.predict(batch.next_inputs)[:, 0])
        g_outs.append(restore(g_template, ckpt.g_params).predict(batch.inputs)[:, 0])
    return np.array(residuals), np.array(g_outs)


def select_checkpoint_agmm(residuals: np.ndarray, g_outs: np.ndarray) -> Tuple[int, float]:
    """
    argmin over Q candidates of the largest |moment| against the g candidates,
    each g normalized to unit RMS on the validation rows.
    """
    rms = np.sqrt(np.mean(g_outs ** 2, axis=1, keepdims=True))
    g_norm = np.divide(g_outs, rms, out=np.zeros_like(g_outs), where=rms > 0)
    violation = np.abs(residuals @ g_norm.T / residuals.shape[1]).max(axis=1)
    best = int(np.argmin(violation))
    return best, float(violation[best])


def select_checkpoint_deepgmm(residuals: np.ndarray, g_outs: np.ndarray) -> Tuple[int, float]:
    """
    argmin_i max_j psi(Q_i, g_j) - 1/4 mean[g_j^2 r~^2], with r~ the residual of
    the Q averaged over all candidates.
    """
    n = residuals.shape[1]
    tilde = residuals.mean(axis=0)
    penalty = 0.25 * (g_outs ** 2 @ tilde ** 2) / n
    payoff = (residuals @ g_outs.T) / n - penalty[None, :]
    worst = payoff.max(axis=1)
    best = int(np.argmin(worst))
    return best, float(worst[best])


def select_from_checkpoints(fitted: AdversarialQ, valid: TransitionDataset, policy: Policy,
                            method: str, discount: float, seed: int) -> AdversarialQ:
    batch = full_batch(valid, fitted.encoder, policy, seed)
    residuals, g_outs = _candidate_outputs(fitted.checkpoints, fitted.net, fitted.g_net, batch, discount)
    chooser = select_checkpoint_deepgmm if method == "deepgmm" else select_checkpoint_agmm
    index, value = chooser(residuals, g_outs)
    ckpt = fitted.checkpoints[index]
    log(f"[{method}] selected checkpoint at step {ckpt.step} (criterion {value:.6g})")
    return AdversarialQ(
        restore(fitted.net, ckpt.q_params), fitted.encoder, fitted.curve, value,
        restore(fitted.g_net, ckpt.g_params), fitted.checkpoints, ckpt.step,
    )


class AdversarialEstimator(QEstimator):
    config_cls = AdversarialConfig

    def __init__(self, config=None, encoder=None, value_probe=None, method: Optional[str] = None):
        if method is not None:
            config = dict(config or {}, method=method) if not isinstance(config, AdversarialConfig) else config
        super().__init__(config, encoder, value_probe)
        self.name = self.config.method

    def fit(self, train, valid, policy):
        fitted, _ = fit_adversarial(train, valid, policy, self.config.method, self.config,
                                    self._encoder(train, policy), self.value_probe)
        if not self.config.select_checkpoint:
            return fitted
        return select_from_checkpoints(fitted, valid, policy, self.config.method, self.config.discount, self.config.seed)

    def validation_metric(self, fitted, valid, policy):
        batch = full_batch(valid, fitted.encoder, policy, self.config.seed)
        residuals, g_outs = _candidate_outputs(fitted.checkpoints, fitted.net, fitted.g_net, batch, self.config.discount)
        chooser = select_checkpoint_deepgmm if self.config.method == "deepgmm" else select_checkpoint_agmm
        return chooser(residuals, g_outs)[1]


# ---------------------------------------------------------------------------
# Projected RMSE
# ---------------------------------------------------------------------------

def projected_rmse(
    fitted: FittedQ,
    mdp: TabularMdp,
    policy: TabularPolicy,
    reference: Union[FittedQ, np.ndarray],
    behavior: Optional[TabularPolicy] = None,
) -> float:
    """
    sqrt(E_{(s,a) ~ mu_b}[(E[f_hat - f_0 | s, a])^2]) where the structural
    function is f(s,a,s',a') = Q(s,a) - g Q(s',a'); the inner expectation is
    taken exactly from the transition table and pi.
    """
    if not isinstance(mdp, TabularMdp) or not isinstance(policy, TabularPolicy):
        raise MdpError("projected RMSE needs a tabular MDP and a tabular policy")
    behavior = behavior or policy
    ref = np.asarray(reference, dtype=float) if isinstance(reference, np.ndarray) else q_table(reference, mdp)
    diff = (q_table(fitted, mdp) - ref.reshape(mdp.n_states, mdp.n_actions)).reshape(-1)
    projected = diff - mdp.discount * bootstrap_operator(mdp, policy) @ diff
    weights = (pooled_state_distribution(mdp, behavior)[:, None] * behavior.probs).reshape(-1)
    return float(np.sqrt(np.sum(weights * projected ** 2)))
