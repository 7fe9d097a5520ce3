"""
Name -> estimator lookup used by the experiment runner and the search.

The linear estimators get thin QEstimator adapters here so that every
method, closed-form or trained, is driven through the same
fit / validation_metric contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from estimators.adversarial import METHODS, AdversarialEstimator
from estimators.deep_iv import DeepIvEstimator
from estimators.linear_estimators import (
    LinearQ,
    build_design,
    kernel_iv,
    kiv_stage2_loss,
    linear_dbrm,
    linear_fqe,
    lstd_q,
    next_features,
)
from estimators.neural_estimators import (
    CurvePoint,
    DbrmEstimator,
    DfivEstimator,
    EstimatorParams,
    FqeEstimator,
    QEstimator,
)
from harness.config import ESTIMATOR_NAMES
from tools.env import TabularMdp
from tools.errors import ConfigError
from tools.evaluation import td_error_metric
from tools.features import (
    GRID_WIDTH,
    FeatureMap,
    action_features,
    gaussian_grid_features,
    make_rff_spec,
    median_bandwidth,
    position_features,
    tabular_features,
)
from tools.utils import log, rng_stream

FEATURE_KINDS = ("grid", "tabular")


@dataclass(frozen=True)
class LinearConfig(EstimatorParams):
    features: str = "grid"
    n_features: int = 90
    width: float = GRID_WIDTH
    ridge: float = 0.0

    def validate(self) -> None:
        super().validate()
        if self.features not in FEATURE_KINDS:
            raise ConfigError(f"unknown feature kind {self.features!r}; expected one of {list(FEATURE_KINDS)}")
        if self.n_features < 1:
            raise ConfigError("n_features must be >= 1")
        if self.width <= 0 or self.ridge < 0:
            raise ConfigError("width must be positive and ridge non-negative")


@dataclass(frozen=True)
class LinearFqeConfig(LinearConfig):
    n_iters: int = 500

    def validate(self) -> None:
        super().validate()
        if self.n_iters < 1:
            raise ConfigError("n_iters must be >= 1")


@dataclass(frozen=True)
class KivConfig(EstimatorParams):
    n_features: int = 512
    instrument_features: int = 512
    lambda1: float = 1e-4
    lambda2: float = 1e-4
    bandwidth: Optional[float] = None  # median heuristic when unset

    def validate(self) -> None:
        super().validate()
        if self.n_features < 1 or self.instrument_features < 1:
            raise ConfigError("feature counts must be >= 1")
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise ConfigError("lambda1 and lambda2 must be positive")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")


# ---------------------------------------------------------------------------
# Linear adapters
# ---------------------------------------------------------------------------

class LinearEstimator(QEstimator):
    """Features come from the config unless an explicit map is passed as `encoder`."""

    config_cls = LinearConfig

    def __init__(self, config=None, encoder: Optional[FeatureMap] = None, value_probe=None,
                 mdp: Optional[TabularMdp] = None):
        super().__init__(config, encoder, value_probe)
        self.mdp = mdp

    def feature_map(self, policy) -> FeatureMap:
        if self.encoder is not None:
            return self.encoder
        embedding = self.mdp.embedding if self.mdp is not None else None
        if self.config.features == "tabular":
            if self.mdp is None:
                raise ConfigError("tabular features need the MDP's state count")
            state_map = tabular_features(self.mdp.n_states, exclude=np.flatnonzero(self.mdp.terminal))
        else:
            state_map = gaussian_grid_features(self.config.n_features, embedding, self.config.width)
        return action_features(state_map, getattr(policy, "n_actions", 1))

    def validation_metric(self, fitted, valid, policy):
        return td_error_metric(fitted, valid, policy, self.config.discount, self.config.seed)


class LstdEstimator(LinearEstimator):
    name = "lstd_q"

    def fit(self, train, valid, policy):
        c = self.config
        return lstd_q(train, policy, self.feature_map(policy), c.discount, c.seed, c.ridge)


class LinearDbrmEstimator(LinearEstimator):
    name = "linear_dbrm"

    def fit(self, train, valid, policy):
        c = self.config
        return linear_dbrm(train, policy, self.feature_map(policy), c.discount, c.seed, c.ridge)


class LinearFqeEstimator(LinearEstimator):
    """Records one curve point per iteration: train/valid TD error and Q(s0)."""

    name = "linear_fqe"
    config_cls = LinearFqeConfig

    def fit(self, train, valid, policy):
        c = self.config
        phi = self.feature_map(policy)
        design = build_design(train, policy, phi, c.seed)
        train_x = design.Phi - c.discount * design.PhiPrime
        valid_phi = phi.apply(valid.states, valid.actions)
        valid_x = valid_phi - c.discount * next_features(valid, policy, phi, rng_stream(c.seed, "valid_actions"))
        points = []

        def record(k: int, theta: np.ndarray) -> None:
            train_loss = float(np.mean((design.R - train_x @ theta) ** 2))
            valid_metric = float(np.mean((valid.rewards - valid_x @ theta) ** 2))
            q_s0 = float(self.value_probe(LinearQ(phi, theta))) if self.value_probe is not None else float("nan")
            points.append(CurvePoint(k, train_loss, valid_metric, q_s0))
            if k % 100 == 0 or k == c.n_iters:
                log(f"[linear_fqe] iteration {k}/{c.n_iters}: valid={valid_metric:.6g} q(s0)={q_s0:.6g}")

        fitted = linear_fqe(train, policy, phi, c.discount, c.n_iters, c.seed, c.ridge, callback=record)
        return LinearQ(fitted.feature_map, fitted.theta, tuple(points))


class KivEstimator(QEstimator):
    """`encoder` maps (s, a) into the space the random Fourier features act on."""

    name = "kiv"
    config_cls = KivConfig

    def fit(self, train, valid, policy):
        c = self.config
        encoder = self._encoder(train, policy)
        bandwidth = c.bandwidth or median_bandwidth(encoder.apply(train.states, train.actions), c.seed)
        rff_x = make_rff_spec(c.n_features, encoder.dim, bandwidth, c.seed, "rff_treatment")
        rff_z = make_rff_spec(c.instrument_features, encoder.dim, bandwidth, c.seed, "rff_instrument")
        return kernel_iv(train, policy, encoder, rff_x, rff_z, c.lambda1, c.lambda2, c.discount, c.seed)

    def validation_metric(self, fitted, valid, policy):
        return kiv_stage2_loss(fitted, valid)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

ESTIMATORS = {
    "lstd_q": LstdEstimator,
    "linear_dbrm": LinearDbrmEstimator,
    "linear_fqe": LinearFqeEstimator,
    "kiv": KivEstimator,
    "dbrm": DbrmEstimator,
    "fqe": FqeEstimator,
    "deep_iv": DeepIvEstimator,
    "dfiv": DfivEstimator,
    "deepgmm": AdversarialEstimator,
    "agmm": AdversarialEstimator,
    "asem": AdversarialEstimator,
}

LINEAR_NAMES = ("lstd_q", "linear_dbrm", "linear_fqe")

if set(ESTIMATORS) != set(ESTIMATOR_NAMES):
    raise RuntimeError("estimator registry and config schema disagree on the estimator names")


def state_encoder(mdp: TabularMdp) -> FeatureMap:
    """Network input for tabular MDPs: the raw state position, plus one-hot actions when |A| > 1."""
    return action_features(position_features(mdp.embedding), mdp.n_actions)


def config_class(name: str):
    if name not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {name!r}", known=list(ESTIMATOR_NAMES))
    return ESTIMATORS[name].config_cls


def make_estimator(
    name: str,
    params: Optional[dict] = None,
    mdp: Optional[TabularMdp] = None,
    seed: int = 0,
    step_scale: float = 1.0,
    value_probe=None,
    transition_model=None,
) -> QEstimator:
    """
    Build a configured estimator. The seed and, when an MDP is given, the
    discount come from the experiment and may not appear in `params`.
    """
    cls = ESTIMATORS.get(name)
    if cls is None:
        raise ConfigError(f"unknown estimator {name!r}", known=list(ESTIMATOR_NAMES))
    params = dict(params or {})
    for key in ("seed", "discount"):
        if key in params:
            raise ConfigError(f"{key!r} is set by the experiment, not by estimator params", key=key)
    params["seed"] = int(seed)
    if mdp is not None:
        params["discount"] = mdp.discount
    if name in METHODS:
        if params.get("method", name) != name:
            raise ConfigError(f"estimator {name!r} cannot run adversarial method {params['method']!r}")
        params["method"] = name
    if name == "deep_iv" and mdp is not None and params.get("model", "categorical") == "categorical":
        params.setdefault("n_states", mdp.n_states)

    config = cls.config_cls.from_dict(params)
    if step_scale != 1.0:
        config = config.scaled(step_scale)

    if name in LINEAR_NAMES:
        return cls(config, value_probe=value_probe, mdp=mdp)
    encoder = state_encoder(mdp) if mdp is not None else None
    if name == "deep_iv":
        return cls(config, encoder, value_probe, transition_model=transition_model)
    return cls(config, encoder, value_probe)
