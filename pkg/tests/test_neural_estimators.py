import numpy as np
import pytest

from estimators.neural_estimators import (
    Batch,
    CurvePoint,
    CurveRecorder,
    DbrmConfig,
    DbrmEstimator,
    DfivConfig,
    DfivEstimator,
    EpochBatcher,
    FeatureQ,
    FqeConfig,
    FqeEstimator,
    NeuralQ,
    TrainConfig,
    check_finite,
    dbrm_loss,
    dfiv_closed_form,
    dfiv_stage1_loss,
    dfiv_stage2_loss,
    dfiv_treatment,
    fit_dbrm_neural,
    fit_fqe,
    fqe_loss,
    fqe_targets,
    full_batch,
    q_network,
    td_error,
    write_curve,
)
from tests.strategies import with_moved_terminal_next_states
from tools import nn
from tools.data import generate_chain_dataset, split
from tools.env import make_chain_mdp, single_action_policy
from tools.errors import ConfigError, TrainingAborted
from tools.features import position_features

TINY = {"n_steps": 40, "batch_size": 64, "hidden": (8, 8), "eval_interval": 10, "learning_rate": 1e-3}
CHAIN_FOR_TRAINING = make_chain_mdp(20, 0.5, 0.9)


def random_batch(seed, n=12, dim=2, two_draws=True):
    rng = np.random.default_rng(seed)
    return Batch(
        inputs=rng.normal(size=(n, dim)),
        rewards=rng.normal(size=n),
        live=(rng.random(n) > 0.2).astype(float),
        next_inputs=rng.normal(size=(n, dim)),
        next_inputs_alt=rng.normal(size=(n, dim)) if two_draws else None,
    )


def grad_rel_error(loss_fn, params):
    analytic = np.concatenate([g.ravel() for g in nn.gradient(loss_fn(), params)])
    numeric = np.concatenate([g.ravel() for g in nn.numerical_gradient(loss_fn, params)])
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError) as info:
        FqeConfig.from_dict({"learning_rate": 1e-3, "lr": 1e-3})
    assert info.value.details["unknown"] == ["lr"]


def test_config_defaults_follow_protocol():
    assert TrainConfig().batch_size == 1024
    assert DfivConfig().batch_size == 2048
    assert FqeConfig().target_update_period == 100


def test_config_lists_become_tuples():
    config = DbrmConfig.from_dict({"hidden": [16, 16]})
    assert config.hidden == (16, 16)
    assert config.to_dict()["hidden"] == [16, 16]


@pytest.mark.parametrize("params", [{"discount": 1.0}, {"n_steps": 0}, {"learning_rate": -1.0}])
def test_config_validation(params):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(params)


def test_scaled_shrinks_step_budgets_only():
    config = FqeConfig(n_steps=1000, eval_interval=100, target_update_period=10).scaled(0.1)
    assert (config.n_steps, config.eval_interval, config.target_update_period) == (100, 10, 10)
    assert FqeConfig(n_steps=3, eval_interval=3).scaled(0.01).n_steps == 1


# ---------------------------------------------------------------------------
# Batching and curves
# ---------------------------------------------------------------------------

def test_epoch_batcher_visits_each_row_once_per_epoch():
    batcher = EpochBatcher(10, 5, np.random.default_rng(0))
    first_epoch = np.concatenate([batcher.next(), batcher.next()])
    np.testing.assert_array_equal(np.sort(first_epoch), np.arange(10))
    batcher.next()
    assert batcher.epoch == 1


def test_epoch_batcher_clamps_batch_size():
    assert len(EpochBatcher(3, 1024, np.random.default_rng(0)).next()) == 3


def test_full_batch_marks_terminal_rows(chain_data, chain_policy):
    batch = full_batch(chain_data, position_features(), chain_policy, seed=0, two_draws=True)
    np.testing.assert_array_equal(batch.live, (~chain_data.terminals).astype(float))
    assert batch.next_inputs_alt is not None


def test_curve_recorder_records_on_interval_and_last_step():
    recorder = CurveRecorder("test", n_steps=25, eval_interval=10, value_probe=lambda fitted: 1.5)
    due = [s for s in range(1, 26) if recorder.due(s)]
    assert due == [10, 20, 25]
    recorder.record(10, 0.5, 0.25, None)
    assert recorder.points == [CurvePoint(10, 0.5, 0.25, 1.5)]


def test_write_curve(tmp_path):
    path = tmp_path / "curve.csv"
    write_curve([CurvePoint(1, 0.5, 0.25, 2.0)], str(path))
    assert path.read_text(encoding="utf-8").splitlines() == ["step,train_loss,valid_metric,q_s0", "1,0.5,0.25,2.0"]


def test_check_finite_aborts_with_diagnostics():
    with pytest.raises(TrainingAborted) as info:
        check_finite("fqe", 17, float("nan"), stage=2)
    assert info.value.step == 17
    assert info.value.to_dict()["method"] == "fqe"
    assert info.value.diagnostics["stage"] == 2


# ---------------------------------------------------------------------------
# Loss gradients
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_dbrm_loss_gradient(seed):
    net = nn.Mlp([2, 6, 1], activation="tanh", seed=seed)
    batch = random_batch(seed)
    assert grad_rel_error(lambda: dbrm_loss(net, batch, 0.9), net.parameters) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fqe_loss_gradient(seed):
    net = nn.Mlp([2, 6, 1], activation="tanh", seed=seed)
    target = nn.Mlp([2, 6, 1], activation="tanh", seed=seed + 100)
    batch = random_batch(seed)
    targets = fqe_targets(target, batch, 0.9)
    assert grad_rel_error(lambda: fqe_loss(net, batch, targets), net.parameters) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_dfiv_stage_loss_gradients(seed):
    phi_net = nn.Mlp([2, 5, 4], activation="tanh", activate_output=True, seed=seed, stream="phi")
    psi_net = nn.Mlp([2, 5, 3], activation="tanh", activate_output=True, seed=seed, stream="psi")
    batch = random_batch(seed, n=20, two_draws=False)
    treatment = dfiv_treatment(phi_net, batch, 0.9).value
    assert grad_rel_error(lambda: dfiv_stage1_loss(psi_net, treatment, batch, 1e-2), psi_net.parameters) < 1e-4
    psi = psi_net.predict(batch.inputs)
    assert grad_rel_error(lambda: dfiv_stage2_loss(phi_net, psi, batch, 0.9, 1e-2, 1e-2),
                          phi_net.parameters) < 1e-4


def test_dbrm_loss_with_one_draw_is_squared_td_error():
    net = nn.Mlp([2, 4, 1], seed=0)
    batch = random_batch(0, two_draws=False)
    delta = batch.rewards - net.predict(batch.inputs)[:, 0] + 0.9 * batch.live * net.predict(batch.next_inputs)[:, 0]
    assert float(dbrm_loss(net, batch, 0.9).value) == pytest.approx(np.mean(delta ** 2), rel=1e-12)


def test_dfiv_closed_form_matches_two_ridge_regressions():
    phi_net = nn.Mlp([2, 6, 4], activation="tanh", activate_output=True, seed=1, stream="phi")
    psi_net = nn.Mlp([2, 6, 5], activation="tanh", activate_output=True, seed=1, stream="psi")
    batch = random_batch(3, n=200, two_draws=False)
    lam1, lam2, gamma = 1e-3, 1e-4, 0.9
    v, theta = dfiv_closed_form(phi_net, psi_net, batch, gamma, lam1, lam2)

    n = batch.inputs.shape[0]
    treatment = phi_net.predict(batch.inputs) - gamma * batch.live[:, None] * phi_net.predict(batch.next_inputs)
    psi = psi_net.predict(batch.inputs)
    v_expected = np.linalg.solve(psi.T @ psi / n + lam1 * np.eye(5), psi.T @ treatment / n).T
    predicted = psi @ v_expected.T
    theta_expected = np.linalg.solve(predicted.T @ predicted / n + lam2 * np.eye(4), predicted.T @ batch.rewards / n)
    np.testing.assert_allclose(v, v_expected, rtol=1e-6, atol=1e-10)
    np.testing.assert_allclose(theta, theta_expected, rtol=1e-6, atol=1e-10)


# ---------------------------------------------------------------------------
# Training runs
# ---------------------------------------------------------------------------

def test_fqe_training_is_deterministic(chain, chain_split, chain_policy):
    train, valid = chain_split
    encoder = position_features(chain.embedding)
    config = FqeConfig.from_dict({**TINY, "discount": chain.discount, "target_update_period": 5})
    a = fit_fqe(train, valid, chain_policy, config, encoder)
    b = fit_fqe(train, valid, chain_policy, config, encoder)
    np.testing.assert_array_equal(a.net.get_flat(), b.net.get_flat())
    assert [p.step for p in a.curve] == [10, 20, 30, 40]
    assert a.validation == b.validation


@pytest.mark.parametrize("estimator_cls, config_cls", [
    (DbrmEstimator, DbrmConfig),
    (FqeEstimator, FqeConfig),
    (DfivEstimator, DfivConfig),
])
def test_estimators_fit_and_score(estimator_cls, config_cls, chain, chain_split, chain_policy):
    train, valid = chain_split
    extra = {"instrument_hidden": (8, 8)} if config_cls is DfivConfig else {}
    config = config_cls.from_dict({**TINY, **extra, "discount": chain.discount})
    probe_calls = []

    def probe(fitted):
        probe_calls.append(1)
        return float(fitted.q(np.array([[0.0]]), np.array([0]))[0])

    estimator = estimator_cls(config, position_features(chain.embedding), probe)
    fitted = estimator.fit(train, valid, chain_policy)
    assert isinstance(fitted, (NeuralQ, FeatureQ))
    assert np.isfinite(estimator.validation_metric(fitted, valid, chain_policy))
    assert len(fitted.curve) == 4 and len(probe_calls) == 4
    q = fitted.q(chain.state_inputs, np.zeros(chain.n_states, dtype=int))
    assert q.shape == (chain.n_states,) and np.all(np.isfinite(q))


def test_zero_discount_fqe_is_reward_regression(chain, chain_split, chain_policy):
    """With discount 0 the target network never matters."""
    train, valid = chain_split
    encoder = position_features(chain.embedding)
    short = FqeConfig.from_dict({**TINY, "discount": 0.0, "target_update_period": 1})
    long = FqeConfig.from_dict({**TINY, "discount": 0.0, "target_update_period": 1000})
    a = fit_fqe(train, valid, chain_policy, short, encoder)
    b = fit_fqe(train, valid, chain_policy, long, encoder)
    np.testing.assert_array_equal(a.net.get_flat(), b.net.get_flat())


@pytest.mark.parametrize("estimator_cls, config_cls", [
    (DbrmEstimator, DbrmConfig),
    (FqeEstimator, FqeConfig),
    (DfivEstimator, DfivConfig),
])
def test_terminal_next_states_never_enter_the_fit(estimator_cls, config_cls, chain, chain_split, chain_policy):
    train, valid = chain_split
    extra = {"instrument_hidden": (8, 8)} if config_cls is DfivConfig else {}
    config = config_cls.from_dict({**TINY, **extra, "discount": chain.discount})
    encoder = position_features(chain.embedding)
    moved_train = with_moved_terminal_next_states(train, 11, chain.n_states)
    moved_valid = with_moved_terminal_next_states(valid, 12, chain.n_states)
    a = estimator_cls(config, encoder).fit(train, valid, chain_policy)
    b = estimator_cls(config, encoder).fit(moved_train, moved_valid, chain_policy)
    states, actions = chain.state_inputs, np.zeros(chain.n_states, dtype=int)
    np.testing.assert_array_equal(a.q(states, actions), b.q(states, actions))
    assert a.validation == b.validation


def initial_dbrm_metric(config, encoder, valid, policy):
    batch = full_batch(valid, encoder, policy, config.seed, two_draws=True)
    return float(dbrm_loss(q_network(encoder.dim, config), batch, config.discount).value)


def initial_fqe_metric(config, encoder, valid, policy):
    return td_error(q_network(encoder.dim, config), full_batch(valid, encoder, policy, config.seed), config.discount)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("fit, config_cls, initial_metric", [
    (fit_dbrm_neural, DbrmConfig, initial_dbrm_metric),
    (fit_fqe, FqeConfig, initial_fqe_metric),
])
def test_validation_metric_falls_over_the_first_quartile(seed, fit, config_cls, initial_metric):
    # default hyperparameters apart from the step budget
    train, valid = split(generate_chain_dataset(CHAIN_FOR_TRAINING, 4000, seed=seed), 0.9, seed=seed)
    config = config_cls.from_dict({"n_steps": 400, "eval_interval": 100, "seed": seed,
                                   "discount": CHAIN_FOR_TRAINING.discount})
    encoder = position_features(CHAIN_FOR_TRAINING.embedding)
    policy = single_action_policy(CHAIN_FOR_TRAINING)
    fitted = fit(train, valid, policy, config, encoder)
    first_quartile = fitted.curve[0]
    assert first_quartile.step == config.n_steps // 4
    assert first_quartile.valid_metric < initial_metric(config, encoder, valid, policy)
