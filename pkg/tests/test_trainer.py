import dataclasses

import numpy as np
import pytest

from consortium_rl.dynamics import NOMINAL_PARAMETERS, SETPOINT_X0
from consortium_rl.errors import ConfigurationError, TrainingDivergedError
from consortium_rl.policy import grad_log_prob_sum, init_policy
from consortium_rl.references import ReferenceSpec, reference_series
from consortium_rl.returns import ReturnConfig
from consortium_rl import trainer
from consortium_rl.trainer import (AscentStep, EnvConfig, RolloutBatch, TrainingConfig,
                                   UncertaintySpec, episode_rng, epoch_disturbances,
                                   policy_gradient, rollout_batch, rollout_episode,
                                   sample_disturbance, train, write_disturbance_csv,
                                   write_epoch_csv)

ENV = EnvConfig()
REFS = reference_series(ReferenceSpec(values=(3.0, 4.0)), 18)
SAT = ReturnConfig.saturation(27.0)


def _batch(seed=0, n=6):
    policy = init_policy(seed, ENV.upper)
    return policy, rollout_batch(policy, ENV, SAT, REFS, [episode_rng(seed, 0, k) for k in range(n)])


def test_rollout_shapes_and_clipping():
    _, batch = _batch()
    assert batch.observations.shape == (6, 18, 15)
    assert batch.states.shape == (6, 19, 5) and batch.rewards.shape == (6, 18)
    assert np.all(batch.actions >= 0) and np.all(batch.actions <= ENV.upper)
    np.testing.assert_array_equal(batch.actions, np.clip(batch.raw_actions, 0, ENV.upper))
    np.testing.assert_array_equal(batch.totals, batch.rewards.sum(axis=1))
    assert batch.clamped == 0


def test_batched_rollout_matches_single_episodes():
    policy, batch = _batch(n=3)
    traj, ret = rollout_episode(policy, ENV, SAT, REFS, episode_rng(0, 0, 2))
    np.testing.assert_allclose(traj.states, batch.states[2], rtol=1e-12)
    assert ret.total == pytest.approx(batch.totals[2], rel=1e-12)


def test_rollouts_are_deterministic():
    _, a = _batch(3)
    _, b = _batch(3)
    assert a.totals.tobytes() == b.totals.tobytes()


def test_gradient_is_advantage_weighted_score():
    policy, batch = _batch(n=4)
    grad, adv = policy_gradient(policy, batch)
    manual = sum(adv[k] * grad_log_prob_sum(policy, batch.observations[k], batch.raw_actions[k])[0]
                 for k in range(4)) / 4
    np.testing.assert_allclose(grad, manual, rtol=1e-9, atol=1e-12)
    assert abs(adv.mean()) <= 1e-10


def test_equal_returns_give_exactly_zero_update():
    policy, batch = _batch(n=5)
    flat = dataclasses.replace(batch, totals=np.full(5, 11.25))
    grad, adv = policy_gradient(policy, flat)
    assert np.all(adv == 0) and np.all(grad == 0)
    step = AscentStep(TrainingConfig(alpha=0.1))
    assert np.array_equal(policy.theta + step.direction(grad), policy.theta)


def test_adam_first_step_is_bounded_by_learning_rate():
    step = AscentStep(TrainingConfig(alpha=0.01, optimizer="adam"))
    d = step.direction(np.array([1e-6, -3.0, 40.0]))
    np.testing.assert_allclose(np.abs(d), 0.01, rtol=1e-2)


def test_disturbance_statistics():
    spec = UncertaintySpec(rel_std=0.07)
    rng = np.random.default_rng(0)
    draws = np.array([sample_disturbance(spec, SETPOINT_X0.as_array(), NOMINAL_PARAMETERS, rng).x0
                      for _ in range(2000)])
    rel = draws / SETPOINT_X0.as_array() - 1
    assert np.all(np.abs(rel) <= 3 * 0.07)
    assert np.all((0.063 <= rel.std(0)) & (rel.std(0) <= 0.077))


def test_disturbances_only_touch_selected_parameters():
    d = sample_disturbance(UncertaintySpec(), SETPOINT_X0.as_array(), NOMINAL_PARAMETERS,
                           np.random.default_rng(1))
    changed = {k for k, v in d.params.to_dict().items() if v != NOMINAL_PARAMETERS.to_dict()[k]}
    assert changed == {"q_a_max_1", "q_a_max_2"}


def test_disturbance_lineage_is_per_episode():
    spec = UncertaintySpec()
    a = epoch_disturbances(spec, ENV, 5, 2, 4)
    b = sample_disturbance(spec, np.asarray(ENV.x0), ENV.params, episode_rng(5, 2, 3, trainer.DISTURBANCE_STREAM))
    np.testing.assert_array_equal(a[3].x0, b.x0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainingConfig(n_mc=1)
    with pytest.raises(ConfigurationError):
        TrainingConfig(alpha=0.0)
    with pytest.raises(ConfigurationError):
        TrainingConfig(patience=0)
    with pytest.raises(ConfigurationError):
        TrainingConfig(optimizer="rmsprop")
    with pytest.raises(ConfigurationError):
        UncertaintySpec(parameters=("k_z",))
    cfg = TrainingConfig(uncertainty=UncertaintySpec(rel_std=0.05))
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg


def test_short_training_run_is_reproducible():
    cfg = TrainingConfig(n_mc=4, max_epochs=4, patience=4, seed=2)
    a = train(cfg, ENV, SAT, REFS)
    b = train(cfg, ENV, SAT, REFS)
    assert [r.mean_return for r in a.records] == [r.mean_return for r in b.records]
    assert a.final.content_hash() == b.final.content_hash()
    assert a.best_epoch == int(np.argmax(a.mean_returns))
    assert a.best_batch.totals.mean() == a.best_mean_return


def test_early_stopping_uses_strict_improvement(monkeypatch):
    means = iter([5.0, 6.0, 6.0, 5.5, 7.0])

    def fake_rollout(policy, env, ret_cfg, refs, rngs, disturbances=None):
        n = len(rngs)
        m = next(means)
        totals = m + np.linspace(-1, 1, n)
        return RolloutBatch(np.zeros((n, 18, 15)), np.zeros((n, 18, 2)), np.zeros((n, 18, 2)),
                            np.zeros((n, 19, 5)), np.zeros((n, 18)), totals)

    monkeypatch.setattr(trainer, "rollout_batch", fake_rollout)
    res = train(TrainingConfig(n_mc=3, max_epochs=5, patience=2), ENV, SAT, REFS)
    assert res.stopped_early and len(res.records) == 4
    assert res.best_epoch == 1
    assert [r.best for r in res.records] == [True, True, False, False]


def test_divergence_is_reported(monkeypatch):
    def nan_rollout(policy, env, ret_cfg, refs, rngs, disturbances=None):
        n = len(rngs)
        return RolloutBatch(np.zeros((n, 18, 15)), np.zeros((n, 18, 2)), np.zeros((n, 18, 2)),
                            np.zeros((n, 19, 5)), np.zeros((n, 18)), np.full(n, np.nan))

    monkeypatch.setattr(trainer, "rollout_batch", nan_rollout)
    with pytest.raises(TrainingDivergedError) as info:
        train(TrainingConfig(n_mc=3, max_epochs=3), ENV, SAT, REFS)
    assert info.value.diagnostics["epoch"] == 0


def test_uncertain_training_logs_every_draw(tmp_path):
    cfg = TrainingConfig(n_mc=3, max_epochs=2, patience=2, uncertainty=UncertaintySpec())
    res = train(cfg, ENV, SAT, REFS)
    assert len(res.disturbances) == 6
    write_disturbance_csv(tmp_path / "d.csv", res.disturbances)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].endswith("seed_entropy") and lines[-1].endswith("0 1 2 1")
    write_epoch_csv(tmp_path / "e.csv", res.records)
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "epoch,mean_return,std_return,best_flag"
