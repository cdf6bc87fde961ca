import numpy as np
import pytest

from lfpo import trainer
from lfpo.config import TrainConfig
from lfpo.errors import InvalidInputError, TrainingDivergedError
from lfpo.scheduler import AccumMode, Block, WorkItem, build_blocks
from lfpo.trainer import (
    Batch, OptimizerState, adamw_step, baseline_gradient, baseline_pg_update, block_gradient,
    ema_update, group_advantages, init_state, lfpo_update_phase, rollout_phase, train,
)


def tiny(**overrides):
    base = dict(model__embed_dim=8, model__hidden_dim=16, task__data_vocab=6, task__prompt_len=4,
                task__completion_len=4, trainer__batch_prompts=2, trainer__group_size=3,
                trainer__strata=2, trainer__eval_every=0)
    base.update(overrides)
    return TrainConfig().replace(**base)


def perturbed(config, scale=0.05, seed=7):
    state = init_state(config)
    state.theta = state.theta + np.random.default_rng(seed).normal(scale=scale, size=state.theta.size)
    return state


class TestAdamW:
    def test_zero_gradient(self):
        theta = np.array([1.0, -2.0])
        new, st = adamw_step(theta, np.zeros(2), OptimizerState.zeros(2), 1e-2)
        np.testing.assert_array_equal(new, theta)
        assert st.step == 1

    def test_first_step(self):
        g = np.array([0.3, -2.0, 1e-3])
        new, _ = adamw_step(np.zeros(3), g, OptimizerState.zeros(3), 0.1)
        np.testing.assert_allclose(new, -0.1 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_weight_decay_only(self):
        theta = np.array([2.0, -4.0])
        new, _ = adamw_step(theta, np.zeros(2), OptimizerState.zeros(2), 0.1, weight_decay=0.5)
        np.testing.assert_allclose(new, theta * (1 - 0.1 * 0.5), rtol=1e-15)

    def test_against_scalar_loop(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=(6, 3))
        lr, b1, b2, eps, wd = 0.05, 0.8, 0.99, 1e-6, 0.1
        theta, st = np.array([0.5, -1.0, 2.0]), OptimizerState.zeros(3)
        for g in grads:
            theta, st = adamw_step(theta, g, st, lr, b1, b2, eps, wd)
        for i, x in enumerate([0.5, -1.0, 2.0]):
            m = v = 0.0
            for t, g in enumerate(grads[:, i], start=1):
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                x = x - lr * wd * x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            assert theta[i] == pytest.approx(x, rel=1e-12)
        assert st.step == 6 and np.all(st.v >= 0)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            adamw_step(np.zeros(2), np.zeros(3), OptimizerState.zeros(2), 0.1)


class TestEma:
    def test_examples(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 10))
        np.testing.assert_array_equal(ema_update(a, b, 0.0), b)
        assert ema_update(np.array([1.0]), np.array([0.0]), 0.9)[0] == 0.9
        for alpha in (0.0, 0.3, 0.95):
            np.testing.assert_array_equal(ema_update(a, a, alpha), a)

    def test_trails_between(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            old, new = rng.normal(size=(2, 30))
            out = ema_update(old, new, float(rng.random()))
            assert np.all(out >= np.minimum(old, new)) and np.all(out <= np.maximum(old, new))

    @pytest.mark.parametrize("alpha", [-0.1, 1.0])
    def test_alpha_range(self, alpha):
        with pytest.raises(InvalidInputError):
            ema_update(np.zeros(2), np.zeros(2), alpha)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            ema_update(np.zeros(2), np.zeros(3), 0.5)


class TestRollout:
    def test_counts_and_rewards(self):
        config = tiny()
        batch = rollout_phase(init_state(config).theta, config, 1)
        assert len(batch) == 6 and batch.completions.shape == (6, 4)
        assert np.all((batch.rewards >= 0) & (batch.rewards <= 1))
        assert np.all(batch.prompts[0] == batch.prompts[2]) and np.all(batch.prompts[3] == batch.prompts[5])
        assert np.all((batch.decode_steps >= 1) & (batch.decode_steps <= 4))

    def test_single_trajectory(self):
        config = tiny(trainer__batch_prompts=1, trainer__group_size=1)
        assert len(rollout_phase(init_state(config).theta, config, 1)) == 1

    def test_deterministic(self):
        config = tiny()
        theta = init_state(config).theta
        a, b = rollout_phase(theta, config, 3), rollout_phase(theta, config, 3)
        np.testing.assert_array_equal(a.completions, b.completions)
        assert not np.array_equal(a.prompts, rollout_phase(theta, config, 4).prompts)

    def test_group_rescale(self):
        r = trainer._group_minmax(np.array([0.2, 0.4, 0.6, 0.5, 0.5, 0.5]), 3)
        np.testing.assert_allclose(r, [0.0, 0.5, 1.0, 0.5, 0.5, 0.5])

    def test_lfpo_and_baseline_share_rollouts(self):
        lfpo = tiny()
        pg = lfpo.replace(trainer__algorithm="pg_baseline")
        s1, s2 = init_state(lfpo), init_state(pg)
        b1, _ = trainer.train_iteration(s1, lfpo)
        b2, _ = trainer.train_iteration(s2, pg)
        np.testing.assert_array_equal(b1.completions, b2.completions)
        np.testing.assert_array_equal(b1.rewards, b2.rewards)


class TestLfpoUpdate:
    def test_detached_cold_start_leaves_params(self):
        config = tiny(lfpo__detach_targets=True)
        state = init_state(config)
        batch = rollout_phase(state.theta_old, config, 1)
        theta, opt, stats = lfpo_update_phase(state.theta, state.theta_old, batch, config, state.opt_state, 1)
        np.testing.assert_array_equal(theta, state.theta)
        assert stats["grad_norm"] == 0.0 and opt.step == 1

    def test_detached_cold_start_with_weight_decay(self):
        config = tiny(lfpo__detach_targets=True, trainer__weight_decay=0.1)
        state = init_state(config)
        batch = rollout_phase(state.theta_old, config, 1)
        theta, _, _ = lfpo_update_phase(state.theta, state.theta_old, batch, config, state.opt_state, 1)
        np.testing.assert_allclose(theta, state.theta * (1 - 1e-3 * 0.1), rtol=1e-15)

    def test_cold_start_moves_params_without_detach(self):
        config = tiny()
        state = init_state(config)
        batch = rollout_phase(state.theta_old, config, 1)
        theta, _, stats = lfpo_update_phase(state.theta, state.theta_old, batch, config, state.opt_state, 1)
        assert stats["grad_norm"] > 0 and np.any(theta != state.theta)

    def test_block_size_invariance_of_step(self):
        config = tiny()
        state = perturbed(config)
        batch = rollout_phase(state.theta_old, config, 1)
        total = len(batch) * config.trainer.strata
        results = [lfpo_update_phase(state.theta, state.theta_old, batch, config, state.opt_state, 1, bs)[0]
                   for bs in (1, 4, total)]
        delta = results[-1] - state.theta
        for r in results[:-1]:
            assert np.linalg.norm(r - results[-1]) <= 1e-9 * np.linalg.norm(delta)

    def test_step_per_block_takes_one_step_per_block(self):
        config = tiny(trainer__accum_mode=AccumMode.STEP_PER_BLOCK, trainer__block_size=5)
        state = perturbed(config)
        batch = rollout_phase(state.theta_old, config, 1)
        _, opt, _ = lfpo_update_phase(state.theta, state.theta_old, batch, config, state.opt_state, 1)
        assert opt.step == int(np.ceil(len(batch) * config.trainer.strata / 5))

    def test_anchor_only_direction(self):
        config = tiny(trainer__batch_prompts=1, trainer__group_size=1, trainer__strata=1,
                      lfpo__detach_targets=True, lfpo__lambda_anchor=1.0)
        state = init_state(config)
        rolled = rollout_phase(state.theta_old, config, 1)
        batch = Batch(rolled.prompts, rolled.completions, np.ones(1), rolled.decode_steps, 1)
        theta, _, _ = lfpo_update_phase(state.theta, state.theta_old, batch, config, state.opt_state, 1)
        block = build_blocks(1, 1, 16, trainer._rng(config.trainer.seed, trainer._BLOCKS, 1), 4)[0]
        pure = config.replace(lfpo__beta=1.0)
        _, g_anchor = block_gradient(state.theta, state.theta_old, batch, block, pure, 1, 1.0)
        assert np.dot(theta - state.theta, -g_anchor) > 0

    def test_block_gradient_matches_differences(self):
        config = tiny(lfpo__lambda_anchor=0.5)
        state = perturbed(config, scale=0.2)
        batch = rollout_phase(state.theta_old, config, 1)
        block = Block(0, (WorkItem(0, 2, 0), WorkItem(4, 4, 1), WorkItem(2, 1, 2)))
        loss_fn = lambda th: block_gradient(th, state.theta_old, batch, block, config, 1, 1 / 3)[0]
        _, g = block_gradient(state.theta, state.theta_old, batch, block, config, 1, 1 / 3)
        rng = np.random.default_rng(3)
        h = 1e-6
        for j in rng.choice(g.size, 40, replace=False):
            e = np.zeros_like(g)
            e[j] = h
            fd = (loss_fn(state.theta + e) - loss_fn(state.theta - e)) / (2 * h)
            assert abs(fd - g[j]) <= 1e-7 + 1e-4 * abs(g[j])

    def test_empty_batch(self):
        config = tiny()
        empty = Batch(np.zeros((0, 4), int), np.zeros((0, 4), int), np.zeros(0), np.zeros(0, int), 3)
        with pytest.raises(InvalidInputError):
            lfpo_update_phase(np.zeros(3), np.zeros(3), empty, config, OptimizerState.zeros(3), 1)


class TestBaseline:
    def test_advantages(self):
        adv = group_advantages([1.0, 0.0, 0.5, 0.5], 2)
        np.testing.assert_allclose(adv, [0.5 / (0.5 + 1e-6), -0.5 / (0.5 + 1e-6), 0.0, 0.0])

    def test_equal_rewards_no_update(self):
        config = tiny(trainer__algorithm="pg_baseline", trainer__weight_decay=0.0)
        state = init_state(config)
        rolled = rollout_phase(state.theta, config, 1)
        batch = Batch(rolled.prompts, rolled.completions, np.full(len(rolled), 0.4), rolled.decode_steps, 3)
        theta, _, stats = baseline_pg_update(state.theta, batch, config, state.opt_state, 1)
        np.testing.assert_array_equal(theta, state.theta)
        assert stats["grad_norm"] == 0.0

    def test_gradient_matches_differences(self):
        config = tiny(trainer__algorithm="pg_baseline")
        state = perturbed(config, scale=0.2)
        batch = rollout_phase(state.theta, config, 1)
        batch.rewards = np.linspace(0, 1, len(batch))
        _, g = baseline_gradient(state.theta, batch, config, 1)
        h = 1e-6
        for j in np.random.default_rng(4).choice(g.size, 40, replace=False):
            e = np.zeros_like(g)
            e[j] = h
            fd = (baseline_gradient(state.theta + e, batch, config, 1)[0]
                  - baseline_gradient(state.theta - e, batch, config, 1)[0]) / (2 * h)
            assert abs(fd - g[j]) <= 1e-7 + 1e-4 * abs(g[j])

    def test_unit_advantage_matches_anchor_residual(self):
        # with A = 1 and one masked position the logit gradient is p - onehot, the anchor residual
        config = tiny(trainer__algorithm="pg_baseline", trainer__batch_prompts=1, trainer__group_size=2,
                      task__prompt_len=1, task__completion_len=1, task__kind="mod_sum",
                      trainer__strata=1)
        state = init_state(config)
        rolled = rollout_phase(state.theta, config, 1)
        batch = Batch(rolled.prompts, rolled.completions, np.array([1.0, 0.0]), rolled.decode_steps, 2)
        _, g_pg = baseline_gradient(state.theta, batch, config, 1)
        adv = group_advantages(batch.rewards, 2)
        from lfpo import denoiser
        from lfpo.objective import anchor_gradient
        cfg = config.model_config
        expected = np.zeros_like(g_pg)
        for j in range(2):
            seq = np.concatenate([batch.prompts[j], [config.task.mask_id]])
            z = denoiser.forward(state.theta, seq, cfg)
            up = np.zeros_like(z)
            up[1] = adv[j] * anchor_gradient(z[1], batch.completions[j][0], 1.0) / 2
            expected += denoiser.backward(state.theta, seq, up, cfg)
        np.testing.assert_allclose(g_pg, expected, rtol=1e-10, atol=1e-14)

    def test_needs_groups(self):
        config = tiny(trainer__algorithm="pg_baseline", trainer__group_size=1)
        state = init_state(config)
        with pytest.raises(InvalidInputError):
            baseline_gradient(state.theta, rollout_phase(state.theta, config, 1), config, 1)


class TestTrain:
    def test_zero_iterations(self):
        config = tiny(trainer__total_iterations=0)
        result = train(config)
        assert result.metrics == []
        np.testing.assert_array_equal(result.params, init_state(config).theta)

    def test_bit_identical_reruns(self):
        config = tiny(trainer__total_iterations=4, trainer__eval_every=2, trainer__eval_prompts=10)
        a, b = train(config), train(config)
        assert [r.to_dict() for r in a.metrics] == [r.to_dict() for r in b.metrics]
        np.testing.assert_array_equal(a.params, b.params)

    def test_rows_and_cadence(self):
        config = tiny(trainer__total_iterations=6, trainer__eval_every=3, trainer__eval_prompts=10)
        seen = []
        result = train(config, on_row=seen.append)
        assert seen == result.metrics
        assert [r.iteration for r in seen] == [1, 2, 3, 4, 5, 6]
        assert [r.trajectories for r in seen] == [6 * i for i in range(1, 7)]
        evals = [r.iteration for r in seen if r.eval_exact_reward is not None]
        assert evals == [3, 6]
        assert all(r.wall_seconds is None for r in seen)
        for r in seen:
            assert np.isfinite(r.loss) and np.isfinite(r.grad_norm)

    def test_theta_old_trails(self):
        config = tiny(trainer__total_iterations=1)
        state = init_state(config)
        before = state.theta_old.copy()
        trainer.train_iteration(state, config)
        lo, hi = np.minimum(before, state.theta), np.maximum(before, state.theta)
        assert np.all((state.theta_old >= lo) & (state.theta_old <= hi))

    def test_resume_matches_uninterrupted(self):
        config = tiny(trainer__total_iterations=4)
        full = train(config)
        half = train(config.replace(trainer__total_iterations=2))
        rest = train(config.replace(trainer__total_iterations=2), state=half.state)
        np.testing.assert_array_equal(full.params, rest.params)
        assert [r.iteration for r in rest.metrics] == [3, 4]

    def test_checkpoint_hook(self):
        config = tiny(trainer__total_iterations=5, trainer__checkpoint_every=2)
        seen = []
        train(config, on_checkpoint=lambda s: seen.append(s.iteration))
        assert seen == [2, 4, 5]

    def test_divergence_guard(self, monkeypatch):
        config = tiny(trainer__total_iterations=3)
        real = trainer.lfpo_update_phase
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            theta, opt, stats = real(*args, **kwargs)
            calls["n"] += 1
            if calls["n"] == 2:
                stats = dict(stats, loss=float("nan"))
            return theta, opt, stats

        monkeypatch.setattr(trainer, "lfpo_update_phase", flaky)
        with pytest.raises(TrainingDivergedError) as info:
            train(config)
        assert info.value.iteration == 2
        assert info.value.state.iteration == 1


@pytest.mark.slow
def test_copy_smoke_eval_improves_from_init():
    from conftest import SMOKE_ITERATIONS, eval_rows, initial_eval, training_run
    improved = 0
    for seed in range(5):
        rows, _ = training_run(seed)
        start = initial_eval(seed)[0]
        best = max(r.eval_exact_reward for r in eval_rows(rows) if r.iteration <= SMOKE_ITERATIONS)
        improved += best > start
    assert improved >= 4, f"eval rose above its initial value on {improved}/5 seeds"
