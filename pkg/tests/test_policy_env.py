import math

import numpy as np
import pytest

from bpgo import AmbiguousEnv, InvalidAction, PromptSpec, RngStreams, TabularPolicy, Trajectory, default_env
from bpgo.policy_env import logprob_and_grad, reward, sample_group, true_quality

from oracles import central_fd, normalized_max_error


@pytest.fixture(scope="module")
def env():
    return default_env()


class TestSampling:
    def test_single_action_vocab(self):
        policy = TabularPolicy(1, 3, 1)
        g = sample_group(policy, 0, 5, RngStreams(0))
        assert np.all(g.actions == 0)
        assert np.all(g.old_logprobs == 0.0)

    def test_determinism(self):
        policy = TabularPolicy(2, 4, 8, np.random.default_rng(0).normal(size=64))
        a = sample_group(policy, 1, 6, RngStreams(42), step=3)
        b = sample_group(policy, 1, 6, RngStreams(42), step=3)
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.old_logprobs, b.old_logprobs)
        c = sample_group(policy, 1, 6, RngStreams(42), step=4)
        assert not np.array_equal(a.actions, c.actions)

    def test_slot_independence(self):
        # slot j's trajectory does not depend on how many slots were drawn
        policy = TabularPolicy(1, 4, 8)
        small = sample_group(policy, 0, 3, RngStreams(9))
        big = sample_group(policy, 0, 10, RngStreams(9))
        assert np.array_equal(small.actions, big.actions[:3])

    def test_uniform_frequencies(self):
        policy = TabularPolicy(1, 1, 4)
        g = sample_group(policy, 0, 10000, RngStreams(1))
        counts = np.bincount(g.actions[:, 0], minlength=4)
        sigma = math.sqrt(10000 * 0.25 * 0.75)
        assert np.all(np.abs(counts - 2500) < 3 * sigma)

    def test_old_logprobs_match_policy(self):
        policy = TabularPolicy(2, 3, 5, np.random.default_rng(2).normal(size=30))
        g = sample_group(policy, 1, 4, RngStreams(3))
        np.testing.assert_array_equal(g.old_logprobs, policy.step_logprobs(g))


class TestLogprobAndGrad:
    def test_uniform(self):
        policy = TabularPolicy(1, 3, 4)
        logp, _ = logprob_and_grad(policy, Trajectory([0, 3, 2], [-1.0] * 3), 0)
        np.testing.assert_allclose(logp, [math.log(0.25)] * 3, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_vs_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        policy = TabularPolicy(3, 3, 4, rng.normal(size=36))
        traj = Trajectory(rng.integers(0, 4, 3), [-1.0] * 3)
        _, grads = logprob_and_grad(policy, traj, 2)
        for t in range(3):
            fd = central_fd(lambda th: logprob_and_grad(policy.with_theta(th), traj, 2)[0][t], policy.theta)
            assert normalized_max_error(grads[t], fd) < 1e-6

    def test_normalization(self):
        policy = TabularPolicy(2, 3, 5, np.random.default_rng(4).normal(size=30) * 5)
        for p in range(2):
            np.testing.assert_allclose(policy.probs(p).sum(axis=1), 1.0, atol=1e-10)
        total = sum(math.exp(logprob_and_grad(policy, Trajectory([a, 0, 0], [-1.0] * 3), 1)[0][0]) for a in range(5))
        assert abs(total - 1.0) < 1e-10

    def test_invalid_action(self):
        policy = TabularPolicy(1, 2, 3)
        with pytest.raises(InvalidAction):
            logprob_and_grad(policy, Trajectory([0, 3], [-1.0, -1.0]), 0)

    def test_vjp_matches_dense(self):
        rng = np.random.default_rng(5)
        policy = TabularPolicy(2, 3, 4, rng.normal(size=24))
        g = sample_group(policy, 1, 4, rng)
        coef = rng.normal(size=(4, 3))
        dense = sum(coef[j] @ logprob_and_grad(policy, tr, 1)[1] for j, tr in enumerate(g.trajectories))
        np.testing.assert_allclose(policy.logprob_vjp(g, coef), dense, atol=1e-14)


class TestEnvironment:
    def test_default_layout(self, env):
        assert (env.vocab_size, env.horizon, env.n_prompts) == (8, 4, 6)
        assert [p.noise for p in env.prompts] == [0.05] * 3 + [0.6] * 3
        for p in range(6):
            q = env.quality_table(p)
            assert set(np.unique(q)) <= {0.2, 0.5, 0.8, 1.0}
            # top class occupancy near the configured 10%
            assert abs(np.mean(q == 1.0) - 0.1) < 0.02

    def test_many_to_one(self, env):
        assert len(np.unique(env.quality_table(0))) <= 4 < env.n_sequences

    def test_noise_free_reward_is_true_quality(self):
        env = AmbiguousEnv(4, 3, [PromptSpec((0.1, 0.6, 0.9), 0.0)])
        rng = np.random.default_rng(0)
        for seq in ([0, 1, 2], [3, 3, 3], [1, 0, 2]):
            assert reward(env, 0, seq, rng) == true_quality(env, 0, seq)

    def test_same_class_same_reward(self):
        env = AmbiguousEnv(4, 3, [PromptSpec((0.1, 0.6, 0.9), 0.0)])
        table = env._classes[0]
        same = np.flatnonzero(table == table[0])[:2]
        seqs = [np.array(np.unravel_index(i, (4, 4, 4))) for i in same]
        assert env.class_of(0, seqs[0]) == env.class_of(0, seqs[1])
        rng = np.random.default_rng(0)
        assert reward(env, 0, seqs[0], rng) == reward(env, 0, seqs[1], rng)

    def test_noise_clt(self):
        env = AmbiguousEnv(4, 2, [PromptSpec((0.2, 0.8), 0.5)])
        seq = [1, 2]
        q = true_quality(env, 0, seq)
        rng = np.random.default_rng(123)
        draws = np.array([reward(env, 0, seq, rng) for _ in range(10000)])
        assert abs(draws.mean() - q) < 3 * 0.5 / math.sqrt(10000)
        assert abs((draws - q).std() - 0.5) < 0.02

    def test_expected_quality_matches_enumeration(self):
        env = AmbiguousEnv(3, 3, [PromptSpec((0.0, 0.5, 1.0), 0.1)], top_fraction=0.2, seed=5)
        policy = TabularPolicy(1, 3, 3, np.random.default_rng(1).normal(size=9))
        probs = policy.probs(0)
        brute = 0.0
        for idx in range(27):
            seq = np.unravel_index(idx, (3, 3, 3))
            brute += np.prod([probs[t, seq[t]] for t in range(3)]) * true_quality(env, 0, seq)
        assert env.expected_quality(policy, 0) == pytest.approx(brute, abs=1e-14)

    def test_round_trip(self, env):
        again = AmbiguousEnv.from_dict(env.to_dict())
        assert again.to_dict() == env.to_dict()
        for p in range(env.n_prompts):
            assert np.array_equal(again.quality_table(p), env.quality_table(p))

    def test_rejects_unknown_keys(self, env):
        d = env.to_dict()
        d["bogus"] = 1
        with pytest.raises(ValueError):
            AmbiguousEnv.from_dict(d)
