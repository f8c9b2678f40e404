import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bpgo import GroupTooSmall, InvalidReward, MissingPriorContext, PriorContext, PriorEstimator, deviation


class TestPriorFor:
    def test_fixed(self):
        est = PriorEstimator("fixed", fixed_value=0.7)
        assert est.prior_for("a") == 0.7
        assert est.prior_for(3, PriorContext(group_mean=9.0)) == 0.7

    def test_running_mean_constant_fixed_point(self):
        for rho in (0.1, 0.5, 0.9, 0.99):
            est = PriorEstimator("running_mean", ema_decay=rho)
            for _ in range(3):
                est.update(1.0)
            assert est.prior_for(0) == 1.0

    def test_running_mean_recurrence(self):
        est = PriorEstimator("running_mean", ema_decay=0.9)
        est.update(1.0)
        est.update(2.0)
        assert est.prior_for(0) == pytest.approx(1.1, abs=1e-15)

    def test_cold_start_uses_group_mean(self):
        est = PriorEstimator("running_mean")
        assert est.prior_for(0, PriorContext(group_mean=0.42)) == 0.42
        with pytest.raises(MissingPriorContext):
            est.prior_for(0)

    def test_reference_rollout(self):
        est = PriorEstimator("reference_rollout")
        assert est.prior_for(1, PriorContext(reference_rewards=[0.5, 1.0, 1.5, 2.0])) == pytest.approx(1.25)
        with pytest.raises(MissingPriorContext):
            est.prior_for(1, PriorContext())

    def test_first_observation(self):
        est = PriorEstimator("first_observation")
        assert est.prior_for(2, PriorContext(baseline_reward=0.33)) == 0.33
        with pytest.raises(MissingPriorContext):
            est.prior_for(2)

    def test_per_prompt_state(self):
        est = PriorEstimator("running_mean", per_prompt=True)
        est.update(1.0, prompt_id=0)
        est.update(3.0, prompt_id=1)
        assert est.prior_for(0) == 1.0
        assert est.prior_for(1) == 3.0

    def test_prior_for_is_read_only(self):
        est = PriorEstimator("running_mean")
        est.prior_for(0, PriorContext(group_mean=5.0))
        assert est.state == {}

    def test_bad_strategy(self):
        with pytest.raises(ValueError):
            PriorEstimator("bogus")


class TestUpdate:
    def test_fixed_is_noop(self):
        est = PriorEstimator("fixed", fixed_value=0.1)
        est.update(5.0)
        assert est.state == {} and est.prior_for(0) == 0.1

    def test_initialization(self):
        est = PriorEstimator("running_mean")
        est.update(2.5)
        assert est.prior_for(0) == 2.5

    def test_half_decay_sequence(self):
        est = PriorEstimator("running_mean", ema_decay=0.5)
        est.update(0.0)
        est.update(4.0)
        assert est.prior_for(0) == 2.0
        est.update(4.0)
        assert est.prior_for(0) == 3.0

    def test_non_finite(self):
        with pytest.raises(InvalidReward):
            PriorEstimator("running_mean").update(float("nan"))

    @given(st.floats(0.01, 0.99), st.floats(-10, 10), st.floats(-10, 10), st.integers(1, 60))
    def test_convergence_bound(self, rho, start, c, n):
        est = PriorEstimator("running_mean", ema_decay=rho)
        est.update(start)
        for _ in range(n):
            est.update(c)
        assert abs(est.prior_for(0) - c) <= abs(start - c) * rho**n + 1e-12


class TestDeviation:
    def test_simple(self):
        d = deviation([1.0, 2.0, 3.0], 2.0)
        assert d.group_delta == 0.0
        assert d.sample_deltas.tolist() == [-1.0, 0.0, 1.0]

    def test_realistic_scale(self):
        assert deviation([2.6563, 2.7042], 2.6563).group_delta == pytest.approx(0.02395, abs=1e-12)

    def test_rejects_singleton(self):
        with pytest.raises(GroupTooSmall):
            deviation([0.5], 0.0)

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=10), st.floats(-100, 100), st.floats(-100, 100))
    def test_linearity_and_mean(self, rewards, prior, b):
        d = deviation(rewards, prior)
        assert abs(d.group_delta - d.sample_deltas.mean()) < 1e-10
        shifted = deviation(np.asarray(rewards) + b, prior + b)
        np.testing.assert_allclose(shifted.sample_deltas, d.sample_deltas, atol=1e-10)
