"""Group advantages, token-level shaping, clipped surrogate, entropy."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rlfr.grpo import (
    ClipRange,
    GroupRollout,
    group_advantage,
    grpo_objective,
    policy_entropy,
    token_advantages,
)
from rlfr.latents import Trajectory

torch.set_num_threads(1)


class TestGroupAdvantage:
    def test_one_hot_group(self):
        adv = group_advantage([1, 0, 0, 0])
        assert np.allclose(adv, [1.7321, -0.5774, -0.5774, -0.5774], atol=1e-4)

    def test_degenerate_group(self):
        assert np.array_equal(group_advantage([1, 1, 1, 1]), np.zeros(4))
        assert np.array_equal(group_advantage([0, 0]), np.zeros(2))

    def test_pair(self):
        assert np.allclose(group_advantage([1, 0]), [1.0, -1.0])

    def test_needs_two(self):
        with pytest.raises(ValueError):
            group_advantage([1])

    @given(st.lists(st.integers(min_value=0, max_value=1), min_size=2, max_size=32))
    @settings(max_examples=200, deadline=None)
    def test_zero_sum(self, outcomes):
        adv = group_advantage(outcomes)
        assert abs(adv.sum()) < 1e-9


class TestTokenAdvantages:
    def test_telescoping_gamma_one(self):
        adv = token_advantages(np.array([0.0, 0.01, -0.01]), 1.0, 0.5)
        assert np.allclose(adv, [0.5, 0.5, 0.49])

    def test_all_zero_rewards_reduce_to_outcome(self):
        adv = token_advantages(np.zeros(7), 1.0, 1.25)
        assert np.array_equal(adv, np.full(7, 1.25))

    def test_gamma_zero_keeps_own_reward(self):
        adv = token_advantages(np.array([0.01, 0.01]), 0.0, 0.2)
        assert np.allclose(adv, [0.21, 0.21])

    def test_discounting(self):
        adv = token_advantages(np.array([1.0, 1.0, 1.0]), 0.5, 0.0)
        assert np.allclose(adv, [1.75, 1.5, 1.0])

    def test_signed_zero_reduction_is_bitwise(self):
        # -0.0 flow rewards (beta=0 shaping) must reproduce the outcome
        # advantage bit for bit
        r = np.array([-0.0, 0.0, -0.0])
        adv = token_advantages(r, 1.0, 0.7331)
        plain = token_advantages(np.zeros(3), 1.0, 0.7331)
        assert adv.tobytes() == plain.tobytes()

    def test_gamma_validation(self):
        with pytest.raises(ValueError):
            token_advantages(np.zeros(2), 1.5, 0.0)


class TestGrpoObjective:
    def test_identity_ratio_returns_mean_advantage(self):
        logp = np.log(np.array([0.3, 0.7, 0.1]))
        adv = np.array([0.5, -1.0, 2.0])
        obj = grpo_objective(logp, logp, adv)
        assert obj.item() == pytest.approx(adv.mean())

    def test_upper_clip(self):
        # rho=2, A=1, clip (0.2, 0.28): min(2, 1.28) = 1.28
        obj = grpo_objective(np.array([math.log(2.0)]), np.array([0.0]), np.array([1.0]))
        assert obj.item() == pytest.approx(1.28)

    def test_lower_clip(self):
        # rho=0.5, A=-1: min(-0.5, 0.8 * -1) = -0.8
        obj = grpo_objective(np.array([math.log(0.5)]), np.array([0.0]), np.array([-1.0]))
        assert obj.item() == pytest.approx(-0.8)

    def test_group_averaging_token_mean_then_group_mean(self):
        # two responses of different lengths: per-response token mean first
        obj = grpo_objective(
            [np.zeros(4), np.zeros(2)],
            [np.zeros(4), np.zeros(2)],
            [np.full(4, 1.0), np.full(2, 3.0)],
        )
        assert obj.item() == pytest.approx((1.0 + 3.0) / 2)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            grpo_objective(np.zeros(3), np.zeros(2), np.zeros(3))

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(0)
        lp_old = rng.normal(-1.5, 0.3, 6)
        lp_new = lp_old + rng.normal(0, 0.1, 6)
        adv = rng.normal(0, 1, 6)
        a = grpo_objective(lp_new, lp_old, adv).item()
        b = grpo_objective(lp_new + 3.7, lp_old + 3.7, adv).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        failures = 0
        for trial in range(100):
            n = rng.integers(2, 8)
            lp_old = rng.normal(-1.0, 0.5, n)
            lp_new = torch.tensor(lp_old + rng.normal(0, 0.2, n), requires_grad=True)
            adv = rng.normal(0, 1.0, n)
            obj = -grpo_objective(lp_new, lp_old, adv)
            obj.backward()
            analytic = lp_new.grad.numpy()
            h = 1e-5
            for i in range(n):
                base = lp_new.detach().numpy().copy()
                plus, minus = base.copy(), base.copy()
                plus[i] += h
                minus[i] -= h
                fd = (
                    -grpo_objective(plus, lp_old, adv).item()
                    + grpo_objective(minus, lp_old, adv).item()
                ) / (2 * h)
                denom = max(abs(fd), abs(analytic[i]), 1e-8)
                if abs(fd - analytic[i]) / denom > 1e-4:
                    failures += 1
        assert failures == 0

    def test_clip_dead_zones(self):
        # positive advantage: zero gradient once rho > 1 + eps_high
        lp_new = torch.tensor([math.log(1.5)], requires_grad=True)
        obj = grpo_objective(lp_new, np.zeros(1), np.array([2.0]))
        obj.backward()
        assert lp_new.grad.item() == 0.0
        # negative advantage: zero gradient once rho < 1 - eps_low
        lp_new2 = torch.tensor([math.log(0.5)], requires_grad=True)
        obj2 = grpo_objective(lp_new2, np.zeros(1), np.array([-2.0]))
        obj2.backward()
        assert lp_new2.grad.item() == 0.0
        # inside the trust region the gradient is live
        lp_new3 = torch.tensor([0.0], requires_grad=True)
        obj3 = grpo_objective(lp_new3, np.zeros(1), np.array([2.0]))
        obj3.backward()
        assert lp_new3.grad.item() != 0.0


class TestClipRange:
    def test_defaults(self):
        c = ClipRange()
        assert c.eps_low == 0.2 and c.eps_high == 0.28

    def test_validation(self):
        with pytest.raises(ValueError):
            ClipRange(eps_low=0.0)
        with pytest.raises(ValueError):
            ClipRange(eps_low=1.0)
        with pytest.raises(ValueError):
            ClipRange(eps_high=0.0)


class TestPolicyEntropy:
    def test_uniform_16(self):
        assert policy_entropy(np.full(16, 1 / 16)) == pytest.approx(math.log(16), abs=1e-12)
        assert policy_entropy(np.full(16, 1 / 16)) == pytest.approx(2.7726, abs=1e-4)

    def test_one_hot(self):
        p = np.zeros(8)
        p[3] = 1.0
        assert policy_entropy(p) == 0.0

    def test_binary_symmetric(self):
        assert policy_entropy([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            policy_entropy([1.1, -0.1])

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            policy_entropy([0.5, 0.4])


class TestGroupRollout:
    def _traj(self, prompt=(18, 13, 1, 14), outcome=1):
        return Trajectory(
            seq_id=0, prompt=prompt, response=(15, 2, 16, 2, 17),
            logp_old=np.zeros(5), entropy=np.zeros(5), latents={}, outcome=outcome,
        )

    def test_shared_prompt_enforced(self):
        with pytest.raises(ValueError):
            GroupRollout(trajectories=(self._traj(), self._traj(prompt=(18, 13, 2, 14))))

    def test_minimum_size(self):
        with pytest.raises(ValueError):
            GroupRollout(trajectories=(self._traj(),))

    def test_outcomes_vector(self):
        g = GroupRollout(trajectories=(self._traj(outcome=1), self._traj(outcome=0)))
        assert np.array_equal(g.outcomes, [1.0, 0.0])
