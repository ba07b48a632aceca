import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evpolicy.rewards import (FIT_TOLERANCE_KW, RewardConfig,
                              behavioral_metrics, departure_penalty,
                              fit_score, step_profit)
from evpolicy.simulation import ConnectionSession
from tests.conftest import make_obs


class TestStepProfit:
    def test_import_is_cost(self):
        assert step_profit(1.0, 0.0, 0.30, 0.30) == pytest.approx(-0.30)

    def test_export_is_revenue(self):
        assert step_profit(0.0, 2.0, 0.30, 0.40) == pytest.approx(0.80)

    def test_idle_is_zero(self):
        assert step_profit(0.0, 0.0, 0.30, 0.40) == 0.0


class TestDeparturePenalty:
    def setup_method(self):
        self.cfg = RewardConfig()
        self.session = ConnectionSession(0, 10, 0.5, target_soc=0.8)

    def test_no_deficit_no_penalty(self):
        assert departure_penalty(self.session, 0.9, self.cfg) == 0.0

    def test_exact_target_boundary(self):
        assert departure_penalty(self.session, 0.8, self.cfg) == 0.0

    def test_deficit_formula(self):
        # Independently evaluated: 10*0.2 + (e^0.8 - 1) = 3.225540928492468
        penalty = departure_penalty(self.session, 0.6, self.cfg)
        assert penalty == pytest.approx(-3.225540928492468, abs=1e-12)

    @given(st.floats(min_value=0.0, max_value=1.0),
           st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_departure_soc(self, a, b):
        lo, hi = sorted((a, b))
        assert (departure_penalty(self.session, lo, self.cfg)
                <= departure_penalty(self.session, hi, self.cfg) + 1e-15)


class _TablePolicy:
    """Maps observation id to a fixed output (test double)."""

    def __init__(self, fn):
        self.fn = fn

    def decide(self, obs):
        return self.fn(obs)


class TestFitScore:
    def test_identical_policy_fits_perfectly(self):
        examples = [(make_obs(step_index=i, soc=0.3 + 0.01 * i), 2.0)
                    for i in range(20)]
        report = fit_score(_TablePolicy(lambda o: 2.0), examples)
        assert report.fit_score == 1.0
        assert report.mismatches == []

    def test_tolerance_boundary_inclusive(self):
        examples = [(make_obs(), 4.0)]
        assert fit_score(_TablePolicy(lambda o: 4.4), examples).fit_score == 1.0
        assert fit_score(_TablePolicy(lambda o: 4.5), examples).fit_score == 1.0

    def test_just_past_tolerance_mismatches(self):
        examples = [(make_obs(), 4.0)]
        report = fit_score(_TablePolicy(lambda o: 4.0 + FIT_TOLERANCE_KW + 1e-6),
                           examples)
        assert report.fit_score == 0.0
        assert len(report.mismatches) == 1

    def test_order_invariance(self):
        rng = random.Random(5)
        examples = [(make_obs(step_index=i, soc=rng.random()), rng.uniform(-7, 7))
                    for i in range(50)]
        policy = _TablePolicy(lambda o: o.soc * 10 - 5)
        score_a = fit_score(policy, examples).fit_score
        shuffled = examples[:]
        rng.shuffle(shuffled)
        assert fit_score(policy, shuffled).fit_score == score_a

    def test_empty_examples_rejected(self):
        with pytest.raises(ValueError):
            fit_score(_TablePolicy(lambda o: 0.0), [])


class TestBehavioralMetrics:
    def test_tight_oscillation(self):
        m = behavioral_metrics([7.0, -7.0, 7.0])
        assert m.flicker_count == 2
        assert m.cycle_count == 2

    def test_zero_bridging(self):
        m = behavioral_metrics([7.0, 0.0, -7.0])
        assert m.flicker_count == 0
        assert m.cycle_count == 1

    def test_all_idle(self):
        m = behavioral_metrics([0.0] * 10)
        assert m.cycle_count == 0
        assert m.flicker_count == 0
        assert m.action_distribution["idle"]["fraction"] == 1.0

    def test_distribution_counts(self):
        m = behavioral_metrics([7.0] * 3 + [-1.0] * 2 + [0.0] * 5)
        dist = m.action_distribution
        assert dist["charge"]["count"] == 3
        assert dist["discharge"]["count"] == 2
        assert dist["idle"]["count"] == 5
        assert dist["charge"]["fraction"] == pytest.approx(0.3)
