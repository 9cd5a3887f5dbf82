"""Verification report machinery, including mutation testing."""

import math

import pytest

from bmrs.criteria import delta_f_lognormal, delta_f_loguniform
from bmrs.distributions import kl_q_p
from bmrs.verify import PROFILES, run_verification, verify_bmrs_n, verify_kl


class TestReport:
    def test_quick_profile_all_pass_with_counts(self):
        report = run_verification(profile="quick", seed=0)
        assert report["passed"]
        for suite in report["suites"]:
            assert suite["n_failed"] == 0
            assert suite["n_checks"] > 0
            assert suite["failures"] == []

    def test_unknown_profile_rejected(self):
        with pytest.raises(ValueError):
            run_verification(profile="paranoid")


class TestMutation:
    def test_sign_flip_in_lognormal_score_is_caught(self):
        def broken(q, prior):
            s2q = q.sigma * q.sigma
            s2_sum = s2q + prior.sigma2_tilde_p
            diff = q.mu - prior.mu_tilde_p
            correct = delta_f_lognormal(q, prior)
            # flip the sign of the quadratic term relative to the rest
            return correct + diff * diff / s2_sum

        result = verify_bmrs_n(PROFILES["quick"], seed=0, delta_f_fn=broken)
        assert not result.passed
        assert result.n_failed > 0

    def test_wrong_width_in_loguniform_score_is_caught(self):
        def broken(q, prior):
            return delta_f_loguniform(q, prior) + math.log(2.0)

        report = run_verification(profile="quick", delta_f_loguniform_fn=broken)
        assert not report["passed"]
        failing = {s["suite"] for s in report["suites"] if not s["passed"]}
        assert failing == {"bmrs_u_closed_form"}

    def test_scaled_kl_is_caught(self):
        def broken(q, p):
            return 1.01 * kl_q_p(q, p)

        result = verify_kl(PROFILES["quick"], kl_fn=broken)
        assert not result.passed

    def test_correct_functions_pass_each_suite(self):
        assert verify_bmrs_n(PROFILES["quick"], seed=1).passed
        assert verify_kl(PROFILES["quick"], seed=2).passed
