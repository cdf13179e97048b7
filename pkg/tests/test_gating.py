"""Gating tests: relaxed Bernoulli sampling, gradient rerouting, budget solve."""

import numpy as np
import pytest
import scipy.optimize
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import finite_difference, rel_err, tape_grads

from s3pet import autodiff as ad
from s3pet import gating
from s3pet.autodiff import Tape, Tensor
from s3pet.errors import ConfigError, DimensionError, NumericError
from s3pet.gating import (
    Budget,
    GateState,
    expected_param_count,
    global_normalize,
    l0_penalty,
    sample_binary_concrete,
    shifted_sigmoid,
    solve_zeta,
)


class TestBinaryConcrete:
    def test_symmetric_point(self):
        assert sample_binary_concrete(0.5, 0.5, 1.0) == pytest.approx(0.5, abs=1e-12)

    def test_empirical_threshold_frequency_tracks_p(self):
        rng = np.random.default_rng(0)
        n = 100_000
        for p in (0.1, 0.5, 0.9):
            u = gating.draw_uniform(rng, n)
            z = sample_binary_concrete(np.full(n, p), u, beta=1.0)
            assert abs(np.mean(z > 0.5) - p) < 0.01

    def test_low_temperature_concentrates_at_endpoints(self):
        # Monte-Carlo oracle fixed the 98% threshold for beta=0.01, p=0.3.
        rng = np.random.default_rng(1)
        u = gating.draw_uniform(rng, 100_000)
        z = sample_binary_concrete(np.full(u.shape, 0.3), u, beta=0.01)
        outside = np.mean((z <= 0.05) | (z >= 0.95))
        assert outside >= 0.98

    def test_chi_square_calibration_of_thresholded_samples(self):
        rng = np.random.default_rng(2)
        n = 100_000
        for p in (0.25, 0.6):
            u = gating.draw_uniform(rng, n)
            z = sample_binary_concrete(np.full(n, p), u, beta=1.0)
            ones = int(np.sum(z > 0.5))
            chi2 = (ones - n * p) ** 2 / (n * p) + (n - ones - n * (1 - p)) ** 2 / (n * (1 - p))
            assert chi2 < scipy.stats.chi2.isf(0.001, df=1)

    def test_gradient_in_p_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        p = Tensor(rng.uniform(0.1, 0.9, size=6), requires_grad=True)
        u = gating.draw_uniform(rng, 6)
        w = rng.standard_normal(6)
        (g,) = tape_grads(lambda: (sample_binary_concrete(p, u, 0.7) * Tensor(w)).sum(), [p])

        def ref(pv):
            return float(np.sum(sample_binary_concrete(pv, u, 0.7) * w))

        (fd,) = finite_difference(ref, [p.data.copy()])
        assert rel_err(g, fd) < 1e-4

    def test_rejects_degenerate_uniform_draw(self):
        with pytest.raises(NumericError):
            sample_binary_concrete(0.5, 0.0, 1.0)
        with pytest.raises(NumericError):
            sample_binary_concrete(0.5, 1.0, 1.0)

    @given(
        st.floats(1e-6, 1 - 1e-6),
        st.floats(1e-9, 1 - 1e-9),
        st.floats(0.01, 10.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_samples_stay_strictly_inside_unit_interval(self, p, u, beta):
        z = sample_binary_concrete(p, u, beta)
        assert 0.0 < z < 1.0


class TestShiftedSigmoid:
    def test_alpha_equal_to_shift_gives_half(self):
        out = shifted_sigmoid(np.array([2.5]), zeta=2.5, tau=1.0)
        assert out[0] == pytest.approx(0.5, abs=1e-15)

    def test_huge_shift_drives_probabilities_to_zero(self):
        out = shifted_sigmoid(np.array([-3.0, 0.0, 3.0]), zeta=1e6, tau=1.0)
        assert np.all(out < 1e-12)

    def test_direct_evaluation_oracle(self):
        out = shifted_sigmoid(np.array([1.0, 0.0, -1.0]), zeta=0.0, tau=1.0)
        np.testing.assert_allclose(out, [0.7311, 0.5, 0.2689], atol=1e-4)

    def test_strictly_decreasing_in_shift(self):
        alpha = np.array([0.3, -0.7, 1.2])
        a = shifted_sigmoid(alpha, zeta=0.1, tau=1.0)
        b = shifted_sigmoid(alpha, zeta=0.2, tau=1.0)
        assert np.all(b < a)

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(ConfigError):
            shifted_sigmoid(np.zeros(2), 0.0, 0.0)


class TestGlobalNormalize:
    def test_forward_values_exactly_preserved(self):
        rng = np.random.default_rng(4)
        p_tilde = Tensor(rng.uniform(0.05, 0.95, size=9), requires_grad=True)
        with Tape() as tape:
            p = global_normalize(p_tilde)
        np.testing.assert_array_equal(p.data, p_tilde.data)
        tape.release()

    def test_equal_upstream_gradients_cancel(self):
        # A loss with identical sensitivity to every probability sends no
        # gradient to the structural parameters.
        rng = np.random.default_rng(5)
        alpha = Tensor(rng.standard_normal(7), requires_grad=True)
        (g,) = tape_grads(
            lambda: (global_normalize(shifted_sigmoid(alpha, 0.3, 1.0)) * 4.2).sum(), [alpha]
        )
        assert np.max(np.abs(g)) <= 1e-10

    def test_gradient_matches_closed_form_correction(self):
        # d loss / d alpha_i = sig'((a_i - zeta)/tau)/tau *
        #   (w_i - sum_j w_j p_j / sum_k p_k)  for loss = sum_j w_j p_j.
        rng = np.random.default_rng(6)
        n = 11
        alpha_v = rng.standard_normal(n)
        w = rng.standard_normal(n)
        zeta, tau = 0.4, 0.8
        alpha = Tensor(alpha_v, requires_grad=True)
        (g,) = tape_grads(
            lambda: (global_normalize(shifted_sigmoid(alpha, zeta, tau)) * Tensor(w)).sum(), [alpha]
        )
        s = 1.0 / (1.0 + np.exp(-(alpha_v - zeta) / tau))
        dsig = s * (1.0 - s) / tau
        closed = dsig * (w - np.sum(w * s) / np.sum(s))
        assert rel_err(g, closed) < 1e-8

    def test_local_parameterization_keeps_gradient(self):
        # Without the renormalization the same equal-sensitivity loss does
        # push gradient into alpha.
        rng = np.random.default_rng(7)
        alpha = Tensor(rng.standard_normal(7), requires_grad=True)
        (g,) = tape_grads(lambda: (shifted_sigmoid(alpha, 0.3, 1.0) * 4.2).sum(), [alpha])
        assert np.max(np.abs(g)) > 1e-3


class TestExpectedParamCount:
    def test_all_zero_probabilities(self):
        assert expected_param_count(np.zeros(4), np.array([5, 6, 7, 8])) == 0.0

    def test_all_one_probabilities(self):
        counts = np.array([5, 6, 7, 8])
        assert expected_param_count(np.ones(4), counts) == counts.sum()

    def test_hand_computed_mixture(self):
        assert expected_param_count(np.array([0.5, 0.25]), np.array([100, 200])) == 100.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            expected_param_count(np.zeros(3), np.zeros(4))


class TestSolveZeta:
    def test_single_site_closed_form(self):
        z = solve_zeta(np.array([0.0]), tau=1.0, counts=np.array([100]), budget=50)
        assert abs(z - 0.0) < 1e-9

    def test_loose_budget_returns_lower_bracket(self):
        alpha = np.array([0.5, -0.5])
        counts = np.array([10, 10])
        z = solve_zeta(alpha, 1.0, counts, budget=1000)
        p = shifted_sigmoid(alpha, z, 1.0)
        assert np.all(p > 1.0 - 1e-12)
        assert expected_param_count(p, counts) < 1000

    def test_three_site_instance_matches_root_finding_oracle(self):
        alpha = np.array([1.0, 0.0, -1.0])
        counts = np.array([10, 10, 10])
        z = solve_zeta(alpha, 1.0, counts, budget=12)

        def gap(zeta):
            return expected_param_count(shifted_sigmoid(alpha, zeta, 1.0), counts) - 12.0

        oracle = scipy.optimize.brentq(gap, -50.0, 50.0, xtol=1e-12)
        assert abs(z - oracle) <= 1e-6

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_randomized_instances_match_oracle_and_stay_feasible(self, seed):
        rng = np.random.default_rng(seed)
        n = 30
        alpha = rng.standard_normal(n) * 2
        counts = rng.integers(8, 120, size=n)
        budget = int(0.3 * counts.sum())
        z = solve_zeta(alpha, 1.0, counts, budget)
        achieved = expected_param_count(shifted_sigmoid(alpha, z, 1.0), counts)
        assert achieved <= budget + 1e-9
        assert achieved > budget - max(1.0, 1e-6 * budget)

        def gap(zeta):
            return expected_param_count(shifted_sigmoid(alpha, zeta, 1.0), counts) - budget

        oracle = scipy.optimize.brentq(gap, alpha.min() - 60, alpha.max() + 60, xtol=1e-12)
        assert abs(z - oracle) <= 1e-6

    def test_expected_count_monotone_decreasing_in_shift(self):
        rng = np.random.default_rng(8)
        alpha = rng.standard_normal(20)
        counts = rng.integers(1, 50, size=20)
        zetas = np.sort(rng.uniform(-5, 5, size=100))
        values = [expected_param_count(shifted_sigmoid(alpha, z, 1.0), counts) for z in zetas]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_nonfinite_alpha_rejected(self):
        with pytest.raises(NumericError):
            solve_zeta(np.array([np.nan]), 1.0, np.array([1]), 1)


class TestL0Penalty:
    def test_zero_weight_gives_zero(self):
        p = Tensor(np.array([0.5, 0.5]))
        assert l0_penalty(p, np.array([5, 5]), 0.0).item() == 0.0

    def test_hand_computed_value(self):
        p = Tensor(np.array([1.0, 1.0]))
        assert l0_penalty(p, np.array([5, 5]), 0.1).item() == pytest.approx(1.0, abs=1e-12)

    def test_gradient_through_alpha_matches_finite_difference(self):
        rng = np.random.default_rng(9)
        alpha = Tensor(rng.standard_normal(5), requires_grad=True)
        counts = np.array([3, 9, 1, 7, 5])
        (g,) = tape_grads(lambda: l0_penalty(shifted_sigmoid(alpha, 0.0, 1.0), counts, 0.05), [alpha])

        def ref(a):
            return 0.05 * float(np.sum(shifted_sigmoid(a, 0.0, 1.0) * counts))

        (fd,) = finite_difference(ref, [alpha.data.copy()])
        assert rel_err(g, fd) < 1e-4


class TestGateState:
    def test_refresh_keeps_expected_count_within_budget(self):
        rng = np.random.default_rng(10)
        counts = rng.integers(8, 100, size=25)
        gs = GateState(Tensor(rng.standard_normal(25), requires_grad=True), tau=1.0, beta=1.0)
        gs.refresh(counts, budget=300)
        assert expected_param_count(gs.p, counts) <= 300 + 1e-9

    def test_build_reproduces_cached_sample_values(self):
        rng = np.random.default_rng(11)
        counts = np.full(12, 10)
        gs = GateState(Tensor(rng.standard_normal(12), requires_grad=True), tau=1.0, beta=1.0)
        gs.refresh(counts, budget=60)
        gs.sample(rng)
        with Tape() as tape:
            z, p = gs.build()
        np.testing.assert_array_equal(z.data, gs.z_hat)
        np.testing.assert_array_equal(p.data, gs.p)
        tape.release()

    def test_rebuilding_chain_shares_identical_sample(self):
        rng = np.random.default_rng(12)
        counts = np.full(6, 4)
        gs = GateState(Tensor(rng.standard_normal(6), requires_grad=True), tau=1.0, beta=1.0)
        gs.refresh(counts, budget=12)
        gs.sample(rng)
        builds = []
        for _ in range(4):
            with Tape() as tape:
                z, _ = gs.build()
            builds.append(z.data)
            tape.release()
        for z in builds[1:]:
            np.testing.assert_array_equal(z, builds[0])

    def test_l0_mode_skips_shift_solve(self):
        rng = np.random.default_rng(13)
        gs = GateState(Tensor(rng.standard_normal(6), requires_grad=True), 1.0, 1.0, mode=gating.L0_MODE)
        gs.refresh(np.full(6, 4), budget=None)
        assert gs.zeta == 0.0


class TestBudget:
    def test_parse_absolute_count(self):
        assert Budget.parse("486").resolve(10_000) == 486

    def test_parse_ratio_suffixes(self):
        assert Budget.parse("100bp").resolve(100_000) == 1000
        assert Budget.parse("5.6‱").resolve(1_000_000) == 560

    def test_ratio_arithmetic_convention(self):
        # 1000 params on a 100k backbone is 100 in per-ten-thousand units.
        b = Budget(ratio_pmyriad=100.0)
        assert b.resolve(100_000) == 1000

    def test_garbage_rejected(self):
        with pytest.raises(ConfigError):
            Budget.parse("many")

    def test_exactly_one_form_required(self):
        with pytest.raises(ConfigError):
            Budget(max_params=5, ratio_pmyriad=1.0)
        with pytest.raises(ConfigError):
            Budget()
