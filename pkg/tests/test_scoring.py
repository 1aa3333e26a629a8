"""Tests for the fair CRPS and energy score.

Copyright (c) Bryn Gwalad 2025
"""

# Ensure the project root is on sys.path so tests can be executed directly from
# the `tests/` directory (e.g. `python test_scoring.py`).
import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import unittest

import numpy as np

from pegnn import grad_core as gc
from pegnn.scoring import (
    EnsemblePrediction,
    crps_joint,
    crps_multi,
    crps_multi_tape,
    energy_score_l1,
    fair_crps_scalar,
    gaussian_crps_analytic,
    pair_indices,
    spread_direct,
    spread_sorted,
)


class ScalarCrpsTest(unittest.TestCase):
    def test_two_samples_straddling_the_observation(self):
        score = fair_crps_scalar(np.array([0.0, 2.0]), 1.0)
        self.assertAlmostEqual(score.reliability_term, 1.0)
        self.assertAlmostEqual(score.spread_term, 1.0)
        self.assertAlmostEqual(score.value, 0.0)

    def test_collapsed_ensemble_is_absolute_error(self):
        score = fair_crps_scalar(np.array([3.0, 3.0, 3.0]), 1.0)
        self.assertAlmostEqual(score.value, 2.0)
        self.assertEqual(score.spread_term, 0.0)

    def test_single_member_has_no_spread(self):
        score = fair_crps_scalar(np.array([0.5]), -1.0)
        self.assertEqual(score.value, 1.5)
        self.assertEqual(score.spread_term, 0.0)

    def test_hand_computed_three_members(self):
        # reliability (1+0+2)/3 = 1, pairs |0-1|+|0-3|+|1-3| = 6 -> 6 / (3*2) = 1
        score = fair_crps_scalar(np.array([0.0, 1.0, 3.0]), 1.0)
        self.assertAlmostEqual(score.reliability_term, 1.0)
        self.assertAlmostEqual(score.spread_term, 1.0)
        self.assertAlmostEqual(score.value, 0.0)

    def test_empty_rejected(self):
        with self.assertRaises(ValueError):
            fair_crps_scalar(np.array([]), 0.0)


class SpreadTest(unittest.TestCase):
    def test_sorted_form_matches_pairwise(self):
        rng = np.random.default_rng(0)
        for k in (2, 3, 7, 20, 64):
            samples = rng.normal(size=(k, 11))
            np.testing.assert_allclose(spread_sorted(samples), spread_direct(samples), rtol=1e-12, atol=1e-14)

    def test_ties_handled(self):
        samples = np.array([[1.0], [1.0], [2.0], [2.0]])
        np.testing.assert_allclose(spread_sorted(samples), spread_direct(samples))

    def test_bad_shapes_rejected(self):
        with self.assertRaises(ValueError):
            spread_sorted(np.zeros((2, 3, 4)))


class MultivariateTest(unittest.TestCase):
    def test_entrywise_mean_equals_energy_score_over_d(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            k, d = rng.integers(2, 9), rng.integers(1, 7)
            samples = rng.normal(size=(k, d))
            y = rng.normal(size=d)
            self.assertAlmostEqual(crps_multi(samples, y).value, energy_score_l1(samples, y) / d, delta=1e-12)

    def test_positions_wrapper(self):
        rng = np.random.default_rng(2)
        positions = rng.normal(size=(4, 5, 3))
        pred = EnsemblePrediction.from_positions(positions)
        self.assertEqual((pred.k, pred.d, pred.layout), (4, 15, (5, 3)))
        np.testing.assert_allclose(pred.mean(), positions.mean(axis=0).reshape(-1))
        np.testing.assert_allclose(pred.variance(), positions.var(axis=0, ddof=1).reshape(-1))
        self.assertAlmostEqual(
            crps_multi(pred, positions[0]).value,
            crps_multi(positions.reshape(4, -1), positions[0].reshape(-1)).value,
        )

    def test_single_member_variance_is_zero(self):
        pred = EnsemblePrediction(np.array([[1.0, 2.0]]))
        np.testing.assert_array_equal(pred.variance(), [0.0, 0.0])

    def test_energy_score_needs_two_members(self):
        with self.assertRaises(ValueError):
            energy_score_l1(np.ones((1, 3)), np.zeros(3))

    def test_target_length_checked(self):
        with self.assertRaises(ValueError):
            crps_multi(np.ones((3, 4)), np.zeros(5))


class UnbiasednessTest(unittest.TestCase):
    def test_expected_fair_score_matches_analytic_value(self):
        rng = np.random.default_rng(5)
        y = 0.7
        expected = gaussian_crps_analytic(0.0, 1.0, y)
        m = 100000
        for k in (2, 5, 10):
            samples = rng.normal(size=(m, k))
            reliability = np.abs(samples - y).mean(axis=1)
            spread = spread_sorted(samples.T)
            scores = reliability - spread
            se = scores.std(ddof=1) / np.sqrt(m)
            self.assertLess(abs(scores.mean() - expected), 3 * se + 1e-12, msg=f"K={k}")

    def test_analytic_value_at_the_mean(self):
        self.assertAlmostEqual(gaussian_crps_analytic(0.0, 1.0, 0.0), (np.sqrt(2) - 1) / np.sqrt(np.pi), places=12)
        self.assertAlmostEqual(gaussian_crps_analytic(0.0, 1.0, 0.0), 0.233695, places=6)

    def test_analytic_scales_and_degenerates(self):
        self.assertAlmostEqual(gaussian_crps_analytic(1.0, 2.0, 1.6), 2 * gaussian_crps_analytic(0.0, 1.0, 0.3))
        self.assertEqual(gaussian_crps_analytic(1.0, 0.0, -2.0), 3.0)
        with self.assertRaises(ValueError):
            gaussian_crps_analytic(0.0, -1.0, 0.0)


class PropertyTest(unittest.TestCase):
    def test_shift_invariance_and_scaling(self):
        rng = np.random.default_rng(6)
        samples, y = rng.normal(size=(6, 4)), rng.normal(size=4)
        base = crps_multi(samples, y).value
        self.assertAlmostEqual(crps_multi(samples + 3.0, y + 3.0).value, base, places=12)
        self.assertAlmostEqual(crps_multi(2.5 * samples, 2.5 * y).value, 2.5 * base, places=12)

    def test_sample_order_irrelevant(self):
        rng = np.random.default_rng(7)
        samples, y = rng.normal(size=(8, 3)), rng.normal(size=3)
        self.assertAlmostEqual(crps_multi(samples[::-1], y).value, crps_multi(samples, y).value, places=13)

    def test_true_distribution_beats_shifted_and_narrow(self):
        rng = np.random.default_rng(8)
        ys = rng.normal(size=4000)
        eps = rng.normal(size=(4000, 10))

        def mean_score(mu, sigma):
            return np.mean([fair_crps_scalar(mu + sigma * e, y).value for e, y in zip(eps, ys)])

        truth = mean_score(0.0, 1.0)
        self.assertLess(truth, mean_score(0.5, 1.0))
        self.assertLess(truth, mean_score(0.0, 0.3))


class JointTest(unittest.TestCase):
    def test_energy_is_scored_per_atom(self):
        energies = np.array([10.0, 14.0])
        forces = np.zeros((2, 6))
        value = crps_joint(energies, forces, 12.0, np.zeros(6), n_atoms=2)
        self.assertAlmostEqual(value, fair_crps_scalar(energies / 2, 6.0).value)

    def test_rejects_bad_atom_count_and_mismatched_k(self):
        with self.assertRaises(ValueError):
            crps_joint(np.ones(2), np.ones((2, 3)), 0.0, np.zeros(3), n_atoms=0)
        with self.assertRaises(ValueError):
            crps_joint(np.ones(3), np.ones((2, 3)), 0.0, np.zeros(3), n_atoms=1)


class TapeLossTest(unittest.TestCase):
    def test_tape_loss_matches_numpy_score(self):
        rng = np.random.default_rng(9)
        s, k, d = 3, 4, 6
        samples = rng.normal(size=(s * k, d))
        targets = rng.normal(size=(s, d))
        (loss, rel, spr), _ = gc.forward(
            lambda tape, P, x: crps_multi_tape(x, targets, k), gc.ParamVector([]), inputs=(samples,), track_inputs=True
        )
        scores = [crps_multi(samples[i * k:(i + 1) * k], targets[i]) for i in range(s)]
        self.assertAlmostEqual(float(loss), np.mean([v.value for v in scores]), places=12)
        self.assertAlmostEqual(float(rel), np.mean([v.reliability_term for v in scores]), places=12)
        self.assertAlmostEqual(float(spr), np.mean([v.spread_term for v in scores]), places=12)

    def test_pair_indices_stay_in_blocks(self):
        a, b = pair_indices(3, 4)
        self.assertEqual(a.size, 3 * 4 * 3)
        self.assertFalse(np.any(a == b))
        np.testing.assert_array_equal(a // 4, b // 4)

    def test_mismatched_targets_rejected(self):
        with self.assertRaises(ValueError):
            crps_multi_tape(np.zeros((6, 2)), np.zeros((2, 2)), 4)


if __name__ == "__main__":
    unittest.main()
