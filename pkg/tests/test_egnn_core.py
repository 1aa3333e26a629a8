"""Tests for the velocity-aware EGNN with noise input.

Copyright (c) Bryn Gwalad 2025
"""

# Ensure the project root is on sys.path so tests can be executed directly from
# the `tests/` directory (e.g. `python test_egnn_core.py`).
import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import unittest

import numpy as np

from pegnn.egnn_core import (
    egnn_forward,
    empty_params,
    init_params,
    make_batch,
    param_count,
    param_shapes,
    predict_ensemble,
    predict_point,
)
from pegnn.errors import ConfigError
from pegnn.models import EgnnConfig
from pegnn.nbody_sim import ParticleState
from pegnn.noise_injection import batch_eps


def random_state(rng, n=5):
    return ParticleState(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.choice([-1.0, 1.0], size=n))


def random_orthogonal(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if rng.random() < 0.5:
        q[:, 0] = -q[:, 0]
    return q


def randomize_noise(params, rng, scale=0.3):
    for name in params.names:
        if name.endswith(".noise") or name == "noise.W_z":
            params.view(name)[...] = rng.normal(scale=scale, size=params.spec(name).shape)
    return params


class ParamCountTest(unittest.TestCase):
    def test_default_widths(self):
        count = param_count(EgnnConfig())
        self.assertEqual(count.backbone, 134024)
        self.assertEqual(count.noise_overhead, 17408)
        self.assertAlmostEqual(count.ratio, 1.13, delta=0.005)

    def test_deterministic_backbone_has_no_overhead(self):
        count = param_count(EgnnConfig(noise_dim=0))
        self.assertEqual(count.noise_overhead, 0)
        self.assertEqual(count.ratio, 1.0)

    def test_layout_matches_count(self):
        for config in (EgnnConfig(), EgnnConfig(noise_dim=0), EgnnConfig(n_layers=2, hidden_width=7, noise_dim=3)):
            count = param_count(config)
            self.assertEqual(empty_params(config).size, count.backbone + count.noise_overhead)

    def test_canonical_ordering(self):
        names = [name for name, _ in param_shapes(EgnnConfig(n_layers=2, hidden_width=4, noise_dim=2))]
        self.assertEqual(names[:2], ["embedding.weight", "embedding.bias"])
        layer0 = [n for n in names if n.startswith("layers.0.")]
        blocks = [n.split(".")[2] for n in layer0]
        self.assertEqual(blocks[:16], ["phi_e"] * 4 + ["phi_h"] * 4 + ["phi_x"] * 4 + ["phi_v"] * 4)
        self.assertEqual(layer0[16:], ["layers.0.phi_e.noise", "layers.0.phi_h.noise"])
        self.assertEqual(names[-1], "noise.W_z")
        shapes = dict(param_shapes(EgnnConfig(n_layers=1, hidden_width=4, noise_dim=2)))
        self.assertEqual(shapes["layers.0.phi_e.0.weight"], (4, 11))
        self.assertEqual(shapes["layers.0.phi_h.0.weight"], (4, 8))
        self.assertEqual(shapes["layers.0.phi_x.1.weight"], (1, 4))
        self.assertEqual(shapes["layers.0.phi_e.noise"], (4, 2))


class InitTest(unittest.TestCase):
    def test_noise_projections_start_at_zero(self):
        config = EgnnConfig(n_layers=2, hidden_width=8, noise_dim=4)
        params = init_params(config, seed=0)
        for name in params.names:
            if name.endswith(".noise"):
                np.testing.assert_array_equal(params.view(name), 0.0)
        self.assertGreater(np.abs(params.view("noise.W_z")).max(), 0.0)
        bound = 1.0 / np.sqrt(2 * 8 + 3)
        self.assertLessEqual(np.abs(params.view("layers.0.phi_e.0.weight")).max(), bound)

    def test_noise_generator_init_options(self):
        zero = init_params(EgnnConfig(n_layers=1, hidden_width=4, noise_dim=3, noise_generator_init="zero"), 0)
        np.testing.assert_array_equal(zero.view("noise.W_z"), 0.0)
        eye = init_params(EgnnConfig(n_layers=1, hidden_width=4, noise_dim=3, noise_generator_init="identity"), 0)
        np.testing.assert_array_equal(eye.view("noise.W_z"), np.eye(3))

    def test_init_is_seeded(self):
        config = EgnnConfig(n_layers=1, hidden_width=4, noise_dim=2)
        np.testing.assert_array_equal(init_params(config, 3).values, init_params(config, 3).values)
        self.assertFalse(np.array_equal(init_params(config, 3).values, init_params(config, 4).values))


class BatchTest(unittest.TestCase):
    def test_fully_connected_without_self_edges(self):
        rng = np.random.default_rng(0)
        batch = make_batch([random_state(rng, 4), random_state(rng, 4)], repeats=3)
        self.assertEqual(batch.n_graphs, 6)
        self.assertEqual(batch.src.size, 6 * 4 * 3)
        self.assertFalse(np.any(batch.src == batch.dst))
        np.testing.assert_array_equal(batch.node_graph[batch.src], batch.edge_graph)
        np.testing.assert_array_equal(batch.node_graph[batch.dst], batch.edge_graph)
        np.testing.assert_array_equal(batch.positions[4:8], batch.positions[:4])

    def test_mixed_particle_counts_rejected(self):
        rng = np.random.default_rng(0)
        with self.assertRaises(ValueError):
            make_batch([random_state(rng, 3), random_state(rng, 4)])


class ForwardTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.config = EgnnConfig(n_layers=2, hidden_width=16, noise_dim=4)
        cls.params = randomize_noise(init_params(cls.config, seed=1), np.random.default_rng(2))

    def test_zero_noise_projection_ignores_z(self):
        rng = np.random.default_rng(0)
        params = init_params(self.config, seed=1)
        params.view("noise.W_z")[...] = 0.0
        state = random_state(rng)
        base = egnn_forward(params, self.config, state)
        for _ in range(3):
            np.testing.assert_array_equal(egnn_forward(params, self.config, state, rng.normal(size=4)), base)

    def test_noise_changes_the_output(self):
        rng = np.random.default_rng(0)
        state = random_state(rng)
        a = egnn_forward(self.params, self.config, state, rng.normal(size=4))
        b = egnn_forward(self.params, self.config, state, rng.normal(size=4))
        self.assertGreater(np.abs(a - b).max(), 1e-6)

    def test_euclidean_equivariance_for_fixed_z(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            state = random_state(rng)
            z = rng.normal(size=4)
            rot = random_orthogonal(rng)
            shift = rng.normal(scale=2.0, size=3)
            out = egnn_forward(self.params, self.config, state, z)
            moved = ParticleState(state.positions @ rot.T + shift, state.velocities @ rot.T, state.charges)
            expected = out @ rot.T + shift
            got = egnn_forward(self.params, self.config, moved, z)
            self.assertLess(np.abs(got - expected).max(), 1e-8 * max(1.0, np.abs(expected).max()))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(8)
        state = random_state(rng, 6)
        z = rng.normal(size=4)
        perm = rng.permutation(6)
        shuffled = ParticleState(state.positions[perm], state.velocities[perm], state.charges[perm])
        np.testing.assert_allclose(
            egnn_forward(self.params, self.config, shuffled, z),
            egnn_forward(self.params, self.config, state, z)[perm],
            rtol=1e-10,
            atol=1e-12,
        )

    def test_without_z_noise_parameters_are_unreached(self):
        rng = np.random.default_rng(9)
        state = random_state(rng)
        base = egnn_forward(self.params, self.config, state)
        other = randomize_noise(self.params.copy(), rng, scale=5.0)
        np.testing.assert_array_equal(egnn_forward(other, self.config, state), base)

    def test_z_rejected_by_deterministic_network(self):
        config = EgnnConfig(n_layers=1, hidden_width=4, noise_dim=0)
        params = init_params(config, 0)
        state = random_state(np.random.default_rng(0))
        egnn_forward(params, config, state)
        with self.assertRaises(ConfigError):
            egnn_forward(params, config, state, np.zeros(3))

    def test_z_length_checked(self):
        state = random_state(np.random.default_rng(0))
        with self.assertRaises(ConfigError):
            egnn_forward(self.params, self.config, state, np.zeros(5))

    def test_point_prediction_uses_zero_noise(self):
        state = random_state(np.random.default_rng(3))
        np.testing.assert_array_equal(
            predict_point(self.params, self.config, state),
            egnn_forward(self.params, self.config, state, np.zeros(4)),
        )


class EnsembleTest(unittest.TestCase):
    def test_zero_boot_ensemble_collapses(self):
        config = EgnnConfig(n_layers=2, hidden_width=16, noise_dim=4)
        params = init_params(config, seed=5)
        rng = np.random.default_rng(0)
        states = [random_state(rng) for _ in range(3)]
        eps = batch_eps(4, 3, 10, (0, 1))
        out = predict_ensemble(params, config, states, eps, 10)
        self.assertEqual(out.shape, (3, 10, 5, 3))
        for s, state in enumerate(states):
            for k in range(1, 10):
                np.testing.assert_array_equal(out[s, k], out[s, 0])
            np.testing.assert_allclose(out[s, 0], egnn_forward(params, config, state), rtol=1e-12, atol=1e-12)

        backbone_config = config.model_copy(update={"noise_dim": 0})
        backbone = empty_params(backbone_config)
        for name in backbone.names:
            backbone.view(name)[...] = params.view(name)
        np.testing.assert_array_equal(out, predict_ensemble(backbone, backbone_config, states, None, 10))

    def test_batched_members_match_single_passes(self):
        config = EgnnConfig(n_layers=2, hidden_width=8, noise_dim=3)
        rng = np.random.default_rng(1)
        params = randomize_noise(init_params(config, seed=5), rng)
        states = [random_state(rng) for _ in range(2)]
        eps = batch_eps(3, 2, 4, (0, 2))
        out = predict_ensemble(params, config, states, eps, 4)
        w_z = params.view("noise.W_z")
        for s in range(2):
            for k in range(4):
                z = w_z @ eps[s * 4 + k]
                np.testing.assert_allclose(out[s, k], egnn_forward(params, config, states[s], z), rtol=1e-10, atol=1e-12)
        self.assertGreater(np.abs(out[0, 0] - out[0, 1]).max(), 1e-8)


if __name__ == "__main__":
    unittest.main()
