import math

import numpy as np
import pytest

from latentshield import dubins, latent, nets
from latentshield.dubins import DubinsParams, PrivilegedState
from latentshield.latent import (Encoder, LatentSession, constraint_latent,
                                 constraint_projected, latent_margin,
                                 make_projector, margin_rows, project,
                                 train_projector)

P = DubinsParams()


@pytest.fixture(scope="module")
def enc():
    return Encoder(d_z=16, seed=3)


@pytest.fixture(scope="module")
def tiny_data():
    return dubins.generate_dataset(40, P, seed=55)


class TestEncoder:
    def test_deterministic(self, enc):
        s = PrivilegedState(0.3, -0.7, 1.2)
        assert np.array_equal(enc.encode(s), enc.encode(s))

    def test_same_seed_same_map(self):
        e1 = Encoder(d_z=16, seed=9)
        e2 = Encoder(d_z=16, seed=9)
        s = PrivilegedState(-1.0, 0.4, -2.0)
        assert np.array_equal(e1.encode(s), e2.encode(s))

    def test_outputs_strictly_inside_unit_box(self, enc):
        rng = np.random.default_rng(0)
        states = np.stack([rng.uniform(-1.5, 1.5, 2000), rng.uniform(-1.5, 1.5, 2000),
                           rng.uniform(-math.pi, math.pi, 2000)], axis=1)
        Z = enc.encode_batch(states)
        assert np.all(np.abs(Z) < 1.0)

    def test_injective_on_sampled_pairs(self, enc):
        rng = np.random.default_rng(1)
        n = 20_000
        s1 = np.stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-1.5, 1.5, n),
                       rng.uniform(-math.pi, math.pi, n)], axis=1)
        s2 = np.stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-1.5, 1.5, n),
                       rng.uniform(-math.pi, math.pi, n)], axis=1)
        feat_dist = np.linalg.norm(enc.features(s1) - enc.features(s2), axis=1)
        z_dist = np.linalg.norm(enc.encode_batch(s1).astype(np.float64)
                                - enc.encode_batch(s2).astype(np.float64), axis=1)
        mask = feat_dist > 1e-3
        assert np.all(z_dist[mask] > 0.0)

    def test_out_of_bounds_features_clamped(self, enc):
        z_edge = enc.encode_pose(1.5, 0.0, 0.0)
        z_out = enc.encode_pose(2.5, 0.0, 0.0)
        assert np.array_equal(z_edge, z_out)

    def test_min_latent_dim(self):
        with pytest.raises(ValueError):
            Encoder(d_z=3)


class TestSession:
    def test_step_is_encode_of_stepped_state(self, enc):
        s0 = PrivilegedState(0.2, 0.1, 0.5)
        sess = LatentSession(enc, P, s0)
        z = sess.step(0.8)
        expect = enc.encode(dubins.step(s0, 0.8, P))
        assert np.array_equal(z, expect)

    def test_branch_isolation(self, enc):
        sess = LatentSession(enc, P, PrivilegedState(0, 0, 0))
        z_before = sess.current_latent()
        child = sess.branch()
        for _ in range(30):
            child.step(1.0)
        assert np.array_equal(sess.current_latent(), z_before)

    def test_branch_of_branch(self, enc):
        sess = LatentSession(enc, P, PrivilegedState(0.5, -0.5, 1.0))
        b1 = sess.branch()
        b2 = b1.branch()
        z1 = b1.step(0.3)
        z2 = b2.step(0.3)
        assert np.array_equal(z1, z2)

    def test_identical_streams_same_inputs(self, enc):
        a = LatentSession(enc, P, PrivilegedState(0.1, 0.2, 0.3))
        b = LatentSession(enc, P, PrivilegedState(0.1, 0.2, 0.3))
        for act in (0.5, -1.0, 0.0, 1.25):
            assert np.array_equal(a.step(act), b.step(act))

    def test_rejects_out_of_range_action(self, enc):
        sess = LatentSession(enc, P, PrivilegedState(0, 0, 0))
        with pytest.raises(ValueError):
            sess.step(1.3)

    def test_privileged_reads_counted(self, enc):
        sess = LatentSession(enc, P, PrivilegedState(0, 0, 0))
        assert sess.privileged_reads == 0
        sess.privileged_state()
        assert sess.privileged_reads == 1


class TestProjector:
    def test_output_dimension_32(self):
        proj = make_projector(16, seed=0)
        out = project(proj, np.zeros(16, dtype=np.float32))
        assert out.shape == (32,)

    def test_architecture_two_layers_both_layer_normalized(self):
        proj = make_projector(16, seed=0)
        assert len(proj.layers) == 2
        assert all(lay.has_ln for lay in proj.layers)
        assert proj.layers[0].activation == "silu"
        assert proj.layers[1].activation == "identity"

    def test_deterministic(self):
        proj = make_projector(16, seed=1)
        z = np.linspace(-0.5, 0.5, 16).astype(np.float32)
        assert np.array_equal(project(proj, z), project(proj, z))

    def test_zero_weights_constant_output(self):
        proj = make_projector(16, seed=2)
        for lay in proj.layers:
            lay.w[:] = 0.0
        z1 = project(proj, np.random.default_rng(0).normal(size=16).astype(np.float32))
        z2 = project(proj, np.random.default_rng(1).normal(size=16).astype(np.float32))
        assert np.array_equal(z1, z2)


class TestMargin:
    def test_self_margin_is_minus_one(self, enc):
        proj = make_projector(16, seed=4)
        z = enc.encode_pose(0.3, 0.3, 0.0)
        assert latent_margin(proj, z, z) == pytest.approx(-1.0, abs=1e-6)

    def test_symmetry(self, enc):
        proj = make_projector(16, seed=4)
        z1 = enc.encode_pose(0.3, 0.3, 0.0)
        z2 = enc.encode_pose(-0.5, 0.2, 1.0)
        assert latent_margin(proj, z1, z2) == pytest.approx(latent_margin(proj, z2, z1),
                                                            abs=1e-7)

    def test_range(self, enc):
        proj = make_projector(16, seed=4)
        rng = np.random.default_rng(2)
        for _ in range(50):
            z1 = enc.encode_pose(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5),
                                 rng.uniform(-math.pi, math.pi))
            z2 = enc.encode_pose(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5),
                                 rng.uniform(-math.pi, math.pi))
            assert -1.0 - 1e-9 <= latent_margin(proj, z1, z2) <= 1.0 + 1e-9

    def test_raw_variant_skips_projector(self, enc):
        z1 = enc.encode_pose(0.1, 0.0, 0.0)
        z2 = enc.encode_pose(0.4, -0.3, 0.9)
        raw = latent_margin(None, z1, z2, use_projector=False)
        assert raw == pytest.approx(-nets.cosine_similarity(z1, z2), abs=1e-9)
        with pytest.raises(ValueError):
            latent_margin(None, z1, z2, use_projector=True)

    def test_margin_rows_matches_scalar(self, enc):
        proj = make_projector(16, seed=4)
        rng = np.random.default_rng(3)
        states = np.stack([rng.uniform(-1.5, 1.5, 6), rng.uniform(-1.5, 1.5, 6),
                           rng.uniform(-math.pi, math.pi, 6)], axis=1)
        Z = enc.encode_batch(states)
        rows = margin_rows(proj, Z[:3], Z[3:])
        for i in range(3):
            assert rows[i] == pytest.approx(latent_margin(proj, Z[i], Z[3 + i]), abs=1e-6)


class TestConstraintEmbedding:
    def test_default_heading_zero(self, enc):
        assert np.array_equal(constraint_latent(enc, 0.5, -0.5),
                              enc.encode_pose(0.5, -0.5, 0.0))

    def test_heading_average_option(self, enc):
        proj = make_projector(16, seed=5)
        single = constraint_projected(proj, enc, 0.5, -0.5, average_headings=False)
        avg = constraint_projected(proj, enc, 0.5, -0.5, average_headings=True)
        assert single.shape == avg.shape == (32,)
        assert not np.array_equal(single, avg)


class TestTrainProjector:
    def test_zero_epochs_returns_initial_weights(self, enc, tiny_data):
        trained, rep = train_projector(tiny_data, enc, pair_count=500, epochs=0, seed=7)
        fresh = make_projector(enc.d_z, seed=8)  # seed + 1 inside train_projector
        assert nets.net_checksum(trained) == nets.net_checksum(fresh)
        assert rep.holdout_mse > 0.0

    def test_fixed_seed_identical_weights(self, enc, tiny_data):
        p1, _ = train_projector(tiny_data, enc, pair_count=2000, epochs=2, seed=11)
        p2, _ = train_projector(tiny_data, enc, pair_count=2000, epochs=2, seed=11)
        assert nets.net_checksum(p1) == nets.net_checksum(p2)

    def test_training_reduces_mse(self, enc, tiny_data):
        _, rep0 = train_projector(tiny_data, enc, pair_count=4000, epochs=0, seed=13)
        _, rep = train_projector(tiny_data, enc, pair_count=4000, epochs=8, seed=13)
        assert rep.holdout_mse < rep0.holdout_mse

    def test_empty_dataset_rejected(self, enc):
        with pytest.raises(ValueError):
            train_projector([], enc, pair_count=10, epochs=1, seed=0)
