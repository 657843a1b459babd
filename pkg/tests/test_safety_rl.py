import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentshield import dubins, latent, nets, safety_rl
from latentshield.dubins import DubinsParams
from latentshield.latent import Encoder, PROJECTED_DIM
from latentshield.safety_rl import (FilterNets, GammaSchedule, PrototypeSet,
                                    ReplayTransition, TrainConfig,
                                    build_filter_nets, critic_target,
                                    fallback_action, fit_prototypes,
                                    load_filter_nets, nearest_prototype,
                                    polyak_update, save_filter_nets,
                                    train_filter, value)

P = DubinsParams()
D_Z = 12


@pytest.fixture(scope="module")
def enc():
    return Encoder(d_z=D_Z, seed=21)


@pytest.fixture(scope="module")
def data():
    return dubins.generate_dataset(30, P, seed=500)


@pytest.fixture(scope="module")
def proj():
    return latent.make_projector(D_Z, seed=2)


def tiny_config(**kw) -> TrainConfig:
    base = dict(strategy="zz", total_steps=400, replay_capacity=2000, batch_size=32,
                warmup=100, hidden=(24, 24), max_rollout_steps=10, seed=1)
    base.update(kw)
    return TrainConfig(**base)


class TestCriticTarget:
    def test_gamma_zero(self):
        assert critic_target(0.37, 0.0, 5.0) == pytest.approx(0.37)

    def test_hand_value(self):
        # 0.1 * 0.5 + 0.9 * min(0.5, 0.2) = 0.23
        assert critic_target(0.5, 0.9, 0.2) == pytest.approx(0.23, abs=1e-12)

    @given(st.floats(-1, 1), st.floats(0, 0.9999), st.floats(-2, 2))
    @settings(max_examples=300, deadline=None)
    def test_never_exceeds_margin(self, l, gamma, q):
        assert critic_target(l, gamma, q) <= l + 1e-12

    @given(st.floats(-1, 1), st.floats(0, 0.999), st.floats(-2, 2), st.floats(0, 1))
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_q_next(self, l, gamma, q, dq):
        assert critic_target(l, gamma, q + dq) >= critic_target(l, gamma, q) - 1e-12

    @given(st.floats(-1, 0.9), st.floats(0, 0.999), st.floats(-2, 2), st.floats(0, 0.1))
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_margin(self, l, gamma, q, dl):
        assert critic_target(l + dl, gamma, q) >= critic_target(l, gamma, q) - 1e-12

    def test_gamma_validation(self):
        with pytest.raises(ValueError):
            critic_target(0.0, 1.0, 0.0)


class TestGammaSchedule:
    def test_endpoints(self):
        sch = GammaSchedule(0.85, 0.9999, anneal_frac=0.8)
        assert sch.at(0, 100_000) == pytest.approx(0.85)
        assert sch.at(80_000, 100_000) == pytest.approx(0.9999)
        assert sch.at(100_000, 100_000) == pytest.approx(0.9999)

    def test_monotone(self):
        sch = GammaSchedule()
        vals = [sch.at(s, 1000) for s in range(0, 1001, 50)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


class TestPrototypes:
    def test_k_one_is_mean(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 5))
        ps = fit_prototypes(X, 1, seed=0)
        assert np.allclose(ps.centers[0], X.mean(axis=0), atol=1e-6)

    def test_query_at_center_returns_it(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(100, 4))
        ps = fit_prototypes(X, 5, seed=3)
        for c in ps.centers:
            assert np.array_equal(nearest_prototype(ps, c), c)

    def test_separated_clusters_recovered(self):
        rng = np.random.default_rng(2)
        centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        X = np.concatenate([c + 0.1 * rng.normal(size=(50, 2)) for c in centers])
        ps = fit_prototypes(X, 3, seed=1)
        found = sorted(tuple(np.round(c, 0)) for c in ps.centers)
        assert found == sorted(tuple(c) for c in centers)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(300, 6))
        a = fit_prototypes(X, 9, seed=7)
        b = fit_prototypes(X, 9, seed=7)
        assert np.array_equal(a.centers, b.centers)

    def test_needs_k_distinct_points(self):
        X = np.zeros((10, 3))
        with pytest.raises(ValueError):
            fit_prototypes(X, 2, seed=0)

    def test_objective_nonincreasing(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(150, 4))
        ps = fit_prototypes(X, 6, seed=5)
        hist = ps.inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


class TestConditioningDims:
    @pytest.mark.parametrize("strategy,ds,dc", [
        ("zz", D_Z, D_Z),
        ("zp", D_Z, D_Z),
        ("zzt", D_Z, PROJECTED_DIM),
        ("ztzt", PROJECTED_DIM, PROJECTED_DIM),
    ])
    def test_input_dimension_audit(self, strategy, ds, dc):
        cfg = tiny_config(strategy=strategy)
        fn = build_filter_nets(cfg, D_Z, "chk")
        assert fn.critic.input_dim == ds + 1 + dc
        assert fn.actor.input_dim == ds + dc

    def test_raw_only_with_zz(self):
        with pytest.raises(ValueError):
            TrainConfig(strategy="ztzt", use_projector=False)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            TrainConfig(strategy="zzz")


class TestPolyak:
    def test_convex_combination_step(self):
        a = nets.build_mlp([3, 4, 1], ["relu", "identity"], [False, False], seed=1)
        b = nets.build_mlp([3, 4, 1], ["relu", "identity"], [False, False], seed=2)
        tau = 0.1
        before = [p.copy() for p in a.parameters()]
        polyak_update(a, b, tau)
        for pt, p0, po in zip(a.parameters(), before, b.parameters()):
            assert np.allclose(pt, (1 - tau) * p0 + tau * po, atol=1e-6)
            # stays inside the segment between old target and online values
            lo = np.minimum(p0, po) - 1e-6
            hi = np.maximum(p0, po) + 1e-6
            assert np.all(pt >= lo) and np.all(pt <= hi)


class TestReplayTransition:
    def test_validates_ranges(self):
        z = np.zeros(4)
        ReplayTransition(z, z, 0.5, -0.5, z)
        with pytest.raises(ValueError):
            ReplayTransition(z, z, 1.5, 0.0, z)
        with pytest.raises(ValueError):
            ReplayTransition(z, z, 0.0, -1.5, z)


class TestValueAndFallback:
    def test_pure_functions(self, enc, proj):
        fn = build_filter_nets(tiny_config(), D_Z, "chk")
        z = enc.encode_pose(0.2, 0.2, 0.1)
        zc = enc.encode_pose(-0.4, 0.6, 0.0)
        v1 = value(fn, z, zc, proj)
        v2 = value(fn, z, zc, proj)
        assert v1 == v2
        a1 = fallback_action(fn, z, zc, proj)
        assert a1 == fallback_action(fn, z, zc, proj)

    def test_fallback_in_unit_range(self, enc, proj):
        fn = build_filter_nets(tiny_config(), D_Z, "chk")
        rng = np.random.default_rng(5)
        for _ in range(20):
            z = enc.encode_pose(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5),
                                rng.uniform(-3, 3))
            zc = enc.encode_pose(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), 0.0)
            assert -1.0 <= fallback_action(fn, z, zc, proj) <= 1.0

    def test_strategy_projection_paths(self, enc, proj):
        z = enc.encode_pose(0.1, 0.1, 0.0)
        zc = enc.encode_pose(-0.3, 0.2, 0.0)
        for strategy in ("zz", "zzt", "ztzt"):
            fn = build_filter_nets(tiny_config(strategy=strategy), D_Z, "chk")
            v = value(fn, z, zc, proj)
            assert np.isfinite(v)

    def test_zp_requires_prototypes(self, enc, proj):
        fn = build_filter_nets(tiny_config(strategy="zp"), D_Z, "chk")
        z = enc.encode_pose(0.1, 0.1, 0.0)
        with pytest.raises(ValueError):
            value(fn, z, z, proj)


class TestTrainFilter:
    def test_missing_projector_rejected(self, enc, data):
        with pytest.raises(ValueError):
            train_filter(tiny_config(strategy="zzt"), data, enc, P, None)

    def test_deterministic_per_seed(self, enc, data, proj):
        cfg = tiny_config(total_steps=300, warmup=80)
        r1 = train_filter(cfg, data, enc, P, proj)
        r2 = train_filter(cfg, data, enc, P, proj)
        assert nets.net_checksum(r1.nets.critic) == nets.net_checksum(r2.nets.critic)
        assert nets.net_checksum(r1.nets.actor) == nets.net_checksum(r2.nets.actor)
        assert np.array_equal(r1.critic_losses, r2.critic_losses)

    def test_different_seed_differs(self, enc, data, proj):
        r1 = train_filter(tiny_config(seed=1), data, enc, P, proj)
        r2 = train_filter(tiny_config(seed=2), data, enc, P, proj)
        assert nets.net_checksum(r1.nets.critic) != nets.net_checksum(r2.nets.critic)

    def test_raw_margin_variant_trains(self, enc, data):
        cfg = tiny_config(strategy="zz", use_projector=False)
        res = train_filter(cfg, data, enc, P, None)
        assert res.nets.projector_checksum == "raw"

    def test_zp_variant_carries_prototypes(self, enc, data, proj):
        cfg = tiny_config(strategy="zp", prototypes_k=4)
        res = train_filter(cfg, data, enc, P, proj)
        assert res.nets.prototypes is not None
        assert res.nets.prototypes.centers.shape == (4, D_Z)


class TestCheckpoint:
    def test_round_trip(self, enc, data, proj, tmp_path):
        res = train_filter(tiny_config(strategy="zp", prototypes_k=3), data, enc, P, proj)
        path = tmp_path / "f.asfn"
        save_filter_nets(res.nets, path)
        loaded = load_filter_nets(path)
        assert loaded.strategy == "zp"
        assert loaded.use_projector
        assert loaded.d_z == D_Z
        assert loaded.projector_checksum == res.nets.projector_checksum
        assert nets.net_checksum(loaded.critic) == nets.net_checksum(res.nets.critic)
        assert nets.net_checksum(loaded.actor) == nets.net_checksum(res.nets.actor)
        assert np.array_equal(loaded.prototypes.centers, res.nets.prototypes.centers)
        assert loaded.gamma.start == pytest.approx(res.nets.gamma.start)
        z = enc.encode_pose(0.3, 0.0, 0.2)
        zc = enc.encode_pose(-0.2, 0.4, 0.0)
        assert value(loaded, z, zc, proj) == pytest.approx(value(res.nets, z, zc, proj),
                                                           abs=1e-7)
