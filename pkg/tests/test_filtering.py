import logging
import math

import numpy as np
import pytest

from latentshield import dubins, filtering, latent, safety_rl
from latentshield.conformal import Threshold
from latentshield.dubins import DubinsParams, PrivilegedState
from latentshield.filtering import FilterDecision, decide, filter_action, monitor
from latentshield.latent import Encoder, LatentSession

P = DubinsParams()
D_Z = 10


@pytest.fixture(scope="module")
def enc():
    return Encoder(d_z=D_Z, seed=31)


@pytest.fixture(scope="module")
def proj():
    return latent.make_projector(D_Z, seed=4)


@pytest.fixture(scope="module")
def fn():
    cfg = safety_rl.TrainConfig(strategy="zz", hidden=(16, 16), seed=3)
    return safety_rl.build_filter_nets(cfg, D_Z, "prov")


def make_threshold(delta: float, margin: float = 0.1) -> Threshold:
    return Threshold(delta=delta, alpha=0.1, epsilon=0.5, n_positive=100,
                     runtime_margin=margin, projector_checksum="prov")


def fresh_session(enc, x=0.3, y=-0.2, th=0.7) -> LatentSession:
    return LatentSession(enc, P, PrivilegedState(x, y, th))


def next_value(sess, fn, enc, proj, z_c, a_task) -> float:
    peek = sess.branch()
    z_next = peek.step(a_task)
    return safety_rl.value(fn, z_next, z_c, proj)


class TestSwitchingBoundary:
    def test_pass_through_above_threshold(self, enc, proj, fn):
        sess = fresh_session(enc)
        z_c = enc.encode_pose(-1.0, 1.0, 0.0)
        v = next_value(sess, fn, enc, proj, z_c, 0.4)
        t = make_threshold(delta=v - 0.2, margin=0.1)  # v = delta + 0.2 > delta + 0.1
        d = decide(sess, fn, z_c, t, 0.4, proj)
        assert not d.intervened
        assert d.executed == 0.4
        assert d.value == pytest.approx(v)
        assert d.threshold == pytest.approx(t.delta + 0.1)

    def test_tie_intervenes(self, enc, proj, fn):
        sess = fresh_session(enc)
        z_c = enc.encode_pose(-1.0, 1.0, 0.0)
        v = next_value(sess, fn, enc, proj, z_c, 0.4)
        t = make_threshold(delta=v, margin=0.0)  # v == delta + margin exactly
        d = decide(sess, fn, z_c, t, 0.4, proj)
        assert d.intervened
        fb = safety_rl.fallback_action(fn, sess.current_latent(), z_c, proj)
        assert d.executed == pytest.approx(fb * P.a_max)

    def test_below_threshold_intervenes(self, enc, proj, fn):
        sess = fresh_session(enc)
        z_c = enc.encode_pose(-1.0, 1.0, 0.0)
        v = next_value(sess, fn, enc, proj, z_c, 0.0)
        t = make_threshold(delta=v + 0.5)
        d = decide(sess, fn, z_c, t, 0.0, proj)
        assert d.intervened
        assert abs(d.executed) <= P.a_max

    def test_decision_matches_invariant(self, enc, proj, fn):
        # intervened <=> value <= delta + runtime_margin, over random cases
        rng = np.random.default_rng(0)
        z_c = enc.encode_pose(0.5, 0.5, 0.0)
        for _ in range(25):
            sess = fresh_session(enc, rng.uniform(-1, 1), rng.uniform(-1, 1),
                                 rng.uniform(-3, 3))
            t = make_threshold(delta=rng.uniform(-1, 0.2))
            a = rng.uniform(-P.a_max, P.a_max)
            d = decide(sess, fn, z_c, t, a, proj)
            assert d.intervened == (d.value <= d.threshold)


class TestSentinel:
    def test_always_fallback_with_warning(self, enc, proj, fn, caplog):
        sess = fresh_session(enc)
        z_c = enc.encode_pose(0.0, 0.0, 0.0)
        t = make_threshold(delta=math.inf)
        with caplog.at_level(logging.WARNING):
            d = decide(sess, fn, z_c, t, 0.3, proj)
        assert d.intervened
        assert "sentinel" in caplog.text


class TestProvenance:
    def test_checksum_mismatch_rejected(self, enc, proj, fn):
        sess = fresh_session(enc)
        z_c = enc.encode_pose(0.0, 0.0, 0.0)
        t = Threshold(delta=-0.5, alpha=0.1, epsilon=0.5, n_positive=10,
                      projector_checksum="other")
        with pytest.raises(ValueError, match="provenance|projector"):
            decide(sess, fn, z_c, t, 0.0, proj)


class TestSessionHygiene:
    def test_decide_never_mutates(self, enc, proj, fn):
        sess = fresh_session(enc)
        z_c = enc.encode_pose(0.2, 0.2, 0.0)
        before = sess.privileged_state().as_array()
        decide(sess, fn, z_c, make_threshold(-0.5), 1.0, proj)
        decide(sess, fn, z_c, make_threshold(2.0), 1.0, proj)
        assert np.array_equal(sess.privileged_state().as_array(), before)

    def test_rejected_peek_leaves_no_trace(self, enc, proj, fn):
        # filtering with a rejected task action == stepping with the fallback
        z_c = enc.encode_pose(0.2, 0.2, 0.0)
        t = make_threshold(delta=2.0)  # force intervention

        s1 = fresh_session(enc)
        d = filter_action(s1, fn, z_c, t, 1.0, proj)
        assert d.intervened

        s2 = fresh_session(enc)
        fb = safety_rl.fallback_action(fn, s2.current_latent(), z_c, proj)
        s2.step(fb * P.a_max)
        assert np.array_equal(s1.privileged_state().as_array(),
                              s2.privileged_state().as_array())

    def test_accepted_action_advances(self, enc, proj, fn):
        z_c = enc.encode_pose(-1.2, -1.2, 0.0)
        s1 = fresh_session(enc)
        v = next_value(s1, fn, enc, proj, z_c, 0.6)
        t = make_threshold(delta=v - 1.0)
        filter_action(s1, fn, z_c, t, 0.6, proj)
        s2 = fresh_session(enc)
        s2.step(0.6)
        assert np.array_equal(s1.current_latent(), s2.current_latent())

    def test_stateless_across_calls(self, enc, proj, fn):
        z_c = enc.encode_pose(0.0, 0.0, 0.0)
        t = make_threshold(delta=-0.3)
        s1 = fresh_session(enc)
        s2 = fresh_session(enc)
        d1 = decide(s1, fn, z_c, t, 0.5, proj)
        d2 = decide(s2, fn, z_c, t, 0.5, proj)
        assert d1 == d2


class TestMonitor:
    def test_idempotent(self, enc, proj, fn):
        sess = fresh_session(enc)
        z_c = enc.encode_pose(0.4, -0.4, 0.0)
        assert monitor(sess, fn, z_c, proj) == monitor(sess, fn, z_c, proj)

    def test_reports_current_state_value(self, enc, proj, fn):
        sess = fresh_session(enc)
        z_c = enc.encode_pose(0.4, -0.4, 0.0)
        v = safety_rl.value(fn, sess.current_latent(), z_c, proj)
        assert monitor(sess, fn, z_c, proj) == pytest.approx(v)


class TestActionValidation:
    def test_oversized_task_action_rejected(self, enc, proj, fn):
        sess = fresh_session(enc)
        z_c = enc.encode_pose(0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            decide(sess, fn, z_c, make_threshold(-0.5), 1.3, proj)
