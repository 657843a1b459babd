import math

import numpy as np
import pytest

from latentshield import grid as grid_mod
from latentshield.dubins import DubinsParams, FailureDisc, PrivilegedState, step
from latentshield.grid import (GridBackup, GridSpec, ValueGrid, action_set,
                               classify_nodes, disc_margin_fn, oracle_for_constraint,
                               solve_disc_grid, value_at, value_at_state,
                               value_iteration, value_iteration_table,
                               verify_theorem1)

P = DubinsParams()
DISC = FailureDisc(0.0, 0.0, 0.5)
SMALL = GridSpec(nx=21, ny=21, ntheta=21, n_actions=5)


@pytest.fixture(scope="module")
def small_grid():
    return solve_disc_grid(DISC, P, SMALL, gamma=0.99, tol=1e-8, max_iter=2000)


class TestActionSet:
    def test_endpoints_and_zero(self):
        a = action_set(1.25, 11)
        assert a[0] == -1.25 and a[-1] == 1.25
        assert 0.0 in a

    def test_single_action(self):
        assert np.array_equal(action_set(1.25, 1), [0.0])


class TestTableSolver:
    def test_two_state_chain_hand_fixed_point(self):
        # A -> B, B absorbing; l(A)=1, l(B)=-1, gamma=0.9
        margins = np.array([1.0, -1.0])
        successors = np.array([[1], [1]])
        V = value_iteration_table(margins, successors, gamma=0.9)
        assert V[1] == pytest.approx(-1.0, abs=1e-12)
        assert V[0] == pytest.approx(-0.8, abs=1e-12)

    def test_two_state_chain_shifted(self):
        # same chain with margins shifted by delta=0.5: V = (-1.3, -1.5)
        margins = np.array([0.5, -1.5])
        successors = np.array([[1], [1]])
        V = value_iteration_table(margins, successors, gamma=0.9)
        assert V[0] == pytest.approx(-1.3, abs=1e-12)
        assert V[1] == pytest.approx(-1.5, abs=1e-12)

    def test_constant_margin_fixed_point(self):
        margins = np.full(4, 0.7)
        successors = np.array([[1], [2], [3], [0]])
        V = value_iteration_table(margins, successors, gamma=0.95)
        assert np.allclose(V, 0.7, atol=1e-12)


class TestBackupProperties:
    @pytest.fixture(scope="class")
    def backup(self):
        spec = GridSpec(nx=15, ny=15, ntheta=12, n_actions=5)
        margins = disc_margin_fn(DISC)(spec.nodes())
        return GridBackup(margins, P, spec, gamma=0.9), spec

    def test_contraction(self, backup):
        b, spec = backup
        rng = np.random.default_rng(0)
        shape = (spec.nx * spec.ny, spec.ntheta)
        for _ in range(100):
            v1 = rng.normal(size=shape)
            v2 = rng.normal(size=shape)
            lhs = np.max(np.abs(b.sweep(v1) - b.sweep(v2)))
            rhs = b.gamma * np.max(np.abs(v1 - v2))
            assert lhs <= rhs + 1e-12

    def test_monotonicity(self, backup):
        b, spec = backup
        rng = np.random.default_rng(1)
        shape = (spec.nx * spec.ny, spec.ntheta)
        for _ in range(100):
            v1 = rng.normal(size=shape)
            v2 = v1 + rng.uniform(0, 1, size=shape)
            assert np.all(b.sweep(v1) <= b.sweep(v2) + 1e-12)

    def test_constant_margin_is_fixed_point(self):
        spec = GridSpec(nx=9, ny=9, ntheta=8, n_actions=3)
        c = 0.37

        def margin(states):
            return np.full(len(np.atleast_2d(states)), c)

        g = value_iteration(margin, P, spec, gamma=0.9, tol=1e-10, max_iter=50)
        assert np.allclose(g.values, c, atol=1e-12)
        assert g.iterations == 1  # already the fixed point


class TestSolvedGrid:
    def test_v_below_margin(self, small_grid):
        margins = disc_margin_fn(DISC)(SMALL.nodes()).reshape(small_grid.values.shape)
        assert np.all(small_grid.values <= margins + 1e-5)

    def test_failure_set_inside_unsafe_set(self, small_grid):
        margins = disc_margin_fn(DISC)(SMALL.nodes()).reshape(small_grid.values.shape)
        assert np.all(small_grid.values[margins < 0] < 0)

    def test_unsafe_set_strictly_larger_than_disc(self, small_grid):
        margins = disc_margin_fn(DISC)(SMALL.nodes()).reshape(small_grid.values.shape)
        assert (small_grid.values < 0).sum() > (margins < 0).sum()

    def test_converged(self, small_grid):
        assert small_grid.converged
        assert small_grid.residual < 1e-8


class TestValueAt:
    def test_node_exact(self, small_grid):
        xs, ys, ths = SMALL.axes()
        i, j, k = 4, 11, 7
        v = value_at_state(small_grid, PrivilegedState(xs[i], ys[j], ths[k]))
        assert v == pytest.approx(small_grid.values[i, j, k], abs=1e-12)

    def test_theta_periodic(self, small_grid):
        s = np.array([[0.4, -0.3, 1.1]])
        s2 = np.array([[0.4, -0.3, 1.1 - 2 * math.pi]])
        assert value_at(small_grid, s)[0] == pytest.approx(value_at(small_grid, s2)[0], abs=1e-9)

    def test_x_midpoint_mean(self, small_grid):
        xs, ys, ths = SMALL.axes()
        i, j, k = 6, 9, 3
        mid = np.array([[(xs[i] + xs[i + 1]) / 2, ys[j], ths[k]]])
        expect = 0.5 * (small_grid.values[i, j, k] + small_grid.values[i + 1, j, k])
        assert value_at(small_grid, mid)[0] == pytest.approx(expect, abs=1e-12)

    def test_clamps_outside_box(self, small_grid):
        inside = value_at(small_grid, np.array([[1.5, 0.0, 0.0]]))[0]
        outside = value_at(small_grid, np.array([[2.5, 0.0, 0.0]]))[0]
        assert outside == pytest.approx(inside, abs=1e-12)


class TestShiftedOracle:
    def test_origin_identity(self, small_grid):
        oracle = oracle_for_constraint(small_grid, FailureDisc(0.0, 0.0, 0.5))
        pts = SMALL.nodes()[::97]
        assert np.allclose(oracle(pts), value_at(small_grid, pts), atol=1e-12)

    def test_shift_definition(self, small_grid):
        c = FailureDisc(0.4, -0.2, 0.5)
        oracle = oracle_for_constraint(small_grid, c)
        s = np.array([[0.9, 0.1, 0.7]])
        shifted = np.array([[0.5, 0.3, 0.7]])
        assert oracle(s)[0] == pytest.approx(value_at(small_grid, shifted)[0], abs=1e-12)

    def test_radius_mismatch_rejected(self, small_grid):
        with pytest.raises(ValueError):
            oracle_for_constraint(small_grid, FailureDisc(0.0, 0.0, 0.3))

    def test_many_constraints_one_solve(self, small_grid):
        rng = np.random.default_rng(0)
        for _ in range(50):
            c = FailureDisc(rng.uniform(-1, 1), rng.uniform(-1, 1), 0.5)
            oracle = oracle_for_constraint(small_grid, c)
            # the shifted oracle is negative at its own disc center
            assert oracle(np.array([[c.cx, c.cy, 0.0]]))[0] < 0


class TestClassifyNodes:
    def test_extreme_thresholds(self, small_grid):
        assert not classify_nodes(small_grid, -np.inf).any()
        assert classify_nodes(small_grid, np.inf).all()

    def test_monotone_in_threshold(self, small_grid):
        lo = classify_nodes(small_grid, -0.1)
        hi = classify_nodes(small_grid, 0.3)
        assert np.all(hi[lo])  # raising threshold never shrinks the unsafe set


class TestTheorem1:
    def test_delta_zero_exact(self):
        spec = GridSpec(nx=15, ny=15, ntheta=12, n_actions=5)
        rep = verify_theorem1(disc_margin_fn(DISC), 0.0, P, spec, gamma=0.98, tol=1e-8)
        assert rep.max_abs_diff == 0.0
        assert rep.sublevel_mismatch == 0

    def test_shift_identity_small(self):
        spec = GridSpec(nx=15, ny=15, ntheta=12, n_actions=5)
        rep = verify_theorem1(disc_margin_fn(DISC), 0.2, P, spec, gamma=0.98, tol=1e-8)
        assert rep.max_abs_diff < 1e-9
        assert rep.sublevel_mismatch == 0


class TestRotationalSymmetry:
    def test_quarter_turn(self, small_grid):
        rng = np.random.default_rng(3)
        s = np.stack([rng.uniform(-1.4, 1.4, 500), rng.uniform(-1.4, 1.4, 500),
                      rng.uniform(-math.pi, math.pi, 500)], axis=1)
        rot = np.stack([-s[:, 1], s[:, 0], s[:, 2] + math.pi / 2], axis=1)
        v1 = value_at(small_grid, s)
        v2 = value_at(small_grid, rot)
        # coarse grid: allow a bit more than the 61^3 interpolation tolerance
        assert np.max(np.abs(v1 - v2)) < 0.05


class TestGridPolicy:
    def test_action_in_range(self, small_grid):
        a = grid_mod.grid_policy_action(small_grid, PrivilegedState(1.0, 1.0, 0.0), P)
        assert abs(a) <= P.a_max

    def test_picks_argmax(self, small_grid):
        s = PrivilegedState(0.7, 0.0, math.pi)  # heading at the disc
        acts = action_set(P.a_max, SMALL.n_actions)
        vals = [value_at_state(small_grid, step(s, float(a), P)) for a in acts]
        assert grid_mod.grid_policy_action(small_grid, s, P) == acts[int(np.argmax(vals))]


class TestGridFile:
    def test_round_trip(self, small_grid, tmp_path):
        path = tmp_path / "g.asvg"
        grid_mod.save_grid(small_grid, path)
        loaded = grid_mod.load_grid(path)
        assert loaded.spec.nx == SMALL.nx
        assert loaded.gamma == pytest.approx(small_grid.gamma, abs=1e-7)
        assert loaded.margin_descriptor == small_grid.margin_descriptor
        assert np.allclose(loaded.values, small_grid.values, atol=1e-6)
        assert loaded.iterations == small_grid.iterations

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.asvg"
        p.write_bytes(b"WHAT" + b"\0" * 32)
        with pytest.raises(ValueError):
            grid_mod.load_grid(p)


class TestValidation:
    def test_gamma_range(self):
        spec = GridSpec(nx=5, ny=5, ntheta=4, n_actions=3)
        margins = disc_margin_fn(DISC)(spec.nodes())
        with pytest.raises(ValueError):
            GridBackup(margins, P, spec, gamma=1.0)

    def test_tol_positive(self):
        with pytest.raises(ValueError):
            value_iteration(disc_margin_fn(DISC), P,
                            GridSpec(nx=5, ny=5, ntheta=4, n_actions=3),
                            gamma=0.9, tol=0.0)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            GridSpec(nx=1, ny=5, ntheta=4)
