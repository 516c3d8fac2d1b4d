import math

import numpy as np
import pytest

from rccm.numerics import InvalidArgumentError
from rccm.systems import SYSTEM_NAMES, dynamics, make_system, matrix_A, output_selector

from oracles import fd_jacobian, rel_err
from toys import linear_system

G = 9.81


@pytest.fixture(scope="module", params=SYSTEM_NAMES)
def sys(request):
    return make_system(request.param)


def sample_xuw(sys, rng, count=1):
    xs = sys.x_set.sample(rng, count)
    us = sys.u_set.sample(rng, count)
    ws = rng.uniform(-sys.sigma, sys.sigma, size=(count, sys.l)) / np.sqrt(sys.l)
    return xs, us, ws


class TestMakeSystem:
    def test_unknown_name(self):
        with pytest.raises(InvalidArgumentError):
            make_system("segway")

    def test_pvtol_drift_at_origin(self):
        s = make_system("pvtol")
        assert np.allclose(s.f(np.zeros(6)), [0, 0, 0, 0, -G, 0], atol=1e-15)

    def test_pvtol_hover_equilibrium(self):
        s = make_system("pvtol")
        mg2 = s.params["m"] * s.params["g"] / 2.0
        xdot = dynamics(s, np.zeros(6), [mg2, mg2], [0.0])
        assert np.allclose(xdot, np.zeros(6), atol=1e-12)

    def test_tlpra_mass_matrix_at_zero_elbow(self):
        s = make_system("tlpra")
        x = np.array([0.3, 0.0, 0.0, 0.0])
        minv = s.B(x)[2:, :]
        mass = np.linalg.inv(minv)
        assert np.allclose(mass, [[10.0, 4.6], [4.6, 2.3]], atol=1e-12)

    def test_quadrotor_pure_velocity_drift(self):
        s = make_system("quadrotor")
        x = np.zeros(10)
        x[3] = 1.0  # v_x only
        xdot = dynamics(s, x, np.zeros(4), np.zeros(3))
        want = np.zeros(10)
        want[0] = 1.0
        want[5] = G  # zero thrust leaves gravity in the printed drift
        assert np.allclose(xdot, want, atol=1e-15)

    def test_quadrotor_drift_conventions_differ(self):
        x = np.zeros(10)
        x[6] = G       # thrust
        x[7] = 0.3     # roll
        x[8] = 0.2     # pitch
        printed = make_system("quadrotor").f(x)
        conventional = make_system("quadrotor", quad_drift_convention="conventional").f(x)
        assert not np.allclose(printed, conventional)
        # conventional hover: accelerations vanish at zero attitude and thrust g
        hover = np.zeros(10)
        hover[6] = G
        assert np.allclose(
            make_system("quadrotor", "conventional").f(hover)[3:6], 0.0, atol=1e-15
        )

    def test_printed_set_bounds_loaded_exactly(self):
        s = make_system("pvtol")
        third = math.pi / 3.0
        assert np.array_equal(s.x_set.lower, [-35.0, -2.0, -third, -2.0, -1.0, -third])
        assert np.array_equal(s.x_set.upper, [0.0, 2.0, third, 2.0, 1.0, third])
        mg2 = 0.486 * G / 2.0
        assert np.allclose(s.u_set.lower, [mg2 - 1.0] * 2)
        assert np.allclose(s.u_set.upper, [mg2 + 1.0] * 2)
        q = make_system("quadrotor")
        assert q.x_set.lower[6] == 0.5 * G and q.x_set.upper[6] == 2.0 * G
        nl = make_system("neural_lander")
        assert np.array_equal(nl.u_set.lower, [-1.0, -1.0, -3.0])
        assert np.array_equal(nl.u_set.upper, [1.0, 1.0, 9.0])
        t = make_system("tlpra")
        assert np.array_equal(t.x0_set.lower, [math.pi / 2, 0.0, 0.0, 0.0])
        assert np.array_equal(t.x0_set.lower, t.x0_set.upper)


class TestDynamics:
    def test_zero_input_gives_drift(self, sys):
        rng = np.random.default_rng(1)
        xs, _, _ = sample_xuw(sys, rng, 20)
        for x in xs:
            assert np.allclose(
                dynamics(sys, x, np.zeros(sys.m), np.zeros(sys.l)), sys.f(x), atol=1e-14
            )

    def test_pvtol_disturbance_column(self):
        s = make_system("pvtol")
        rng = np.random.default_rng(2)
        x = s.x_set.sample(rng, 1)[0]
        u = s.u_set.sample(rng, 1)[0]
        ph = x[2]
        delta = dynamics(s, x, u, [1.0]) - dynamics(s, x, u, [0.0])
        assert np.allclose(delta, [0, 0, 0, np.cos(ph), -np.sin(ph), 0], atol=1e-12)

    def test_dimension_mismatch(self, sys):
        with pytest.raises(InvalidArgumentError):
            dynamics(sys, np.zeros(sys.n + 1), np.zeros(sys.m), np.zeros(sys.l))

    def test_batched_matches_loop(self, sys):
        rng = np.random.default_rng(3)
        xs, us, ws = sample_xuw(sys, rng, 10)
        batched = sys.dynamics(xs, us, ws)
        for k in range(10):
            assert np.allclose(batched[k], dynamics(sys, xs[k], us[k], ws[k]), atol=1e-14)


class TestJacobians:
    def test_jac_f_matches_finite_differences(self, sys):
        rng = np.random.default_rng(4)
        xs, _, _ = sample_xuw(sys, rng, 100)
        for x in xs:
            got = sys.jac_f(x)
            want = fd_jacobian(sys.f, x)
            assert rel_err(got, want, floor=1e-4) < 1e-6

    def test_jac_b_cols_match_finite_differences(self, sys):
        rng = np.random.default_rng(5)
        xs, _, _ = sample_xuw(sys, rng, 20)
        for x in xs:
            for j in range(sys.m):
                got = sys.jac_b_col(j, x)
                want = fd_jacobian(lambda a: np.asarray(sys.B(a))[..., :, j], x)
                assert np.max(np.abs(got - want)) < 1e-6 * (1.0 + np.abs(want).max())

    def test_jac_bw_cols_match_finite_differences(self, sys):
        rng = np.random.default_rng(6)
        xs, _, _ = sample_xuw(sys, rng, 20)
        for x in xs:
            for i in range(sys.l):
                got = sys.jac_bw_col(i, x)
                want = fd_jacobian(lambda a: np.asarray(sys.Bw(a))[..., :, i], x)
                assert np.max(np.abs(got - want)) < 1e-6 * (1.0 + np.abs(want).max())


class TestMatrixA:
    def test_constant_b_reduces_to_jac_f(self):
        s = make_system("quadrotor")
        rng = np.random.default_rng(7)
        xs, us, ws = sample_xuw(s, rng, 10)
        for x, u, w in zip(xs, us, ws):
            assert np.array_equal(matrix_A(s, x, u, w), s.jac_f(x))

    def test_pvtol_matches_finite_differences_of_dynamics(self):
        s = make_system("pvtol")
        rng = np.random.default_rng(8)
        xs, us, ws = sample_xuw(s, rng, 50)
        for x, u, w in zip(xs, us, ws):
            got = matrix_A(s, x, u, w)
            want = fd_jacobian(lambda a: dynamics(s, a, u, w), x)
            assert rel_err(got, want, floor=1e-4) < 1e-6

    def test_tlpra_matches_finite_differences_of_dynamics(self):
        s = make_system("tlpra")
        rng = np.random.default_rng(9)
        xs, us, ws = sample_xuw(s, rng, 20)
        for x, u, w in zip(xs, us, ws):
            got = matrix_A(s, x, u, w)
            want = fd_jacobian(lambda a: dynamics(s, a, u, w), x)
            assert rel_err(got, want, floor=1e-4) < 1e-6

    def test_linear_system_recovers_A(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((3, 3))
        s = linear_system(a, rng.standard_normal((3, 2)), rng.standard_normal((3, 1)))
        for _ in range(5):
            x = rng.standard_normal(3)
            u = rng.standard_normal(2)
            w = rng.standard_normal(1)
            assert np.allclose(matrix_A(s, x, u, w), a, atol=1e-12)


class TestAnnihilator:
    def test_orthogonality_on_sampled_states(self, sys):
        rng = np.random.default_rng(11)
        xs = sys.x_set.sample(rng, 1000)
        bperp = sys.annihilator(xs[0])
        for x in xs:
            b = sys.B(x)
            assert np.linalg.norm(bperp.T @ b) <= 1e-10 * max(np.linalg.norm(b), 1.0)

    def test_orthonormal_columns(self, sys):
        bperp = sys.annihilator(sys.x_set.center())
        k = bperp.shape[1]
        assert np.linalg.norm(bperp.T @ bperp - np.eye(k)) < 1e-12

    def test_pvtol_annihilator_spans_first_four(self):
        s = make_system("pvtol")
        bperp = s.annihilator()
        assert bperp.shape == (6, 4)
        assert np.allclose(bperp[4:, :], 0.0, atol=1e-12)


class TestNumpyTorchTwins:
    def test_maps_agree(self, sys):
        from rccm.autodiff import tensor

        rng = np.random.default_rng(20)
        xs = sys.x_set.sample(rng, 1000)
        f_np = sys.f(xs)
        f_t = sys.f_t(tensor(xs)).numpy()
        assert np.max(np.abs(f_np - f_t)) < 1e-13 * (1.0 + np.abs(f_t).max())
        if sys.const_b is None:
            b_np = sys.B(xs)
            b_t = sys.b_t(tensor(xs)).numpy()
            assert np.max(np.abs(b_np - b_t)) < 1e-13 * (1.0 + np.abs(b_t).max())
        if sys.const_bw is None:
            bw_np = sys.Bw(xs)
            bw_t = sys.bw_t(tensor(xs)).numpy()
            assert np.max(np.abs(bw_np - bw_t)) < 1e-13

    def test_conventional_quadrotor_twin(self):
        from rccm.autodiff import tensor

        sys = make_system("quadrotor", "conventional")
        rng = np.random.default_rng(21)
        xs = sys.x_set.sample(rng, 500)
        assert np.max(np.abs(sys.f(xs) - sys.f_t(tensor(xs)).numpy())) < 1e-12


class TestSets:
    def test_samples_inside_boxes(self, sys):
        rng = np.random.default_rng(12)
        for box in (sys.x_set, sys.u_set, sys.x0_set, sys.xe0_set):
            pts = box.sample(rng, 500)
            assert np.all(pts >= box.lower - 1e-12)
            assert np.all(pts <= box.upper + 1e-12)

    def test_contains_with_skip(self):
        s = make_system("pvtol")
        x = s.x_set.center()
        x[0] = 100.0  # way outside in the translation-invariant coordinate
        assert not s.x_set.contains(x)
        assert s.x_set.contains(x, skip=s.translation_invariant_coords)


class TestOutputSelector:
    def test_pvtol_positions(self):
        s = make_system("pvtol")
        sel = output_selector(s, "positions")
        assert np.array_equal(sel.C, np.eye(6)[:2])
        assert np.array_equal(sel.D, np.zeros((2, 2)))
        x = np.arange(6.0)
        assert np.array_equal(sel.output(x, np.zeros(2)), [0.0, 1.0])

    def test_inputs_selector(self, sys):
        sel = output_selector(sys, "inputs")
        u = np.arange(1.0, sys.m + 1.0)
        assert np.array_equal(sel.output(np.zeros(sys.n), u), u)

    def test_weighted_all_scalar(self):
        s = linear_system([[-1.0]], [[1.0]], [[1.0]])
        sel = output_selector(s, "weighted_all", Q=[[1.0]], R=[[1.0]])
        assert np.array_equal(sel.C, [[1.0], [0.0]])
        assert np.array_equal(sel.D, [[0.0], [1.0]])

    def test_custom_dim_check(self):
        s = make_system("pvtol")
        with pytest.raises(InvalidArgumentError):
            output_selector(s, "custom", C=np.ones((1, 3)), D=np.ones((1, 2)))

    def test_zero_row_rejected(self):
        s = make_system("pvtol")
        with pytest.raises(InvalidArgumentError):
            output_selector(s, "custom", C=np.zeros((1, 6)), D=np.zeros((1, 2)))
