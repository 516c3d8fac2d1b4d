import numpy as np
import pytest

from rccm.certificates import (
    LossSetup,
    SamplePoint,
    batch_etas,
    build_all,
    build_C1,
    build_C2,
    build_C3,
    build_C4,
    closed_loop_xdot,
    loss_and_grad,
    matrices_batch,
    pack_trainables,
    total_loss,
    _make_consts,
)
from rccm.certnets import (
    CertificateCheckpoint,
    GainParams,
    Hyperparams,
    controller_u,
    init_controller,
    init_metric,
)
from rccm.numerics import SymMatrix, lambda_max, penalty_pd, sample_unit_vectors
from rccm.systems import make_system, output_selector

from toys import double_integrator, linear_system, scalar_toy


def make_ckpt(sys, seed=0, hidden=16, c=8, w_floor=0.1, lam=0.5,
              alpha=2.0, mu=1.0, zero=False):
    rng = np.random.default_rng(seed)
    return CertificateCheckpoint(
        system=sys.name,
        hyper=Hyperparams(lam=lam, w_floor=w_floor, hidden=hidden, c=c, seed=seed),
        metric=init_metric(sys.n, hidden, w_floor, rng, zero=zero),
        controller=init_controller(sys.n, sys.m, hidden, c, rng, zero=zero),
        gains=GainParams.from_alpha_mu(alpha=alpha, mu=mu),
    )


@pytest.fixture(scope="module")
def toy():
    sys = scalar_toy()
    ckpt = make_ckpt(sys, w_floor=1.0, lam=0.5, alpha=4.0, mu=1.0, zero=True)
    sel = output_selector(sys, "custom", C=[[1.0]], D=[[0.0]], label="state")
    return sys, ckpt, sel


@pytest.fixture(scope="module")
def pvtol_ckpt():
    sys = make_system("pvtol")
    return sys, make_ckpt(sys, seed=3)


def sample_for(sys, rng):
    return SamplePoint(
        x=sys.x_set.sample(rng, 1)[0],
        x_star=sys.x_set.sample(rng, 1)[0],
        u_star=sys.u_set.sample(rng, 1)[0],
        w=rng.uniform(-1, 1, sys.l) / np.sqrt(sys.l),
    )


class TestClosedLoopXdot:
    def test_equilibrium_zero(self, toy):
        sys, ckpt, _ = toy
        s = SamplePoint(x=np.zeros(1), x_star=np.zeros(1), u_star=np.zeros(1), w=np.zeros(1))
        assert np.allclose(closed_loop_xdot(sys, ckpt, s), 0.0, atol=1e-15)

    def test_pvtol_hover(self, pvtol_ckpt):
        sys, ckpt = pvtol_ckpt
        mg2 = sys.params["m"] * sys.params["g"] / 2.0
        s = SamplePoint(x=np.zeros(6), x_star=np.zeros(6),
                        u_star=np.array([mg2, mg2]), w=np.zeros(1))
        assert np.allclose(closed_loop_xdot(sys, ckpt, s), 0.0, atol=1e-12)

    def test_equals_dynamics_with_substituted_control(self, pvtol_ckpt):
        sys, ckpt = pvtol_ckpt
        rng = np.random.default_rng(1)
        for _ in range(10):
            s = sample_for(sys, rng)
            u = controller_u(ckpt.controller, s.x, s.x_star, s.u_star)
            want = sys.dynamics(s.x, u, s.w)
            assert np.allclose(closed_loop_xdot(sys, ckpt, s), want, atol=1e-12)


class TestBuildC1:
    def test_scalar_toy_matrix(self, toy):
        sys, ckpt, _ = toy
        s = SamplePoint(x=np.array([0.3]), x_star=np.zeros(1),
                        u_star=np.zeros(1), w=np.array([0.2]))
        c1 = build_C1(sys, ckpt, s)
        assert np.allclose(c1.entries, [[-1.5, 1.0], [1.0, -1.0]], atol=1e-12)
        assert lambda_max(c1) == pytest.approx(-0.21922359359558485, abs=1e-9)
        etas = sample_unit_vectors(2, 10000, seed=5)
        assert penalty_pd(SymMatrix.from_array(-c1.entries), etas) == 0.0

    def test_constant_metric_drops_mdot(self, toy):
        sys, ckpt, sel = toy
        s = SamplePoint(x=np.array([0.7]), x_star=np.zeros(1),
                        u_star=np.zeros(1), w=np.array([-0.5]))
        mats = build_all(sys, ckpt, sel, s)
        assert np.array_equal(mats.intermediates["Mdot"], np.zeros((1, 1)))
        assert np.array_equal(mats.intermediates["Wdot"], np.zeros((1, 1)))

    def test_mdot_identity(self, pvtol_ckpt):
        # Differentiating M W = I gives Mdot W + M Wdot = 0.
        sys, ckpt = pvtol_ckpt
        sel = output_selector(sys, "positions")
        rng = np.random.default_rng(2)
        for _ in range(25):
            s = sample_for(sys, rng)
            inter = build_all(sys, ckpt, sel, s).intermediates
            res = inter["Mdot"] @ inter["W"] + inter["M"] @ inter["Wdot"]
            assert np.linalg.norm(res) <= 1e-8

    def test_exact_symmetry(self, pvtol_ckpt):
        sys, ckpt = pvtol_ckpt
        rng = np.random.default_rng(3)
        s = sample_for(sys, rng)
        c1 = build_C1(sys, ckpt, s)
        assert np.array_equal(c1.entries, c1.entries.T)


class TestBuildC2:
    def test_scalar_toy_matrix(self, toy):
        sys, ckpt, sel = toy
        s = SamplePoint(x=np.array([0.4]), x_star=np.zeros(1),
                        u_star=np.zeros(1), w=np.array([0.1]))
        c2 = build_C2(sys, ckpt, sel, s)
        assert np.allclose(c2.entries, np.diag([0.25, 3.0]), atol=1e-12)
        etas = sample_unit_vectors(2, 10000, seed=6)
        assert penalty_pd(c2, etas) == 0.0

    def test_independent_of_controller_when_D_zero(self, pvtol_ckpt):
        sys, _ = pvtol_ckpt
        sel = output_selector(sys, "positions")
        rng = np.random.default_rng(4)
        s = sample_for(sys, rng)
        a = build_C2(sys, make_ckpt(sys, seed=10), sel, s)
        b = build_C2(sys, make_ckpt(sys, seed=11), sel, s)
        # same metric seed is required for equality; rebuild with same seed,
        # perturbing only the controller
        ck = make_ckpt(sys, seed=12)
        ck2 = CertificateCheckpoint(
            system=ck.system, hyper=ck.hyper, metric=ck.metric,
            controller=init_controller(sys.n, sys.m, 16, 8, np.random.default_rng(99)),
            gains=ck.gains,
        )
        c_a = build_C2(sys, ck, sel, s)
        c_b = build_C2(sys, ck2, sel, s)
        assert np.array_equal(c_a.entries, c_b.entries)
        assert not np.array_equal(a.entries, b.entries)  # metric change does matter

    def test_monotone_in_alpha(self, pvtol_ckpt):
        sys, ckpt = pvtol_ckpt
        sel = output_selector(sys, "inputs")  # D nonzero so alpha truly matters
        rng = np.random.default_rng(5)
        etas = sample_unit_vectors(sys.n + sys.l, 512, seed=7)
        for _ in range(10):
            s = sample_for(sys, rng)
            pens = []
            for alpha in (1.5, 3.0, 6.0, 12.0):
                c2 = build_C2(sys, ckpt, sel, s,
                              gains=GainParams.from_alpha_mu(alpha=alpha, mu=1.0))
                pens.append(penalty_pd(c2, etas))
            assert all(b <= a + 1e-15 for a, b in zip(pens, pens[1:]))

    def test_large_alpha_always_feasible(self, pvtol_ckpt):
        sys, ckpt = pvtol_ckpt
        sel = output_selector(sys, "positions")
        rng = np.random.default_rng(6)
        etas = sample_unit_vectors(sys.n + sys.l, 256, seed=8)
        for _ in range(5):
            s = sample_for(sys, rng)
            c2 = build_C2(sys, ckpt, sel, s,
                          gains=GainParams.from_alpha_mu(alpha=1e9, mu=1.0))
            assert penalty_pd(c2, etas) == 0.0


class TestBuildC3C4:
    def test_scalar_toy_has_no_annihilator(self, toy):
        sys, ckpt, _ = toy
        assert build_C3(sys, ckpt, np.array([0.2])) is None
        assert build_C4(sys, ckpt, np.array([0.2])) is None

    def test_double_integrator_identity_metric(self):
        sys = double_integrator()
        ckpt = make_ckpt(sys, w_floor=1.0, lam=0.5, zero=True)
        c3 = build_C3(sys, ckpt, np.array([0.3, -0.2]))
        assert c3.entries.shape == (1, 1)
        assert np.allclose(c3.entries, [[1.0]], atol=1e-12)
        etas = sample_unit_vectors(1, 100, seed=9)
        assert penalty_pd(SymMatrix.from_array(-c3.entries), etas) == 1.0

    def test_driftless_constant_metric(self):
        sys = linear_system(np.zeros((3, 3)), [[0.0], [0.0], [1.0]], np.eye(3)[:, :1])
        ckpt = make_ckpt(sys, w_floor=0.1, lam=0.5, zero=True)
        c3 = build_C3(sys, ckpt, np.array([0.1, 0.2, 0.3]))
        bperp = sys.annihilator()
        want = 2 * 0.5 * 0.1 * bperp.T @ bperp  # 2 lam B'^T W B'
        assert np.allclose(c3.entries, want, atol=1e-13)

    def test_zero_rate_driftless_gives_zero(self):
        sys = linear_system(np.zeros((3, 3)), [[0.0], [0.0], [1.0]], np.eye(3)[:, :1])
        ckpt = make_ckpt(sys, w_floor=0.1, lam=0.0, zero=True)
        c3 = build_C3(sys, ckpt, np.array([0.1, 0.2, 0.3]))
        assert np.allclose(c3.entries, 0.0, atol=1e-15)

    def test_constant_b_constant_metric_c4_zero(self):
        sys = make_system("quadrotor")
        ckpt = make_ckpt(sys, zero=True)
        c4 = build_C4(sys, ckpt, sys.x_set.sample(np.random.default_rng(7), 1)[0])
        assert len(c4) == 4
        for blk in c4:
            assert np.array_equal(blk.entries, np.zeros_like(blk.entries))

    def test_pvtol_c4_matches_straight_line_formula(self, pvtol_ckpt):
        # Independent numpy evaluation of the per-column condition using
        # the closed-form derivative of the two-layer metric factor.
        sys, ckpt = pvtol_ckpt
        p = ckpt.metric.theta.unpack()
        n = sys.n
        rng = np.random.default_rng(8)
        bperp = sys.annihilator()
        bmat = sys.const_b
        for _ in range(10):
            x = sys.x_set.sample(rng, 1)[0]
            pre = p["w_w1"] @ x + p["w_b1"]
            h = np.tanh(pre)
            cmat = (p["w_w2"] @ h + p["w_b2"]).reshape(n, n)
            dwdx = np.zeros((n, n, n))
            for k in range(n):
                dh = (1.0 - h ** 2) * p["w_w1"][:, k]
                dc = (p["w_w2"] @ dh).reshape(n, n)
                dwdx[:, :, k] = dc @ cmat.T + cmat @ dc.T
            got = build_C4(sys, ckpt, x)
            for j in range(sys.m):
                lie = np.einsum("ijk,k->ij", dwdx, bmat[:, j])
                want = bperp.T @ lie @ bperp
                assert np.max(np.abs(got[j].entries - want)) < 1e-10


class TestTotalLoss:
    def test_toy_loss_is_alpha_exactly(self, toy):
        sys, ckpt, sel = toy
        rng = np.random.default_rng(9)
        batch = [sample_for(sys, rng) for _ in range(16)]
        loss, breakdown = total_loss(sys, ckpt, sel, batch, etas_seed=1)
        assert loss == 4.0
        assert breakdown["risk_c1"] == 0.0
        assert breakdown["risk_c2"] == 0.0
        assert breakdown["risk_c3"] == 0.0
        assert breakdown["risk_c4"] == 0.0
        assert breakdown["alpha"] == 4.0

    def test_flat_linear_system_aids_vanish(self):
        sys = linear_system(np.zeros((3, 3)), [[0.0], [0.0], [1.0]], np.eye(3)[:, :1])
        ckpt = make_ckpt(sys, w_floor=0.1, lam=0.0, zero=True)
        sel = output_selector(sys, "positions")
        rng = np.random.default_rng(10)
        batch = [sample_for(sys, rng) for _ in range(8)]
        _, breakdown = total_loss(sys, ckpt, sel, batch, etas_seed=2)
        assert breakdown["risk_c3"] == 0.0
        assert breakdown["risk_c4"] == 0.0

    def test_rejects_empty_batch(self, toy):
        sys, ckpt, sel = toy
        from rccm.numerics import InvalidArgumentError

        with pytest.raises(InvalidArgumentError):
            total_loss(sys, ckpt, sel, [], etas_seed=0)

    def test_batch_matrices_match_single_builders(self, pvtol_ckpt):
        sys, ckpt = pvtol_ckpt
        sel = output_selector(sys, "positions")
        rng = np.random.default_rng(11)
        samples = [sample_for(sys, rng) for _ in range(4)]
        xs = np.stack([s.x for s in samples])
        x_stars = np.stack([s.x_star for s in samples])
        u_stars = np.stack([s.u_star for s in samples])
        ws = np.stack([s.w for s in samples])
        out = matrices_batch(sys, ckpt, sel, xs, x_stars, u_stars, ws)
        for k, s in enumerate(samples):
            assert np.allclose(out["C1"][k], build_C1(sys, ckpt, s).entries, atol=1e-12)
            assert np.allclose(out["C2"][k], build_C2(sys, ckpt, sel, s).entries, atol=1e-12)


class TestLossGradient:
    def setup_small(self):
        sys = make_system("pvtol")
        ckpt = make_ckpt(sys, seed=21, hidden=8, c=4)
        sel = output_selector(sys, "positions")
        st = LossSetup(sys=sys, sel=sel, lam=0.5, w_floor=0.1, c=4)
        consts = _make_consts(st)
        params = pack_trainables(ckpt)
        rng = np.random.default_rng(12)
        batch = (
            sys.x_set.sample(rng, 4),
            sys.x_set.sample(rng, 4),
            sys.u_set.sample(rng, 4),
            rng.uniform(-0.5, 0.5, size=(4, sys.l)),
        )
        return st, consts, params, batch

    def test_gradient_matches_finite_differences(self):
        from oracles import smooth_fd_coords

        st, consts, params, batch = self.setup_small()
        value, grad, _ = loss_and_grad(st, consts, params, batch, etas_seed=3)
        rng = np.random.default_rng(13)

        def loss_flat(flat):
            v, _, _ = loss_and_grad(st, consts, params.replace(flat), batch, 3)
            return v

        coords = rng.choice(params.size, size=12, replace=False)
        for j, want in smooth_fd_coords(loss_flat, params.values, coords, 10, rng):
            assert grad[j] == pytest.approx(want, rel=1e-4, abs=1e-8)

    def test_gradient_deterministic_bitwise(self):
        st, consts, params, batch = self.setup_small()
        _, g1, _ = loss_and_grad(st, consts, params, batch, etas_seed=4)
        _, g2, _ = loss_and_grad(st, consts, params, batch, etas_seed=4)
        assert np.array_equal(g1, g2)

    def test_etas_shapes(self):
        st, _, _, _ = self.setup_small()
        e1, e2, e3 = batch_etas(st, count=6, seed=5)
        assert e1.shape == (6, 16, 7)
        assert e2.shape == (6, 16, 7)
        assert e3.shape == (6, 16, 4)
