import numpy as np
import pytest

from rccm.certnets import (
    CertificateCheckpoint,
    GainParams,
    Hyperparams,
    init_controller,
    init_metric,
)
from rccm.numerics import InvalidArgumentError
from rccm.refinement import refine_gain
from rccm.systems import output_selector

from toys import scalar_toy


def toy_ckpt(lam=0.5, alpha=4.0, mu=1.0):
    sys = scalar_toy()
    rng = np.random.default_rng(0)
    return sys, CertificateCheckpoint(
        system=sys.name,
        hyper=Hyperparams(lam=lam, w_floor=1.0, hidden=8, c=4, seed=0),
        metric=init_metric(sys.n, 8, 1.0, rng, zero=True),
        controller=init_controller(sys.n, sys.m, 8, 4, rng, zero=True),
        gains=GainParams.from_alpha_mu(alpha=alpha, mu=mu),
    )


def toy_sel(sys):
    return output_selector(sys, "custom", C=[[1.0]], D=[[0.0]], label="state")


class TestRefineToy:
    # For the hand certificate the exact feasibility edge is alpha = 2:
    # lam M - C^2/alpha >= 0 with lam = 0.5, M = C = 1.
    def test_converges_to_analytic_edge(self):
        sys, ckpt = toy_ckpt()
        res = refine_gain(ckpt, sys, toy_sel(sys), n_samples=2000, seed=1,
                          steps=400)
        assert res.certified
        assert res.residual <= 1e-4
        assert abs(res.alpha - 2.0) < 0.05
        assert 0 < res.mu < res.alpha

    def test_never_worse_than_certified_init(self):
        sys, ckpt = toy_ckpt(alpha=4.0, mu=1.0)
        res = refine_gain(ckpt, sys, toy_sel(sys), n_samples=1000, seed=2, steps=50)
        assert res.alpha <= ckpt.gains.alpha + 1e-6

    def test_theta_untouched_and_registered(self):
        sys, ckpt = toy_ckpt()
        res = refine_gain(ckpt, sys, toy_sel(sys), n_samples=500, seed=3, steps=50)
        out = res.checkpoint
        assert np.array_equal(out.metric.theta.values, ckpt.metric.theta.values)
        assert np.array_equal(out.controller.theta.values, ckpt.controller.theta.values)
        assert out.revision == ckpt.revision + 1
        entry = out.tubes["state"]
        assert entry.alpha == res.alpha
        assert entry.alpha > 0
        assert entry.residual == res.residual

    def test_deterministic(self):
        sys, ckpt = toy_ckpt()
        a = refine_gain(ckpt, sys, toy_sel(sys), n_samples=500, seed=4, steps=100)
        b = refine_gain(ckpt, sys, toy_sel(sys), n_samples=500, seed=4, steps=100)
        assert a.alpha == b.alpha
        assert a.mu == b.mu
        assert a.alpha_trace == b.alpha_trace

    def test_init_independence_of_registered_gain(self):
        # Starting far above or below the edge certifies the same tube,
        # including from an infeasible initialization.
        sys, ckpt = toy_ckpt()
        hi = refine_gain(ckpt, sys, toy_sel(sys), n_samples=1000, seed=5, steps=600,
                         init_gains=GainParams.from_alpha_mu(alpha=10.0, mu=1.0))
        lo = refine_gain(ckpt, sys, toy_sel(sys), n_samples=1000, seed=5, steps=600,
                         init_gains=GainParams.from_alpha_mu(alpha=0.5, mu=0.25))
        assert hi.certified and lo.certified
        spread = abs(hi.alpha - lo.alpha) / max(hi.alpha, lo.alpha)
        assert spread < 0.05
        assert abs(hi.alpha - 2.0) < 0.05

    def test_infeasible_certificate_flagged(self):
        # lam = 10 makes the contraction block positive definite, so no
        # (alpha, mu) can certify C1; the result must carry the flag.
        sys, ckpt = toy_ckpt(lam=10.0)
        res = refine_gain(ckpt, sys, toy_sel(sys), n_samples=500, seed=6, steps=100)
        assert not res.certified
        assert res.residual > 1e-4
        assert not res.checkpoint.tubes["state"].certified

    def test_system_mismatch_rejected(self):
        sys, ckpt = toy_ckpt()
        from toys import double_integrator

        other = double_integrator()
        with pytest.raises(InvalidArgumentError):
            refine_gain(ckpt, other, output_selector(other, "positions"),
                        n_samples=10, seed=0, steps=1)
