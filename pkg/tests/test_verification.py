import numpy as np
import pytest

from rccm.certnets import GainParams
from rccm.numerics import InvalidArgumentError
from rccm.systems import make_system, output_selector
from rccm.verification import (
    BoundSet,
    GridTooLargeError,
    Region,
    composite_constants,
    grid_verify,
    lipschitz_constants,
    report_from_text,
    violation_rate,
)

from test_certificates import make_ckpt
from toys import toy_certificate


def toy_region(sys):
    return Region.tracking_slice(sys, np.zeros(1), np.zeros(1), np.zeros(1),
                                 x_lower=[-1.0], x_upper=[1.0])


class TestCompositeConstants:
    def test_all_ones_matches_hand_arithmetic(self):
        bounds = {k: 1.0 for k in ("L_Mdot", "S_M", "L_A", "S_A", "L_M", "S_B",
                                    "L_K", "S_K", "L_B", "S_Bw", "S_C", "S_D")}
        l10, _ = composite_constants(bounds, lam=0.5, mu=1.0, alpha=4.0)
        assert l10 == 13.5

    def test_zero_sd_reduces_to_lam_lm(self):
        bounds = {k: 1.0 for k in ("L_Mdot", "S_M", "L_A", "S_A", "L_M", "S_B",
                                    "L_K", "S_K", "L_B", "S_Bw", "S_C")}
        bounds["S_D"] = 0.0
        bounds["L_M"] = 0.37
        _, l11 = composite_constants(bounds, lam=0.5, mu=1.0, alpha=4.0)
        assert l11 == 0.5 * 0.37

    def test_bound_set_rejects_negative(self):
        with pytest.raises(InvalidArgumentError):
            BoundSet(values={"S_M": -1.0}, provenance={"S_M": "rigorous"})


class TestLipschitzConstants:
    def test_metric_floor_gives_rigorous_sm(self):
        sys = make_system("pvtol")
        ckpt = make_ckpt(sys, seed=1, w_floor=0.1)
        region = Region.full(sys)
        bounds, l10, l11 = lipschitz_constants(ckpt, sys, region, n_samples=64)
        assert bounds.values["S_M"] == 10.0
        assert bounds.provenance["S_M"] == "rigorous"
        assert bounds.provenance["L_M"] == "rigorous"
        assert bounds.provenance["S_A"] == "sampled"
        assert l10 > 0 and l11 > 0

    def test_constant_maps_are_rigorous(self):
        sys = make_system("quadrotor")
        ckpt = make_ckpt(sys, seed=2)
        bounds, _, _ = lipschitz_constants(ckpt, sys, Region.full(sys), n_samples=32)
        assert bounds.values["L_B"] == 0.0
        assert bounds.provenance["L_B"] == "rigorous"
        assert bounds.provenance["L_Bw"] == "rigorous"

    def test_sampled_sup_bounds_hold_on_fresh_samples(self):
        sys = make_system("pvtol")
        ckpt = make_ckpt(sys, seed=3)
        region = Region.full(sys)
        bounds, _, _ = lipschitz_constants(ckpt, sys, region, n_samples=256, seed=0)
        from rccm.certificates import intermediates_batch

        rng = np.random.default_rng(123)
        pts = region.sample(rng, 256)
        xs, x_stars, u_stars, ws = region.split(sys, pts)
        inter = intermediates_batch(sys, ckpt, output_selector(sys, "positions"),
                                    xs, x_stars, u_stars, ws)
        assert np.linalg.norm(inter["A"], 2, axis=(1, 2)).max() <= bounds.values["S_A"]
        assert np.linalg.norm(inter["K"], 2, axis=(1, 2)).max() <= bounds.values["S_K"]
        assert np.linalg.norm(inter["M"], 2, axis=(1, 2)).max() <= bounds.values["S_M"]


class TestGridVerify:
    def test_toy_certificate_passes(self):
        sys, ckpt, sel = toy_certificate()
        report = grid_verify(ckpt, sys, sel, toy_region(sys), tau=0.01)
        assert report.passed["eq10"] and report.passed["eq11"]
        assert report.grid_max["eq10"] == pytest.approx(-0.219223, abs=1e-4)
        assert report.grid_max["eq11"] == pytest.approx(-0.25, abs=1e-9)
        assert report.counts["grid"] >= 201

    def test_infeasible_alpha_fails_with_offenders(self):
        sys, ckpt, sel = toy_certificate(alpha=1.5)  # below the alpha = 2 edge
        report = grid_verify(ckpt, sys, sel, toy_region(sys), tau=0.01)
        assert report.passed["eq10"]
        assert not report.passed["eq11"]
        val, pt = report.worst["eq11"]
        assert val == pytest.approx(1.0 / 1.5 - 0.5, abs=1e-9)
        assert pt.shape == (4,)

    def test_margin_soundness_denser_grid_still_passes(self):
        sys, ckpt, sel = toy_certificate()
        coarse = grid_verify(ckpt, sys, sel, toy_region(sys), tau=0.02)
        fine = grid_verify(ckpt, sys, sel, toy_region(sys), tau=0.01)
        assert coarse.passed["eq10"] and coarse.passed["eq11"]
        assert fine.passed["eq10"] and fine.passed["eq11"]

    def test_grid_cap_refused_with_estimate(self):
        sys = make_system("pvtol")
        ckpt = make_ckpt(sys, seed=4)
        sel = output_selector(sys, "positions")
        with pytest.raises(GridTooLargeError):
            grid_verify(ckpt, sys, sel, Region.full(sys), tau=0.1)

    def test_rejects_bad_tau_and_region(self):
        sys, ckpt, sel = toy_certificate()
        with pytest.raises(InvalidArgumentError):
            grid_verify(ckpt, sys, sel, toy_region(sys), tau=0.0)
        bad = Region(lower=np.full(4, -10.0), upper=np.full(4, 10.0))
        with pytest.raises(InvalidArgumentError):
            grid_verify(ckpt, sys, sel, bad, tau=0.01)

    def test_report_roundtrip(self):
        sys, ckpt, sel = toy_certificate()
        report = grid_verify(ckpt, sys, sel, toy_region(sys), tau=0.05)
        back = report_from_text(report.to_text())
        assert back.tau == report.tau
        assert back.passed == report.passed
        assert back.grid_max == report.grid_max
        assert back.stat_fractions == report.stat_fractions
        assert back.constants == report.constants
        assert back.counts == report.counts
        assert np.array_equal(back.region_lower, report.region_lower)
        for k in report.worst:
            assert back.worst[k][0] == report.worst[k][0]
            assert np.array_equal(back.worst[k][1], report.worst[k][1])


class TestViolationRate:
    def test_certified_toy_has_zero_fractions(self):
        sys, ckpt, sel = toy_certificate()
        rates = violation_rate(ckpt, sys, sel, n_samples=2000, seed=1)
        assert rates == {"C1": 0.0, "C2": 0.0, "C3": 0.0, "C4": 0.0}

    def test_untrained_pvtol_violates_c1(self):
        sys = make_system("pvtol")
        ckpt = make_ckpt(sys, seed=5)
        sel = output_selector(sys, "positions")
        rates = violation_rate(ckpt, sys, sel, n_samples=500, seed=2)
        assert rates["C1"] > 0.0
        assert rates["C4"] > 0.0

    def test_rejects_empty(self):
        sys, ckpt, sel = toy_certificate()
        with pytest.raises(InvalidArgumentError):
            violation_rate(ckpt, sys, sel, n_samples=0, seed=0)

    def test_deterministic(self):
        sys = make_system("pvtol")
        ckpt = make_ckpt(sys, seed=6)
        sel = output_selector(sys, "positions")
        a = violation_rate(ckpt, sys, sel, n_samples=300, seed=3)
        b = violation_rate(ckpt, sys, sel, n_samples=300, seed=3)
        assert a == b
