import numpy as np
import pytest

from rccm.numerics import InvalidArgumentError
from rccm.systems import make_system
from rccm.training import (
    AdamState,
    TrainConfig,
    adam_step,
    sample_dataset,
    sample_dataset_arrays,
    train,
)


class TestSampleDataset:
    def test_containment(self):
        sys = make_system("pvtol")
        xs, x_stars, u_stars, ws = sample_dataset_arrays(sys, 2000, seed=1)
        for arr, box in ((xs, sys.x_set), (x_stars, sys.x_set), (u_stars, sys.u_set)):
            assert np.all(arr >= box.lower - 1e-12)
            assert np.all(arr <= box.upper + 1e-12)

    def test_disturbance_norm_bound(self):
        sys = make_system("quadrotor")
        _, _, _, ws = sample_dataset_arrays(sys, 5000, seed=2)
        assert np.all(np.linalg.norm(ws, axis=1) <= sys.sigma + 1e-12)

    def test_box_mode(self):
        sys = make_system("quadrotor")
        _, _, _, ws = sample_dataset_arrays(sys, 5000, seed=3, w_sampling="box")
        assert np.all(np.abs(ws) <= sys.sigma + 1e-12)
        # box mode exceeds the 2-norm ball with high probability
        assert np.any(np.linalg.norm(ws, axis=1) > sys.sigma)

    def test_seed_determinism(self):
        sys = make_system("tlpra")
        a = sample_dataset_arrays(sys, 100, seed=4)
        b = sample_dataset_arrays(sys, 100, seed=4)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
        c = sample_dataset_arrays(sys, 100, seed=5)
        assert not np.array_equal(a[0], c[0])

    def test_list_variant_matches_arrays(self):
        sys = make_system("neural_lander")
        pts = sample_dataset(sys, 50, seed=6)
        xs, x_stars, u_stars, ws = sample_dataset_arrays(sys, 50, seed=6)
        assert len(pts) == 50
        assert np.array_equal(np.stack([p.x for p in pts]), xs)
        assert np.array_equal(np.stack([p.w for p in pts]), ws)

    def test_rejects_empty(self):
        with pytest.raises(InvalidArgumentError):
            sample_dataset_arrays(make_system("pvtol"), 0, seed=0)


class TestAdamStep:
    def test_zero_gradient_is_identity(self):
        p = np.array([1.0, -2.0, 3.0])
        state = AdamState.fresh(3)
        out, state2 = adam_step(p, np.zeros(3), state, lr=0.1)
        assert np.array_equal(out, p)
        assert state2.t == 1

    def test_first_step_is_signed_lr(self):
        g = np.array([0.5, -3.0, 1e-3])
        p = np.zeros(3)
        out, _ = adam_step(p, g, AdamState.fresh(3), lr=0.01)
        # bias correction makes m_hat = g, v_hat = g^2 on the first step
        want = -0.01 * g / (np.abs(g) + 1e-8)
        assert np.allclose(out, want, atol=1e-12)

    def test_constant_gradient_fixed_point(self):
        g = np.array([2.0, -0.7])
        p = np.zeros(2)
        state = AdamState.fresh(2)
        for _ in range(100):
            p_prev = p
            p, state = adam_step(p, g, state, lr=0.05)
        step = p - p_prev
        assert np.allclose(step, -0.05 * np.sign(g), rtol=1e-6)

    def test_nonfinite_gradient_rejected(self, caplog):
        p = np.array([1.0])
        state = AdamState.fresh(1)
        with caplog.at_level("WARNING", logger="rccm.training"):
            out, state2 = adam_step(p, np.array([np.nan]), state, lr=0.1)
        assert np.array_equal(out, p)
        assert state2.t == 0
        assert any("non-finite" in rec.message for rec in caplog.records)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            adam_step(np.zeros(2), np.zeros(3), AdamState.fresh(2), lr=0.1)


def tiny_cfg(**over):
    base = dict(system="pvtol", n_train=64, epochs=2, batch_size=32,
                hidden=8, c=4, seed=11, learning_rate=1e-3)
    base.update(over)
    return TrainConfig(**base)


class TestTrain:
    def test_smoke_history_and_gains(self):
        rows = []
        ckpt = train(tiny_cfg(), on_step=lambda s, e, b: rows.append((s, e, b)))
        assert len(ckpt.history) == 4  # 2 epochs x 2 batches
        assert len(rows) == 4
        assert set(rows[0][2]) == {"risk_c1", "risk_c2", "risk_c3", "risk_c4",
                                   "alpha", "total"}
        assert ckpt.gains.alpha > ckpt.gains.mu > 0
        # history alpha column equals softplus-derived alpha at each step
        from rccm.certnets import softplus

        assert ckpt.history[-1][2] == pytest.approx(
            softplus(ckpt.gains.raw_a) + softplus(ckpt.gains.raw_b), abs=0
        )

    def test_bitwise_determinism(self):
        a = train(tiny_cfg())
        b = train(tiny_cfg())
        assert np.array_equal(a.metric.theta.values, b.metric.theta.values)
        assert np.array_equal(a.controller.theta.values, b.controller.theta.values)
        assert a.gains == b.gains
        assert a.history == b.history

    def test_seed_changes_result(self):
        a = train(tiny_cfg())
        b = train(tiny_cfg(seed=12))
        assert not np.array_equal(a.metric.theta.values, b.metric.theta.values)

    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(epochs=0)
        with pytest.raises(InvalidArgumentError):
            TrainConfig(alpha_init=1.0, mu_init=2.0)
        with pytest.raises(InvalidArgumentError):
            TrainConfig(w_sampling="gaussian")

    @pytest.mark.slow
    def test_loss_decreases_over_first_100_steps(self):
        losses = []
        train(TrainConfig(system="pvtol", n_train=6400, epochs=1, batch_size=64,
                          hidden=32, c=16, seed=7),
              on_step=lambda s, e, b: losses.append(b["total"]))
        assert len(losses) == 100
        first = np.mean(losses[:20])
        last = np.mean(losses[-20:])
        assert last < first
