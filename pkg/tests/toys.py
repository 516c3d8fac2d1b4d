"""Tiny hand-analyzable systems used across the test suite."""

import numpy as np
import torch

from rccm.autodiff import tensor
from rccm.systems import BoxSet, ControlAffineSystem


def linear_system(A, B, Bw, name="linear", box=2.0):
    """dx/dt = A x + B u + Bw w with symmetric box sets of half-width box."""
    A, B, Bw = (np.asarray(m, dtype=float) for m in (A, B, Bw))
    n, m = B.shape
    l = Bw.shape[1]
    A_t, B_t, Bw_t = tensor(A), tensor(B), tensor(Bw)

    return ControlAffineSystem(
        name=name, n=n, m=m, l=l,
        f_t=lambda x: torch.einsum("ij,...j->...i", A_t, x),
        b_t=lambda x: B_t,
        bw_t=lambda x: Bw_t,
        x_set=BoxSet(np.full(n, -box), np.full(n, box)),
        u_set=BoxSet(np.full(m, -box), np.full(m, box)),
        x0_set=BoxSet(np.full(n, -0.5), np.full(n, 0.5)),
        xe0_set=BoxSet(np.full(n, -0.5), np.full(n, 0.5)),
        sigma=1.0,
        position_coords=tuple(range(min(n, 2))),
        translation_invariant_coords=(),
        params={"A": A},
        const_b=B,
        const_bw=Bw,
    )


def scalar_toy():
    """dx/dt = -x + u + w; the certificate W = 1, K = 0 is analyzable by hand."""
    return linear_system(np.array([[-1.0]]), np.array([[1.0]]), np.array([[1.0]]),
                         name="scalar_toy", box=1.0)


def double_integrator():
    """dx1/dt = x2, dx2/dt = u."""
    return linear_system(np.array([[0.0, 1.0], [0.0, 0.0]]),
                         np.array([[0.0], [1.0]]),
                         np.array([[0.0], [1.0]]),
                         name="double_integrator")


def toy_certificate(lam=0.5, alpha=4.0, mu=1.0):
    """Scalar toy with the hand certificate W = 1, K = 0 baked into zeroed nets.

    Returns (system, checkpoint, selector). C1 = [[-1.5, 1], [1, -mu]] and
    C2 = diag(lam - 1/alpha, alpha - mu) at the defaults, so the analytic
    gain edge is alpha = 1/lam = 2.
    """
    from rccm.certnets import (CertificateCheckpoint, GainParams, Hyperparams,
                               init_controller, init_metric)
    from rccm.systems import output_selector

    sys = scalar_toy()
    rng = np.random.default_rng(0)
    ckpt = CertificateCheckpoint(
        system=sys.name,
        hyper=Hyperparams(lam=lam, w_floor=1.0, hidden=8, c=4, seed=0),
        metric=init_metric(sys.n, 8, 1.0, rng, zero=True),
        controller=init_controller(sys.n, sys.m, 8, 4, rng, zero=True),
        gains=GainParams.from_alpha_mu(alpha=alpha, mu=mu),
    )
    sel = output_selector(sys, "custom", C=[[1.0]], D=[[0.0]], label="state")
    return sys, ckpt, sel
