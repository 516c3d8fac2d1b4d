"""Post-training tube refinement for new output selectors.

With the networks frozen, only the gain pair (alpha, mu) is optimized
for a user-chosen output, minimizing  L_PD(-C1) + L_PD(C2) + alpha  on a
fresh sample set.  The unweighted hinge is a soft constraint, so the raw
descent endpoint can undershoot the certified edge (the +alpha pull also
leaks into mu through the shared softplus coupling); the refiner
therefore tracks certification (penalty residual <= tol on the full
refinement set with held-out directions) along the path, anchors on any
certifiable point, and bisects alpha down to the certified edge (C2
feasibility is monotone in alpha, so bisection is sound).  A gradient
path that stalls more than 10% above the bisected edge is logged as a
warning.  Results that never certify come back flagged with the
achieved residual.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .certificates import c1c2_components_batch
from .certnets import CertificateCheckpoint, GainParams, TubeEntry, softplus
from .numerics import InvalidArgumentError, derive_seed, sample_unit_vectors
from .systems import ControlAffineSystem, OutputSelector
from .training import AdamState, adam_step, sample_dataset_arrays

log = logging.getLogger("rccm.refinement")


@dataclass(frozen=True)
class RefineResult:
    """Registered gain for one selector plus the raw descent endpoint."""

    alpha: float
    mu: float
    residual: float
    certified: bool
    final_alpha: float
    final_mu: float
    alpha_trace: tuple
    checkpoint: CertificateCheckpoint


class _QuadForms:
    """Cached quadratic forms so any (alpha, mu) residual costs O(N xi)."""

    def __init__(self, comp: dict, etas1: np.ndarray, etas2: np.ndarray, n: int):
        ex1, ew1 = etas1[..., :n], etas1[..., n:]
        ex2, ew2 = etas2[..., :n], etas2[..., n:]
        self.t1 = (np.einsum("bki,bij,bkj->bk", ex1, comp["S"], ex1)
                   + 2.0 * np.einsum("bki,bil,bkl->bk", ex1, comp["MB"], ew1))
        self.nw1 = (ew1 ** 2).sum(-1)
        lam_m = comp["lamM"]
        self.g = np.einsum("bki,bij,bkj->bk", ex2, lam_m, ex2)
        self.h = np.einsum("bki,bij,bkj->bk", ex2, comp["CtC"], ex2)
        self.nw2 = (ew2 ** 2).sum(-1)

    def residual(self, alpha: float, mu: float) -> float:
        q1 = self.t1 - mu * self.nw1
        q2 = self.g - self.h / alpha + (alpha - mu) * self.nw2
        return float(np.maximum(q1, 0.0).mean() + np.maximum(-q2, 0.0).mean())


def _descent(comp: dict, n: int, l: int, gains0: GainParams, steps: int, lr: float,
             batch_size: int, seed: int, xi: int, forms: _QuadForms,
             tol: float) -> tuple:
    count = comp["S"].shape[0]
    raw = np.array([gains0.raw_a, gains0.raw_b])
    state = AdamState.fresh(2)
    trace = []
    best = None  # (alpha, mu, residual)

    def note_candidate(alpha, mu):
        nonlocal best
        res = forms.residual(alpha, mu)
        if res <= tol and (best is None or alpha < best[0]):
            best = (alpha, mu, res)

    mu0, alpha0 = gains0.mu, gains0.alpha
    note_candidate(alpha0, mu0)
    rng_perm = np.random.Generator(np.random.Philox(key=derive_seed(seed, "refine-perm")))
    for step in range(steps):
        idx = rng_perm.integers(0, count, size=min(batch_size, count))
        e1 = sample_unit_vectors(
            n + l, len(idx) * xi, derive_seed(seed, "refine-e1", step)
        ).vectors.reshape(len(idx), xi, n + l)
        e2 = sample_unit_vectors(
            n + l, len(idx) * xi, derive_seed(seed, "refine-e2", step)
        ).vectors.reshape(len(idx), xi, n + l)
        ex1, ew1 = e1[..., :n], e1[..., n:]
        ex2, ew2 = e2[..., :n], e2[..., n:]

        sig_a = 1.0 / (1.0 + np.exp(-raw[0]))
        sig_b = 1.0 / (1.0 + np.exp(-raw[1]))
        mu = softplus(raw[0])
        alpha = mu + softplus(raw[1])

        t1 = (np.einsum("bki,bij,bkj->bk", ex1, comp["S"][idx], ex1)
              + 2.0 * np.einsum("bki,bil,bkl->bk", ex1, comp["MB"][idx], ew1))
        nw1 = (ew1 ** 2).sum(-1)
        q1 = t1 - mu * nw1
        act1 = q1 > 0.0

        g = np.einsum("bki,bij,bkj->bk", ex2, comp["lamM"][idx], ex2)
        h = np.einsum("bki,bij,bkj->bk", ex2, comp["CtC"][idx], ex2)
        nw2 = (ew2 ** 2).sum(-1)
        q2 = g - h / alpha + (alpha - mu) * nw2
        act2 = q2 < 0.0

        # d loss / d mu and d loss / d alpha of the two hinge means + alpha
        dmu = (-(nw1 * act1).mean()) + (nw2 * act2).mean()
        dalpha = (-((h / alpha ** 2 + nw2) * act2)).mean() + 1.0
        grad = np.array([(dmu + dalpha) * sig_a, dalpha * sig_b])
        raw, state = adam_step(raw, grad, state, lr)

        mu = softplus(raw[0])
        alpha = mu + softplus(raw[1])
        trace.append(alpha)
        note_candidate(alpha, mu)
    return raw, trace, best


def _feasible_mu(forms: _QuadForms, alpha: float, tol: float,
                 mu_grid: np.ndarray):
    for mu in mu_grid[mu_grid < alpha]:
        if forms.residual(alpha, float(mu)) <= tol:
            return float(mu)
    return None


def _find_anchor(forms: _QuadForms, start: float, tol: float,
                 mu_grid: np.ndarray):
    """Search upward in alpha for any certifiable point (C2 relaxes as
    alpha grows, so certifiability is monotone in alpha)."""
    alpha = max(start, 1e-3)
    for _ in range(40):
        mu = _feasible_mu(forms, alpha, tol, mu_grid)
        if mu is not None:
            return alpha, mu
        alpha *= 2.0
    return None


def _bisect_alpha(forms: _QuadForms, hi: float, mu_hi: float, tol: float,
                  mu_grid: np.ndarray) -> tuple:
    """Smallest certifiable alpha (0.1% relative) below a feasible anchor."""
    lo = hi / 64.0
    mu_lo = _feasible_mu(forms, lo, tol, mu_grid)
    if mu_lo is not None:
        return lo, mu_lo
    for _ in range(60):
        mid = float(np.sqrt(lo * hi))
        mu_mid = _feasible_mu(forms, mid, tol, mu_grid)
        if mu_mid is not None:
            hi, mu_hi = mid, mu_mid
        else:
            lo = mid
        if hi / lo < 1.001:
            break
    return hi, mu_hi


def refine_gain(ckpt: CertificateCheckpoint, sys: ControlAffineSystem,
                sel: OutputSelector, n_samples: int = 20_000, seed: int = 0,
                steps: int = 2000, lr: float = 0.01, batch_size: int = 2048,
                xi: int = 16, penalty_tol: float = 1e-4,
                init_gains: GainParams | None = None) -> RefineResult:
    """Minimize the tube gain for ``sel`` with the networks held fixed.

    Registers the result in the checkpoint's tube registry under
    ``sel.label`` and returns it with the achieved penalty residual;
    ``certified`` is False when no (alpha, mu) reaches ``penalty_tol``.
    """
    if n_samples < 1 or steps < 1:
        raise InvalidArgumentError("n_samples and steps must be >= 1")
    if ckpt.system != sys.name:
        raise InvalidArgumentError(
            f"checkpoint is for '{ckpt.system}', not '{sys.name}'")
    n, l = sys.n, sys.l
    gains0 = init_gains if init_gains is not None else ckpt.gains

    data = sample_dataset_arrays(sys, n_samples, derive_seed(seed, "refine-data"))
    comp = c1c2_components_batch(sys, ckpt, sel, *data)
    comp["lamM"] = ckpt.hyper.lam * comp["M"]
    calc = comp["calC"]
    ctc = np.einsum("bki,bkj->bij", calc, calc)
    comp["CtC"] = 0.5 * (ctc + ctc.transpose(0, 2, 1))

    eval_e1 = sample_unit_vectors(n + l, n_samples * xi,
                                  derive_seed(seed, "refine-eval-e1")
                                  ).vectors.reshape(n_samples, xi, n + l)
    eval_e2 = sample_unit_vectors(n + l, n_samples * xi,
                                  derive_seed(seed, "refine-eval-e2")
                                  ).vectors.reshape(n_samples, xi, n + l)
    forms = _QuadForms(comp, eval_e1, eval_e2, n)

    raw, trace, best = _descent(comp, n, l, gains0, steps, lr, batch_size, seed,
                                xi, forms, penalty_tol)
    final_mu = softplus(raw[0])
    final_alpha = final_mu + softplus(raw[1])

    mu_grid = np.unique(np.concatenate([
        np.geomspace(1e-3, 1e3, 80),
        [gains0.mu, final_mu, softplus(raw[0])],
    ]))
    anchor = best[:2] if best is not None else _find_anchor(
        forms, final_alpha, penalty_tol, mu_grid)

    if anchor is None:
        residual = forms.residual(final_alpha, final_mu)
        log.warning("refinement of '%s' did not certify: residual %.3g > %.3g",
                    sel.label, residual, penalty_tol)
        alpha, mu, certified = final_alpha, final_mu, False
    else:
        alpha, mu = _bisect_alpha(forms, anchor[0], anchor[1], penalty_tol, mu_grid)
        residual = forms.residual(alpha, mu)
        certified = True
        if best is not None and best[0] > 1.1 * alpha:
            log.warning(
                "gradient refinement stalled at alpha %.4g; certified edge is "
                "%.4g (>10%% gap)", best[0], alpha)

    entry = TubeEntry(alpha=float(alpha), mu=float(mu), residual=float(residual),
                      certified=certified)
    new_ckpt = ckpt.with_tube(sel.label, entry)
    return RefineResult(alpha=float(alpha), mu=float(mu), residual=float(residual),
                        certified=certified, final_alpha=float(final_alpha),
                        final_mu=float(final_mu), alpha_trace=tuple(trace),
                        checkpoint=new_ckpt)
