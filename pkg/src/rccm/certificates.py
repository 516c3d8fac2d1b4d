"""Certificate matrices and the training risks.

Four matrix conditions are assembled at sample points: the robust
contraction pair C1 (the disturbed-contraction LMI) and C2 (the output
gain LMI), plus the two plain-contraction aids C3 and C4 on the
unactuated directions.  Their hinge penalties, a Frobenius penalty on
C4, and the gain itself form the training loss

    mean[ L_PD(-C1) + L_PD(C2) + L_PD(-C3) + sum_j ||C4_j||_F ] + alpha.

The sampled-hinge penalty uses fresh unit directions per batch from the
counter-based stream in :mod:`rccm.numerics`.

One torch core assembles everything per sample and is shared by the
public single-sample builders, the batched loss (under grad/vmap), and
the verification sweeps, so all consumers see identical matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch.func import grad_and_value, jacfwd, vmap

from .autodiff import DTYPE, ParamVector, tensor
from .certnets import (
    CertificateCheckpoint,
    GainParams,
    controller_forward_t,
    metric_forward_t,
)
from .numerics import InvalidArgumentError, SymMatrix, sample_unit_vectors
from .systems import ControlAffineSystem, OutputSelector

LIE_SIGNS = {"paper": 1.0, "dual": -1.0}


@dataclass(frozen=True)
class SamplePoint:
    """One training/evaluation sample (x, x*, u*, w)."""

    x: np.ndarray
    x_star: np.ndarray
    u_star: np.ndarray
    w: np.ndarray


@dataclass(frozen=True)
class CertificateMatrices:
    """Assembled certificate blocks at one sample, with intermediates."""

    C1: SymMatrix
    C2: SymMatrix
    C3: SymMatrix | None
    C4: tuple
    intermediates: dict = field(repr=False)


@dataclass(frozen=True)
class LossSetup:
    """Static context for certificate assembly on one system/selector."""

    sys: ControlAffineSystem
    sel: OutputSelector
    lam: float
    w_floor: float
    c: int
    lie_sign_key: str = "paper"
    xi: int = 16

    def __post_init__(self):
        if self.lie_sign_key not in LIE_SIGNS:
            raise InvalidArgumentError(f"unknown ccm_lie_sign '{self.lie_sign_key}'")

    @property
    def lie_sign(self) -> float:
        return LIE_SIGNS[self.lie_sign_key]

    def bperp(self) -> np.ndarray | None:
        from .numerics import EmptyAnnihilatorError

        try:
            return self.sys.annihilator(self.sys.x_set.center())
        except EmptyAnnihilatorError:
            return None


def _softplus_t(x: torch.Tensor) -> torch.Tensor:
    # Mirrors certnets.softplus exactly (no threshold shortcut).
    return torch.where(x > 0, x + torch.log1p(torch.exp(-x)), torch.log1p(torch.exp(x)))


def gains_from_tensors(p: dict) -> tuple:
    mu = _softplus_t(p["raw_a"])
    alpha = mu + _softplus_t(p["raw_b"])
    return alpha, mu


def pack_trainables(ckpt: CertificateCheckpoint) -> ParamVector:
    """Concatenate metric, controller, and raw gain parameters."""
    named = ckpt.metric.theta.unpack()
    named.update(ckpt.controller.theta.unpack())
    named["raw_a"] = np.array(ckpt.gains.raw_a)
    named["raw_b"] = np.array(ckpt.gains.raw_b)
    return ParamVector.pack(named)


def _sym(mat: torch.Tensor) -> torch.Tensor:
    return 0.5 * (mat + mat.mT)


def _sample_core(p: dict, st: LossSetup, consts: dict,
                 x: torch.Tensor, x_star: torch.Tensor, u_star: torch.Tensor,
                 w: torch.Tensor, alpha: torch.Tensor, mu: torch.Tensor) -> dict:
    """Assemble all certificate blocks at a single sample point.

    Stays traceable under vmap/jacfwd/grad; every matrix computation
    that should be symmetric is explicitly symmetrized so downstream
    quadratic forms never see asymmetry beyond rounding.
    """
    sys, n, m, l = st.sys, st.sys.n, st.sys.m, st.sys.l

    def ctrl(a):
        out = controller_forward_t(p, a, x_star, u_star, n, m, st.c)
        return out, out

    K, u = jacfwd(ctrl, has_aux=True)(x)

    def metric(a):
        out = metric_forward_t(p, a, st.w_floor, n)
        return out, out

    dWdx, W = jacfwd(metric, has_aux=True)(x)

    def drift(a):
        out = sys.f_t(a)
        return out, out

    Jf, f = jacfwd(drift, has_aux=True)(x)

    B = sys.b_t(x)
    Bw = sys.bw_t(x)
    M = _sym(torch.linalg.inv(W))

    xdot = f + B @ u + Bw @ w
    Wdot = torch.einsum("ijk,k->ij", dWdx, xdot)
    Mdot = -_sym(M @ Wdot @ M)

    A = Jf
    dB = None
    if sys.const_b is None:
        dB = jacfwd(sys.b_t)(x)  # dB[i, j, k] = d B[i, j] / d x_k
        A = A + torch.einsum("ijk,j->ik", dB, u)
    if sys.const_bw is None:
        dBw = jacfwd(sys.bw_t)(x)
        A = A + torch.einsum("ijk,j->ik", dBw, w)
    Acl = A + B @ K

    eye_l = consts["eye_l"]
    MA = M @ Acl
    top_left = MA + MA.mT + Mdot + st.lam * M
    MB = M @ Bw
    c1 = torch.cat(
        [torch.cat([top_left, MB], dim=-1),
         torch.cat([MB.mT, -mu * eye_l], dim=-1)],
        dim=-2,
    )

    calC = consts["sel_C"] + consts["sel_D"] @ K
    upper = st.lam * M - _sym(calC.mT @ calC) / alpha
    c2 = torch.cat(
        [torch.cat([upper, consts["zero_nl"]], dim=-1),
         torch.cat([consts["zero_ln"], (alpha - mu) * eye_l], dim=-1)],
        dim=-2,
    )

    out = {
        "C1": c1, "C2": c2, "u": u, "K": K, "W": W, "M": M,
        "Wdot": Wdot, "Mdot": Mdot, "A": A, "Acl": Acl, "xdot": xdot,
        "calC": calC,
    }

    bperp = consts.get("bperp")
    if bperp is not None:
        lie_f = torch.einsum("ijk,k->ij", dWdx, f)
        JfW = Jf @ W
        inner3 = st.lie_sign * lie_f + (JfW + JfW.mT) + 2.0 * st.lam * W
        out["C3"] = _sym(bperp.mT @ inner3 @ bperp)
        c4 = []
        for j in range(m):
            lie_bj = torch.einsum("ijk,k->ij", dWdx, B[..., :, j])
            inner4 = lie_bj
            if dB is not None:
                jb = dB[:, j, :] @ W
                inner4 = inner4 - (jb + jb.mT)
            c4.append(_sym(bperp.mT @ inner4 @ bperp))
        out["C4"] = torch.stack(c4, dim=0)
    return out


def _make_consts(st: LossSetup) -> dict:
    n, l = st.sys.n, st.sys.l
    consts = {
        "eye_l": torch.eye(l, dtype=DTYPE),
        "zero_nl": torch.zeros(n, l, dtype=DTYPE),
        "zero_ln": torch.zeros(l, n, dtype=DTYPE),
        "sel_C": tensor(st.sel.C),
        "sel_D": tensor(st.sel.D),
    }
    bperp = st.bperp()
    if bperp is not None:
        consts["bperp"] = tensor(bperp)
    return consts


def _hinge(etas: torch.Tensor, mat: torch.Tensor) -> torch.Tensor:
    # mean_j max(0, eta_j^T mat eta_j): the L_PD hinge of -mat.
    quad = torch.einsum("ki,ij,kj->k", etas, mat, etas)
    return torch.relu(quad).mean()


def batch_etas(st: LossSetup, count: int, seed: int, xi: int | None = None):
    """Per-sample unit directions for (C1, C2, C3) penalties."""
    xi = st.xi if xi is None else xi
    n, l = st.sys.n, st.sys.l
    bperp = st.bperp()
    e1 = sample_unit_vectors(n + l, count * xi, seed).vectors.reshape(count, xi, n + l)
    e2 = sample_unit_vectors(n + l, count * xi, seed + 1).vectors.reshape(count, xi, n + l)
    if bperp is None:
        e3 = np.zeros((count, xi, 1))
    else:
        k = bperp.shape[1]
        e3 = sample_unit_vectors(k, count * xi, seed + 2).vectors.reshape(count, xi, k)
    return tensor(e1), tensor(e2), tensor(e3)


def _loss_t(p: dict, st: LossSetup, consts: dict, xs, x_stars, u_stars, ws,
            e1, e2, e3) -> tuple:
    alpha, mu = gains_from_tensors(p)
    has_perp = "bperp" in consts

    def per_sample(x, x_star, u_star, w, eta1, eta2, eta3):
        mats = _sample_core(p, st, consts, x, x_star, u_star, w, alpha, mu)
        p1 = _hinge(eta1, mats["C1"])          # L_PD(-C1)
        p2 = _hinge(eta2, -mats["C2"])         # L_PD(C2)
        if has_perp:
            p3 = _hinge(eta3, mats["C3"])      # L_PD(-C3)
            p4 = torch.linalg.matrix_norm(mats["C4"]).sum()
        else:
            p3 = torch.zeros((), dtype=DTYPE)
            p4 = torch.zeros((), dtype=DTYPE)
        return torch.stack([p1, p2, p3, p4])

    terms = vmap(per_sample)(xs, x_stars, u_stars, ws, e1, e2, e3)  # (batch, 4)
    risks = terms.mean(dim=0)
    loss = risks.sum() + alpha
    return loss, terms, risks, alpha


def _batch_tensors(batch) -> tuple:
    if isinstance(batch, tuple) and len(batch) == 4 and isinstance(batch[0], np.ndarray):
        xs, x_stars, u_stars, ws = batch
    else:
        xs = np.stack([s.x for s in batch])
        x_stars = np.stack([s.x_star for s in batch])
        u_stars = np.stack([s.u_star for s in batch])
        ws = np.stack([s.w for s in batch])
    return tensor(xs), tensor(x_stars), tensor(u_stars), tensor(ws)


def _breakdown(loss, risks, alpha) -> dict:
    return {
        "risk_c1": float(risks[0]),
        "risk_c2": float(risks[1]),
        "risk_c3": float(risks[2]),
        "risk_c4": float(risks[3]),
        "alpha": float(alpha),
        "total": float(loss),
    }


def total_loss(sys: ControlAffineSystem, ckpt: CertificateCheckpoint,
               sel: OutputSelector, batch, etas_seed: int,
               lie_sign: str = "paper", xi: int = 16) -> tuple:
    """Batch-mean certificate loss with its per-term breakdown."""
    if isinstance(batch, (list, tuple)) and len(batch) == 0:
        raise InvalidArgumentError("batch must be nonempty")
    st = LossSetup(sys=sys, sel=sel, lam=ckpt.hyper.lam, w_floor=ckpt.hyper.w_floor,
                   c=ckpt.controller.c, lie_sign_key=lie_sign, xi=xi)
    consts = _make_consts(st)
    params = pack_trainables(ckpt).to_tensors()
    xs, x_stars, u_stars, ws = _batch_tensors(batch)
    e1, e2, e3 = batch_etas(st, xs.shape[0], etas_seed)
    loss, terms, risks, alpha = _loss_t(params, st, consts, xs, x_stars, u_stars, ws,
                                        e1, e2, e3)
    if not torch.isfinite(loss):
        bad = torch.nonzero(~torch.isfinite(terms).all(dim=-1)).flatten()
        idx = int(bad[0]) if bad.numel() else -1
        raise OverflowError(f"non-finite loss contribution at sample index {idx}")
    return float(loss), _breakdown(loss, risks, alpha)


def loss_and_grad(st: LossSetup, consts: dict, params: ParamVector, batch,
                  etas_seed: int) -> tuple:
    """Loss, flat parameter gradient, and per-term breakdown for one batch."""
    xs, x_stars, u_stars, ws = _batch_tensors(batch)
    e1, e2, e3 = batch_etas(st, xs.shape[0], etas_seed)
    holder = {}

    def objective(p):
        loss, _, risks, alpha = _loss_t(p, st, consts, xs, x_stars, u_stars, ws,
                                        e1, e2, e3)
        holder["risks"] = tuple(float(r.detach()) for r in risks)
        holder["alpha"] = float(alpha.detach())
        return loss

    grads, value = grad_and_value(objective)(params.to_tensors())
    flat = np.concatenate([grads[name].detach().numpy().ravel() for name, _ in params.layout])
    breakdown = _breakdown(value, holder["risks"], holder["alpha"])
    return float(value), flat, breakdown


# -- public single-sample builders ---------------------------------------

def _single(sys: ControlAffineSystem, ckpt: CertificateCheckpoint,
            sel: OutputSelector | None, s: SamplePoint, lie_sign: str) -> dict:
    if sel is None:
        sel = OutputSelector(C=np.eye(sys.n), D=np.zeros((sys.n, sys.m)), label="identity")
    st = LossSetup(sys=sys, sel=sel, lam=ckpt.hyper.lam, w_floor=ckpt.hyper.w_floor,
                   c=ckpt.controller.c, lie_sign_key=lie_sign)
    consts = _make_consts(st)
    p = pack_trainables(ckpt).to_tensors()
    alpha, mu = gains_from_tensors(p)
    return _sample_core(p, st, consts, tensor(s.x), tensor(s.x_star),
                        tensor(s.u_star), tensor(s.w), alpha, mu)


def closed_loop_xdot(sys: ControlAffineSystem, ckpt: CertificateCheckpoint,
                     s: SamplePoint) -> np.ndarray:
    """dx/dt of the closed loop: dynamics at u = u* + k(x, x*)."""
    from .certnets import controller_u

    u = controller_u(ckpt.controller, s.x, s.x_star, s.u_star)
    return sys.dynamics(np.asarray(s.x, float), u, np.asarray(s.w, float))


def build_C1(sys, ckpt, s: SamplePoint, lie_sign: str = "paper") -> SymMatrix:
    """LHS of the disturbed-contraction LMI; must be negative semidefinite."""
    return SymMatrix.from_array(_single(sys, ckpt, None, s, lie_sign)["C1"].numpy())


def build_C2(sys, ckpt, sel: OutputSelector, s: SamplePoint,
             gains: GainParams | None = None) -> SymMatrix:
    """LHS of the output-gain LMI for ``sel``; must be positive semidefinite."""
    from dataclasses import replace

    if gains is not None:
        ckpt = replace(ckpt, gains=gains)
    return SymMatrix.from_array(_single(sys, ckpt, sel, s, "paper")["C2"].numpy())


def build_C3(sys, ckpt, x: np.ndarray, lie_sign: str = "paper") -> SymMatrix | None:
    """Unactuated contraction block; None marks an empty annihilator."""
    s = SamplePoint(x=np.asarray(x, float), x_star=np.zeros(sys.n),
                    u_star=np.zeros(sys.m), w=np.zeros(sys.l))
    mats = _single(sys, ckpt, None, s, lie_sign)
    if "C3" not in mats:
        return None
    return SymMatrix.from_array(mats["C3"].numpy())


def build_C4(sys, ckpt, x: np.ndarray) -> tuple | None:
    """Per-input-column metric-invariance blocks; None when no annihilator."""
    s = SamplePoint(x=np.asarray(x, float), x_star=np.zeros(sys.n),
                    u_star=np.zeros(sys.m), w=np.zeros(sys.l))
    mats = _single(sys, ckpt, None, s, "paper")
    if "C4" not in mats:
        return None
    return tuple(SymMatrix.from_array(c.numpy()) for c in mats["C4"])


def build_all(sys, ckpt, sel: OutputSelector, s: SamplePoint,
              lie_sign: str = "paper") -> CertificateMatrices:
    """All certificate blocks plus intermediates at one sample."""
    mats = _single(sys, ckpt, sel, s, lie_sign)
    inter = {k: mats[k].numpy() for k in ("u", "K", "W", "M", "Wdot", "Mdot", "A", "Acl", "xdot")}
    return CertificateMatrices(
        C1=SymMatrix.from_array(mats["C1"].numpy()),
        C2=SymMatrix.from_array(mats["C2"].numpy()),
        C3=SymMatrix.from_array(mats["C3"].numpy()) if "C3" in mats else None,
        C4=tuple(SymMatrix.from_array(c.numpy()) for c in mats.get("C4", ())),
        intermediates=inter,
    )


def c1c2_components_batch(sys: ControlAffineSystem, ckpt: CertificateCheckpoint,
                          sel: OutputSelector, xs, x_stars, u_stars, ws) -> dict:
    """Gain-independent pieces of C1/C2 on a batch, with theta frozen.

    Returns numpy arrays S = <M Acl> + Mdot + lam M (the C1 top-left
    block), MB = M B_w, M itself, and calC = C + D K, from which C1 and
    C2 can be reassembled for any (alpha, mu) without touching the
    networks.
    """
    st = LossSetup(sys=sys, sel=sel, lam=ckpt.hyper.lam, w_floor=ckpt.hyper.w_floor,
                   c=ckpt.controller.c)
    consts = _make_consts(st)
    consts.pop("bperp", None)
    p = pack_trainables(ckpt).to_tensors()
    alpha, mu = gains_from_tensors(p)
    n = sys.n

    def per_sample(x, x_star, u_star, w):
        mats = _sample_core(p, st, consts, x, x_star, u_star, w, alpha, mu)
        s_block = mats["C1"][:n, :n]
        mb = mats["C1"][:n, n:]
        return s_block, mb, mats["M"], mats["calC"]

    s_blk, mb, m_mat, calc = vmap(per_sample)(
        tensor(xs), tensor(x_stars), tensor(u_stars), tensor(ws))
    return {"S": s_blk.numpy(), "MB": mb.numpy(), "M": m_mat.numpy(),
            "calC": calc.numpy()}


def intermediates_batch(sys: ControlAffineSystem, ckpt: CertificateCheckpoint,
                        sel: OutputSelector, xs, x_stars, u_stars, ws) -> dict:
    """Stacked intermediate maps (W, M, Mdot, A, K, u) over a batch."""
    st = LossSetup(sys=sys, sel=sel, lam=ckpt.hyper.lam, w_floor=ckpt.hyper.w_floor,
                   c=ckpt.controller.c)
    consts = _make_consts(st)
    consts.pop("bperp", None)
    p = pack_trainables(ckpt).to_tensors()
    alpha, mu = gains_from_tensors(p)
    keys = ("W", "M", "Mdot", "A", "K", "u")

    def per_sample(x, x_star, u_star, w):
        mats = _sample_core(p, st, consts, x, x_star, u_star, w, alpha, mu)
        return tuple(mats[k] for k in keys)

    out = vmap(per_sample)(tensor(xs), tensor(x_stars), tensor(u_stars), tensor(ws))
    return {k: v.numpy() for k, v in zip(keys, out)}


def matrices_batch(sys: ControlAffineSystem, ckpt: CertificateCheckpoint,
                   sel: OutputSelector, xs, x_stars, u_stars, ws,
                   gains: GainParams | None = None,
                   lie_sign: str = "paper", with_aids: bool = True) -> dict:
    """Stacked C1/C2 (and C3/C4 when available) over a batch of samples."""
    st = LossSetup(sys=sys, sel=sel, lam=ckpt.hyper.lam, w_floor=ckpt.hyper.w_floor,
                   c=ckpt.controller.c, lie_sign_key=lie_sign)
    consts = _make_consts(st)
    if not with_aids:
        consts.pop("bperp", None)
    p = pack_trainables(ckpt).to_tensors()
    if gains is not None:
        p["raw_a"] = tensor(np.array(gains.raw_a))
        p["raw_b"] = tensor(np.array(gains.raw_b))
    alpha, mu = gains_from_tensors(p)
    keys = ["C1", "C2"] + (["C3", "C4"] if "bperp" in consts else [])

    def per_sample(x, x_star, u_star, w):
        mats = _sample_core(p, st, consts, x, x_star, u_star, w, alpha, mu)
        return tuple(mats[k] for k in keys)

    out = vmap(per_sample)(tensor(xs), tensor(x_stars), tensor(u_stars), tensor(ws))
    return {k: v.numpy() for k, v in zip(keys, out)}
