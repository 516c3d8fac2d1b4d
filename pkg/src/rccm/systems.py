"""Benchmark dynamics, output maps, Jacobians, and compact sets.

Four disturbed control-affine systems are provided behind one uniform
interface: a planar VTOL aircraft, a 10-state quadrotor, the neural
lander (with an analytic ground-effect surrogate), and a two-link
planar robotic arm.  Dynamics are written once as torch functions that
broadcast over leading batch axes and stay traceable under vmap/jacfwd;
the public API converts numpy in and out.

The quadrotor drift is implemented exactly as printed in its source,
which reuses sin(theta) where the conventional model has cos(theta);
``quad_drift_convention="conventional"`` switches to the textbook form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch.func import jacfwd

from .autodiff import tensor
from .numerics import InvalidArgumentError, null_space_basis

GRAVITY = 9.81


@dataclass(frozen=True)
class BoxSet:
    """An axis-aligned box; degenerate (lower == upper) axes are allowed."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise InvalidArgumentError("box bounds must satisfy lower <= upper elementwise")

    @property
    def dim(self) -> int:
        return self.lower.size

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        u = rng.uniform(size=(count, self.dim))
        return self.lower + u * (self.upper - self.lower)

    def contains(self, x: np.ndarray, tol: float = 1e-9, skip=()) -> bool:
        x = np.asarray(x)
        mask = np.ones(self.dim, dtype=bool)
        mask[list(skip)] = False
        lo = self.lower[mask] - tol
        hi = self.upper[mask] + tol
        xv = x[..., mask]
        return bool(np.all(xv >= lo) and np.all(xv <= hi))

    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)


@dataclass(frozen=True)
class OutputSelector:
    """Rows (C, D) defining the tracked output z = C x + D u."""

    C: np.ndarray
    D: np.ndarray
    label: str

    def __post_init__(self):
        if self.C.ndim != 2 or self.D.ndim != 2 or self.C.shape[0] != self.D.shape[0]:
            raise InvalidArgumentError("C and D must be matrices with matching row counts")
        if not (np.all(np.isfinite(self.C)) and np.all(np.isfinite(self.D))):
            raise InvalidArgumentError("selector rows must be finite")
        stacked = np.hstack([self.C, self.D])
        if stacked.shape[0] < 1 or np.any(~stacked.any(axis=1)):
            raise InvalidArgumentError("every selector row must have a nonzero entry")

    @property
    def p_z(self) -> int:
        return self.C.shape[0]

    def output(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return x @ self.C.T + u @ self.D.T


@dataclass(frozen=True)
class ControlAffineSystem:
    """A disturbed control-affine system dx/dt = f(x) + B(x) u + B_w(x) w.

    ``f_t``/``b_t``/``bw_t`` are torch functions of the state that
    broadcast over leading axes; constant input/disturbance maps are
    exposed through ``const_b``/``const_bw`` so callers can skip their
    zero Jacobians.
    """

    name: str
    n: int
    m: int
    l: int
    f_t: Callable
    b_t: Callable
    bw_t: Callable
    x_set: BoxSet
    u_set: BoxSet
    x0_set: BoxSet
    xe0_set: BoxSet
    sigma: float
    position_coords: tuple
    translation_invariant_coords: tuple
    params: dict = field(default_factory=dict)
    const_b: np.ndarray | None = None
    const_bw: np.ndarray | None = None
    # optional numpy twins of the torch maps; simulation-speed fast path,
    # exactness-tested against f_t / b_t / bw_t
    f_np: Callable | None = None
    b_np: Callable | None = None
    bw_np: Callable | None = None
    _annihilator_cache: dict = field(default_factory=dict, repr=False)

    # -- numpy facade ------------------------------------------------

    def f(self, x: np.ndarray) -> np.ndarray:
        if self.f_np is not None:
            return self.f_np(np.asarray(x, dtype=float))
        return self.f_t(tensor(x)).numpy()

    def B(self, x: np.ndarray) -> np.ndarray:
        if self.const_b is not None:
            return self.const_b
        if self.b_np is not None:
            return self.b_np(np.asarray(x, dtype=float))
        return self.b_t(tensor(x)).numpy()

    def Bw(self, x: np.ndarray) -> np.ndarray:
        if self.const_bw is not None:
            return self.const_bw
        if self.bw_np is not None:
            return self.bw_np(np.asarray(x, dtype=float))
        return self.bw_t(tensor(x)).numpy()

    def dynamics(self, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        x, u, w = np.asarray(x, float), np.asarray(u, float), np.asarray(w, float)
        if x.shape[-1] != self.n or u.shape[-1] != self.m or w.shape[-1] != self.l:
            raise InvalidArgumentError(
                f"dimension mismatch: expected ({self.n}, {self.m}, {self.l}), "
                f"got ({x.shape[-1]}, {u.shape[-1]}, {w.shape[-1]})"
            )
        if self.f_np is not None:
            out = self.f_np(x)
            out = out + np.einsum("...ij,...j->...i", self.B(x), u)
            out = out + np.einsum("...ij,...j->...i", self.Bw(x), w)
            return out
        return self.dynamics_t(tensor(x), tensor(u), tensor(w)).numpy()

    def dynamics_t(self, x: torch.Tensor, u: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        out = self.f_t(x)
        out = out + torch.einsum("...ij,...j->...i", self.b_t(x), u)
        out = out + torch.einsum("...ij,...j->...i", self.bw_t(x), w)
        return out

    # -- Jacobians of the component maps ------------------------------

    def jac_f(self, x: np.ndarray) -> np.ndarray:
        return jacfwd(self.f_t)(tensor(x)).numpy()

    def jac_b_col(self, j: int, x: np.ndarray) -> np.ndarray:
        if self.const_b is not None:
            return np.zeros((self.n, self.n))
        return jacfwd(lambda a: self.b_t(a)[..., :, j])(tensor(x)).numpy()

    def jac_bw_col(self, i: int, x: np.ndarray) -> np.ndarray:
        if self.const_bw is not None:
            return np.zeros((self.n, self.n))
        return jacfwd(lambda a: self.bw_t(a)[..., :, i])(tensor(x)).numpy()

    # -- annihilator ---------------------------------------------------

    def annihilator(self, x: np.ndarray | None = None) -> np.ndarray:
        """Orthonormal B_perp with B_perp^T B(x) = 0.

        Constant for every benchmark: either B itself is constant, or
        (two-link arm) B(x) = [0; Minv(x)] whose column span is the
        actuated coordinate plane for every x because Minv stays
        invertible.  Recomputed per x only when neither holds.
        """
        if "const" in self._annihilator_cache:
            return self._annihilator_cache["const"]
        if self.const_b is not None:
            basis = null_space_basis(self.const_b)
            self._annihilator_cache["const"] = basis
            return basis
        if self.name == "tlpra":
            basis = np.eye(self.n)[:, : self.n - self.m]
            self._annihilator_cache["const"] = basis
            return basis
        if x is None:
            raise InvalidArgumentError("state-dependent B requires x for the annihilator")
        return null_space_basis(self.B(x))


def _pvtol() -> ControlAffineSystem:
    m, inertia, arm, g = 0.486, 0.00383, 0.25, GRAVITY
    b_mat = np.zeros((6, 2))
    b_mat[4] = [1.0 / m, 1.0 / m]
    b_mat[5] = [arm / inertia, -arm / inertia]
    b_const = tensor(b_mat)

    def f_t(x):
        _, _, ph, vx, vz, om = torch.unbind(x, dim=-1)
        return torch.stack(
            [
                vx * torch.cos(ph) - vz * torch.sin(ph),
                vx * torch.sin(ph) + vz * torch.cos(ph),
                om,
                vz * om - g * torch.sin(ph),
                -vx * om - g * torch.cos(ph),
                torch.zeros_like(om),
            ],
            dim=-1,
        )

    def b_t(x):
        return b_const

    def bw_t(x):
        ph = x[..., 2]
        zero = torch.zeros_like(ph)
        col = torch.stack([zero, zero, zero, torch.cos(ph), -torch.sin(ph), zero], dim=-1)
        return col[..., None]

    def f_np(x):
        ph, vx, vz, om = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
        c, s = np.cos(ph), np.sin(ph)
        return np.stack(
            [vx * c - vz * s, vx * s + vz * c, om,
             vz * om - g * s, -vx * om - g * c, np.zeros_like(om)],
            axis=-1,
        )

    def bw_np(x):
        ph = x[..., 2]
        zero = np.zeros_like(ph)
        col = np.stack([zero, zero, zero, np.cos(ph), -np.sin(ph), zero], axis=-1)
        return col[..., None]

    third = math.pi / 3.0
    return ControlAffineSystem(
        name="pvtol", n=6, m=2, l=1,
        f_t=f_t, b_t=b_t, bw_t=bw_t, f_np=f_np, bw_np=bw_np,
        x_set=BoxSet(np.array([-35.0, -2.0, -third, -2.0, -1.0, -third]),
                     np.array([0.0, 2.0, third, 2.0, 1.0, third])),
        u_set=BoxSet(np.array([m * g / 2 - 1.0] * 2), np.array([m * g / 2 + 1.0] * 2)),
        x0_set=BoxSet(np.array([0.0, 0.0, -0.1, 0.5, 0.0, 0.0]),
                      np.array([0.0, 0.0, 0.1, 1.0, 0.0, 0.0])),
        xe0_set=BoxSet(np.full(6, -0.5), np.full(6, 0.5)),
        sigma=1.0,
        position_coords=(0, 1),
        translation_invariant_coords=(0, 1),
        params={"m": m, "J": inertia, "l": arm, "g": g},
        const_b=b_mat,
    )


def _quadrotor(drift_convention: str) -> ControlAffineSystem:
    g = GRAVITY
    b_mat = np.zeros((10, 4))
    b_mat[6:, :] = np.eye(4)
    bw_mat = np.zeros((10, 3))
    bw_mat[3:6, :] = np.eye(3)
    b_const, bw_const = tensor(b_mat), tensor(bw_mat)
    printed = drift_convention == "as_printed"

    def f_t(x):
        vx, vy, vz, thr, ph, th = (x[..., 3], x[..., 4], x[..., 5],
                                   x[..., 6], x[..., 7], x[..., 8])
        if printed:
            ax = -thr * torch.sin(th)
            ay = thr * torch.sin(th) * torch.cos(ph)
            az = g - thr * torch.sin(th) * torch.cos(ph)
        else:
            ax = -thr * torch.sin(th)
            ay = thr * torch.cos(th) * torch.sin(ph)
            az = g - thr * torch.cos(th) * torch.cos(ph)
        zero = torch.zeros_like(vx)
        return torch.stack([vx, vy, vz, ax, ay, az, zero, zero, zero, zero], dim=-1)

    def f_np(x):
        vx, vy, vz, thr, ph, th = (x[..., 3], x[..., 4], x[..., 5],
                                   x[..., 6], x[..., 7], x[..., 8])
        if printed:
            ax = -thr * np.sin(th)
            ay = thr * np.sin(th) * np.cos(ph)
            az = g - thr * np.sin(th) * np.cos(ph)
        else:
            ax = -thr * np.sin(th)
            ay = thr * np.cos(th) * np.sin(ph)
            az = g - thr * np.cos(th) * np.cos(ph)
        zero = np.zeros_like(vx)
        return np.stack([vx, vy, vz, ax, ay, az, zero, zero, zero, zero], axis=-1)

    third = math.pi / 3.0
    return ControlAffineSystem(
        name="quadrotor", n=10, m=4, l=3,
        f_t=f_t, b_t=lambda x: b_const, bw_t=lambda x: bw_const, f_np=f_np,
        x_set=BoxSet(
            np.array([-30.0] * 3 + [-1.5] * 3 + [0.5 * g] + [-third] * 3),
            np.array([30.0] * 3 + [1.5] * 3 + [2.0 * g] + [third] * 3),
        ),
        u_set=BoxSet(np.full(4, -1.0), np.full(4, 1.0)),
        x0_set=BoxSet(np.array([-5.0] * 3 + [-1.0] * 3 + [g, 0.0, 0.0, 0.0]),
                      np.array([5.0] * 3 + [1.0] * 3 + [g, 0.0, 0.0, 0.0])),
        xe0_set=BoxSet(np.full(10, -0.5), np.full(10, 0.5)),
        sigma=1.0,
        position_coords=(0, 1, 2),
        translation_invariant_coords=(0, 1, 2),
        params={"g": g, "drift_convention": drift_convention},
        const_b=b_mat,
        const_bw=bw_mat,
    )


def _neural_lander() -> ControlAffineSystem:
    m, g = 1.47, GRAVITY
    b_mat = np.zeros((6, 3))
    b_mat[3:, :] = np.eye(3)
    b_const = tensor(b_mat)

    def f_t(x):
        pz, vx, vy, vz = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
        # Analytic stand-in for the pretrained ground-effect networks:
        # smooth, non-polynomial, decaying with height.
        fa1 = 0.2 * torch.tanh(vx) * torch.exp(-0.5 * pz)
        fa2 = 0.2 * torch.tanh(vy) * torch.exp(-0.5 * pz)
        fa3 = 2.0 * torch.exp(-0.8 * pz) - 0.3 * vz
        return torch.stack([vx, vy, vz, fa1 / m, fa2 / m, fa3 / m - g], dim=-1)

    def f_np(x):
        pz, vx, vy, vz = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
        fa1 = 0.2 * np.tanh(vx) * np.exp(-0.5 * pz)
        fa2 = 0.2 * np.tanh(vy) * np.exp(-0.5 * pz)
        fa3 = 2.0 * np.exp(-0.8 * pz) - 0.3 * vz
        return np.stack([vx, vy, vz, fa1 / m, fa2 / m, fa3 / m - g], axis=-1)

    return ControlAffineSystem(
        name="neural_lander", n=6, m=3, l=3,
        f_t=f_t, b_t=lambda x: b_const, bw_t=lambda x: b_const, f_np=f_np,
        x_set=BoxSet(np.array([-5.0, -5.0, 0.0, -1.0, -1.0, -1.0]),
                     np.array([5.0, 5.0, 2.0, 1.0, 1.0, 1.0])),
        u_set=BoxSet(np.array([-1.0, -1.0, -3.0]), np.array([1.0, 1.0, 9.0])),
        x0_set=BoxSet(np.array([-3.0, -3.0, 0.5, 1.0, 0.0, 0.0]),
                      np.array([3.0, 3.0, 1.0, 1.0, 0.0, 0.0])),
        xe0_set=BoxSet(np.array([-1.0, -1.0, -0.4, -1.0, -1.0, 0.0]),
                       np.array([1.0, 1.0, 1.0, 1.0, 1.0, 0.0])),
        sigma=1.0,
        position_coords=(0, 1, 2),
        translation_invariant_coords=(0, 1),
        params={"m": m, "g": g},
        const_b=b_mat,
        const_bw=b_mat.copy(),
    )


def _tlpra() -> ControlAffineSystem:
    m1, m2, a1, a2, g = 0.8, 2.3, 1.0, 1.0, 9.8
    alpha = (m1 + m2) * a1 ** 2
    beta = m2 * a2 ** 2
    eta = m2 * a1 * a2
    grav = g / a1
    bw_mat = np.zeros((4, 2))
    bw_mat[2:, :] = np.eye(2)
    bw_const = tensor(bw_mat)

    def minv_t(q2):
        c2 = torch.cos(q2)
        m11 = alpha + beta + 2.0 * eta * c2
        m12 = beta + eta * c2
        det = m11 * beta - m12 * m12
        row0 = torch.stack([beta / det, -m12 / det], dim=-1)
        row1 = torch.stack([-m12 / det, m11 / det], dim=-1)
        return torch.stack([row0, row1], dim=-2)

    def f_t(x):
        q1, q2, dq1, dq2 = torch.unbind(x, dim=-1)
        s2 = torch.sin(q2)
        h1 = eta * (2.0 * dq1 * dq2 + dq2 ** 2) * s2 \
            - alpha * grav * torch.cos(q1) - eta * grav * torch.cos(q1 + q2)
        h2 = -eta * dq1 ** 2 * s2 - eta * grav * torch.cos(q1 + q2)
        h = torch.stack([h1, h2], dim=-1)
        acc = torch.einsum("...ij,...j->...i", minv_t(q2), h)
        return torch.cat([torch.stack([dq1, dq2], dim=-1), acc], dim=-1)

    def b_t(x):
        q2 = x[..., 1]
        minv = minv_t(q2)
        zeros = torch.zeros_like(minv)
        return torch.cat([zeros[..., :2, :], minv], dim=-2)

    def minv_np(q2):
        c2 = np.cos(q2)
        m11 = alpha + beta + 2.0 * eta * c2
        m12 = beta + eta * c2
        det = m11 * beta - m12 * m12
        row0 = np.stack([beta / det, -m12 / det], axis=-1)
        row1 = np.stack([-m12 / det, m11 / det], axis=-1)
        return np.stack([row0, row1], axis=-2)

    def f_np(x):
        q1, q2, dq1, dq2 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        s2 = np.sin(q2)
        h1 = eta * (2.0 * dq1 * dq2 + dq2 ** 2) * s2 \
            - alpha * grav * np.cos(q1) - eta * grav * np.cos(q1 + q2)
        h2 = -eta * dq1 ** 2 * s2 - eta * grav * np.cos(q1 + q2)
        h = np.stack([h1, h2], axis=-1)
        acc = np.einsum("...ij,...j->...i", minv_np(q2), h)
        return np.concatenate([np.stack([dq1, dq2], axis=-1), acc], axis=-1)

    def b_np(x):
        minv = minv_np(x[..., 1])
        zeros = np.zeros_like(minv)
        return np.concatenate([zeros[..., :2, :], minv], axis=-2)

    half, third = math.pi / 2.0, math.pi / 3.0
    return ControlAffineSystem(
        name="tlpra", n=4, m=2, l=2,
        f_t=f_t, b_t=b_t, bw_t=lambda x: bw_const, f_np=f_np, b_np=b_np,
        x_set=BoxSet(np.array([-half, -half, -third, -third]),
                     np.array([half, half, third, third])),
        u_set=BoxSet(np.zeros(2), np.ones(2)),
        x0_set=BoxSet(np.array([half, 0.0, 0.0, 0.0]), np.array([half, 0.0, 0.0, 0.0])),
        xe0_set=BoxSet(np.array([-0.3, -0.3, 0.0, 0.0]), np.array([0.3, 0.3, 0.0, 0.0])),
        sigma=1.0,
        position_coords=(0, 1),
        translation_invariant_coords=(),
        params={"m1": m1, "m2": m2, "a1": a1, "a2": a2, "g": g,
                "alpha": alpha, "beta": beta, "eta": eta},
        const_bw=bw_mat,
    )


SYSTEM_NAMES = ("pvtol", "quadrotor", "neural_lander", "tlpra")


def make_system(name: str, quad_drift_convention: str = "as_printed") -> ControlAffineSystem:
    """Construct a benchmark system by name."""
    if name == "pvtol":
        return _pvtol()
    if name == "quadrotor":
        if quad_drift_convention not in ("as_printed", "conventional"):
            raise InvalidArgumentError(
                f"unknown quad_drift_convention '{quad_drift_convention}'"
            )
        return _quadrotor(quad_drift_convention)
    if name == "neural_lander":
        return _neural_lander()
    if name == "tlpra":
        return _tlpra()
    raise InvalidArgumentError(f"unknown system '{name}'; choose from {SYSTEM_NAMES}")


def dynamics(sys: ControlAffineSystem, x, u, w) -> np.ndarray:
    """dx/dt = f(x) + B(x) u + B_w(x) w."""
    return sys.dynamics(np.asarray(x, float), np.asarray(u, float), np.asarray(w, float))


def matrix_A(sys: ControlAffineSystem, x, u, w) -> np.ndarray:
    """State Jacobian of the open-loop vector field at (x, u, w)."""
    x, u, w = np.asarray(x, float), np.asarray(u, float), np.asarray(w, float)
    if x.shape != (sys.n,) or u.shape != (sys.m,) or w.shape != (sys.l,):
        raise InvalidArgumentError("matrix_A expects single-sample x, u, w")
    a = sys.jac_f(x)
    if sys.const_b is None:
        for j in range(sys.m):
            a = a + u[j] * sys.jac_b_col(j, x)
    if sys.const_bw is None:
        for i in range(sys.l):
            a = a + w[i] * sys.jac_bw_col(i, x)
    return a


def output_selector(sys: ControlAffineSystem, kind: str,
                    Q: np.ndarray | None = None, R: np.ndarray | None = None,
                    C: np.ndarray | None = None, D: np.ndarray | None = None,
                    label: str | None = None) -> OutputSelector:
    """Build the (C, D) rows defining the tracked output z.

    ``positions`` picks the position coordinates with identity weights;
    ``inputs`` yields z = u; ``weighted_all`` stacks z = [Qx; Ru];
    ``custom`` takes explicit rows.
    """
    if kind == "positions":
        rows = np.zeros((len(sys.position_coords), sys.n))
        for r, c in enumerate(sys.position_coords):
            rows[r, c] = 1.0
        return OutputSelector(C=rows, D=np.zeros((rows.shape[0], sys.m)), label="positions")
    if kind == "inputs":
        return OutputSelector(C=np.zeros((sys.m, sys.n)), D=np.eye(sys.m), label="inputs")
    if kind == "weighted_all":
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        R = np.atleast_2d(np.asarray(R, dtype=float))
        if Q.shape[1] != sys.n or R.shape[1] != sys.m:
            raise InvalidArgumentError("Q must have n columns and R must have m columns")
        c_rows = np.vstack([Q, np.zeros((R.shape[0], sys.n))])
        d_rows = np.vstack([np.zeros((Q.shape[0], sys.m)), R])
        return OutputSelector(C=c_rows, D=d_rows, label="weighted_all")
    if kind == "custom":
        C = np.atleast_2d(np.asarray(C, dtype=float))
        D = np.atleast_2d(np.asarray(D, dtype=float))
        if C.shape[1] != sys.n or D.shape[1] != sys.m or C.shape[0] != D.shape[0]:
            raise InvalidArgumentError(
                f"custom selector dims must be (p, {sys.n}) and (p, {sys.m})"
            )
        return OutputSelector(C=C, D=D, label=label or "custom")
    raise InvalidArgumentError(f"unknown selector kind '{kind}'")
