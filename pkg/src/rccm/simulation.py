"""Closed-loop rollouts, disturbance protocol, and tube metrics.

Disturbances are piecewise constant: segment lengths uniform on [0, 1]
seconds, segment norms uniform on [0.1, sigma], directions uniform on
the sphere.  Nominal trajectories integrate a smooth open-loop input
(an equilibrium base plus at most three sinusoids per channel) with
fixed-step RK4 and are rejection-sampled to stay inside the state box;
coordinates the dynamics are invariant to are exempt from containment
because the printed initial sets sit on the box boundary with outward
velocity.  Rollouts integrate the nominal and the disturbed closed loop
jointly, so exact tracking from matched initial conditions holds to
machine precision, and all runs in a batch share the integrator grid so
a hundred rollouts cost a few batched tensor sweeps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .certnets import CertificateCheckpoint, controller_u
from .numerics import InvalidArgumentError, derive_seed
from .systems import ControlAffineSystem, OutputSelector, output_selector

log = logging.getLogger("rccm.simulation")

DT_DEFAULT = 0.01
T_DEFAULT = 10.0


class InfeasibleNominalError(RuntimeError):
    """No nominal stayed inside the state box within the attempt budget."""


class DivergedError(RuntimeError):
    """The closed-loop state became non-finite; carries the time stamp."""

    def __init__(self, time: float):
        super().__init__(f"rollout diverged at t = {time:.3f} s")
        self.time = time


@dataclass(frozen=True)
class DisturbanceSignal:
    """Piecewise-constant disturbance: value[i] holds on [starts[i], starts[i+1])."""

    starts: np.ndarray        # (segments,), increasing, starts[0] == 0
    values: np.ndarray        # (segments, l)
    sigma: float

    def __post_init__(self):
        lengths = np.diff(self.starts)
        if np.any(lengths < 0) or self.starts[0] != 0.0:
            raise InvalidArgumentError("segment starts must increase from 0")
        if np.any(lengths > 1.0 + 1e-12):
            raise InvalidArgumentError("segment lengths must lie in [0, 1] s")
        norms = np.linalg.norm(self.values, axis=1)
        if np.any(norms < 0.1 - 1e-12) or np.any(norms > self.sigma + 1e-12):
            raise InvalidArgumentError("segment norms must lie in [0.1, sigma]")

    def at(self, t) -> np.ndarray:
        idx = np.clip(np.searchsorted(self.starts, np.atleast_1d(t), side="right") - 1,
                      0, len(self.values) - 1)
        out = self.values[idx]
        return out[0] if np.isscalar(t) else out


@dataclass(frozen=True)
class SinusoidSignal:
    """u*(t) = base + sum_k amps[:, k] sin(omegas[:, k] t + phases[:, k])."""

    base: np.ndarray          # (m,)
    amps: np.ndarray          # (m, K)
    omegas: np.ndarray        # (m, K)
    phases: np.ndarray        # (m, K)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        wave = np.sin(self.omegas * t[..., None, None] + self.phases)
        return self.base + (self.amps * wave).sum(axis=-1)


@dataclass(frozen=True)
class NominalTrajectory:
    """A nominal pair (x*, u*) on a fixed time grid plus its input signal."""

    t: np.ndarray
    x_star: np.ndarray
    u_star: np.ndarray
    signal: SinusoidSignal
    dt: float
    seed: int


@dataclass(frozen=True)
class Trajectory:
    """Closed-loop rollout record on a fixed time grid."""

    t: np.ndarray
    x_star: np.ndarray
    u_star: np.ndarray
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    z: np.ndarray
    z_star: np.ndarray
    meta: dict = field(default_factory=dict)


def gen_disturbance(sys: ControlAffineSystem, T: float, sigma: float,
                    seed: int) -> DisturbanceSignal:
    """Random piecewise-constant disturbance covering [0, T]."""
    if T <= 0 or sigma <= 0:
        raise InvalidArgumentError("T and sigma must be positive")
    rng = np.random.Generator(np.random.Philox(key=derive_seed(seed, "disturbance")))
    starts, values = [0.0], []
    elapsed = 0.0
    while elapsed < T:
        length = rng.uniform(0.0, 1.0)
        norm = rng.uniform(0.1, sigma)
        direction = rng.standard_normal(sys.l)
        dn = np.linalg.norm(direction)
        direction = direction / dn if dn > 1e-12 else np.eye(sys.l)[0]
        values.append(norm * direction)
        elapsed += length
        starts.append(elapsed)
    return DisturbanceSignal(starts=np.array(starts[:-1]), values=np.array(values),
                             sigma=sigma)


def _equilibrium_base(sys: ControlAffineSystem, x0: np.ndarray) -> np.ndarray:
    """Least-squares input pulling the free coordinates gently to the box center."""
    center = sys.x_set.center()
    pull = 0.05 * (center - x0)
    pull[list(sys.translation_invariant_coords)] = 0.0
    b = np.asarray(sys.B(x0), dtype=float)
    target = pull - sys.f(x0)
    base, *_ = np.linalg.lstsq(b, target, rcond=None)
    lo, hi = sys.u_set.lower, sys.u_set.upper
    # keep the base just off the boundary; sinusoid amplitudes scale with
    # the remaining margin, so a sliver suffices (a large pad would shift
    # near-boundary equilibria, e.g. the lander's hover thrust)
    pad = 0.005 * (hi - lo)
    return np.clip(base, lo + pad, hi - pad)


def _draw_signal(sys: ControlAffineSystem, x0: np.ndarray, rng: np.random.Generator,
                 shrink: float) -> SinusoidSignal:
    base = _equilibrium_base(sys, x0)
    lo, hi = sys.u_set.lower, sys.u_set.upper
    margin = np.minimum(base - lo, hi - base)
    total = margin * 0.3 * shrink
    fractions = rng.dirichlet(np.ones(3), size=sys.m)
    amps = total[:, None] * fractions
    omegas = rng.uniform(0.3, 1.5, size=(sys.m, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(sys.m, 3))
    return SinusoidSignal(base=base, amps=amps, omegas=omegas, phases=phases)


def _rk4_sweep(sys, ckpt, signals_at, w_half, x_star0, x0, steps, dt):
    """Jointly integrate nominal and (optionally) disturbed closed loop.

    ``signals_at(t)`` returns the batched u*(t); ``w_half`` holds the
    zero-order-hold disturbance at half-grid times, or None for the pure
    nominal sweep.  Returns grid arrays.
    """
    runs, n = x_star0.shape
    xs_star = np.empty((runs, steps + 1, n))
    xs_star[:, 0] = x_star0
    closed = x0 is not None
    if closed:
        xs = np.empty((runs, steps + 1, n))
        xs[:, 0] = x0
        us = np.empty((runs, steps + 1, ckpt.controller.m))
    y_star = x_star0.copy()
    y = x0.copy() if closed else None
    zero_w = np.zeros((runs, sys.l))

    def stage_rates(t_idx_half, y_star_s, y_s):
        t = t_idx_half * dt / 2.0
        ustar = signals_at(t)
        rate_star = sys.dynamics(y_star_s, ustar, zero_w)
        if not closed:
            return rate_star, None, ustar
        u = controller_u(ckpt.controller, y_s, y_star_s, ustar)
        rate = sys.dynamics(y_s, u, w_half[:, t_idx_half])
        return rate_star, rate, u

    for k in range(steps):
        k1s, k1, u_now = stage_rates(2 * k, y_star, y)
        if closed:
            us[:, k] = u_now
            k2s, k2, _ = stage_rates(2 * k + 1, y_star + dt / 2 * k1s, y + dt / 2 * k1)
            k3s, k3, _ = stage_rates(2 * k + 1, y_star + dt / 2 * k2s, y + dt / 2 * k2)
            k4s, k4, _ = stage_rates(2 * k + 2, y_star + dt * k3s, y + dt * k3)
            y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(y)):
                raise DivergedError((k + 1) * dt)
            xs[:, k + 1] = y
        else:
            k2s, _, _ = stage_rates(2 * k + 1, y_star + dt / 2 * k1s, None)
            k3s, _, _ = stage_rates(2 * k + 1, y_star + dt / 2 * k2s, None)
            k4s, _, _ = stage_rates(2 * k + 2, y_star + dt * k3s, None)
        y_star = y_star + dt / 6.0 * (k1s + 2 * k2s + 2 * k3s + k4s)
        xs_star[:, k + 1] = y_star
    if closed:
        us[:, steps] = stage_rates(2 * steps, y_star, y)[2]
        return xs_star, xs, us
    return xs_star, None, None


def gen_nominal(sys: ControlAffineSystem, T: float, seed: int,
                x0_star: np.ndarray | None = None,
                u_signal: SinusoidSignal | None = None,
                dt: float = DT_DEFAULT, max_attempts: int = 50) -> NominalTrajectory:
    """Sample a nominal trajectory that stays inside the state box.

    The initial state comes from the initial-condition set (or is given),
    the input is an equilibrium base plus up to three sinusoids per
    channel fitted inside the input box, and candidates whose states
    leave the box (translation-invariant coordinates exempt) are
    rejected with shrinking amplitudes, up to ``max_attempts``.
    """
    if T <= 0:
        raise InvalidArgumentError("T must be positive")
    steps = int(round(T / dt))
    skip = sys.translation_invariant_coords
    for attempt in range(max_attempts):
        rng = np.random.Generator(np.random.Philox(
            key=derive_seed(seed, "nominal", attempt)))
        x0 = sys.x0_set.sample(rng, 1)[0] if x0_star is None else np.asarray(x0_star, float)
        signal = u_signal if u_signal is not None else _draw_signal(
            sys, x0, rng, shrink=0.8 ** attempt)
        xs_star, _, _ = _rk4_sweep(sys, None, lambda t: signal.at(t)[None, :],
                                   None, x0[None, :], None, steps, dt)
        traj = xs_star[0]
        if not np.all(np.isfinite(traj)):
            continue
        if all(sys.x_set.contains(traj[k], tol=1e-9, skip=skip)
               for k in range(steps + 1)):
            t = np.arange(steps + 1) * dt
            return NominalTrajectory(t=t, x_star=traj, u_star=signal.at(t),
                                     signal=signal, dt=dt, seed=seed)
        if x0_star is not None and u_signal is not None:
            break  # nothing left to resample
    raise InfeasibleNominalError(
        f"no contained nominal for '{sys.name}' after {max_attempts} attempts (T={T})")


def _w_half_grid(dist: DisturbanceSignal, steps: int, dt: float) -> np.ndarray:
    half_t = np.arange(2 * steps + 1) * dt / 2.0
    return dist.at(half_t)


def rollout(sys: ControlAffineSystem, ckpt: CertificateCheckpoint,
            nominal: NominalTrajectory, disturbance: DisturbanceSignal,
            x0: np.ndarray, sel: OutputSelector | None = None) -> Trajectory:
    """Integrate the disturbed closed loop tracking ``nominal``."""
    trajs = rollout_batch(sys, ckpt, [nominal], [disturbance],
                          np.asarray(x0, float)[None, :], sel)
    return trajs[0]


def rollout_batch(sys: ControlAffineSystem, ckpt: CertificateCheckpoint,
                  nominals: list, disturbances: list, x0s: np.ndarray,
                  sel: OutputSelector | None = None) -> list:
    """Integrate many rollouts sharing the same grid in one batched sweep."""
    if sel is None:
        sel = output_selector(sys, "positions")
    runs = len(nominals)
    if len(disturbances) != runs or x0s.shape != (runs, sys.n):
        raise InvalidArgumentError("nominals, disturbances, x0s must align")
    dt = nominals[0].dt
    steps = len(nominals[0].t) - 1
    if any(len(nom.t) != steps + 1 or nom.dt != dt for nom in nominals):
        raise InvalidArgumentError("all rollouts in a batch must share the grid")
    for x0 in x0s:
        if not sys.x_set.contains(x0, tol=1e-9, skip=sys.translation_invariant_coords):
            log.warning("initial state outside the state box; continuing")

    if all(isinstance(nom.signal, SinusoidSignal) for nom in nominals):
        base = np.stack([nom.signal.base for nom in nominals])
        amps = np.stack([nom.signal.amps for nom in nominals])
        omegas = np.stack([nom.signal.omegas for nom in nominals])
        phases = np.stack([nom.signal.phases for nom in nominals])

        def signals_at(t):
            return base + (amps * np.sin(omegas * t + phases)).sum(axis=-1)
    else:  # generic input signals (e.g. flatness lifts) evaluate per run
        def signals_at(t):
            return np.stack([nom.signal.at(t) for nom in nominals])

    w_half = np.stack([
        np.zeros((2 * steps + 1, sys.l)) if d is None else _w_half_grid(d, steps, dt)
        for d in disturbances])
    x_star0 = np.stack([nom.x_star[0] for nom in nominals])
    xs_star, xs, us = _rk4_sweep(sys, ckpt, signals_at, w_half, x_star0, x0s,
                                 steps, dt)

    t = np.arange(steps + 1) * dt
    out = []
    for r in range(runs):
        u_star = nominals[r].u_star
        w_grid = w_half[r, ::2]
        z = sel.output(xs[r], us[r])
        z_star = sel.output(xs_star[r], u_star)
        out.append(Trajectory(
            t=t, x_star=xs_star[r], u_star=u_star, x=xs[r], u=us[r], w=w_grid,
            z=z, z_star=z_star,
            meta={"seed": nominals[r].seed,
                  "sigma": disturbances[r].sigma if disturbances[r] is not None else 0.0,
                  "selector": sel.label},
        ))
        if not np.allclose(xs_star[r], nominals[r].x_star, atol=1e-9):
            log.warning("re-integrated nominal drifted from its record")
    return out


def run_rollouts(sys: ControlAffineSystem, ckpt: CertificateCheckpoint,
                 n_runs: int, sigma: float, seed: int,
                 sel: OutputSelector | None = None, T: float = T_DEFAULT,
                 dt: float = DT_DEFAULT, initial_error: bool = False) -> list:
    """The tracking protocol: fresh nominal and disturbance per run.

    With ``initial_error`` False the actual state starts on the nominal
    (x(0) = x*(0)); otherwise an offset from the initial-error box is
    added.
    """
    if n_runs < 1:
        raise InvalidArgumentError("n_runs must be >= 1")
    nominals, dists, x0s = [], [], []
    for r in range(n_runs):
        nom = gen_nominal(sys, T, derive_seed(seed, "run-nominal", r), dt=dt)
        dist = gen_disturbance(sys, T, sigma, derive_seed(seed, "run-dist", r))
        x0 = nom.x_star[0].copy()
        if initial_error:
            rng = np.random.Generator(np.random.Philox(
                key=derive_seed(seed, "run-x0", r)))
            x0 = x0 + sys.xe0_set.sample(rng, 1)[0]
        nominals.append(nom)
        dists.append(dist)
        x0s.append(x0)
    return rollout_batch(sys, ckpt, nominals, dists, np.stack(x0s), sel)


def nominal_defect(sys: ControlAffineSystem, nominal: NominalTrajectory) -> float:
    """Worst per-step integration defect of the nominal dynamics.

    Each stored step is re-taken with two half steps; the difference
    bounds the local error of the dynamics residual, independent of how
    the trajectory was produced (integrated or lifted analytically).
    """
    dt = nominal.dt
    signal = nominal.signal
    zeros_w = np.zeros((len(nominal.t) - 1, sys.l))

    def f(t_vec, y):
        return sys.dynamics(y, signal.at(t_vec), zeros_w)

    def rk4(t_vec, y, h):
        k1 = f(t_vec, y)
        k2 = f(t_vec + h / 2, y + h / 2 * k1)
        k3 = f(t_vec + h / 2, y + h / 2 * k2)
        k4 = f(t_vec + h, y + h * k3)
        return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    # re-take every stored step with two half steps, all rows at once
    y = nominal.x_star[:-1]
    t_grid = nominal.t[:-1]
    halves = rk4(t_grid, y, dt / 2.0)
    halves = rk4(t_grid + dt / 2.0, halves, dt / 2.0)
    return float(np.max(np.linalg.norm(nominal.x_star[1:] - halves, axis=1)))


def total_tracking_error(traj: Trajectory, coords=None) -> float:
    """Area under the time-normalized tracking-error curve."""
    err = traj.x - traj.x_star
    if coords is not None:
        err = err[:, list(coords)]
    norm = np.linalg.norm(err, axis=1)
    T = traj.t[-1]
    return float(np.trapezoid(norm / T, traj.t))


@dataclass(frozen=True)
class TubeMargins:
    margins: np.ndarray
    worst: float
    bound: float              # certified radius alpha * sigma


def tube_margin(traj: Trajectory, sel: OutputSelector, alpha: float,
                sigma: float) -> TubeMargins:
    """Margin alpha * sup_{s<=t} ||w(s)|| - ||z(t) - z*(t)|| per step."""
    z = sel.output(traj.x, traj.u)
    z_star = sel.output(traj.x_star, traj.u_star)
    dev = np.linalg.norm(z - z_star, axis=1)
    w_sup = np.maximum.accumulate(np.linalg.norm(traj.w, axis=1))
    margins = alpha * w_sup - dev
    return TubeMargins(margins=margins, worst=float(margins.min()),
                       bound=alpha * sigma)


def ccm_tube_size(w_hi: float, w_lo: float, eps: float, lam: float) -> float:
    """Comparison-only tube radius sqrt(w_hi/w_lo) * eps / lam."""
    if min(w_hi, w_lo, eps, lam) <= 0:
        raise InvalidArgumentError("all tube-size arguments must be positive")
    return float(np.sqrt(w_hi / w_lo) * eps / lam)
