"""Tube-aware feedback motion planning for the planar VTOL.

The pipeline is deliberately simple and deterministic: A* over an
occupancy grid of tube-inflated obstacles, line-of-sight shortcutting,
a clamped quintic spline through the shortcut corridor, and a
differential-flatness lift to a dynamically consistent nominal pair
(x*, u*).  Every candidate plan is re-checked explicitly (position-tube
clearance against the original obstacles, input-tube containment in the
input box, nominal-dynamics defect), and failing candidates retry with
a slower time parameterization up to 4x before reporting infeasibility
with the failing check as the reason.

Flatness of the planar VTOL: with thrust sum T and inertial
acceleration a, the printed body-frame model collapses to
p_ddot = (T/m)(-sin phi, cos phi) - (0, g), so phi, T and the torque
follow from position derivatives up to the fourth order.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from .certnets import CertificateCheckpoint
from .numerics import InvalidArgumentError
from .simulation import DT_DEFAULT, NominalTrajectory, Trajectory, nominal_defect
from .systems import ControlAffineSystem

GRID_RESOLUTION = 0.1
SLOWDOWNS = (1.0, 1.5, 2.0, 3.0, 4.0)
CRUISE_SPEED = 0.5  # m/s along the corridor before slowdowns


class InfeasibleScenarioError(ValueError):
    """Start or goal conflicts with the inflated obstacles or bounds."""


class NeedsSlowdownError(RuntimeError):
    """The flatness lift left the thrust/attitude envelope; slow down."""


@dataclass(frozen=True)
class Scenario:
    """Planning world: start/goal positions, circular obstacles, tube radii."""

    start: np.ndarray
    goal: np.ndarray
    obstacles: tuple            # rows (cx, cz, radius)
    bounds_lower: np.ndarray
    bounds_upper: np.ndarray
    vehicle_radius: float
    tube_radius_pos: float | None = None      # alpha_p * sigma
    tube_radius_input: float | None = None    # alpha_u * sigma

    def __post_init__(self):
        for p, name in ((self.start, "start"), (self.goal, "goal")):
            if np.any(p < self.bounds_lower) or np.any(p > self.bounds_upper):
                raise InfeasibleScenarioError(f"{name} outside world bounds")
        if self.tube_radius_pos is not None:
            for cx, cz, r in self.inflated():
                for p, name in ((self.start, "start"), (self.goal, "goal")):
                    if np.hypot(p[0] - cx, p[1] - cz) <= r:
                        raise InfeasibleScenarioError(
                            f"{name} inside an inflated obstacle")

    def with_tubes(self, pos_radius: float, input_radius: float) -> "Scenario":
        return Scenario(start=self.start, goal=self.goal, obstacles=self.obstacles,
                        bounds_lower=self.bounds_lower, bounds_upper=self.bounds_upper,
                        vehicle_radius=self.vehicle_radius,
                        tube_radius_pos=pos_radius, tube_radius_input=input_radius)

    def inflated(self) -> tuple:
        """Obstacles grown by the position tube plus the vehicle radius."""
        if self.tube_radius_pos is None:
            raise InvalidArgumentError("scenario has no tube radii attached")
        grow = self.tube_radius_pos + self.vehicle_radius
        return tuple((cx, cz, r + grow) for cx, cz, r in self.obstacles)


def inflate_obstacles(scenario: Scenario) -> tuple:
    """Per-obstacle radii grown by (position tube + vehicle radius)."""
    return scenario.inflated()


def scenario_to_text(sc: Scenario) -> str:
    lines = [
        "start = " + " ".join(repr(float(v)) for v in sc.start),
        "goal = " + " ".join(repr(float(v)) for v in sc.goal),
        "bounds = " + " ".join(repr(float(v))
                               for v in np.concatenate([sc.bounds_lower, sc.bounds_upper])),
        f"vehicle_radius = {float(sc.vehicle_radius)!r}",
    ]
    for cx, cz, r in sc.obstacles:
        lines.append(f"obstacle = {float(cx)!r} {float(cz)!r} {float(r)!r}")
    return "\n".join(lines) + "\n"


def scenario_from_text(text: str) -> Scenario:
    fields = {"obstacles": []}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        key = key.strip()
        try:
            nums = [float(tok) for tok in val.split()]
        except ValueError:
            raise InvalidArgumentError(f"scenario line {i}: bad number in '{raw}'")
        if key == "obstacle":
            if len(nums) != 3:
                raise InvalidArgumentError(f"scenario line {i}: obstacle needs cx cz r")
            fields["obstacles"].append(tuple(nums))
        elif key in ("start", "goal"):
            fields[key] = np.array(nums)
        elif key == "bounds":
            if len(nums) != 4:
                raise InvalidArgumentError(f"scenario line {i}: bounds needs 4 numbers")
            fields["bounds_lower"] = np.array(nums[:2])
            fields["bounds_upper"] = np.array(nums[2:])
        elif key == "vehicle_radius":
            fields["vehicle_radius"] = nums[0]
        else:
            raise InvalidArgumentError(f"scenario line {i}: unknown key '{key}'")
    try:
        return Scenario(start=fields["start"], goal=fields["goal"],
                        obstacles=tuple(fields["obstacles"]),
                        bounds_lower=fields["bounds_lower"],
                        bounds_upper=fields["bounds_upper"],
                        vehicle_radius=fields["vehicle_radius"])
    except KeyError as exc:
        raise InvalidArgumentError(f"scenario file missing key {exc}")


@dataclass(frozen=True)
class SplineInputSignal:
    """u*(t) from the flatness lift of a position spline."""

    spline: object
    duration: float
    params: dict

    def at(self, t) -> np.ndarray:
        _, u = _flatness_arrays(self.spline, self.duration, np.atleast_1d(
            np.asarray(t, dtype=float)), self.params)
        return u[0] if np.isscalar(t) else u


@dataclass(frozen=True)
class PlanResult:
    feasible: bool
    reason: str
    waypoints: np.ndarray
    nominal: NominalTrajectory | None
    slowdown: float
    checks: dict = field(default_factory=dict)


# -- occupancy grid A* ----------------------------------------------------

def _blocked_mask(scenario: Scenario, xs: np.ndarray, zs: np.ndarray) -> np.ndarray:
    blocked = np.zeros((xs.size, zs.size), dtype=bool)
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    for cx, cz, r in scenario.inflated():
        blocked |= (gx - cx) ** 2 + (gz - cz) ** 2 <= r ** 2
    return blocked


def _astar(blocked: np.ndarray, start_idx: tuple, goal_idx: tuple) -> list | None:
    nx, nz = blocked.shape
    if blocked[start_idx] or blocked[goal_idx]:
        return None
    moves = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    gscore = {start_idx: 0.0}
    came = {}
    counter = 0
    heap = [(0.0, counter, start_idx)]
    closed = set()
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur == goal_idx:
            path = [cur]
            while cur in came:
                cur = came[cur]
                path.append(cur)
            return path[::-1]
        if cur in closed:
            continue
        closed.add(cur)
        for dx, dz in moves:
            nxt = (cur[0] + dx, cur[1] + dz)
            if not (0 <= nxt[0] < nx and 0 <= nxt[1] < nz) or blocked[nxt]:
                continue
            step = math.hypot(dx, dz)
            cand = gscore[cur] + step
            if cand < gscore.get(nxt, math.inf):
                gscore[nxt] = cand
                came[nxt] = cur
                h = math.hypot(goal_idx[0] - nxt[0], goal_idx[1] - nxt[1])
                counter += 1
                heapq.heappush(heap, (cand + h, counter, nxt))
    return None


def _line_clear(scenario: Scenario, a: np.ndarray, b: np.ndarray) -> bool:
    length = np.linalg.norm(b - a)
    steps = max(int(length / 0.02), 1)
    ts = np.linspace(0.0, 1.0, steps + 1)
    pts = a[None, :] + ts[:, None] * (b - a)[None, :]
    for cx, cz, r in scenario.inflated():
        if np.any((pts[:, 0] - cx) ** 2 + (pts[:, 1] - cz) ** 2 <= r ** 2):
            return False
    return True


def _shortcut(scenario: Scenario, pts: np.ndarray) -> np.ndarray:
    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not _line_clear(scenario, pts[i], pts[j]):
            j -= 1
        out.append(pts[j])
        i = j
    return np.array(out)


# -- flatness lift --------------------------------------------------------

def _flatness_arrays(spl, duration: float, t: np.ndarray, params: dict) -> tuple:
    """States and inputs of the printed planar-VTOL model along the spline."""
    m, inertia, arm, g = params["m"], params["J"], params["l"], params["g"]
    s = np.clip(t / duration, 0.0, 1.0)
    p = spl(s)
    vel = spl.derivative(1)(s) / duration
    acc = spl.derivative(2)(s) / duration ** 2
    jerk = spl.derivative(3)(s) / duration ** 3
    snap = spl.derivative(4)(s) / duration ** 4

    n1, n2 = -acc[:, 0], acc[:, 1] + g
    dn1, dn2 = -jerk[:, 0], jerk[:, 1]
    ddn1, ddn2 = -snap[:, 0], snap[:, 1]
    norm2 = n1 ** 2 + n2 ** 2
    if np.any(n2 <= 0.2 * g):
        raise NeedsSlowdownError("thrust direction left the upright envelope")

    phi = np.arctan2(n1, n2)
    phidot = (dn1 * n2 - n1 * dn2) / norm2
    phiddot = ((ddn1 * n2 - n1 * ddn2) * norm2
               - (dn1 * n2 - n1 * dn2) * 2.0 * (n1 * dn1 + n2 * dn2)) / norm2 ** 2

    cph, sph = np.cos(phi), np.sin(phi)
    vx = cph * vel[:, 0] + sph * vel[:, 1]
    vz = -sph * vel[:, 0] + cph * vel[:, 1]

    thrust = m * np.sqrt(norm2)
    torque = inertia * phiddot / arm
    u1 = 0.5 * (thrust + torque)
    u2 = 0.5 * (thrust - torque)

    x = np.stack([p[:, 0], p[:, 1], phi, vx, vz, phidot], axis=1)
    u = np.stack([u1, u2], axis=1)
    return x, u


def flatness_nominal(spl, duration: float, sys: ControlAffineSystem,
                     dt: float = DT_DEFAULT, seed: int = 0) -> NominalTrajectory:
    """Lift a quintic position spline to a nominal (x*, u*) pair.

    The spline maps s in [0, 1] to planar position; ``duration`` scales
    time.  Raises NeedsSlowdownError when the implied thrust direction
    leaves the upright envelope.  The defect contract (<= 1e-6 per step)
    is checked by the caller through :func:`rccm.simulation.nominal_defect`,
    not assumed.
    """
    if sys.name != "pvtol":
        raise InvalidArgumentError("flatness lift is defined for the pvtol model")
    steps = int(round(duration / dt))
    t = np.arange(steps + 1) * dt
    x, u = _flatness_arrays(spl, duration, t, sys.params)
    signal = SplineInputSignal(spline=spl, duration=duration, params=dict(sys.params))
    return NominalTrajectory(t=t, x_star=x, u_star=u, signal=signal, dt=dt, seed=seed)


def _fit_spline(waypoints: np.ndarray):
    """Clamped quintic through a densified corridor polyline."""
    segs = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(segs)])
    length = arc[-1]
    dense_s = [0.0]
    for k in range(len(waypoints) - 1):
        n_sub = max(int(np.ceil(segs[k] / 0.3)), 1)
        dense_s.extend(arc[k] + segs[k] * np.arange(1, n_sub + 1) / n_sub)
    dense_s = np.array(dense_s)
    dense_pts = np.empty((dense_s.size, 2))
    for dim in range(2):
        dense_pts[:, dim] = np.interp(dense_s, arc, waypoints[:, dim])
    while dense_s.size < 8:  # quintic with clamped ends needs headroom
        mids = 0.5 * (dense_s[:-1] + dense_s[1:])
        mid_pts = 0.5 * (dense_pts[:-1] + dense_pts[1:])
        new_s = np.empty(dense_s.size + mids.size)
        new_pts = np.empty((new_s.size, 2))
        new_s[0::2], new_s[1::2] = dense_s, mids
        new_pts[0::2], new_pts[1::2] = dense_pts, mid_pts
        dense_s, dense_pts = new_s, new_pts
    s_norm = dense_s / max(length, 1e-9)
    bc = ([(1, np.zeros(2)), (2, np.zeros(2))], [(1, np.zeros(2)), (2, np.zeros(2))])
    return make_interp_spline(s_norm, dense_pts, k=5, bc_type=bc), length


def _check_plan(scenario: Scenario, sys: ControlAffineSystem,
                nominal: NominalTrajectory) -> dict:
    p = nominal.x_star[:, :2]
    clearance = np.inf
    for cx, cz, r in scenario.obstacles:
        d = np.hypot(p[:, 0] - cx, p[:, 1] - cz) - r
        clearance = min(clearance, float(d.min()))
    need = scenario.tube_radius_pos + scenario.vehicle_radius
    in_bounds = bool(
        np.all(p >= scenario.bounds_lower + need - 1e-9)
        and np.all(p <= scenario.bounds_upper - need + 1e-9))

    lo, hi = sys.u_set.lower, sys.u_set.upper
    pad = scenario.tube_radius_input
    input_ok = bool(np.all(nominal.u_star >= lo + pad)
                    and np.all(nominal.u_star <= hi - pad))

    state_ok = all(
        sys.x_set.contains(row, tol=1e-9, skip=sys.translation_invariant_coords)
        for row in nominal.x_star)

    defect = nominal_defect(sys, nominal)
    return {
        "clearance": clearance,
        "clearance_ok": bool(clearance >= need - 1e-9) and in_bounds,
        "input_tube_ok": input_ok,
        "state_bounds_ok": state_ok,
        "residual": defect,
        "residual_ok": bool(defect <= 1e-6),
    }


def plan(scenario: Scenario, sys: ControlAffineSystem,
         ckpt: CertificateCheckpoint, sigma: float = 1.0,
         dt: float = DT_DEFAULT) -> PlanResult:
    """Plan a tube-certified nominal trajectory from start to goal.

    The checkpoint must carry refined gains for the "positions" and
    "inputs" selectors; their tube radii (alpha * sigma) inflate the
    obstacles and tighten the input box.
    """
    if sys.name != "pvtol":
        raise InvalidArgumentError("planning is supported for the pvtol model only")
    if scenario.tube_radius_pos is None:
        for label in ("positions", "inputs"):
            if label not in ckpt.tubes:
                raise InvalidArgumentError(
                    f"checkpoint lacks a refined '{label}' tube; run refinement first")
        scenario = scenario.with_tubes(ckpt.tubes["positions"].alpha * sigma,
                                       ckpt.tubes["inputs"].alpha * sigma)

    lo, hi = scenario.bounds_lower, scenario.bounds_upper
    xs = np.arange(lo[0], hi[0] + GRID_RESOLUTION / 2, GRID_RESOLUTION)
    zs = np.arange(lo[1], hi[1] + GRID_RESOLUTION / 2, GRID_RESOLUTION)
    blocked = _blocked_mask(scenario, xs, zs)

    def to_idx(p):
        return (int(np.clip(round((p[0] - lo[0]) / GRID_RESOLUTION), 0, xs.size - 1)),
                int(np.clip(round((p[1] - lo[1]) / GRID_RESOLUTION), 0, zs.size - 1)))

    path = _astar(blocked, to_idx(scenario.start), to_idx(scenario.goal))
    if path is None:
        return PlanResult(feasible=False, reason="no-corridor",
                          waypoints=np.empty((0, 2)), nominal=None, slowdown=1.0)

    cells = np.array([[xs[i], zs[j]] for i, j in path])
    cells[0] = scenario.start
    cells[-1] = scenario.goal
    waypoints = _shortcut(scenario, cells)
    spl, length = _fit_spline(waypoints)

    reason = "unknown"
    for slowdown in SLOWDOWNS:
        duration = max(length / CRUISE_SPEED, 2.0) * slowdown
        duration = round(duration / dt) * dt
        try:
            nominal = flatness_nominal(spl, duration, sys, dt=dt)
        except NeedsSlowdownError:
            reason = "envelope"
            continue
        checks = _check_plan(scenario, sys, nominal)
        if all(checks[k] for k in ("clearance_ok", "input_tube_ok",
                                   "state_bounds_ok", "residual_ok")):
            return PlanResult(feasible=True, reason="", waypoints=waypoints,
                              nominal=nominal, slowdown=slowdown, checks=checks)
        if not checks["clearance_ok"]:
            # slowing down never fixes geometry; report and stop
            return PlanResult(feasible=False, reason="no-corridor",
                              waypoints=waypoints, nominal=nominal,
                              slowdown=slowdown, checks=checks)
        reason = "input-tube" if not checks["input_tube_ok"] else "state-bounds"
    return PlanResult(feasible=False, reason=reason, waypoints=waypoints,
                      nominal=None, slowdown=SLOWDOWNS[-1])


def count_collisions(traj: Trajectory, scenario: Scenario) -> int:
    """Time steps where the vehicle disk overlaps an original obstacle."""
    p = traj.x[:, :2]
    hits = np.zeros(p.shape[0], dtype=bool)
    for cx, cz, r in scenario.obstacles:
        hits |= np.hypot(p[:, 0] - cx, p[:, 1] - cz) < (r + scenario.vehicle_radius)
    return int(hits.sum())
