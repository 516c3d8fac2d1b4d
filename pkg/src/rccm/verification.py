"""Certificate validation: statistical violation rates and grid certification.

Exhaustive verification over the full sample space is hopeless above a
few dimensions (the PVTOL space is 15-dimensional), so two complementary
checks are provided.  ``violation_rate`` samples the training
distribution afresh and reports the fraction of points where each matrix
inequality has the wrong sign.  ``grid_verify`` certifies a user-chosen
sub-region rigorously: with grid spacing tau and a Lipschitz constant L
of the largest-eigenvalue map, max-over-grid < -L*tau implies the
inequality holds everywhere in the region.

Lipschitz/sup constants are assembled from rigorous bounds where they
are derivable (metric floor, constant input maps, layer operator norms)
and from sampled suprema with a 1.5x safety factor elsewhere; every
entry is tagged with its provenance and grid passes that rest on sampled
entries are labelled accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .certificates import intermediates_batch, matrices_batch
from .certnets import CertificateCheckpoint
from .numerics import InvalidArgumentError, derive_seed, jacobi_eigvals
from .systems import ControlAffineSystem, OutputSelector
from .training import sample_dataset_arrays

GRID_POINT_CAP = 200_000


class GridTooLargeError(ValueError):
    """The requested grid exceeds the configured cardinality cap."""


@dataclass(frozen=True)
class Region:
    """A box in the concatenated sample space [x; x*; u*; w].

    Axes with lower == upper are held fixed; the rest are gridded or
    sampled.  Must lie inside the system's compact sets.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise InvalidArgumentError("region bounds must satisfy lower <= upper")

    @staticmethod
    def full(sys: ControlAffineSystem) -> "Region":
        lo = np.concatenate([sys.x_set.lower, sys.x_set.lower, sys.u_set.lower,
                             np.full(sys.l, -sys.sigma)])
        hi = np.concatenate([sys.x_set.upper, sys.x_set.upper, sys.u_set.upper,
                             np.full(sys.l, sys.sigma)])
        return Region(lower=lo, upper=hi)

    @staticmethod
    def tracking_slice(sys: ControlAffineSystem, x_star: np.ndarray,
                       u_star: np.ndarray, w: np.ndarray,
                       x_lower: np.ndarray | None = None,
                       x_upper: np.ndarray | None = None) -> "Region":
        """x varies over [x_lower, x_upper]; x*, u*, w held fixed."""
        x_lo = sys.x_set.lower if x_lower is None else np.asarray(x_lower, float)
        x_hi = sys.x_set.upper if x_upper is None else np.asarray(x_upper, float)
        lo = np.concatenate([x_lo, x_star, u_star, w])
        hi = np.concatenate([x_hi, x_star, u_star, w])
        return Region(lower=lo, upper=hi)

    def validate_within(self, sys: ControlAffineSystem, tol: float = 1e-9):
        full = Region.full(sys)
        if np.any(self.lower < full.lower - tol) or np.any(self.upper > full.upper + tol):
            raise InvalidArgumentError("region exceeds the system's compact sets")

    def split(self, sys: ControlAffineSystem, pts: np.ndarray) -> tuple:
        n, m, l = sys.n, sys.m, sys.l
        return (pts[:, :n], pts[:, n:2 * n], pts[:, 2 * n:2 * n + m],
                pts[:, 2 * n + m:])

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        u = rng.uniform(size=(count, self.lower.size))
        return self.lower + u * (self.upper - self.lower)


@dataclass(frozen=True)
class BoundSet:
    """Sup-norm and Lipschitz bounds with per-entry provenance."""

    values: dict
    provenance: dict          # entry -> "rigorous" | "sampled"
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.values.items():
            if v < 0:
                raise InvalidArgumentError(f"bound {k} must be nonnegative, got {v}")

    @property
    def fully_rigorous(self) -> bool:
        return all(p == "rigorous" for p in self.provenance.values())


@dataclass(frozen=True)
class VerificationReport:
    region_lower: np.ndarray
    region_upper: np.ndarray
    tau: float
    constants: dict            # incl. L_eq10 / L_eq11 and all bound entries
    provenance: dict
    grid_max: dict             # inequality -> max over grid of lambda_max
    passed: dict               # inequality -> bool (margin rule)
    stat_fractions: dict       # C1..C4 -> violation fraction on fresh samples
    counts: dict               # grid / stat sample counts
    worst: dict                # inequality -> (value, point) worst offender
    rigorous: bool             # False when any sampled bound backs the verdict

    def to_text(self) -> str:
        fmt = lambda v: repr(float(v))  # noqa: E731 - shortest round-trip decimal
        lines = ["verification-report"]
        lines.append("tau = " + fmt(self.tau))
        lines.append("rigorous = " + str(int(self.rigorous)))
        lines.append("region_lower = " + " ".join(fmt(v) for v in self.region_lower))
        lines.append("region_upper = " + " ".join(fmt(v) for v in self.region_upper))
        for key in sorted(self.constants):
            prov = self.provenance.get(key, "derived")
            lines.append(f"constant {key} = {fmt(self.constants[key])} [{prov}]")
        for ineq in sorted(self.grid_max):
            lines.append(
                f"grid {ineq}: max = {fmt(self.grid_max[ineq])} "
                f"pass = {int(self.passed[ineq])}"
            )
            val, pt = self.worst[ineq]
            lines.append(f"worst {ineq} = {fmt(val)} at " + " ".join(fmt(v) for v in pt))
        for ineq in sorted(self.stat_fractions):
            lines.append(f"stat {ineq} = {fmt(self.stat_fractions[ineq])}")
        lines.append(f"counts grid = {self.counts['grid']} stat = {self.counts['stat']}")
        return "\n".join(lines) + "\n"


def report_from_text(text: str) -> VerificationReport:
    lines = [l for l in text.splitlines() if l.strip()]
    if lines[0] != "verification-report":
        raise InvalidArgumentError("not a verification report")
    tau = rigorous = None
    region = {}
    constants, provenance, grid_max, passed, stat, worst = {}, {}, {}, {}, {}, {}
    counts = {}
    for line in lines[1:]:
        if line.startswith("tau = "):
            tau = float(line.split("=", 1)[1])
        elif line.startswith("rigorous = "):
            rigorous = bool(int(line.split("=", 1)[1]))
        elif line.startswith(("region_lower = ", "region_upper = ")):
            key, _, vals = line.partition(" = ")
            region[key] = np.array([float(t) for t in vals.split()])
        elif line.startswith("constant "):
            body = line[len("constant "):]
            key, _, rest = body.partition(" = ")
            val, _, prov = rest.partition(" [")
            constants[key] = float(val)
            provenance[key] = prov.rstrip("]")
        elif line.startswith("grid "):
            body = line[len("grid "):]
            ineq, _, rest = body.partition(": max = ")
            val, _, flag = rest.partition(" pass = ")
            grid_max[ineq] = float(val)
            passed[ineq] = bool(int(flag))
        elif line.startswith("worst "):
            body = line[len("worst "):]
            ineq, _, rest = body.partition(" = ")
            val, _, pt = rest.partition(" at ")
            worst[ineq] = (float(val), np.array([float(t) for t in pt.split()]))
        elif line.startswith("stat "):
            body = line[len("stat "):]
            ineq, _, val = body.partition(" = ")
            stat[ineq] = float(val)
        elif line.startswith("counts "):
            toks = line.split()
            counts = {"grid": int(toks[3]), "stat": int(toks[6])}
    return VerificationReport(
        region_lower=region["region_lower"], region_upper=region["region_upper"],
        tau=tau, constants=constants, provenance=provenance, grid_max=grid_max,
        passed=passed, stat_fractions=stat, counts=counts, worst=worst,
        rigorous=rigorous,
    )


def spectral_norm(mat: np.ndarray) -> float:
    return float(np.linalg.norm(mat, 2))


def composite_constants(bounds: dict, lam: float, mu: float, alpha: float) -> tuple:
    """The two largest-eigenvalue Lipschitz constants assembled from bounds.

    Exactly the printed compositions: the disturbed-contraction LMI gets
    L_Mdot + 2 (S_M L_A + S_A L_M + S_M S_B L_K + S_B S_K L_M
    + S_M S_K L_B + (lam/2) L_M + (1/mu) S_M L_M S_Bw^2), and the output
    LMI gets lam L_M + (2/alpha) S_C S_D L_K + (4/alpha) S_K S_D^2 L_K.
    """
    b = bounds
    l_eq10 = b["L_Mdot"] + 2.0 * (
        b["S_M"] * b["L_A"] + b["S_A"] * b["L_M"]
        + b["S_M"] * b["S_B"] * b["L_K"] + b["S_B"] * b["S_K"] * b["L_M"]
        + b["S_M"] * b["S_K"] * b["L_B"] + (lam / 2.0) * b["L_M"]
        + (1.0 / mu) * b["S_M"] * b["L_M"] * b["S_Bw"] ** 2
    )
    l_eq11 = (lam * b["L_M"]
              + (2.0 / alpha) * b["S_C"] * b["S_D"] * b["L_K"]
              + (4.0 / alpha) * b["S_K"] * b["S_D"] ** 2 * b["L_K"])
    return l_eq10, l_eq11


def _sampled_sup(values: np.ndarray) -> float:
    return float(values.max()) * 1.5


def _sampled_lipschitz(outputs_a, outputs_b, pts_a, pts_b) -> float:
    dist = np.linalg.norm(pts_a - pts_b, axis=1)
    keep = dist > 1e-12
    diff = np.linalg.norm(
        (outputs_a - outputs_b).reshape(outputs_a.shape[0], -1), axis=1)
    ratio = diff[keep] / dist[keep]
    return float(ratio.max()) * 1.5 if ratio.size else 0.0


def lipschitz_constants(ckpt: CertificateCheckpoint, sys: ControlAffineSystem,
                        region: Region, sel: OutputSelector | None = None,
                        n_samples: int = 512, seed: int = 0) -> tuple:
    """BoundSet for the region plus the two composite constants.

    Rigorous entries: S_M <= 1/w_floor (eigenvalue floor of W), L_W and
    L_M <= L_W / w_floor^2 from layer operator norms, S_C / S_D / L_B /
    L_Bw for constant maps.  Everything else is a sampled supremum over
    the region with a 1.5x safety factor, tagged "sampled".
    """
    if sel is None:
        from .systems import output_selector

        sel = output_selector(sys, "positions")
    region.validate_within(sys)
    rng = np.random.Generator(np.random.Philox(key=derive_seed(seed, "lipschitz")))
    values, prov, notes = {}, {}, {}

    w_floor = ckpt.hyper.w_floor
    values["S_M"] = 1.0 / w_floor
    prov["S_M"] = "rigorous"
    notes["S_M"] = "W >= w_floor I so ||W^-1|| <= 1/w_floor"

    theta = ckpt.metric.theta.unpack()
    w1n = spectral_norm(theta["w_w1"])
    w2n = spectral_norm(theta["w_w2"])
    c_sup = w2n * np.sqrt(ckpt.metric.hidden) + float(np.linalg.norm(theta["w_b2"]))
    l_w = 2.0 * c_sup * w2n * w1n
    values["L_W"] = l_w
    prov["L_W"] = "rigorous"
    notes["L_W"] = "2 sup||C|| * prod of layer operator norms (|tanh| <= 1, tanh 1-Lipschitz)"
    values["L_M"] = l_w / w_floor ** 2
    prov["L_M"] = "rigorous"
    notes["L_M"] = "dM = -M dW M with ||M|| <= 1/w_floor"

    values["S_C"] = spectral_norm(sel.C)
    values["S_D"] = spectral_norm(sel.D)
    prov["S_C"] = prov["S_D"] = "rigorous"
    notes["S_C"] = notes["S_D"] = "selector rows are constant"

    pts_a = region.sample(rng, n_samples)
    # pair each point with a nearby partner and a far partner for slopes
    jitter = pts_a + rng.normal(scale=1e-3, size=pts_a.shape) * (
        region.upper - region.lower + 1e-12)
    jitter = np.clip(jitter, region.lower, region.upper)
    far = region.sample(rng, n_samples)
    pts_b = np.concatenate([jitter, far])
    pts_ab = np.concatenate([pts_a, pts_a])

    def inter(pts):
        xs, x_stars, u_stars, ws = region.split(sys, pts)
        return intermediates_batch(sys, ckpt, sel, xs, x_stars, u_stars, ws), (
            xs, u_stars, ws)

    ia, (xs_a, us_a, ws_a) = inter(pts_a)
    ib, _ = inter(pts_b)
    ia2 = {k: np.concatenate([v, v]) for k, v in ia.items()}

    values["S_A"] = _sampled_sup(np.linalg.norm(ia["A"], 2, axis=(1, 2)))
    values["S_K"] = _sampled_sup(np.linalg.norm(ia["K"], 2, axis=(1, 2)))
    values["S_Mdot"] = _sampled_sup(np.linalg.norm(ia["Mdot"], 2, axis=(1, 2)))
    for key in ("S_A", "S_K", "S_Mdot"):
        prov[key] = "sampled"

    values["L_A"] = _sampled_lipschitz(ia2["A"], ib["A"], pts_ab, pts_b)
    values["L_K"] = _sampled_lipschitz(ia2["K"], ib["K"], pts_ab, pts_b)
    values["L_Mdot"] = _sampled_lipschitz(ia2["Mdot"], ib["Mdot"], pts_ab, pts_b)
    for key in ("L_A", "L_K", "L_Mdot"):
        prov[key] = "sampled"

    if sys.const_b is not None:
        values["S_B"] = spectral_norm(sys.const_b)
        values["L_B"] = 0.0
        prov["S_B"] = prov["L_B"] = "rigorous"
        notes["S_B"] = notes["L_B"] = "B is constant"
    else:
        bs_a = np.stack([sys.B(x) for x in xs_a])
        xs_b = region.split(sys, pts_b)[0]
        bs_b = np.stack([sys.B(x) for x in xs_b])
        values["S_B"] = _sampled_sup(np.linalg.norm(bs_a, 2, axis=(1, 2)))
        values["L_B"] = _sampled_lipschitz(
            np.concatenate([bs_a, bs_a]), bs_b, pts_ab, pts_b)
        prov["S_B"] = prov["L_B"] = "sampled"
    if sys.const_bw is not None:
        values["S_Bw"] = spectral_norm(sys.const_bw)
        values["L_Bw"] = 0.0
        prov["S_Bw"] = prov["L_Bw"] = "rigorous"
        notes["S_Bw"] = notes["L_Bw"] = "B_w is constant"
    else:
        bw_a = np.stack([sys.Bw(x) for x in xs_a])
        xs_b = region.split(sys, pts_b)[0]
        bw_b = np.stack([sys.Bw(x) for x in xs_b])
        values["S_Bw"] = _sampled_sup(np.linalg.norm(bw_a, 2, axis=(1, 2)))
        values["L_Bw"] = _sampled_lipschitz(
            np.concatenate([bw_a, bw_a]), bw_b, pts_ab, pts_b)
        prov["S_Bw"] = prov["L_Bw"] = "sampled"

    bounds = BoundSet(values=values, provenance=prov, notes=notes)
    alpha, mu = ckpt.gains.alpha, ckpt.gains.mu
    if sel.label in ckpt.tubes:
        alpha = ckpt.tubes[sel.label].alpha
        mu = ckpt.tubes[sel.label].mu
    l_eq10, l_eq11 = composite_constants(values, ckpt.hyper.lam, mu, alpha)
    return bounds, l_eq10, l_eq11


def _grid_points(region: Region, tau: float, cap: int) -> np.ndarray:
    span = region.upper - region.lower
    free = np.nonzero(span > 0)[0]
    d = max(len(free), 1)
    axes = []
    total = 1
    for i in free:
        # per-axis spacing tau/sqrt(d) keeps every point of the region
        # within tau/2 of a grid point, satisfying the tau-net premise
        count = int(np.ceil(span[i] * np.sqrt(d) / tau)) + 1
        total *= count
        if total > cap:
            raise GridTooLargeError(
                f"grid needs > {cap} points ({total} and counting) at tau={tau}; "
                "restrict the region or raise tau")
        axes.append(np.linspace(region.lower[i], region.upper[i], count))
    pts = np.tile(region.lower, (total, 1))
    if free.size:
        mesh = np.meshgrid(*axes, indexing="ij")
        for k, i in enumerate(free):
            pts[:, i] = mesh[k].ravel()
    return pts


def grid_verify(ckpt: CertificateCheckpoint, sys: ControlAffineSystem,
                sel: OutputSelector, region: Region, tau: float,
                cap: int = GRID_POINT_CAP, stat_samples: int = 2000,
                seed: int = 0) -> VerificationReport:
    """Certify the two gain LMIs on a region via the Lipschitz margin rule.

    An inequality passes iff its grid maximum of lambda_max stays below
    -L*tau, with L from :func:`lipschitz_constants`.  The verdict is
    "certified modulo sampled bounds" unless every constant it rests on
    is rigorous; the report says which.
    """
    if tau <= 0:
        raise InvalidArgumentError("tau must be positive")
    region.validate_within(sys)
    pts = _grid_points(region, tau, cap)
    bounds, l_eq10, l_eq11 = lipschitz_constants(ckpt, sys, region, sel, seed=seed)

    grid_max = {"eq10": -np.inf, "eq11": -np.inf}
    worst = {"eq10": (-np.inf, pts[0]), "eq11": (-np.inf, pts[0])}
    for start in range(0, pts.shape[0], 4096):
        chunk = pts[start:start + 4096]
        xs, x_stars, u_stars, ws = region.split(sys, chunk)
        mats = matrices_batch(sys, ckpt, sel, xs, x_stars, u_stars, ws,
                              with_aids=False)
        for ineq, arr in (("eq10", mats["C1"]), ("eq11", -mats["C2"])):
            vals = jacobi_eigvals(arr)[:, 0]
            k = int(np.argmax(vals))
            if vals[k] > grid_max[ineq]:
                grid_max[ineq] = float(vals[k])
                worst[ineq] = (float(vals[k]), chunk[k].copy())

    passed = {
        "eq10": grid_max["eq10"] < -l_eq10 * tau,
        "eq11": grid_max["eq11"] < -l_eq11 * tau,
    }

    rng = np.random.Generator(np.random.Philox(key=derive_seed(seed, "grid-stat")))
    stat_pts = region.sample(rng, stat_samples)
    xs, x_stars, u_stars, ws = region.split(sys, stat_pts)
    stat = _violations(sys, ckpt, sel, xs, x_stars, u_stars, ws)

    constants = dict(bounds.values)
    constants["L_eq10"] = l_eq10
    constants["L_eq11"] = l_eq11
    provenance = dict(bounds.provenance)
    provenance["L_eq10"] = provenance["L_eq11"] = "derived"
    return VerificationReport(
        region_lower=region.lower.copy(), region_upper=region.upper.copy(),
        tau=tau, constants=constants, provenance=provenance,
        grid_max=grid_max, passed=passed, stat_fractions=stat,
        counts={"grid": pts.shape[0], "stat": stat_samples},
        worst=worst, rigorous=bounds.fully_rigorous,
    )


def _violations(sys, ckpt, sel, xs, x_stars, u_stars, ws) -> dict:
    mats = matrices_batch(sys, ckpt, sel, xs, x_stars, u_stars, ws)
    out = {
        "C1": float(np.mean(jacobi_eigvals(mats["C1"])[:, 0] > 0.0)),
        "C2": float(np.mean(jacobi_eigvals(-mats["C2"])[:, 0] > 0.0)),
    }
    if "C3" in mats:
        out["C3"] = float(np.mean(jacobi_eigvals(mats["C3"])[:, 0] > 0.0))
        frob = np.sqrt((mats["C4"] ** 2).sum(axis=(1, 2, 3)))
        out["C4"] = float(np.mean(frob > 1e-6))
    else:
        out["C3"] = 0.0
        out["C4"] = 0.0
    return out


def violation_rate(ckpt: CertificateCheckpoint, sys: ControlAffineSystem,
                   sel: OutputSelector, n_samples: int, seed: int) -> dict:
    """Fractions of fresh distribution samples violating each inequality."""
    if n_samples < 1:
        raise InvalidArgumentError("n_samples must be >= 1")
    xs, x_stars, u_stars, ws = sample_dataset_arrays(
        sys, n_samples, derive_seed(seed, "violation"))
    out = {}
    for start in range(0, n_samples, 4096):
        sl = slice(start, min(start + 4096, n_samples))
        part = _violations(sys, ckpt, sel, xs[sl], x_stars[sl], u_stars[sl], ws[sl])
        weight = (sl.stop - sl.start) / n_samples
        for k, v in part.items():
            out[k] = out.get(k, 0.0) + v * weight
    return out
