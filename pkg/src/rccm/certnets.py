"""Learned dual metric W(x), feedback controller u(x, x*, u*), and gains.

The dual metric is W(x) = C(x) C(x)^T + w_floor * I with C produced by a
two-layer tanh network, so symmetry and the eigenvalue floor hold for
every parameter value.  The controller is u = u* + phi2 . tanh(phi1 .
(x - x*)) with phi1, phi2 two-layer tanh networks of (x, x*); the
feedback term vanishes identically at x = x*, making nominal tracking
exact by construction.  Gains are reparameterized through softplus so
mu > 0 and alpha > mu cannot be violated by any optimizer step.

Checkpoints serialize to a single self-describing text document with
17-significant-digit decimals, which round-trip float64 bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch.func import jacfwd

from .autodiff import DTYPE, ParamVector, tensor
from .numerics import InvalidArgumentError, SymMatrix

CHECKPOINT_VERSION = 1


class CheckpointParseError(ValueError):
    """Malformed checkpoint file; message carries the offending location."""


class CheckpointVersionError(ValueError):
    """Checkpoint was written by an incompatible format version."""


def softplus(x: float) -> float:
    """Numerically stable log(1 + exp(x))."""
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def inv_softplus(y: float) -> float:
    """Inverse of softplus for y > 0."""
    if y <= 0:
        raise InvalidArgumentError(f"softplus is positive; cannot invert {y}")
    if y > 30.0:
        return y
    return y + math.log(-math.expm1(-y))


@dataclass(frozen=True)
class GainParams:
    """Unconstrained gain parameters; mu = softplus(raw_a), alpha = mu + softplus(raw_b)."""

    raw_a: float
    raw_b: float

    @property
    def mu(self) -> float:
        return softplus(self.raw_a)

    @property
    def alpha(self) -> float:
        return self.mu + softplus(self.raw_b)

    @staticmethod
    def from_alpha_mu(alpha: float, mu: float) -> "GainParams":
        if not (alpha > mu > 0):
            raise InvalidArgumentError(f"need alpha > mu > 0, got alpha={alpha}, mu={mu}")
        return GainParams(raw_a=inv_softplus(mu), raw_b=inv_softplus(alpha - mu))


@dataclass(frozen=True)
class MetricNet:
    """Two-layer tanh network producing the n x n factor C(x)."""

    n: int
    hidden: int
    w_floor: float
    theta: ParamVector


@dataclass(frozen=True)
class ControllerNet:
    """phi1: (x, x*) -> c x n and phi2: (x, x*) -> m x c, both two-layer tanh."""

    n: int
    m: int
    hidden: int
    c: int
    theta: ParamVector


def _uniform_layer(rng: np.random.Generator, out_dim: int, in_dim: int):
    bound = 1.0 / math.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    b = rng.uniform(-bound, bound, size=(out_dim,))
    return w, b


def init_metric(n: int, hidden: int, w_floor: float, rng: np.random.Generator,
                zero: bool = False) -> MetricNet:
    w1, b1 = _uniform_layer(rng, hidden, n)
    w2, b2 = _uniform_layer(rng, n * n, hidden)
    if zero:
        w2, b2 = np.zeros_like(w2), np.zeros_like(b2)
    theta = ParamVector.pack({"w_w1": w1, "w_b1": b1, "w_w2": w2, "w_b2": b2})
    return MetricNet(n=n, hidden=hidden, w_floor=w_floor, theta=theta)


def init_controller(n: int, m: int, hidden: int, c: int, rng: np.random.Generator,
                    zero: bool = False) -> ControllerNet:
    u1_w1, u1_b1 = _uniform_layer(rng, hidden, 2 * n)
    u1_w2, u1_b2 = _uniform_layer(rng, c * n, hidden)
    u2_w1, u2_b1 = _uniform_layer(rng, hidden, 2 * n)
    u2_w2, u2_b2 = _uniform_layer(rng, m * c, hidden)
    if zero:
        u2_w2, u2_b2 = np.zeros_like(u2_w2), np.zeros_like(u2_b2)
    theta = ParamVector.pack({
        "u1_w1": u1_w1, "u1_b1": u1_b1, "u1_w2": u1_w2, "u1_b2": u1_b2,
        "u2_w1": u2_w1, "u2_b1": u2_b1, "u2_w2": u2_w2, "u2_b2": u2_b2,
    })
    return ControllerNet(n=n, m=m, hidden=hidden, c=c, theta=theta)


# -- torch functional forwards (shared with the training loss) ----------

def metric_forward_t(p: dict, x: torch.Tensor, w_floor: float, n: int) -> torch.Tensor:
    h = torch.tanh(x @ p["w_w1"].mT + p["w_b1"])
    cvec = h @ p["w_w2"].mT + p["w_b2"]
    cmat = cvec.reshape(*cvec.shape[:-1], n, n)
    eye = torch.eye(n, dtype=DTYPE)
    return cmat @ cmat.mT + w_floor * eye


def controller_forward_t(p: dict, x: torch.Tensor, x_star: torch.Tensor,
                         u_star: torch.Tensor, n: int, m: int, c: int) -> torch.Tensor:
    y = torch.cat([x, x_star], dim=-1)
    h1 = torch.tanh(y @ p["u1_w1"].mT + p["u1_b1"])
    phi1 = (h1 @ p["u1_w2"].mT + p["u1_b2"]).reshape(*h1.shape[:-1], c, n)
    h2 = torch.tanh(y @ p["u2_w1"].mT + p["u2_b1"])
    phi2 = (h2 @ p["u2_w2"].mT + p["u2_b2"]).reshape(*h2.shape[:-1], m, c)
    err = (x - x_star)[..., None]
    fb = phi2 @ torch.tanh(phi1 @ err)
    return u_star + fb[..., 0]


# -- numpy-facing evaluation -------------------------------------------

def _cached_arrays(net) -> dict:
    # nets are immutable, so the unpacked views can live on the instance
    cache = getattr(net, "_np_arrays", None)
    if cache is None:
        cache = net.theta.unpack()
        object.__setattr__(net, "_np_arrays", cache)
    return cache


def metric_W(net: MetricNet, x: np.ndarray) -> SymMatrix:
    """Evaluate the dual metric at a single state."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.n,):
        raise InvalidArgumentError(f"expected state of dim {net.n}, got {x.shape}")
    w = metric_forward_t(net.theta.to_tensors(), tensor(x), net.w_floor, net.n)
    return SymMatrix.from_array(w.numpy())


def metric_W_batch(net: MetricNet, xs: np.ndarray) -> np.ndarray:
    """Dual metric on a batch of states; returns (batch, n, n)."""
    w = metric_forward_t(net.theta.to_tensors(), tensor(xs), net.w_floor, net.n)
    return w.numpy()


def controller_u(net: ControllerNet, x: np.ndarray, x_star: np.ndarray,
                 u_star: np.ndarray) -> np.ndarray:
    """Tracking control u* + phi2 tanh(phi1 (x - x*)); broadcasts over batches.

    Straight numpy forward (the rollout hot path); the torch twin
    controller_forward_t carries the same formula for training and the
    two are held together by an exact-agreement test.
    """
    p = _cached_arrays(net)
    x = np.asarray(x, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    y = np.concatenate([x, x_star], axis=-1)
    h1 = np.tanh(y @ p["u1_w1"].T + p["u1_b1"])
    phi1 = (h1 @ p["u1_w2"].T + p["u1_b2"]).reshape(*h1.shape[:-1], net.c, net.n)
    h2 = np.tanh(y @ p["u2_w1"].T + p["u2_b1"])
    phi2 = (h2 @ p["u2_w2"].T + p["u2_b2"]).reshape(*h2.shape[:-1], net.m, net.c)
    err = (x - x_star)[..., None]
    fb = phi2 @ np.tanh(phi1 @ err)
    return u_star + fb[..., 0]


def controller_K(net: ControllerNet, x: np.ndarray, x_star: np.ndarray,
                 u_star: np.ndarray) -> np.ndarray:
    """Feedback Jacobian d u / d x with (x*, u*) held fixed."""
    p = net.theta.to_tensors()
    xs_t, us_t = tensor(x_star), tensor(u_star)
    jac = jacfwd(lambda a: controller_forward_t(p, a, xs_t, us_t, net.n, net.m, net.c))
    return jac(tensor(x)).numpy()


# -- checkpoint ----------------------------------------------------------

@dataclass(frozen=True)
class TubeEntry:
    """A refined gain for one output selector plus its achieved residual."""

    alpha: float
    mu: float
    residual: float
    certified: bool


@dataclass(frozen=True)
class Hyperparams:
    lam: float
    w_floor: float
    hidden: int
    c: int
    seed: int


@dataclass(frozen=True)
class CertificateCheckpoint:
    """The persistent unit: networks, gains, tube registry, history."""

    system: str
    hyper: Hyperparams
    metric: MetricNet
    controller: ControllerNet
    gains: GainParams
    tubes: dict = field(default_factory=dict)           # label -> TubeEntry
    history: tuple = ()                                  # rows (epoch, loss, alpha)
    revision: int = 0
    version: int = CHECKPOINT_VERSION

    def with_tube(self, label: str, entry: TubeEntry) -> "CertificateCheckpoint":
        tubes = dict(self.tubes)
        tubes[label] = entry
        return replace(self, tubes=tubes, revision=self.revision + 1)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _emit_params(lines: list, section: str, pv: ParamVector, prefix: str):
    named = pv.unpack()
    lines.append(f"{section} {{")
    for name, shape in pv.layout:
        if not name.startswith(prefix):
            continue
        shape_s = " ".join(str(s) for s in shape)
        vals = " ".join(_fmt(v) for v in named[name].ravel())
        lines.append(f"  {name[len(prefix):]} ({shape_s}) = {vals}")
    lines.append("}")


def save_checkpoint(ckpt: CertificateCheckpoint, path: str) -> None:
    lines = [
        f"version = {ckpt.version}",
        f"system = {ckpt.system}",
        f"revision = {ckpt.revision}",
        "hyperparams {",
        f"  lambda = {_fmt(ckpt.hyper.lam)}",
        f"  w_floor = {_fmt(ckpt.hyper.w_floor)}",
        f"  hidden = {ckpt.hyper.hidden}",
        f"  c = {ckpt.hyper.c}",
        f"  seed = {ckpt.hyper.seed}",
        "}",
    ]
    _emit_params(lines, "theta_w", ckpt.metric.theta, "w_")
    _emit_params(lines, "theta_u1", ckpt.controller.theta, "u1_")
    _emit_params(lines, "theta_u2", ckpt.controller.theta, "u2_")
    lines += [
        "gains {",
        f"  raw_a = {_fmt(ckpt.gains.raw_a)}",
        f"  raw_b = {_fmt(ckpt.gains.raw_b)}",
        f"  alpha = {_fmt(ckpt.gains.alpha)}",
        f"  mu = {_fmt(ckpt.gains.mu)}",
        "}",
        "tubes {",
    ]
    for label, entry in ckpt.tubes.items():
        lines.append(
            f"  {label} = {_fmt(entry.alpha)} {_fmt(entry.mu)} "
            f"{_fmt(entry.residual)} {int(entry.certified)}"
        )
    lines.append("}")
    lines.append("history {")
    for epoch, loss, alpha in ckpt.history:
        lines.append(f"  {epoch} {_fmt(loss)} {_fmt(alpha)}")
    lines.append("}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


class _Parser:
    def __init__(self, path: str):
        with open(path) as fh:
            self.lines = fh.read().splitlines()
        self.pos = 0
        self.path = path

    def fail(self, msg: str):
        raise CheckpointParseError(f"{self.path}:{self.pos}: {msg}")

    def next_line(self) -> str:
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return line
        self.fail("unexpected end of file")

    def expect_kv(self, key: str) -> str:
        line = self.next_line()
        parts = line.split("=", 1)
        if len(parts) != 2 or parts[0].strip() != key:
            self.fail(f"expected '{key} = ...', got '{line}'")
        return parts[1].strip()

    def expect_open(self, section: str):
        line = self.next_line()
        if line != f"{section} {{":
            self.fail(f"expected section '{section} {{', got '{line}'")

    def block_lines(self) -> list:
        out = []
        while True:
            line = self.next_line()
            if line == "}":
                return out
            out.append(line)


def _parse_array_block(parser: _Parser, section: str, prefix: str) -> dict:
    parser.expect_open(section)
    out = {}
    for line in parser.block_lines():
        try:
            head, vals = line.split("=", 1)
            name, shape_s = head.strip().split("(", 1)
            shape = tuple(int(tok) for tok in shape_s.rstrip(") ").split())
            arr = np.fromiter(map(float, vals.split()), dtype=np.float64)
            if arr.size != int(np.prod(shape)):
                parser.fail(f"array '{name.strip()}' has {arr.size} values, "
                            f"expected {int(np.prod(shape))}")
            out[prefix + name.strip()] = arr.reshape(shape)
        except (ValueError, IndexError):
            parser.fail(f"malformed array line in section '{section}'")
    return out


def load_checkpoint(path: str) -> CertificateCheckpoint:
    parser = _Parser(path)
    version = int(parser.expect_kv("version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version} != supported {CHECKPOINT_VERSION}"
        )
    system = parser.expect_kv("system")
    revision = int(parser.expect_kv("revision"))
    parser.expect_open("hyperparams")
    hp = {}
    for line in parser.block_lines():
        k, _, v = line.partition("=")
        hp[k.strip()] = v.strip()
    try:
        hyper = Hyperparams(lam=float(hp["lambda"]), w_floor=float(hp["w_floor"]),
                            hidden=int(hp["hidden"]), c=int(hp["c"]), seed=int(hp["seed"]))
    except KeyError as exc:
        parser.fail(f"hyperparams missing key {exc}")
    w_arrays = _parse_array_block(parser, "theta_w", "w_")
    u1_arrays = _parse_array_block(parser, "theta_u1", "u1_")
    u2_arrays = _parse_array_block(parser, "theta_u2", "u2_")
    parser.expect_open("gains")
    gv = {}
    for line in parser.block_lines():
        k, _, v = line.partition("=")
        gv[k.strip()] = float(v)
    gains = GainParams(raw_a=gv["raw_a"], raw_b=gv["raw_b"])
    if gains.alpha != gv["alpha"] or gains.mu != gv["mu"]:
        parser.fail("stored alpha/mu do not match softplus of raw_a/raw_b")
    parser.expect_open("tubes")
    tubes = {}
    for line in parser.block_lines():
        label, _, rest = line.partition("=")
        toks = rest.split()
        if len(toks) != 4:
            parser.fail(f"tube row for '{label.strip()}' must have 4 fields")
        tubes[label.strip()] = TubeEntry(
            alpha=float(toks[0]), mu=float(toks[1]),
            residual=float(toks[2]), certified=bool(int(toks[3])),
        )
    parser.expect_open("history")
    history = []
    for line in parser.block_lines():
        toks = line.split()
        if len(toks) != 3:
            parser.fail("history rows must be 'epoch loss alpha'")
        history.append((int(toks[0]), float(toks[1]), float(toks[2])))

    try:
        n = w_arrays["w_w1"].shape[1]
        hidden = hyper.hidden
        metric = MetricNet(n=n, hidden=hidden, w_floor=hyper.w_floor,
                           theta=ParamVector.pack(w_arrays))
        m = u2_arrays["u2_w2"].shape[0] // hyper.c
        controller = ControllerNet(n=n, m=m, hidden=hidden, c=hyper.c,
                                   theta=ParamVector.pack({**u1_arrays, **u2_arrays}))
    except KeyError as exc:
        parser.fail(f"missing parameter array {exc}")
    return CertificateCheckpoint(
        system=system, hyper=hyper, metric=metric, controller=controller,
        gains=gains, tubes=tubes, history=tuple(history),
        revision=revision, version=version,
    )
