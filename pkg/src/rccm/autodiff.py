"""Differentiation engine for certificate training.

Three capabilities back the certificate losses: Jacobians of network
outputs with respect to their inputs, directional derivatives (JVPs),
and parameter gradients of scalar losses that themselves contain those
input-Jacobians.  The nesting is forward-over-reverse: forward-mode
duals over the (small) state input, one reverse sweep over the (large)
parameter vector.  torch.func supplies the transforms; everything runs
in float64 because certificate margins are too small for 32-bit drift.

Functions handed to this module must map torch tensors to torch tensors
using differentiable torch primitives.  Inputs and results cross the
module boundary as numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch.func import grad_and_value, jacfwd, jvp

DTYPE = torch.float64

# Gradient bit-reproducibility must not depend on worker count, and torch's
# intra-op threading changes reduction order.  All artifact parallelism lives
# above this layer (ordered reductions), so the tensor engine stays serial.
torch.set_num_threads(1)


class GraphError(RuntimeError):
    """A function could not be traced through the differentiation engine."""


class NumericOverflowError(ArithmeticError):
    """A non-finite value appeared; carries the offending node's name."""

    def __init__(self, node: str):
        super().__init__(f"non-finite value at node '{node}'")
        self.node = node


def tensor(a) -> torch.Tensor:
    """Convert array-likes to float64 torch tensors (shared gateway)."""
    if isinstance(a, torch.Tensor):
        return a.to(DTYPE)
    arr = np.asarray(a, dtype=np.float64)
    if not arr.flags.writeable:
        arr = arr.copy()  # torch cannot alias read-only buffers
    return torch.as_tensor(arr, dtype=DTYPE)


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter storage with a named-slice layout.

    ``layout`` maps tensor names to shapes in a fixed order; ``values``
    concatenates the row-major raveling of each named tensor.  Packing
    and unpacking are exact inverses.
    """

    layout: tuple[tuple[str, tuple[int, ...]], ...]
    values: np.ndarray

    def __post_init__(self):
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.values.shape != (expected,):
            raise ValueError(
                f"flat size {self.values.shape} does not match layout size {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            raise NumericOverflowError("params")

    @staticmethod
    def pack(named: dict[str, np.ndarray]) -> "ParamVector":
        layout = tuple((name, tuple(arr.shape)) for name, arr in named.items())
        flat = np.concatenate([np.asarray(arr, dtype=np.float64).ravel() for arr in named.values()])
        flat.flags.writeable = False
        return ParamVector(layout=layout, values=flat)

    def unpack(self) -> dict[str, np.ndarray]:
        out = {}
        offset = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[offset:offset + size].reshape(shape).copy()
            offset += size
        return out

    def to_tensors(self) -> dict[str, torch.Tensor]:
        return {name: tensor(arr) for name, arr in self.unpack().items()}

    def replace(self, values: np.ndarray) -> "ParamVector":
        vals = np.asarray(values, dtype=np.float64).copy()
        vals.flags.writeable = False
        return ParamVector(layout=self.layout, values=vals)

    @property
    def size(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class DiffGraph:
    """A recorded forward evaluation: function, inputs, cached value."""

    fn: Callable
    inputs: tuple
    value: object

    def replay(self):
        """Re-execute the recorded computation; must match the cache."""
        return self.fn(*self.inputs)


def record(fn: Callable, *inputs) -> DiffGraph:
    """Run ``fn`` on tensor-converted inputs and cache the result."""
    tins = tuple(tensor(a) for a in inputs)
    try:
        value = fn(*tins)
    except (RuntimeError, TypeError) as exc:
        raise GraphError(f"function is not traceable: {exc}") from exc
    return DiffGraph(fn=fn, inputs=tins, value=value)


def input_jacobian(fn: Callable, at: np.ndarray) -> np.ndarray:
    """Jacobian of ``fn`` at ``at`` by forward-mode over input coordinates.

    For output shape (...,) the result has shape (..., n) with
    J[..., j] = d fn(. )[...] / d at[j].
    """
    x = tensor(at)
    if not torch.all(torch.isfinite(x)):
        raise NumericOverflowError("input")
    try:
        jac = jacfwd(fn)(x)
    except (RuntimeError, TypeError) as exc:
        raise GraphError(f"function is not traceable: {exc}") from exc
    return jac.detach().numpy()


def directional_derivative(fn: Callable, at: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """JVP of ``fn``: equals input_jacobian(fn, at) contracted with direction."""
    x = tensor(at)
    v = tensor(direction)
    if v.shape != x.shape:
        raise GraphError(
            f"direction shape {tuple(v.shape)} does not match input shape {tuple(x.shape)}"
        )
    try:
        _, dot = jvp(fn, (x,), (v,))
    except (RuntimeError, TypeError) as exc:
        raise GraphError(f"function is not traceable: {exc}") from exc
    return dot.detach().numpy()


def parameter_gradient(loss_fn: Callable, params: ParamVector, *args) -> ParamVector:
    """Reverse-mode gradient of a scalar loss over all named parameters.

    ``loss_fn(tensors, *args)`` receives the parameters as a dict of
    tensors and must return a scalar tensor.  Paths through
    input-Jacobian nodes (jacfwd/jvp inside the loss) are handled by the
    forward-over-reverse composition.
    """
    tensors = params.to_tensors()
    try:
        grads, value = grad_and_value(lambda p: loss_fn(p, *args))(tensors)
    except (RuntimeError, TypeError) as exc:
        raise GraphError(f"loss is not traceable: {exc}") from exc
    if not torch.isfinite(value):
        raise NumericOverflowError("loss")
    flat_parts = []
    for name, _ in params.layout:
        g = grads[name]
        if not torch.all(torch.isfinite(g)):
            raise NumericOverflowError(f"grad[{name}]")
        flat_parts.append(g.detach().numpy().ravel())
    return params.replace(np.concatenate(flat_parts))
