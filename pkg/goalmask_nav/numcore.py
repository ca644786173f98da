"""
Differentiable array primitives for the navigation policy.

Wraps the torch operators the policy is built from behind a registry of named
op-kinds. Every primitive validates its input shapes up front and raises a
ShapeError naming the op-kind and the offending dimensions, so a wiring mistake
deep inside the model surfaces as a readable message instead of a backend
stack trace.

The torch autograd graph is the computation tape. A ComputationTape can be
activated with `recording()` to keep an ordered log of the primitives applied
(op-kind and shapes) and to register the leaves whose gradients `backward()`
should return.

Precision: float32 is the default for training; `precision("float64")`
switches the default dtype for gradient checks, where finite-difference
tolerances are meaningless in 32-bit.

Key features:
- forward_primitive(op_kind, inputs, **attrs) dispatch with shape checks
- backward(scalar, leaves) returning one gradient per leaf (zeros if unused)
- finite_difference_check for scalar functions of one array
- check_module_gradients for sampled coordinates of every module parameter
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn


MASK_VALUE = -1e9
DEFAULT_GROUPS = 8
NORM_EPS = 1e-5

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
}


class NumcoreError(Exception):
    """Base exception for array primitive errors."""
    pass


class ShapeError(NumcoreError, ValueError):
    """Raised when input shapes are incompatible for an op-kind."""

    def __init__(self, op_kind: str, message: str):
        self.op_kind = op_kind
        super().__init__(f"{op_kind}: {message}")


class NonScalarOutputError(NumcoreError):
    """Raised when backward() is asked to differentiate a non-scalar."""
    pass


# ---------------------------------------------------------------------------
# Precision
# ---------------------------------------------------------------------------

def resolve_dtype(name: str) -> torch.dtype:
    try:
        return _DTYPES[name]
    except KeyError as exc:
        raise NumcoreError(f"Unsupported precision '{name}' (expected one of {sorted(_DTYPES)})") from exc


def set_precision(name: str) -> None:
    torch.set_default_dtype(resolve_dtype(name))


def get_precision() -> str:
    current = torch.get_default_dtype()
    for name, dtype in _DTYPES.items():
        if dtype == current:
            return name
    return str(current)


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default floating dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(resolve_dtype(name))
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class TapeEntry:
    op_kind: str
    input_shapes: tuple
    output_shape: tuple


@dataclass
class ComputationTape:
    """Ordered record of primitive applications plus the watched leaves."""
    entries: List[TapeEntry] = field(default_factory=list)
    leaves: Dict[str, Tensor] = field(default_factory=dict)

    def watch(self, name: str, tensor: Tensor) -> Tensor:
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self.leaves[name] = tensor
        return tensor

    def watch_module(self, module: nn.Module, prefix: str = "") -> None:
        for name, param in module.named_parameters():
            self.watch(f"{prefix}{name}", param)

    def record(self, op_kind: str, inputs: Sequence, output: Tensor) -> None:
        shapes = tuple(tuple(x.shape) for x in inputs if isinstance(x, Tensor))
        self.entries.append(TapeEntry(op_kind, shapes, tuple(output.shape)))

    def op_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for entry in self.entries:
            counts[entry.op_kind] = counts.get(entry.op_kind, 0) + 1
        return counts

    def __len__(self) -> int:
        return len(self.entries)


_ACTIVE_TAPE: contextvars.ContextVar[Optional[ComputationTape]] = contextvars.ContextVar(
    "goalmask_nav_active_tape", default=None
)


@contextlib.contextmanager
def recording(tape: Optional[ComputationTape] = None) -> Iterator[ComputationTape]:
    """Record primitive applications on `tape` (a fresh one if omitted)."""
    tape = tape if tape is not None else ComputationTape()
    token = _ACTIVE_TAPE.set(tape)
    try:
        yield tape
    finally:
        _ACTIVE_TAPE.reset(token)


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------

PRIMITIVES: Dict[str, Callable[..., Tensor]] = {}


def primitive(op_kind: str):
    def register(fn: Callable[..., Tensor]) -> Callable[..., Tensor]:
        PRIMITIVES[op_kind] = fn
        return fn
    return register


def forward_primitive(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply a registered primitive to `inputs` and record it on the active tape."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError as exc:
        raise NumcoreError(f"Unknown op-kind '{op_kind}'") from exc
    output = fn(*inputs, **attrs)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(op_kind, inputs, output)
    return output


def _require_rank(op_kind: str, name: str, x: Tensor, rank: int) -> None:
    if x.dim() != rank:
        raise ShapeError(op_kind, f"{name} must have {rank} dims, got shape {tuple(x.shape)}")


@primitive("matmul")
def _matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 2:
        raise ShapeError("matmul", f"operands need rank >= 1 and >= 2, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape[-1]} (a{tuple(a.shape)}) vs {b.shape[-2]} (b{tuple(b.shape)})")
    return torch.matmul(a, b)


@primitive("linear")
def _linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError("linear", f"input features {x.shape[-1]} do not match weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


@primitive("conv1d")
def _conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    _require_rank("conv1d", "input", x, 3)
    _require_rank("conv1d", "kernel", weight, 3)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("conv1d", f"input channels {x.shape[1]} do not match kernel in-channels {weight.shape[1]}")
    if x.shape[2] + 2 * padding < weight.shape[2]:
        raise ShapeError("conv1d", f"input length {x.shape[2]} (padding {padding}) shorter than kernel {weight.shape[2]}")
    return F.conv1d(x, weight, bias, stride=stride, padding=padding)


@primitive("conv2d")
def _conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    _require_rank("conv2d", "input", x, 4)
    _require_rank("conv2d", "kernel", weight, 4)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", f"input channels {x.shape[1]} do not match kernel in-channels {weight.shape[1]}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


@primitive("upsample1d")
def _upsample1d(x: Tensor, scale: int = 2) -> Tensor:
    _require_rank("upsample1d", "input", x, 3)
    return F.interpolate(x, scale_factor=scale, mode="nearest")


@primitive("softmax")
def _softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


@primitive("attention")
def _attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """Scaled dot-product attention with an optional additive mask."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("attention", f"query dim {q.shape[-1]} does not match key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", f"key length {k.shape[-2]} does not match value length {v.shape[-2]}")
    scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if mask is not None:
        try:
            torch.broadcast_shapes(mask.shape, scores.shape)
        except RuntimeError as exc:
            raise ShapeError("attention", f"mask {tuple(mask.shape)} does not broadcast to scores {tuple(scores.shape)}") from exc
        scores = scores + mask
    weights = torch.softmax(scores, dim=-1)
    return torch.matmul(weights, v)


@primitive("layer_norm")
def _layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = NORM_EPS) -> Tensor:
    if tuple(weight.shape) != (x.shape[-1],):
        raise ShapeError("layer_norm", f"weight {tuple(weight.shape)} does not match features {x.shape[-1]}")
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


@primitive("group_norm")
def _group_norm(x: Tensor, weight: Tensor, bias: Tensor, groups: int = DEFAULT_GROUPS, eps: float = NORM_EPS) -> Tensor:
    if x.dim() < 3:
        raise ShapeError("group_norm", f"input must be (batch, channels, ...), got {tuple(x.shape)}")
    if x.shape[1] % groups != 0:
        raise ShapeError("group_norm", f"channels {x.shape[1]} not divisible by groups {groups}")
    return F.group_norm(x, groups, weight, bias, eps)


@primitive("relu")
def _relu(x: Tensor) -> Tensor:
    return torch.relu(x)


@primitive("gelu")
def _gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


@primitive("tanh")
def _tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


@primitive("film")
def _film(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Feature-wise affine modulation of (B, C, L) features by (B, C) scale/shift."""
    _require_rank("film", "input", x, 3)
    if tuple(scale.shape) != tuple(x.shape[:2]) or tuple(shift.shape) != tuple(x.shape[:2]):
        raise ShapeError("film", f"scale {tuple(scale.shape)} / shift {tuple(shift.shape)} must be {tuple(x.shape[:2])}")
    return x * scale.unsqueeze(-1) + shift.unsqueeze(-1)


@primitive("concat")
def _concat(*tensors: Tensor, dim: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat", "no inputs")
    rank = tensors[0].dim()
    axis = dim % rank
    for t in tensors[1:]:
        if t.dim() != rank:
            raise ShapeError("concat", f"rank mismatch {tuple(tensors[0].shape)} vs {tuple(t.shape)}")
        for i in range(rank):
            if i != axis and t.shape[i] != tensors[0].shape[i]:
                raise ShapeError("concat", f"dimension {i} differs: {tuple(tensors[0].shape)} vs {tuple(t.shape)}")
    return torch.cat(tensors, dim=dim)


@primitive("mean")
def _mean(x: Tensor, dim=None, keepdim: bool = False) -> Tensor:
    return x.mean() if dim is None else x.mean(dim=dim, keepdim=keepdim)


@primitive("sum")
def _sum(x: Tensor, dim=None, keepdim: bool = False) -> Tensor:
    return x.sum() if dim is None else x.sum(dim=dim, keepdim=keepdim)


def _elementwise(op_kind: str, fn: Callable[[Tensor, Tensor], Tensor]) -> Callable[[Tensor, Tensor], Tensor]:
    def apply(a: Tensor, b: Tensor) -> Tensor:
        shape_a = tuple(a.shape) if isinstance(a, Tensor) else ()
        shape_b = tuple(b.shape) if isinstance(b, Tensor) else ()
        try:
            torch.broadcast_shapes(shape_a, shape_b)
        except RuntimeError as exc:
            raise ShapeError(op_kind, f"shapes {shape_a} and {shape_b} do not broadcast") from exc
        return fn(a, b)
    PRIMITIVES[op_kind] = apply
    return apply


_elementwise("add", torch.add)
_elementwise("sub", torch.sub)
_elementwise("mul", torch.mul)
_elementwise("div", torch.div)


# Convenience wrappers used by the model code.

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return forward_primitive("matmul", [a, b])


def linear(x: Tensor, layer: nn.Linear) -> Tensor:
    return forward_primitive("linear", [x, layer.weight, layer.bias])


def conv1d(x: Tensor, layer: nn.Conv1d) -> Tensor:
    return forward_primitive("conv1d", [x, layer.weight, layer.bias],
                             stride=layer.stride[0], padding=layer.padding[0])


def conv2d(x: Tensor, layer: nn.Conv2d) -> Tensor:
    return forward_primitive("conv2d", [x, layer.weight, layer.bias],
                             stride=layer.stride[0], padding=layer.padding[0])


def upsample1d(x: Tensor, scale: int = 2) -> Tensor:
    return forward_primitive("upsample1d", [x], scale=scale)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    return forward_primitive("attention", [q, k, v], mask=mask)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return forward_primitive("softmax", [x], dim=dim)


def layer_norm(x: Tensor, layer: nn.LayerNorm) -> Tensor:
    return forward_primitive("layer_norm", [x, layer.weight, layer.bias], eps=layer.eps)


def group_norm(x: Tensor, layer: nn.GroupNorm) -> Tensor:
    return forward_primitive("group_norm", [x, layer.weight, layer.bias],
                             groups=layer.num_groups, eps=layer.eps)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind not in ("relu", "gelu", "tanh"):
        raise NumcoreError(f"Unknown activation '{kind}'")
    return forward_primitive(kind, [x])


def film(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    return forward_primitive("film", [x, scale, shift])


def concat(tensors: Sequence[Tensor], dim: int = -1) -> Tensor:
    return forward_primitive("concat", list(tensors), dim=dim)


def mean(x: Tensor, dim=None, keepdim: bool = False) -> Tensor:
    return forward_primitive("mean", [x], dim=dim, keepdim=keepdim)


def mse(prediction: Tensor, target: Tensor) -> Tensor:
    diff = forward_primitive("sub", [prediction, target])
    return mean(forward_primitive("mul", [diff, diff]))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

Leaves = Union[ComputationTape, Mapping[str, Tensor], Sequence[Tensor]]


def backward(output: Tensor, leaves: Leaves, retain_graph: bool = False):
    """Gradients of a scalar `output` with respect to every leaf.

    Returns a dict when leaves come from a tape or mapping, otherwise a list in
    leaf order. Leaves the output does not depend on get all-zero gradients.
    """
    if output.numel() != 1:
        raise NonScalarOutputError(f"backward requires a scalar output, got shape {tuple(output.shape)}")
    if not output.requires_grad:
        raise NumcoreError("output is not connected to any leaf that requires gradients")

    if isinstance(leaves, ComputationTape):
        names: Optional[List[str]] = list(leaves.leaves)
        tensors = list(leaves.leaves.values())
    elif isinstance(leaves, Mapping):
        names = list(leaves)
        tensors = list(leaves.values())
    else:
        names = None
        tensors = list(leaves)

    grads = torch.autograd.grad(output.reshape(()), tensors, allow_unused=True, retain_graph=retain_graph)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    if names is None:
        return grads
    return dict(zip(names, grads))


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str = ""
    checked: int = 0
    skipped: int = 0
    nonsmooth: int = 0

    @property
    def flagged(self) -> bool:
        return self.nonsmooth > 0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance and not self.flagged


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / (abs(numeric) + 1e-12)


def finite_difference_check(function: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-3) -> GradCheckReport:
    """Compare autograd gradients of a scalar function against central differences.

    Each coordinate is also tested for a kink: when the forward and backward
    one-sided slopes disagree by more than sqrt(step) * (1 + |central|) the
    coordinate is counted as nonsmooth and the report is flagged.
    """
    x = point.detach().clone().requires_grad_(True)
    value = function(x)
    analytic = backward(value, [x])[0].detach().reshape(-1)
    base = float(value.detach())

    flat = x.detach().clone().reshape(-1)
    worst, worst_index, nonsmooth = 0.0, -1, 0
    with torch.no_grad():
        for i in range(flat.numel()):
            original = float(flat[i])
            flat[i] = original + step
            plus = float(function(flat.reshape(point.shape)))
            flat[i] = original - step
            minus = float(function(flat.reshape(point.shape)))
            flat[i] = original

            central = (plus - minus) / (2 * step)
            forward_slope = (plus - base) / step
            backward_slope = (base - minus) / step
            if abs(forward_slope - backward_slope) > math.sqrt(step) * (1.0 + abs(central)):
                nonsmooth += 1
            err = relative_error(float(analytic[i]), central)
            if err > worst:
                worst, worst_index = err, i

    return GradCheckReport(
        max_rel_error=worst,
        worst=f"index {worst_index}" if worst_index >= 0 else "",
        checked=flat.numel(),
        nonsmooth=nonsmooth,
    )


def check_module_gradients(
    loss_fn: Callable[[], Tensor],
    module: nn.Module,
    step: float = 1e-3,
    coords_per_tensor: int = 8,
    floor: float = 0.0,
    generator: Optional[torch.Generator] = None,
) -> GradCheckReport:
    """Finite-difference check of `loss_fn` over sampled coordinates of every parameter.

    `loss_fn` must be deterministic (reseed any randomness inside it). Up to
    `coords_per_tensor` coordinates are drawn from each parameter tensor.
    Coordinates where both the analytic and the numeric derivative fall below
    `floor` are skipped and counted separately.
    """
    params = dict(module.named_parameters())
    loss = loss_fn()
    analytic = backward(loss, params)

    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    with torch.no_grad():
        for name, param in params.items():
            flat = param.data.view(-1)
            n = flat.numel()
            if n <= coords_per_tensor:
                indices = list(range(n))
            else:
                indices = torch.randperm(n, generator=generator)[:coords_per_tensor].tolist()
            grad_flat = analytic[name].reshape(-1)
            for i in indices:
                original = float(flat[i])
                flat[i] = original + step
                plus = float(loss_fn())
                flat[i] = original - step
                minus = float(loss_fn())
                flat[i] = original

                central = (plus - minus) / (2 * step)
                exact = float(grad_flat[i])
                if abs(exact) < floor and abs(central) < floor:
                    skipped += 1
                    continue
                checked += 1
                err = relative_error(exact, central)
                if err > worst:
                    worst, worst_name = err, f"{name}[{i}]"

    return GradCheckReport(max_rel_error=worst, worst=worst_name, checked=checked, skipped=skipped)
