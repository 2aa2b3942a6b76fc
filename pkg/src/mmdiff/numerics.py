"""Dense tensor operations with reverse-mode gradients, plus a finite-difference checker.

Forward ops are dispatched through :func:`forward_op`, which validates shapes,
runs the computation, and rejects non-finite results. Gradients come from the
reverse-mode tape (torch autograd); :func:`grad_check` verifies them against an
independent central finite-difference oracle and never trusts the tape.

Precision policy: float32 is the working precision for training; gradient
checks should be run in float64, where central differences are reliable.

Gradient accumulation policy: repeated :func:`backward` calls accumulate into
``.grad``; the caller is responsible for resetting gradients before each
optimization step.

Concurrency: tensors are treated as immutable once created (no in-place ops on
tape-tracked values); independent tapes may run in parallel, a single tape is
single-threaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

DEFAULT_DTYPE = torch.float32
CHECK_DTYPE = torch.float64

# epsilon added to the variance; keeps constant inputs from dividing by zero
NORM_EPS = 1e-5


class NumericError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


def seed_all(seed: int) -> None:
    """Seed the global RNG used for parameter init and training draws."""
    torch.manual_seed(seed)


def _shapes(tensors: Sequence[torch.Tensor]) -> str:
    return ", ".join(str(tuple(t.shape)) for t in tensors)


def _check_finite(op: str, out: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(out).all():
        raise NumericError(f"{op}: non-finite values in output")
    return out


def _op_matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else -1]:
        raise ValueError(f"matmul: incompatible shapes {_shapes([a, b])}")
    return a @ b


def _op_add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ValueError(f"add: shapes not broadcastable {_shapes([a, b])}") from None
    return a + b


def _op_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ValueError(f"mul: shapes not broadcastable {_shapes([a, b])}") from None
    return a * b


def _op_softmax_rows(x: torch.Tensor) -> torch.Tensor:
    if x.dim() < 1:
        raise ValueError("softmax_rows: needs at least one axis")
    return torch.softmax(x, dim=-1)


def _op_layer_norm(
    x: torch.Tensor,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    if weight is not None and weight.shape != x.shape[-1:]:
        raise ValueError(f"layer_norm: weight shape {tuple(weight.shape)} != last dim of {tuple(x.shape)}")
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps=NORM_EPS)


def _op_group_norm(
    x: torch.Tensor,
    num_groups: int = 1,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    if x.dim() < 2:
        raise ValueError(f"group_norm: expected (batch, channels, ...) input, got {tuple(x.shape)}")
    if x.shape[1] % num_groups != 0:
        raise ValueError(f"group_norm: {x.shape[1]} channels not divisible by {num_groups} groups")
    return F.group_norm(x, num_groups, weight, bias, eps=NORM_EPS)


def _op_conv2d(
    x: torch.Tensor,
    w: torch.Tensor,
    b: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    if x.dim() != 4 or w.dim() != 4:
        raise ValueError(f"conv2d: expected 4D input and weight, got {_shapes([x, w])}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input channels {x.shape[1]} != weight channels {w.shape[1]}")
    return F.conv2d(x, w, b, stride=stride, padding=padding)


def _op_downsample(x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4 or x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError(f"downsample: expected 4D input with even spatial extents, got {tuple(x.shape)}")
    return F.avg_pool2d(x, 2)


def _op_upsample(x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4:
        raise ValueError(f"upsample: expected 4D input, got {tuple(x.shape)}")
    return F.interpolate(x, scale_factor=2, mode="nearest")


def _op_embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2:
        raise ValueError(f"embedding_lookup: table must be 2D, got {tuple(table.shape)}")
    if ids.is_floating_point():
        raise ValueError("embedding_lookup: ids must be integer")
    if ids.numel() and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    return F.embedding(ids, table)


def _op_silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def _op_gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


_OPS: dict[str, Callable[..., torch.Tensor]] = {
    "matmul": _op_matmul,
    "add": _op_add,
    "mul": _op_mul,
    "softmax_rows": _op_softmax_rows,
    "layer_norm": _op_layer_norm,
    "group_norm": _op_group_norm,
    "silu": _op_silu,
    "gelu": _op_gelu,
    "conv2d": _op_conv2d,
    "downsample": _op_downsample,
    "upsample": _op_upsample,
    "embedding_lookup": _op_embedding_lookup,
}


def op_names() -> tuple[str, ...]:
    return tuple(_OPS)


def forward_op(op: str, *inputs: torch.Tensor, **kwargs) -> torch.Tensor:
    """Run a named forward op with shape validation and a finiteness check.

    The op is recorded on the gradient tape whenever an input requires grad.
    Raises ValueError on shape mismatch (naming the op and shapes) and
    NumericError if the output contains NaN/Inf.
    """
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}; available: {sorted(_OPS)}")
    out = _OPS[op](*inputs, **kwargs)
    return _check_finite(op, out)


def backward(loss: torch.Tensor, leaves: Iterable[torch.Tensor] = ()) -> None:
    """Backpropagate a scalar loss; fills ``.grad`` on all connected leaves.

    Leaves passed explicitly that the loss does not depend on get a zero grad
    rather than None. Grads accumulate across calls; reset them before each
    step.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    loss.backward()
    for leaf in leaves:
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = torch.zeros_like(leaf)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_coords: int

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        status = "pass" if self.passed else "FAIL"
        return f"grad_check {status}: max rel error {self.max_rel_error:.3e} over {self.n_coords} coords"


def _scalarize(f: Callable[[torch.Tensor], torch.Tensor]) -> Callable[[torch.Tensor], torch.Tensor]:
    # Non-scalar outputs are reduced with a fixed pseudo-random projection so
    # that sign-symmetric errors cannot cancel the way they would under sum().
    weights: dict[tuple, torch.Tensor] = {}

    def g(x: torch.Tensor) -> torch.Tensor:
        y = f(x)
        if y.numel() == 1:
            return y.reshape(())
        key = tuple(y.shape)
        if key not in weights:
            gen = torch.Generator().manual_seed(0x5EED)
            weights[key] = torch.rand(y.shape, generator=gen, dtype=y.dtype)
        return (y * weights[key]).sum()

    return g


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    tolerance: float = 1e-5,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` at ``point`` against central differences.

    The relative error is measured against the overall gradient scale:
    ``max|analytic - numeric| / max(scale, 1e-8)`` with
    ``scale = max(max|analytic|, max|numeric|)``. Failures are reported, not
    raised. Use float64 points; float32 finite differences are unreliable.
    """
    fs = _scalarize(f)
    x = point.detach().clone().requires_grad_(True)
    out = fs(x)
    (analytic,) = torch.autograd.grad(out, x)

    numeric = torch.zeros_like(x)
    flat_x = x.detach().reshape(-1)
    flat_n = numeric.reshape(-1)
    with torch.no_grad():
        for i in range(flat_x.numel()):
            orig = flat_x[i].item()
            h = step * max(1.0, abs(orig))
            flat_x[i] = orig + h
            up = fs(x).item()
            flat_x[i] = orig - h
            down = fs(x).item()
            flat_x[i] = orig
            flat_n[i] = (up - down) / (2 * h)

    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-8)
    max_rel = (analytic - numeric).abs().max().item() / scale
    return GradCheckReport(max_rel_error=max_rel, passed=max_rel < tolerance, n_coords=flat_x.numel())


def grad_check_module(
    module: torch.nn.Module,
    inputs: Sequence[torch.Tensor],
    tolerance: float = 1e-5,
    check_inputs: bool = True,
) -> GradCheckReport:
    """Gradient-check a module w.r.t. every trainable parameter (and optionally inputs).

    Each leaf is perturbed with the others held fixed; the worst relative
    error over all leaves is reported.
    """
    leaves: list[tuple[str, torch.Tensor]] = [
        (name, p) for name, p in module.named_parameters() if p.requires_grad
    ]
    if check_inputs:
        leaves += [(f"input{i}", t) for i, t in enumerate(inputs) if t.is_floating_point()]

    worst = GradCheckReport(max_rel_error=0.0, passed=True, n_coords=0)
    for _, leaf in leaves:
        def f_diff(x: torch.Tensor, leaf=leaf) -> torch.Tensor:
            return _functional_call(module, leaf, x, inputs)

        report = grad_check(f_diff, leaf.detach(), tolerance=tolerance)
        worst = GradCheckReport(
            max_rel_error=max(worst.max_rel_error, report.max_rel_error),
            passed=worst.passed and report.passed,
            n_coords=worst.n_coords + report.n_coords,
        )
    return worst


def _functional_call(
    module: torch.nn.Module, leaf: torch.Tensor, value: torch.Tensor, args: Sequence[torch.Tensor]
) -> torch.Tensor:
    name = None
    for n, p in module.named_parameters():
        if p is leaf:
            name = n
            break
    if name is None:
        # leaf is an input tensor, not a parameter
        new_args = [value if a is leaf else a for a in args]
        return module(*new_args)
    # swap the parameter for a plain graph-connected tensor for one forward;
    # torch.func.functional_call does the same but rebinds the whole module
    # per call, which dominates the finite-difference loop
    *path, attr = name.split(".")
    owner = module
    for part in path:
        owner = getattr(owner, part)
    saved = owner._parameters.pop(attr)
    try:
        setattr(owner, attr, value)
        return module(*args)
    finally:
        delattr(owner, attr)
        owner._parameters[attr] = saved


def finite_difference_gradient(
    f: Callable[[torch.Tensor], float], point: torch.Tensor, step: float = 1e-5
) -> torch.Tensor:
    """Plain central-difference gradient of a scalar-valued function."""
    g = torch.zeros_like(point)
    flat_x = point.reshape(-1)
    flat_g = g.reshape(-1)
    for i in range(flat_x.numel()):
        orig = flat_x[i].item()
        h = step * max(1.0, abs(orig))
        flat_x[i] = orig + h
        up = float(f(point))
        flat_x[i] = orig - h
        down = float(f(point))
        flat_x[i] = orig
        flat_g[i] = (up - down) / (2 * h)
    return g


def sinusoidal_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of integer steps ``t``, shape (..., dim)."""
    if dim % 2:
        raise ValueError("sinusoidal_features: dim must be even")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    ang = t[..., None] * freqs
    return torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)
