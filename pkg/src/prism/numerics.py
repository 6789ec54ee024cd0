"""Tensor helpers, reverse-mode gradients and the dilated convolution primitive.

Reverse-mode differentiation is delegated to torch autograd, restricted to a
fixed set of primitives: :func:`value_and_grad` walks the recorded graph and
rejects anything outside :data:`PRIMITIVES`. :func:`finite_difference_grad`
is the independent oracle used by the test suite; it never touches autograd.
"""
from __future__ import annotations

import math
import re
from typing import Callable, Mapping

import numpy as np
import torch

__all__ = [
    "PRIMITIVES",
    "ContractError",
    "UnsupportedPrimitiveError",
    "tensor",
    "value_and_grad",
    "finite_difference_grad",
    "relative_error",
    "conv1d_dilated",
    "conv1d_reference",
    "same_padding",
    "computation_record",
]


class ContractError(ValueError):
    """A function was called outside its documented contract."""


class UnsupportedPrimitiveError(ContractError):
    pass


# autograd node name (without "Backward<N>") -> primitive family
PRIMITIVES: dict[str, str] = {
    "Mm": "matmul", "Addmm": "matmul", "Bmm": "matmul", "Mv": "matmul",
    "Dot": "matmul", "Baddbmm": "matmul",
    "Convolution": "conv1d-dilated",
    "Add": "add", "Sub": "add", "Rsub": "add", "Neg": "add",
    "Mul": "mul", "Div": "mul", "Pow": "mul", "Sqrt": "mul", "Rsqrt": "mul",
    "Softmax": "softmax", "LogSoftmax": "softmax", "Logsumexp": "softmax",
    "Sigmoid": "softmax",
    "Log": "log", "Exp": "exp",
    "Relu": "max-with-zero", "ClampMin": "max-with-zero", "Clamp": "max-with-zero",
    "Maximum": "max-with-zero", "Amax": "max-with-zero", "Max": "max-with-zero",
    "Mean": "mean", "Sum": "mean", "NativeLayerNorm": "mean",
    "LinalgVectorNorm": "L2-normalize", "Norm": "L2-normalize",
    "Cat": "concatenate", "Stack": "concatenate", "ConstantPadNd": "concatenate",
    "Slice": "slice", "Select": "slice", "Index": "slice", "Gather": "slice",
    "IndexSelect": "slice", "MaskedFill": "slice", "Where": "slice",
    "View": "slice", "UnsafeView": "slice", "Reshape": "slice",
    "ReshapeAlias": "slice", "T": "slice", "Transpose": "slice",
    "Permute": "slice", "Expand": "slice", "Clone": "slice", "Squeeze": "slice",
    "Unsqueeze": "slice", "Unbind": "slice", "Split": "slice",
    "SplitWithSizes": "slice", "Alias": "slice", "AsStrided": "slice",
    "ToCopy": "slice", "Copy": "slice", "Flip": "slice", "NllLoss": "slice",
    # fused attention kernels: matmul -> softmax -> matmul in one node
    "ScaledDotProductFlashAttentionForCpu": "softmax",
    "ScaledDotProductEfficientAttention": "softmax",
}

_NODE_RE = re.compile(r"^(?P<name>\w+?)Backward\d*$")


def tensor(data, shape=None, dtype=torch.float64, requires_grad=False, checked=True):
    """Build a torch tensor, rejecting NaN/Inf when ``checked``."""
    t = torch.as_tensor(np.asarray(data), dtype=dtype)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape) or math.prod(shape) != t.numel():
            raise ContractError(f"shape {shape} does not match {t.numel()} values")
        t = t.reshape(shape)
    if checked and not torch.isfinite(t).all():
        raise ContractError("non-finite values in tensor")
    return t.clone().requires_grad_(requires_grad)


def _node_primitive(node) -> str | None:
    name = type(node).__name__
    if name == "AccumulateGrad":
        return None
    m = _NODE_RE.match(name)
    key = m.group("name") if m else name
    if key not in PRIMITIVES:
        raise UnsupportedPrimitiveError(f"unsupported primitive: {name}")
    return PRIMITIVES[key]


def computation_record(out: torch.Tensor) -> list[str]:
    """Primitive families of the graph behind ``out``, topologically ordered
    (inputs first). Raises :class:`UnsupportedPrimitiveError` on unknown ops."""
    order: list = []
    seen: set[int] = set()
    stack = [(out.grad_fn, False)] if out.grad_fn is not None else []
    while stack:
        node, expanded = stack.pop()
        if node is None:
            continue
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child, _ in node.next_functions:
            if child is not None and id(child) not in seen:
                stack.append((child, False))
    record = []
    for node in order:
        prim = _node_primitive(node)
        if prim is not None:
            record.append(prim)
    return record


def value_and_grad(
    f: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    check_primitives: bool = True,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Evaluate scalar ``f(params)`` and its gradient w.r.t. every parameter.

    Parameters are copied, so the caller's tensors are never mutated. A
    parameter that does not influence the output gets a zero gradient.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    out = f(leaves)
    if not isinstance(out, torch.Tensor) or out.numel() != 1:
        raise ContractError("f must return a single scalar tensor")
    if not torch.isfinite(out).all():
        raise ContractError(f"f returned a non-finite value: {out.item()}")
    if check_primitives:
        computation_record(out)
    names = list(leaves)
    grads = torch.autograd.grad(
        out.reshape(()), [leaves[k] for k in names], allow_unused=True
    )
    result = {}
    for k, g in zip(names, grads):
        result[k] = torch.zeros_like(leaves[k]) if g is None else g.detach()
    return float(out.item()), result


def finite_difference_grad(
    f: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
) -> dict[str, torch.Tensor]:
    """Central finite differences of scalar ``f`` in double precision."""
    base = {k: v.detach().to(torch.float64).clone() for k, v in params.items()}
    grads = {}
    with torch.no_grad():
        for name, value in base.items():
            flat = value.reshape(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(f(base))
                flat[i] = orig - eps
                lo = float(f(base))
                flat[i] = orig
                g[i] = (hi - lo) / (2 * eps)
            grads[name] = g.reshape(value.shape)
    return grads


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = torch.as_tensor(analytic, dtype=torch.float64)
    n = torch.as_tensor(numeric, dtype=torch.float64)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(floor, dtype=torch.float64))
    return float(((a - n).abs() / denom).max()) if a.numel() else 0.0


def same_padding(length: int, kernel: int, dilation: int, stride: int) -> tuple[int, int, int]:
    """(left, right, out_length) for the symmetric "same-ceil" convention.

    Output frame ``j`` is centred on input frame ``stride * j``.
    """
    out_len = -(-length // stride)
    left = (kernel - 1) // 2 * dilation
    needed = (out_len - 1) * stride + (kernel - 1) * dilation + 1
    right = needed - length - left
    return left, max(right, 0), out_len


def conv1d_dilated(
    x: torch.Tensor,
    kernel: torch.Tensor,
    dilation: int = 1,
    stride: int = 1,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Dilated, strided 1-d convolution over frames.

    ``x`` is ``(T, C)`` or batched ``(B, T, C)``; ``kernel`` is ``(K, C, C')``.
    Returns ``(T', C')`` / ``(B, T', C')`` with ``T' = ceil(T / stride)``.
    """
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ContractError(f"kernel size must be odd, got {k}")
    if dilation < 1 or stride < 1:
        raise ContractError("dilation and stride must be positive")
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    B, T, C = x.shape
    if C != kernel.shape[1]:
        raise ContractError(f"input has {C} channels, kernel expects {kernel.shape[1]}")
    c_out = kernel.shape[2]
    left, right, out_len = same_padding(T, k, dilation, stride)
    # one matmul against all taps, then sum the shifted tap outputs
    taps = x.reshape(B * T, C) @ kernel.permute(1, 0, 2).reshape(C, k * c_out)
    taps = torch.nn.functional.pad(taps.reshape(B, T, k, c_out), (0, 0, 0, 0, left, right))
    span = (out_len - 1) * stride + 1
    y = taps[:, 0:span:stride, 0]
    for i in range(1, k):
        y = y + taps[:, i * dilation:i * dilation + span:stride, i]
    if bias is not None:
        y = y + bias
    return y[0] if squeeze else y


def conv1d_reference(x, kernel, dilation=1, stride=1, bias=None):
    """Same contract as :func:`conv1d_dilated`, via ``torch.nn.functional.conv1d``."""
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    k = kernel.shape[0]
    left, right, out_len = same_padding(x.shape[1], k, dilation, stride)
    h = torch.nn.functional.pad(x.transpose(1, 2), (left, right))
    y = torch.nn.functional.conv1d(h, kernel.permute(2, 1, 0), bias=bias, stride=stride, dilation=dilation)
    y = y[:, :, :out_len].transpose(1, 2)
    return y[0] if squeeze else y
