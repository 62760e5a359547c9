"""Differentiable tensor ops, gradient checking, Adam and the TGODE1 checkpoint format.

Reverse-mode differentiation is delegated to torch autograd. The op wrappers
below add the shape/domain validation the rest of the package relies on.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

Tensor = torch.Tensor

MAGIC = b"TGODE1"


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, report: Mapping[str, int] | None = None):
        super().__init__(message)
        self.report = dict(report or {})


def _shapes(*ts: Tensor) -> str:
    return ", ".join(str(tuple(t.shape)) for t in ts)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul: incompatible shapes {_shapes(a, b)}")
    return a @ b


def _same_or_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise DimensionError(f"{name}: incompatible shapes {_shapes(a, b)}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_or_broadcast("add", a, b)
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_or_broadcast("sub", a, b)
    return a - b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_or_broadcast("mul", a, b)
    return a * b


def concat(ts: Sequence[Tensor]) -> Tensor:
    lead = {tuple(t.shape[:-1]) for t in ts}
    if len(lead) != 1:
        raise DimensionError(f"concat: leading dims differ {_shapes(*ts)}")
    return torch.cat(list(ts), dim=-1)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[-1]:
        raise DimensionError(f"slice: [{start}:{stop}] out of range for {tuple(x.shape)}")
    return x[..., start:stop]


def sum_(x: Tensor, dim: int | None = None) -> Tensor:
    return x.sum() if dim is None else x.sum(dim)


def mean(x: Tensor, dim: int | None = None) -> Tensor:
    return x.mean() if dim is None else x.mean(dim)


sigmoid = torch.sigmoid
tanh = torch.tanh
relu = torch.relu
exp = torch.exp


def log(x: Tensor) -> Tensor:
    if bool((x <= 0).any()):
        raise DomainError("log: non-positive input")
    return torch.log(x)


def softmax(x: Tensor) -> Tensor:
    if not bool(torch.isfinite(x).all()):
        raise DomainError("softmax: non-finite input")
    return torch.softmax(x, dim=-1)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = torch.sqrt((x * x).sum(-1, keepdim=True) + eps * eps)
    return x / norm


def squared_error(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"squared_error: shapes differ {_shapes(pred, target)}")
    return ((pred - target) ** 2).sum()


def gather_rows(x: Tensor, index: Tensor) -> Tensor:
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= x.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {tuple(x.shape)}")
    return x.index_select(0, index.reshape(-1)).reshape(*index.shape, *x.shape[1:])


def scatter_add_rows(values: Tensor, index: Tensor, num_rows: int) -> Tensor:
    if values.shape[0] != index.shape[0]:
        raise DimensionError(f"scatter_add_rows: {values.shape[0]} values vs {index.shape[0]} indices")
    out = values.new_zeros((num_rows, *values.shape[1:]))
    return out.index_add(0, index, values)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention; ``mask`` is boolean, True where attending is allowed."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: incompatible shapes {_shapes(q, k, v)}")
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "concat": lambda a, b: concat([a, b]),
    "slice": lambda x: slice_last(x, 0, max(1, x.shape[-1] - 1)),
    "sum": sum_,
    "mean": mean,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "l2_normalize": l2_normalize,
    "squared_error": squared_error,
    "gather_rows": gather_rows,
    "scatter_add_rows": scatter_add_rows,
    "attention": attention,
}


def backward(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise DimensionError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``param``."""
    grad = np.zeros(param.shape)
    flat = param.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            grad.flat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> dict[int, float]:
    """Max relative error between autograd and finite differences, per parameter position."""
    params = list(params)
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    out = {}
    for n, p in enumerate(params):
        analytic = p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(p.shape)
        out[n] = relative_error(analytic, numerical_gradient(fn, p, eps))
    return out


class Adam:
    """Bias-corrected adaptive-moment optimizer that refuses non-finite gradients."""

    def __init__(self, params: Iterable[Tensor] | Iterable[tuple[str, Tensor]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        items = list(params)
        if items and isinstance(items[0], tuple):
            self.names = [n for n, _ in items]
            self.params = [p for _, p in items]
        else:
            self.names = [str(i) for i in range(len(items))]
            self.params = items
        self.inner = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps, foreach=False)

    @property
    def step_count(self) -> int:
        states = [self.inner.state[p] for p in self.params if p in self.inner.state]
        return int(states[0]["step"]) if states else 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        report = {}
        for name, p in zip(self.names, self.params):
            if p.grad is not None:
                bad = int((~torch.isfinite(p.grad)).sum())
                if bad:
                    report[name] = bad
        if report:
            raise NonFiniteError(f"non-finite gradients in {len(report)} parameter(s)", report)
        self.inner.step()


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        for name in sorted(tensors):
            value = tensors[name]
            arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a TGODE1 checkpoint")
    pos = len(MAGIC)
    out = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
        pos += 4 * count
    return out
