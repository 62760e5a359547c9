"""Time-aware attention graph encoder and the generalized graph neural ODE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import nn

from .autodiff import NonFiniteError
from .graphs import adjacency_snapshot
from .time_codec import TimeEncoder


@dataclass
class EdgeBatch:
    """Edges of B per-example graphs flattened into one list.

    ``batch[e]`` names the example that owns edge ``e``; ``src``/``dst`` are
    item indices; ``time`` and ``weight`` follow the temporal graph edges.
    """

    batch: torch.Tensor
    src: torch.Tensor
    dst: torch.Tensor
    time: torch.Tensor
    weight: torch.Tensor
    num_graphs: int

    @classmethod
    def from_graphs(cls, graphs: Sequence, dtype=torch.float64) -> "EdgeBatch":
        b, s, d, t, w = [], [], [], [], []
        for n, g in enumerate(graphs):
            for e in g.edges:
                b.append(n)
                s.append(e.src_item)
                d.append(e.dst_item)
                t.append(e.time)
                w.append(e.weight)
        return cls(
            torch.tensor(b, dtype=torch.long), torch.tensor(s, dtype=torch.long),
            torch.tensor(d, dtype=torch.long), torch.tensor(t, dtype=dtype),
            torch.tensor(w, dtype=dtype), len(graphs),
        )

    @classmethod
    def from_arrays(cls, arrays: Sequence[tuple], dtype=torch.float64) -> "EdgeBatch":
        """``arrays[n]`` is a (src, dst, time, weight) tuple of numpy arrays for example n."""
        import numpy as np

        counts = [len(a[0]) for a in arrays]
        batch = np.repeat(np.arange(len(arrays)), counts)
        cat = lambda j, dt: np.concatenate([a[j] for a in arrays]).astype(dt) if arrays else np.zeros(0, dt)
        return cls(
            torch.from_numpy(batch.astype(np.int64)), torch.from_numpy(cat(0, np.int64)),
            torch.from_numpy(cat(1, np.int64)), torch.from_numpy(cat(2, np.float64)).to(dtype),
            torch.from_numpy(cat(3, np.float64)).to(dtype), len(arrays),
        )

    def mask_before(self, t: torch.Tensor, inclusive: bool = False) -> torch.Tensor:
        cutoff = t[self.batch]
        return self.time <= cutoff if inclusive else self.time < cutoff


class GraphEncoder(nn.Module):
    """e_i = sum_{j in N_i} a_ij W_V x_j + W_l x_i with a_ij = sigmoid(a . [W_Q x_i, W_K x_j, phi(t)])."""

    def __init__(self, d: int, phi_dim: int = 16):
        super().__init__()
        self.d = d
        self.W_Q = nn.Linear(d, d, bias=False)
        self.W_K = nn.Linear(d, d, bias=False)
        self.W_V = nn.Linear(d, d, bias=False)
        self.W_l = nn.Linear(d, d, bias=False)
        self.a = nn.Parameter(torch.empty(2 * d + phi_dim))
        nn.init.normal_(self.a, std=(2 * d + phi_dim) ** -0.5)
        self.phi = TimeEncoder(phi_dim)

    def edge_attention(self, x: torch.Tensor, src: torch.Tensor, dst: torch.Tensor,
                       phi_t: torch.Tensor) -> torch.Tensor:
        d = self.d
        q = self.W_Q(x) @ self.a[:d]
        k = self.W_K(x) @ self.a[d:2 * d]
        return torch.sigmoid(q[dst] + k[src] + phi_t @ self.a[2 * d:])

    def forward(self, x: torch.Tensor, edges: EdgeBatch, t: torch.Tensor, inclusive: bool = True) -> torch.Tensor:
        """Encode B graphs at times ``t`` (shape B); returns B x V x d.

        Each example sees the in-neighbours present in its snapshot at t;
        parallel edges count once.
        """
        V = x.shape[0]
        B = edges.num_graphs
        keep = edges.mask_before(t, inclusive)
        key = (edges.batch[keep] * V + edges.dst[keep]) * V + edges.src[keep]
        key = torch.unique(key)
        b, rest = key // (V * V), key % (V * V)
        dst, src = rest // V, rest % V
        phi_t = self.phi(t)[b]
        alpha = self.edge_attention(x, src, dst, phi_t)
        msg = alpha.unsqueeze(-1) * self.W_V(x)[src]
        out = self.W_l(x).unsqueeze(0).expand(B, V, self.d).reshape(B * V, self.d)
        out = out.index_add(0, b * V + dst, msg)
        return out.view(B, V, self.d)


def encode_graph(x: torch.Tensor, g, t: float, params: GraphEncoder, inclusive: bool = False) -> torch.Tensor:
    """Single-graph encoding over the snapshot of ``g`` at ``t``; returns V x d."""
    snap = adjacency_snapshot(g, t, inclusive=inclusive)
    edges = EdgeBatch(
        torch.zeros(snap.num_edges, dtype=torch.long), torch.from_numpy(snap.src),
        torch.from_numpy(snap.dst), torch.zeros(snap.num_edges, dtype=x.dtype),
        torch.from_numpy(snap.weight).to(x.dtype), 1,
    )
    return params(x, edges, torch.full((1,), float(t), dtype=x.dtype), inclusive=True)[0]


def normalized_propagate(h: torch.Tensor, edges: EdgeBatch, t: torch.Tensor) -> torch.Tensor:
    """D^-1 A h for each example's snapshot strictly before its own t. h: B x V x d."""
    B, V, d = h.shape
    w = edges.weight * edges.mask_before(t).to(h.dtype)
    row = edges.batch * V + edges.src
    col = edges.batch * V + edges.dst
    deg = torch.zeros(B * V, dtype=h.dtype).index_add(0, row, w)
    norm = w / deg[row].clamp_min(1e-30)
    out = torch.zeros(B * V, d, dtype=h.dtype).index_add(0, row, norm.unsqueeze(-1) * h.reshape(B * V, d)[col])
    return out.view(B, V, d)


class OdeFunction(nn.Module):
    """Shared drift f_us(e_us, g(t)) + f_cs(e_cs, g(t)).

    f_cs = W_a [e_cs, g(t)]; f_us = W_b [h_l, g(t)] where h_0 = e_us and
    h_{k+1} = tanh(A~(t) h_k W_c) + h_k over ``layers`` propagation steps.
    """

    def __init__(self, d: int, g_dim: int = 16, layers: int = 2, use_cs: bool = True):
        super().__init__()
        if layers < 1:
            raise ValueError("layers must be >= 1")
        self.d, self.layers, self.use_cs = d, layers, use_cs
        self.W_a = nn.Linear(d + g_dim, d, bias=False)
        self.W_b = nn.Linear(d + g_dim, d, bias=False)
        self.W_c = nn.Linear(d, d, bias=False)
        self.g = TimeEncoder(g_dim)

    def f_us(self, e_us: torch.Tensor, g_t: torch.Tensor, edges: EdgeBatch | None, t: torch.Tensor) -> torch.Tensor:
        h = e_us
        for _ in range(self.layers):
            prop = normalized_propagate(h, edges, t) if edges is not None else torch.zeros_like(h)
            h = torch.tanh(self.W_c(prop)) + h
        return self.W_b(torch.cat([h, g_t.unsqueeze(1).expand(*h.shape[:2], -1)], -1))

    def f_cs(self, e_cs: torch.Tensor, g_t: torch.Tensor) -> torch.Tensor:
        return self.W_a(torch.cat([e_cs, g_t.unsqueeze(1).expand(*e_cs.shape[:2], -1)], -1))

    def forward(self, t: torch.Tensor, e_us: torch.Tensor, e_cs: torch.Tensor | None,
                edges: EdgeBatch | None) -> torch.Tensor:
        g_t = self.g(t)
        drift = self.f_us(e_us, g_t, edges, t)
        if self.use_cs and e_cs is not None:
            drift = drift + self.f_cs(e_cs, g_t)
        return drift


def ode_derivative(state: Sequence[torch.Tensor], t: torch.Tensor, edges: EdgeBatch | None,
                   params: OdeFunction) -> torch.Tensor:
    e_us, e_cs = state[0], state[1] if len(state) > 1 else None
    return params(t, e_us, e_cs, edges)


def integrate_rk4(f: Callable, state0, t_start, t_end, steps: int = 4):
    """Classical fixed-step RK4 from ``t_start`` to ``t_end``.

    ``f(t, state)`` returns the derivative; ``state`` is a tensor or a tuple of
    tensors whose leading dimension is the batch when ``t_start``/``t_end`` are
    vectors (one interval per example).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    single = isinstance(state0, torch.Tensor)
    y = (state0,) if single else tuple(state0)
    ref = y[0]
    t0 = torch.as_tensor(t_start, dtype=ref.dtype)
    t1 = torch.as_tensor(t_end, dtype=ref.dtype)
    if bool((t1 < t0).any()):
        raise ValueError("t_end must not precede t_start")
    h = (t1 - t0) / steps

    def bshape(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        return v.reshape(v.shape + (1,) * (like.dim() - v.dim())) if v.dim() else v

    def call(t, ys):
        out = f(t, ys[0] if single else ys)
        return (out,) if isinstance(out, torch.Tensor) else tuple(out)

    def axpy(ys, ks, scale):
        return tuple(yi + bshape(scale, yi) * ki for yi, ki in zip(ys, ks))

    t = t0
    for step in range(steps):
        k1 = call(t, y)
        k2 = call(t + h / 2, axpy(y, k1, h / 2))
        k3 = call(t + h / 2, axpy(y, k2, h / 2))
        k4 = call(t + h, axpy(y, k3, h))
        y = tuple(
            yi + bshape(h / 6, yi) * (a + 2 * b + 2 * c + d)
            for yi, a, b, c, d in zip(y, k1, k2, k3, k4)
        )
        t = t0 + h * (step + 1)
        if not all(bool(torch.isfinite(yi).all()) for yi in y):
            raise NonFiniteError(f"non-finite ODE state at RK4 step {step}", {"step": step})
    return y[0] if single else y
