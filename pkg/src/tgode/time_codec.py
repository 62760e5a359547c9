"""Sinusoidal encoders for continuous normalized time."""

from __future__ import annotations

import math

import torch
from torch import nn


def default_frequencies(dim: int, base: float = 10000.0, max_freq: float = 8.0) -> torch.Tensor:
    # geometric ladder from max_freq cycles per unit time down by base^(-2i/dim)
    i = torch.arange(dim // 2, dtype=torch.float64)
    return max_freq * base ** (-2.0 * i / dim)


class TimeEncoder(nn.Module):
    """concat_i sin(2*pi*w_i*t + b_i) followed by concat_i cos(2*pi*w_i*t + b_i)."""

    def __init__(self, dim: int, learnable: bool = False, frequencies=None, offsets=None):
        super().__init__()
        if dim <= 0 or dim % 2:
            raise ValueError(f"time encoding dim must be a positive even integer, got {dim}")
        omega = default_frequencies(dim) if frequencies is None else torch.as_tensor(frequencies, dtype=torch.float64)
        offset = torch.zeros(dim // 2, dtype=torch.float64) if offsets is None else torch.as_tensor(offsets, dtype=torch.float64)
        if omega.shape != (dim // 2,) or offset.shape != (dim // 2,):
            raise ValueError("frequencies/offsets must have dim // 2 entries")
        if bool((omega <= 0).any()):
            raise ValueError("frequencies must be positive")
        self.dim = dim
        self.learnable = learnable
        if learnable:
            self.omega = nn.Parameter(omega.clone())
            self.offset = nn.Parameter(offset.clone())
        else:
            self.register_buffer("omega", omega.clone())
            self.register_buffer("offset", offset.clone())

    def forward(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=self.omega.dtype, device=self.omega.device)
        phase = 2 * math.pi * t.unsqueeze(-1) * self.omega + self.offset
        return torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1)


def encode_time(t, codec: TimeEncoder) -> torch.Tensor:
    return codec(t)
