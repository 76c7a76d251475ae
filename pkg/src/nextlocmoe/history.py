"""Causal dilated TCN that summarizes the historical trajectory."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class TcnConfig:
    layers: int = 2
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2)
    channels: int = 64
    d_hist: int = 64

    def __post_init__(self):
        if self.layers < 1 or self.kernel < 1:
            raise ValueError("layers and kernel must be >= 1")
        if len(self.dilations) != self.layers or any(d < 1 for d in self.dilations):
            raise ValueError("need one positive dilation per layer")
        if self.channels < 1 or self.d_hist < 1:
            raise ValueError("channels and d_hist must be positive")

    @property
    def receptive_field(self) -> int:
        return 1 + sum(d * (self.kernel - 1) for d in self.dilations)


class CausalConv1d(nn.Conv1d):
    """Conv1d padded on the left only, so step t sees steps <= t."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, dilation: int):
        super().__init__(in_ch, out_ch, kernel, dilation=dilation)
        self.left_pad = (kernel - 1) * dilation
        nn.init.zeros_(self.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(F.pad(x, (self.left_pad, 0)))


class TemporalConvEncoder(nn.Module):
    def __init__(self, in_dim: int, cfg: TcnConfig = TcnConfig()):
        super().__init__()
        self.cfg = cfg
        widths = [in_dim] + [cfg.channels] * cfg.layers
        self.convs = nn.ModuleList(
            CausalConv1d(widths[i], widths[i + 1], cfg.kernel, cfg.dilations[i]) for i in range(cfg.layers)
        )
        self.out = nn.Linear(cfg.channels, cfg.d_hist)
        nn.init.zeros_(self.out.bias)

    def forward(self, z_h: torch.Tensor) -> torch.Tensor:
        """z_h: (B, M, D) -> (B, d_hist), read from the last time step."""
        if z_h.shape[-2] == 0:
            raise ValueError("historical trajectory is empty")
        h = z_h.transpose(1, 2)
        for conv in self.convs:
            y = F.gelu(conv(h))
            h = y + h if y.shape == h.shape else y
        return self.out(h[:, :, -1])


def encode_history(z_h: torch.Tensor, encoder: TemporalConvEncoder) -> torch.Tensor:
    """Single-trajectory convenience: (M, D) -> (d_hist,)."""
    if z_h.dim() != 2 or z_h.shape[0] == 0:
        raise ValueError("z_h must be a non-empty (M, D) matrix")
    return encoder(z_h.unsqueeze(0))[0]
