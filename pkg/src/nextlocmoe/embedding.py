"""Spatial-temporal record embedding: [spatial | day | hour | duration]."""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from .data import Record

# coordinates outside this box almost surely were never normalized
_NORMALIZED_BOUND = 1.5


def _uniform_(t: torch.Tensor, fan_in: int) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(t, -bound, bound)


class STEmbedding(nn.Module):
    """Holds the four embedding generators.

    ``spatial`` is the general coordinate projection; the location-semantics
    MoE reuses its output as the shared expert, so there is a single generator.
    """

    def __init__(self, d_xy: int = 128, d_w: int = 16, d_d: int = 16, d_dur: int = 16):
        super().__init__()
        if min(d_xy, d_w, d_d, d_dur) <= 0:
            raise ValueError("embedding dimensions must be positive")
        self.d_xy, self.d_w, self.d_d, self.d_dur = d_xy, d_w, d_d, d_dur
        self.spatial = nn.Linear(2, d_xy)
        self.duration = nn.Linear(1, d_dur)
        self.day = nn.Embedding(7, d_w)
        self.hour = nn.Embedding(24, d_d)
        for lin in (self.spatial, self.duration):
            _uniform_(lin.weight, lin.in_features)
            _uniform_(lin.bias, lin.in_features)
        _uniform_(self.day.weight, 7)
        _uniform_(self.hour.weight, 24)

    @property
    def dim(self) -> int:
        return self.d_xy + self.d_w + self.d_d + self.d_dur

    def forward(self, xy: torch.Tensor, w: torch.Tensor, d: torch.Tensor, dur: torch.Tensor) -> torch.Tensor:
        if xy.numel() and xy.detach().abs().max() > _NORMALIZED_BOUND:
            raise ValueError("coordinates look unnormalized (|x| or |y| > 1.5)")
        return torch.cat(
            [self.spatial(xy), self.day(w), self.hour(d), self.duration(dur.unsqueeze(-1))], dim=-1
        )


def records_to_tensors(records: Sequence[Record], dtype=torch.float32) -> dict[str, torch.Tensor]:
    return {
        "xy": torch.tensor([[r.location.x, r.location.y] for r in records], dtype=dtype).reshape(-1, 2),
        "w": torch.tensor([r.w for r in records], dtype=torch.long),
        "d": torch.tensor([r.d for r in records], dtype=torch.long),
        "dur": torch.tensor([r.dur for r in records], dtype=dtype),
    }


def embed_record(r: Record, p: STEmbedding) -> torch.Tensor:
    return embed_trajectory([r], p)[0]


def embed_trajectory(rs: Sequence[Record], p: STEmbedding) -> torch.Tensor:
    """Row i is the embedding of ``rs[i]``; shape (len(rs), D)."""
    if len(rs) == 0:
        raise ValueError("cannot embed an empty trajectory")
    dtype = p.spatial.weight.dtype
    t = records_to_tensors(rs, dtype)
    return p(t["xy"], t["w"], t["d"], t["dur"])
