"""Function-expert MoE over the spatial slice of current-trajectory records.

Routing is top-k over a softmax; the selected experts' outputs are weighted by
their full-softmax probabilities (no renormalization over the selected set)
and added to the shared general spatial embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .taxonomy import LOCATION_FUNCTIONS, TextEncoder


@dataclass(frozen=True)
class FunctionRouting:
    logits: np.ndarray
    probs: np.ndarray
    selected: tuple[int, ...]  # descending probability, ties -> lower index


def top_k_mask(probs: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean mask of the k largest entries along the last axis.

    A stable descending sort keeps equal probabilities in index order, which
    gives the lower-index tie-break.
    """
    k = min(k, probs.shape[-1])
    order = torch.sort(probs.detach(), dim=-1, descending=True, stable=True).indices
    mask = torch.zeros_like(probs, dtype=torch.bool)
    return mask.scatter(-1, order[..., :k], True)


class FunctionRouter(nn.Module):
    def __init__(self, in_dim: int, n_experts: int = 5, hidden: int = 80):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_experts)

    def forward(self, e_c0: torch.Tensor, h_hist: torch.Tensor) -> torch.Tensor:
        if h_hist.dim() == e_c0.dim() - 1:
            h_hist = h_hist.unsqueeze(-2).expand(*e_c0.shape[:-1], h_hist.shape[-1])
        z = torch.cat([e_c0, h_hist], dim=-1)
        if z.shape[-1] != self.fc1.in_features:
            raise ValueError(f"router expects {self.fc1.in_features} features, got {z.shape[-1]}")
        return self.fc2(F.gelu(self.fc1(z)))


class FunctionExperts(nn.Module):
    """K_f linear maps (x, y) -> d_xy, stored as stacked weight/bias tensors."""

    def __init__(self, n_experts: int = 5, d_xy: int = 128, names: Sequence[str] = LOCATION_FUNCTIONS):
        super().__init__()
        self.names = tuple(names)[:n_experts]
        self.weight = nn.Parameter(torch.empty(n_experts, d_xy, 2))
        self.bias = nn.Parameter(torch.zeros(n_experts, d_xy))
        nn.init.uniform_(self.weight, -0.1, 0.1)

    @property
    def n_experts(self) -> int:
        return self.weight.shape[0]

    def forward(self, xy: torch.Tensor) -> torch.Tensor:
        """(..., 2) -> (..., K_f, d_xy): every expert applied to every point."""
        return torch.einsum("kdc,...c->...kd", self.weight, xy) + self.bias

    def apply_one(self, i: int, xy: torch.Tensor) -> torch.Tensor:
        if not 0 <= i < self.n_experts:
            raise IndexError(f"function expert {i} out of range [0, {self.n_experts})")
        return xy @ self.weight[i].T + self.bias[i]


class LocationSemanticsMoE(nn.Module):
    def __init__(self, record_dim: int, d_hist: int, d_xy: int, n_experts: int = 5, k: int = 2, hidden: int = 80):
        super().__init__()
        if not 1 <= k <= n_experts:
            raise ValueError(f"k must be in [1, {n_experts}]")
        self.k = k
        self.router = FunctionRouter(record_dim + d_hist, n_experts, hidden)
        self.experts = FunctionExperts(n_experts, d_xy)

    def forward(
        self,
        xy: torch.Tensor,
        e_c0: torch.Tensor,
        h_hist: torch.Tensor,
        shared: torch.Tensor,
        selected: torch.Tensor | None = None,
    ):
        """Return (enhanced spatial embedding, logits, probs, selected mask).

        ``selected`` freezes the expert sets (used by gradient checks).
        """
        logits = self.router(e_c0, h_hist)
        probs = torch.softmax(logits, dim=-1)
        if selected is None:
            selected = top_k_mask(probs, self.k)
        weights = probs * selected.to(probs.dtype)
        e_func = torch.einsum("...k,...kd->...d", weights, self.experts(xy))
        return shared + e_func, logits, probs, selected


def route_functions(e_c0: torch.Tensor, h_hist: torch.Tensor, moe: LocationSemanticsMoE) -> FunctionRouting:
    """Routing decision for a single record embedding."""
    with torch.no_grad():
        logits = moe.router(e_c0, h_hist)
        probs = torch.softmax(logits.double(), dim=-1)
    order = torch.sort(probs, descending=True, stable=True).indices[: moe.k]
    return FunctionRouting(logits.double().numpy(), probs.numpy(), tuple(int(i) for i in order))


def apply_function_expert(experts: FunctionExperts, i: int, x: float, y: float) -> torch.Tensor:
    xy = torch.tensor([x, y], dtype=experts.weight.dtype)
    return experts.apply_one(i, xy)


def enhance_spatial_embedding(
    xy: tuple[float, float], routing: FunctionRouting, shared_spatial: torch.Tensor, experts: FunctionExperts
) -> torch.Tensor:
    """shared + sum over selected experts of p_i * f_i(x, y)."""
    out = shared_spatial.clone()
    for i in routing.selected:
        out = out + float(routing.probs[i]) * apply_function_expert(experts, i, *xy)
    return out


def init_function_experts(
    experts: FunctionExperts, descriptions: Sequence[str], encoder: TextEncoder, seed: int = 0
) -> FunctionExperts:
    """Put an encoded category description into each expert's bias.

    The bias is ``P @ encode(text)`` with a fixed seeded projection P; the
    2-column weights keep their small random init and learn the geometry.
    """
    if len(descriptions) != experts.n_experts:
        raise ValueError(f"need {experts.n_experts} descriptions, got {len(descriptions)}")
    enc = np.stack([encoder.encode(t) for t in descriptions])
    enc = enc / np.maximum(np.linalg.norm(enc, axis=1, keepdims=True), 1e-12)
    d_xy = experts.bias.shape[1]
    proj = np.random.default_rng(seed).standard_normal((d_xy, enc.shape[1])) / np.sqrt(d_xy)
    with torch.no_grad():
        experts.bias.copy_(torch.from_numpy(enc @ proj.T))
    return experts
