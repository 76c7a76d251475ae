"""User-group MoE that replaces the feed-forward sublayer of upper layers.

Scores come from a fusion MLP over [hidden state; history; group prior] for
every expert, then a linear gate. Experts are selected by cumulative
probability mass (smallest prefix of the sorted distribution reaching tau)
and mixed with their full-softmax probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .taxonomy import USER_GROUPS, TextEncoder


@dataclass(frozen=True)
class UserRouting:
    scores: np.ndarray
    probs: np.ndarray
    selected: tuple[int, ...]  # in selection order
    cumulative: float
    entropy: float


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ffn: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ffn)
        self.fc2 = nn.Linear(d_ffn, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class UserGroupExpert(nn.Module):
    """LoRA adapters on both weight matrices of a shared frozen FFN.

    The base FFN is passed in at call time rather than registered here, so the
    K_p experts of a layer share one read-only copy.
    """

    def __init__(self, base: FeedForward, rank: int = 8, alpha: float = 16.0, name: str = ""):
        super().__init__()
        d_model, d_ffn = base.fc1.in_features, base.fc1.out_features
        self.name = name
        self.scaling = alpha / rank
        self.a1 = nn.Parameter(torch.empty(rank, d_model))
        self.b1 = nn.Parameter(torch.zeros(d_ffn, rank))
        self.a2 = nn.Parameter(torch.empty(rank, d_ffn))
        self.b2 = nn.Parameter(torch.zeros(d_model, rank))
        nn.init.kaiming_uniform_(self.a1, a=math.sqrt(5))
        nn.init.kaiming_uniform_(self.a2, a=math.sqrt(5))

    def forward(self, x: torch.Tensor, base: FeedForward, base_pre: torch.Tensor | None = None) -> torch.Tensor:
        """``base_pre`` may carry a precomputed ``base.fc1(x)``; it is identical
        for every expert of the layer."""
        s = self.scaling
        pre = base.fc1(x) if base_pre is None else base_pre
        h = F.gelu(pre + s * (x @ self.a1.T) @ self.b1.T)
        return base.fc2(h) + s * (h @ self.a2.T) @ self.b2.T


class UserRouter(nn.Module):
    def __init__(self, d_model: int, d_hist: int, d_prior: int, d_fuse: int = 64):
        super().__init__()
        self.in_dim = d_model + d_hist + d_prior
        self.fusion = nn.Sequential(nn.Linear(self.in_dim, d_fuse), nn.GELU(), nn.Linear(d_fuse, d_fuse))
        self.gate = nn.Linear(d_fuse, 1)

    def forward(self, x: torch.Tensor, h_hist: torch.Tensor, priors: torch.Tensor) -> torch.Tensor:
        """x: (B, d_model), h_hist: (B, d_hist), priors: (K, d_prior) -> scores (B, K)."""
        B, K = x.shape[0], priors.shape[0]
        z = torch.cat(
            [x.unsqueeze(1).expand(B, K, -1), h_hist.unsqueeze(1).expand(B, K, -1), priors.unsqueeze(0).expand(B, K, -1)],
            dim=-1,
        )
        if z.shape[-1] != self.in_dim:
            raise ValueError(f"router expects {self.in_dim} features, got {z.shape[-1]}")
        return self.gate(self.fusion(z)).squeeze(-1)


def threshold_mask(probs: torch.Tensor, tau: float) -> torch.Tensor:
    """Vectorized threshold selection over the last axis (boolean mask)."""
    p = probs.detach()
    sorted_p, order = torch.sort(p, dim=-1, descending=True, stable=True)
    below = (torch.cumsum(sorted_p, dim=-1) < tau).sum(-1, keepdim=True)
    m = torch.clamp(below + 1, max=p.shape[-1])
    rank = torch.arange(p.shape[-1]).expand_as(p)
    keep_sorted = rank < m
    return torch.zeros_like(p, dtype=torch.bool).scatter(-1, order, keep_sorted)


def select_experts_by_threshold(p_user: Sequence[float], tau: float) -> tuple[int, ...]:
    """Smallest prefix of experts, by descending probability, whose mass is >= tau.

    Ties go to the lower index. Prefix masses are correctly rounded sums
    (``math.fsum``), so accumulation order cannot push a mass that is exactly
    tau below it. If the total still falls short (possible for tau = 1),
    every expert is returned.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    p = np.asarray(p_user, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("probabilities must sum to 1")
    order = np.argsort(-p, kind="stable")
    for m in range(1, len(order) + 1):
        if math.fsum(p[order[:m]]) >= tau:
            return tuple(int(j) for j in order[:m])
    return tuple(int(j) for j in order)


def routing_entropy(p_user: Sequence[float]) -> float:
    p = np.asarray(p_user, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_tensor(probs: torch.Tensor) -> torch.Tensor:
    """Differentiable -sum p ln p over the last axis, with 0 ln 0 = 0.

    The log argument is clamped so entries that underflowed to exactly zero
    get a finite gradient (xlogy's would be -inf, turning into NaN after the
    softmax Jacobian multiplies it by zero).
    """
    tiny = torch.finfo(probs.dtype).tiny
    return -(probs * torch.log(probs.clamp_min(tiny))).sum(-1)


class PersonalizedMoE(nn.Module):
    """MoE FFN with threshold routing.

    ``granularity='sequence'`` routes once per sequence from the mean-pooled
    hidden state; ``'token'`` routes every token independently.
    ``expert_calls`` counts (expert, routed unit) evaluations for sparsity checks.
    """

    def __init__(
        self,
        base_ffn: FeedForward,
        d_hist: int,
        d_prior: int,
        n_experts: int = len(USER_GROUPS),
        tau: float = 0.8,
        rank: int = 8,
        alpha: float = 16.0,
        d_fuse: int = 64,
        granularity: str = "sequence",
    ):
        super().__init__()
        if not 0.0 < tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {tau}")
        if granularity not in ("sequence", "token"):
            raise ValueError("granularity must be 'sequence' or 'token'")
        self.tau = tau
        self.granularity = granularity
        self.base_ffn = base_ffn
        names = USER_GROUPS if n_experts == len(USER_GROUPS) else [f"group_{i}" for i in range(n_experts)]
        self.experts = nn.ModuleList(UserGroupExpert(base_ffn, rank, alpha, names[i]) for i in range(n_experts))
        d_model = base_ffn.fc1.in_features
        self.router = UserRouter(d_model, d_hist, d_prior, d_fuse)
        self.expert_calls = 0
        self.forced_probs: torch.Tensor | None = None  # test hook: overrides router output

    def forward(
        self,
        x: torch.Tensor,
        h_hist: torch.Tensor,
        priors: torch.Tensor,
        selected: torch.Tensor | None = None,
        last_only: bool = False,
    ):
        """x: (B, T, d_model). Returns (out, scores, probs, selected) where the
        routing tensors have shape (B, R, K); R = 1 per sequence or T per token.

        With ``last_only`` (sequence routing only) experts run on the final
        token alone and ``out`` is (B, 1, d_model).
        """
        B, T, d = x.shape
        if last_only and self.granularity == "sequence":
            scores = self.router(x.mean(dim=1), h_hist, priors)
            probs = torch.softmax(scores, dim=-1) if self.forced_probs is None else self.forced_probs.to(x.dtype)
            mask = threshold_mask(probs, self.tau) if selected is None else selected.reshape(probs.shape)
            out = self.mix(x[:, -1:], probs, mask)
            return out, scores.unsqueeze(1), probs.unsqueeze(1), mask.unsqueeze(1)
        if self.granularity == "token":
            units = x.reshape(B * T, 1, d)
            hist = h_hist.repeat_interleave(T, dim=0)
        else:
            units, hist = x, h_hist
        scores = self.router(units.mean(dim=1), hist, priors)
        probs = torch.softmax(scores, dim=-1) if self.forced_probs is None else self.forced_probs.to(x.dtype)
        if selected is None:
            mask = threshold_mask(probs, self.tau)
        else:
            mask = selected.reshape(probs.shape)
        out = self.mix(units, probs, mask)
        R = T if self.granularity == "token" else 1
        return out.reshape(B, T, d), scores.reshape(B, R, -1), probs.reshape(B, R, -1), mask.reshape(B, R, -1)

    def mix(self, units: torch.Tensor, probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Evaluate only selected experts, each on the units that chose it."""
        out = torch.zeros_like(units)
        base_pre = self.base_ffn.fc1(units)
        for i, expert in enumerate(self.experts):
            rows = torch.nonzero(mask[:, i], as_tuple=True)[0]
            if rows.numel() == 0:
                continue
            self.expert_calls += int(rows.numel())
            h = expert(units[rows], self.base_ffn, base_pre[rows])
            out = out.index_add(0, rows, probs[rows, i].view(-1, 1, 1) * h)
        return out


def moe_ffn_forward(x_tokens: torch.Tensor, routing: UserRouting, moe: PersonalizedMoE) -> torch.Tensor:
    """Single-sequence form: (T, d_model) -> (T, d_model) for a given routing."""
    out = torch.zeros_like(x_tokens)
    for i in routing.selected:
        moe.expert_calls += 1
        out = out + float(routing.probs[i]) * moe.experts[i](x_tokens, moe.base_ffn)
    return out


def compute_group_priors(descriptions: Sequence[str], encoder: TextEncoder, proj: nn.Linear) -> torch.Tensor:
    """Mean-pool token encodings per description, then apply ``proj``: (K, d_prior)."""
    if len(descriptions) != len(USER_GROUPS):
        raise ValueError(f"need {len(USER_GROUPS)} group descriptions, got {len(descriptions)}")
    pooled = np.stack([encoder.encode_tokens(t).mean(axis=0) for t in descriptions])
    return proj(torch.as_tensor(pooled, dtype=proj.weight.dtype))


def score_user_experts(
    x_pooled: torch.Tensor, h_hist: torch.Tensor, priors: torch.Tensor, router: UserRouter, tau: float
) -> UserRouting:
    with torch.no_grad():
        scores = router(x_pooled.unsqueeze(0), h_hist.unsqueeze(0), priors)[0].double()
    probs = torch.softmax(scores, dim=-1).numpy()
    selected = select_experts_by_threshold(probs, tau)
    return UserRouting(scores.numpy(), probs, selected, float(probs[list(selected)].sum()), routing_entropy(probs))
