"""Truncated decoder backbone with both MoE levels, the freeze policy and
checkpoint IO."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .data import Sample
from .embedding import STEmbedding
from .history import TcnConfig, TemporalConvEncoder
from .location_moe import FunctionRouting, LocationSemanticsMoE, init_function_experts
from .persona_moe import FeedForward, PersonalizedMoE, UserRouting, entropy_tensor, routing_entropy
from .taxonomy import (
    HashingTextEncoder,
    TextEncoder,
    function_descriptions,
    group_descriptions,
    load_precomputed_encoder,
    prompt_prefix_text,
)

CHECKPOINT_MAGIC = "NEXTLOCMOE-CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    profile: str = "desk"
    d_xy: int = 128
    d_w: int = 16
    d_d: int = 16
    d_dur: int = 16
    M: int = 40
    N: int = 5
    d_model: int = 128
    heads: int = 4
    d_ffn: int = 256
    L1: int = 2
    L2: int = 2
    tcn_layers: int = 2
    tcn_kernel: int = 3
    tcn_dilations: tuple[int, ...] = (1, 2)
    tcn_channels: int = 64
    d_hist: int = 64
    K_f: int = 5
    k: int = 2
    router_hidden: int = 80
    K_p: int = 11
    tau: float = 0.8
    d_prior: int = 32
    d_fuse: int = 64
    d_text: int = 64
    prompt_len: int = 8
    prompt_from_text: bool = True
    lora_rank: int = 8
    lora_alpha: float = 16.0
    dropout: float = 0.0
    head_hidden: int = 64
    routing_granularity: str = "sequence"
    function_prior_path: str | None = None
    group_prior_path: str | None = None

    def __post_init__(self):
        if self.L1 < 0 or self.L2 < 1:
            raise ValueError("need L1 >= 0 and L2 >= 1")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if not 1 <= self.k <= self.K_f:
            raise ValueError("k must lie in [1, K_f]")
        if self.prompt_len < 0:
            raise ValueError("prompt_len must be >= 0")

    @property
    def record_dim(self) -> int:
        return self.d_xy + self.d_w + self.d_d + self.d_dur

    @property
    def seq_len(self) -> int:
        return self.prompt_len + self.M + self.N

    @property
    def tcn(self) -> TcnConfig:
        return TcnConfig(self.tcn_layers, self.tcn_kernel, tuple(self.tcn_dilations), self.tcn_channels, self.d_hist)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["tcn_dilations"] = list(self.tcn_dilations)
        return d

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        values = dict(values)
        if "tcn_dilations" in values:
            values["tcn_dilations"] = tuple(int(v) for v in values["tcn_dilations"])
        return cls(**values)


PROFILES: dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    # backbone shape of a 3B-class decoder; only instantiable on the meta device here
    "paper": ModelConfig(profile="paper", d_model=3072, heads=24, d_ffn=8192, L1=8, L2=4),
    "tiny": ModelConfig(
        profile="tiny", d_xy=8, d_w=4, d_d=4, d_dur=4, M=4, N=2, d_model=16, heads=2, d_ffn=32,
        L1=1, L2=1, tcn_channels=8, d_hist=8, router_hidden=16, d_prior=8, d_fuse=8, d_text=16,
        prompt_len=2, lora_rank=2, lora_alpha=4.0, head_hidden=8,
    ),
}


def model_config(profile: str = "desk", **overrides) -> ModelConfig:
    try:
        base = PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}") from None
    return replace(base, **overrides)


# ---------------------------------------------------------------- batches and traces

@dataclass
class TrajectoryBatch:
    hist_xy: torch.Tensor
    hist_w: torch.Tensor
    hist_d: torch.Tensor
    hist_dur: torch.Tensor
    cur_xy: torch.Tensor
    cur_w: torch.Tensor
    cur_d: torch.Tensor
    cur_dur: torch.Tensor
    target_xy: torch.Tensor
    target_id: torch.Tensor  # evaluation only; the model never reads it

    def __len__(self) -> int:
        return self.hist_xy.shape[0]

    def to(self, dtype: torch.dtype) -> "TrajectoryBatch":
        return TrajectoryBatch(**{
            k: (v.to(dtype) if v.is_floating_point() else v) for k, v in self.__dict__.items()
        })

    def index(self, idx) -> "TrajectoryBatch":
        return TrajectoryBatch(**{k: v[idx] for k, v in self.__dict__.items()})


def collate(samples: Sequence[Sample], dtype: torch.dtype = torch.float32) -> TrajectoryBatch:
    def part(attr: str):
        xy = np.array([[(r.location.x, r.location.y) for r in getattr(s, attr)] for s in samples], dtype=np.float64)
        w = np.array([[r.w for r in getattr(s, attr)] for s in samples], dtype=np.int64)
        d = np.array([[r.d for r in getattr(s, attr)] for s in samples], dtype=np.int64)
        dur = np.array([[r.dur for r in getattr(s, attr)] for s in samples], dtype=np.float64)
        return (
            torch.as_tensor(xy, dtype=dtype), torch.as_tensor(w), torch.as_tensor(d), torch.as_tensor(dur, dtype=dtype)
        )

    if not samples:
        raise ValueError("cannot collate an empty sample list")
    hist, cur = part("historical"), part("current")
    target_xy = torch.tensor([[s.target.x, s.target.y] for s in samples], dtype=dtype)
    target_id = torch.tensor([s.target.id for s in samples], dtype=torch.long)
    return TrajectoryBatch(*hist, *cur, target_xy, target_id)


@dataclass
class SampleTrace:
    function: list[FunctionRouting]
    user: list[UserRouting]
    tau: float


@dataclass
class RoutingTrace:
    """Routing tensors for one batch. Function tensors are (B, N, K_f); each
    entry of the user lists is (B, R, K_p) for one MoE layer."""

    tau: float
    func_logits: torch.Tensor | None = None
    func_probs: torch.Tensor | None = None
    func_selected: torch.Tensor | None = None
    user_scores: list[torch.Tensor] = field(default_factory=list)
    user_probs: list[torch.Tensor] = field(default_factory=list)
    user_selected: list[torch.Tensor] = field(default_factory=list)

    def entropy(self) -> torch.Tensor:
        """Mean routing entropy over samples, MoE layers (and routed units)."""
        if not self.user_probs:
            return torch.zeros(())
        return torch.stack([entropy_tensor(p).mean() for p in self.user_probs]).mean()

    def per_sample_entropies(self) -> torch.Tensor:
        """(B, L2 * R) entropies, the input to the total loss."""
        if not self.user_probs:
            return torch.zeros(0)
        return torch.cat([entropy_tensor(p) for p in self.user_probs], dim=1)

    def selection(self) -> "RoutingOverride":
        return RoutingOverride(
            None if self.func_selected is None else self.func_selected.clone(),
            [s.clone() for s in self.user_selected],
        )

    def samples(self) -> list[SampleTrace]:
        out = []
        B = self.user_probs[0].shape[0] if self.user_probs else (
            self.func_probs.shape[0] if self.func_probs is not None else 0
        )
        fl = fp = fs = None
        if self.func_probs is not None:
            fl = self.func_logits.detach().double().numpy()
            fp = self.func_probs.detach().double().numpy()
            fs = self.func_selected.numpy()
        us = [s.detach().double().numpy() for s in self.user_scores]
        up = [p.detach().double().numpy() for p in self.user_probs]
        usel = [m.numpy() for m in self.user_selected]
        for b in range(B):
            func = []
            if fp is not None:
                for n in range(fp.shape[1]):
                    idx = np.flatnonzero(fs[b, n])
                    idx = tuple(int(i) for i in idx[np.argsort(-fp[b, n, idx], kind="stable")])
                    func.append(FunctionRouting(fl[b, n], fp[b, n], idx))
            user = []
            for layer in range(len(up)):
                for r in range(up[layer].shape[1]):
                    p = up[layer][b, r]
                    idx = np.flatnonzero(usel[layer][b, r])
                    idx = tuple(int(i) for i in idx[np.argsort(-p[idx], kind="stable")])
                    user.append(UserRouting(us[layer][b, r], p, idx, float(p[list(idx)].sum()), routing_entropy(p)))
            out.append(SampleTrace(func, user, self.tau))
        return out


@dataclass
class RoutingOverride:
    """Fixed expert sets, replayed to make the loss locally smooth."""

    func_selected: torch.Tensor | None
    user_selected: list[torch.Tensor]


# ---------------------------------------------------------------- layers

class TransformerLayer(nn.Module):
    """Pre-LayerNorm decoder layer with causal self-attention."""

    def __init__(self, d_model: int, heads: int, d_ffn: int, dropout: float = 0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, heads, dropout=dropout, batch_first=True)
        self.ln2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ffn)
        self.drop = nn.Dropout(dropout)

    def attend(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        a, _ = self.attn(h, h, h, attn_mask=mask, need_weights=False)
        return x + self.drop(a)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.attend(x, mask)
        return x + self.drop(self.ffn(self.ln2(x)))


class MoETransformerLayer(nn.Module):
    """A decoder layer whose FFN was swapped for a :class:`PersonalizedMoE`."""

    def __init__(self, layer: TransformerLayer, moe: PersonalizedMoE):
        super().__init__()
        self.ln1, self.attn, self.ln2, self.drop = layer.ln1, layer.attn, layer.ln2, layer.drop
        self.moe = moe
        self.bypass_moe = False

    def forward(self, x, mask, h_hist, priors, selected=None, last_only=False):
        """``last_only`` returns just the final position, shape (B, 1, d);
        routing still pools over every token."""
        x = TransformerLayer.attend(self, x, mask)
        h = self.ln2(x)
        last_only = last_only and self.moe.granularity == "sequence"
        if last_only:
            x = x[:, -1:]
        if self.bypass_moe:
            return x + self.drop(self.moe.base_ffn(h[:, -1:] if last_only else h)), None
        out, scores, probs, sel = self.moe(h, h_hist, priors, selected, last_only=last_only)
        return x + self.drop(out), (scores, probs, sel)


def init_personalized_experts_from_ffn(layer: TransformerLayer, cfg: ModelConfig) -> MoETransformerLayer:
    """Replace ``layer.ffn`` by K_p experts whose base is that very FFN and
    whose LoRA deltas start at exactly zero."""
    moe = PersonalizedMoE(
        layer.ffn, cfg.d_hist, cfg.d_prior, cfg.K_p, cfg.tau, cfg.lora_rank, cfg.lora_alpha, cfg.d_fuse,
        cfg.routing_granularity,
    )
    return MoETransformerLayer(layer, moe)


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe.float()


class PromptPrefix(nn.Module):
    def __init__(self, length: int, d_model: int):
        super().__init__()
        self.vectors = nn.Parameter(torch.randn(length, d_model) * 0.02)

    def init_from_text(self, text: str, encoder: TextEncoder, seed: int = 0) -> None:
        """Chunk the prompt's token encodings into P groups, mean each group and
        project to d_model with a seeded Gaussian map."""
        P, d_model = self.vectors.shape
        if P == 0:
            return
        tok = encoder.encode_tokens(text)
        chunks = np.array_split(tok, P) if len(tok) >= P else [tok] * P
        pooled = np.stack([c.mean(axis=0) for c in chunks])
        proj = np.random.default_rng(seed).standard_normal((tok.shape[1], d_model)) / np.sqrt(tok.shape[1])
        with torch.no_grad():
            self.vectors.copy_(torch.as_tensor(pooled @ proj, dtype=self.vectors.dtype))


# ---------------------------------------------------------------- the model

class NextLocMoE(nn.Module):
    """Records in, normalized next-location coordinates out.

    ``ablate`` may contain ``"loc-moe"`` (spatial slice = shared embedding
    only) and/or ``"persona-moe"`` (MoE layers use their frozen base FFN).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, encoder: TextEncoder | None = None):
        super().__init__()
        self.config = cfg
        self.seed = seed
        self.ablate: set[str] = set()
        meta = torch.empty(0).device.type == "meta"
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self._build(cfg, seed, encoder, meta)

    def _build(self, cfg: ModelConfig, seed: int, encoder: TextEncoder | None, meta: bool) -> None:
        self.embedding = STEmbedding(cfg.d_xy, cfg.d_w, cfg.d_d, cfg.d_dur)
        self.history = TemporalConvEncoder(cfg.record_dim, cfg.tcn)
        self.loc_moe = LocationSemanticsMoE(cfg.record_dim, cfg.d_hist, cfg.d_xy, cfg.K_f, cfg.k, cfg.router_hidden)
        self.in_proj = nn.Linear(cfg.record_dim, cfg.d_model)
        self.prefix = PromptPrefix(cfg.prompt_len, cfg.d_model)
        self.register_buffer("positions", sinusoidal_positions(cfg.seq_len, cfg.d_model), persistent=False)
        layers = [TransformerLayer(cfg.d_model, cfg.heads, cfg.d_ffn, cfg.dropout) for _ in range(cfg.L1 + cfg.L2)]
        self.std_layers = nn.ModuleList(layers[: cfg.L1])
        self.moe_layers = nn.ModuleList(init_personalized_experts_from_ffn(l, cfg) for l in layers[cfg.L1:])
        self.final_ln = nn.LayerNorm(cfg.d_model)
        self.head = nn.Sequential(nn.Linear(cfg.d_model, cfg.head_hidden), nn.GELU(), nn.Linear(cfg.head_hidden, 2))
        self.prior_proj = nn.Linear(cfg.d_text, cfg.d_prior)
        self.register_buffer("group_token_means", torch.zeros(cfg.K_p, cfg.d_text))
        if meta:
            return

        fallback = encoder or HashingTextEncoder(cfg.d_text, seed)
        f_texts, g_texts = function_descriptions(), group_descriptions()
        f_enc = load_precomputed_encoder(cfg.function_prior_path, f_texts) if cfg.function_prior_path else fallback
        g_enc = load_precomputed_encoder(cfg.group_prior_path, g_texts) if cfg.group_prior_path else fallback
        if cfg.K_f == len(f_texts):
            init_function_experts(self.loc_moe.experts, f_texts, f_enc, seed)
        if cfg.K_p == len(g_texts):
            pooled = np.stack([g_enc.encode_tokens(t).mean(axis=0) for t in g_texts])
            if pooled.shape[1] != cfg.d_text:
                raise ValueError(f"group priors have dim {pooled.shape[1]}, config says d_text={cfg.d_text}")
            self.group_token_means.copy_(torch.as_tensor(pooled, dtype=torch.float32))
        if cfg.prompt_from_text:
            self.prefix.init_from_text(prompt_prefix_text(), fallback, seed)

    # -- pieces

    def group_priors(self) -> torch.Tensor:
        return self.prior_proj(self.group_token_means)

    def assemble_input(self, hist_rows: torch.Tensor, cur_rows: torch.Tensor) -> torch.Tensor:
        """[prefix | history | current] with record rows projected to d_model
        and sinusoidal positions added: (B, P + M + N, d_model)."""
        if hist_rows.shape[-1] != self.config.record_dim or cur_rows.shape[-1] != self.config.record_dim:
            raise ValueError("record rows do not match the configured embedding size")
        B = hist_rows.shape[0]
        rows = self.in_proj(torch.cat([hist_rows, cur_rows], dim=1))
        prefix = self.prefix.vectors.unsqueeze(0).expand(B, -1, -1).to(rows.dtype)
        tokens = torch.cat([prefix, rows], dim=1)
        T = tokens.shape[1]
        if T > self.positions.shape[0]:
            raise ValueError(f"sequence of {T} tokens exceeds configured length {self.positions.shape[0]}")
        return tokens + self.positions[:T].to(tokens.dtype)

    def forward(self, batch: TrajectoryBatch, override: RoutingOverride | None = None):
        cfg = self.config
        if batch.hist_xy.shape[1] != cfg.M or batch.cur_xy.shape[1] != cfg.N:
            raise ValueError(
                f"sample windows ({batch.hist_xy.shape[1]}, {batch.cur_xy.shape[1]}) do not match M={cfg.M}, N={cfg.N}"
            )
        trace = RoutingTrace(tau=cfg.tau)
        z_h = self.embedding(batch.hist_xy, batch.hist_w, batch.hist_d, batch.hist_dur)
        h_hist = self.history(z_h)
        e_c0 = self.embedding(batch.cur_xy, batch.cur_w, batch.cur_d, batch.cur_dur)
        if "loc-moe" in self.ablate:
            e_c = e_c0
        else:
            shared = e_c0[..., : cfg.d_xy]
            fixed = override.func_selected if override is not None else None
            enhanced, logits, probs, sel = self.loc_moe(batch.cur_xy, e_c0, h_hist, shared, fixed)
            e_c = torch.cat([enhanced, e_c0[..., cfg.d_xy:]], dim=-1)
            trace.func_logits, trace.func_probs, trace.func_selected = logits, probs, sel

        x = self.assemble_input(z_h, e_c)
        T = x.shape[1]
        mask = torch.triu(torch.full((T, T), float("-inf"), dtype=x.dtype), diagonal=1)
        for layer in self.std_layers:
            x = layer(x, mask)
        priors = self.group_priors()
        last = len(self.moe_layers) - 1
        for i, layer in enumerate(self.moe_layers):
            layer.bypass_moe = "persona-moe" in self.ablate
            fixed = override.user_selected[i] if override is not None and override.user_selected else None
            x, routing = layer(x, mask, h_hist, priors, fixed, last_only=(i == last))
            if routing is not None:
                trace.user_scores.append(routing[0])
                trace.user_probs.append(routing[1])
                trace.user_selected.append(routing[2])
        pred = self.head(self.final_ln(x[:, -1]))
        return pred, trace

    @torch.no_grad()
    def predict_batch(self, batch: TrajectoryBatch):
        was_training = self.training
        self.eval()
        try:
            pred, trace = self(batch.to(self.dtype))
        finally:
            self.train(was_training)
        return pred, trace

    def predict(self, sample: Sample) -> tuple[tuple[float, float], SampleTrace]:
        pred, trace = self.predict_batch(collate([sample]))
        return (float(pred[0, 0]), float(pred[0, 1])), trace.samples()[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.in_proj.weight.dtype

    def expert_calls(self) -> int:
        return sum(layer.moe.expert_calls for layer in self.moe_layers)

    def load_pretrained_backbone(self, layer_states: Sequence[Mapping[str, torch.Tensor]]) -> None:
        """Inject externally supplied decoder weights (keys ``ln1.*``, ``attn.*``,
        ``ln2.*``, ``ffn.*``), one mapping per retained layer, bottom first."""
        cfg = self.config
        if len(layer_states) != cfg.L1 + cfg.L2:
            raise ValueError(f"expected {cfg.L1 + cfg.L2} layer states, got {len(layer_states)}")
        for i, state in enumerate(layer_states):
            if i < cfg.L1:
                self.std_layers[i].load_state_dict(state, strict=True)
                continue
            layer = self.moe_layers[i - cfg.L1]
            remapped = {}
            for key, value in state.items():
                if key.startswith("ffn."):
                    remapped["moe.base_ffn." + key[4:]] = value
                elif key.split(".")[0] in ("ln1", "attn", "ln2"):
                    remapped[key] = value
                else:
                    raise KeyError(f"unexpected backbone key {key!r}")
            missing, _ = layer.load_state_dict(remapped, strict=False)
            bad = [m for m in missing if not m.startswith("moe.experts.") and not m.startswith("moe.router.")]
            if bad:
                raise KeyError(f"missing backbone weights: {bad}")


# ---------------------------------------------------------------- freeze policy

_TRAINABLE_PREFIXES = (
    ("embedding.", "embedding"),
    ("history.", "history_encoder"),
    ("loc_moe.router.", "function_router"),
    ("loc_moe.experts.", "function_experts"),
    ("in_proj.", "input_proj"),
    ("prefix.", "prompt_prefix"),
    ("final_ln.", "layernorm"),
    ("head.", "output_head"),
    ("prior_proj.", "group_prior_proj"),
)


def parameter_category(name: str) -> tuple[str, str]:
    """(status, category) for a parameter name under the freeze policy."""
    for prefix, cat in _TRAINABLE_PREFIXES:
        if name.startswith(prefix):
            return "trainable", cat
    parts = name.split(".")
    if parts[0] in ("std_layers", "moe_layers"):
        sub = parts[2]
        if sub == "attn":
            return "frozen", "attention"
        if sub in ("ln1", "ln2"):
            return "trainable", "layernorm"
        if sub == "ffn":
            return "frozen", "ffn"
        if sub == "moe":
            if parts[3] == "base_ffn":
                return "frozen", "expert_base"
            if parts[3] == "experts":
                return "trainable", "lora"
            if parts[3] == "router":
                return "trainable", "user_router"
    raise KeyError(f"parameter {name!r} is not covered by the freeze policy")


def apply_freeze_policy(model: nn.Module) -> dict[str, tuple[str, str]]:
    """Tag every parameter frozen or trainable and set ``requires_grad`` to match."""
    manifest = {}
    for name, p in model.named_parameters():
        status, cat = parameter_category(name)
        manifest[name] = (status, cat)
        p.requires_grad_(status == "trainable")
    return manifest


def trainable_parameters(model: nn.Module) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if parameter_category(n)[0] == "trainable"]


def state_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_model(cfg: ModelConfig, seed: int = 0, encoder: TextEncoder | None = None) -> NextLocMoE:
    model = NextLocMoE(cfg, seed, encoder)
    apply_freeze_policy(model)
    return model


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, model: NextLocMoE, extra: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "schema_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "manifest": {k: list(v) for k, v in apply_freeze_policy(model).items()},
        "extra": dict(extra or {}),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[NextLocMoE, dict[str, Any]]:
    path = Path(path)
    if not path.exists() and path.with_suffix(".ckpt").exists():
        path = path.with_suffix(".ckpt")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if payload.get("schema_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint schema {payload.get('schema_version')!r}")
    cfg = ModelConfig.from_dict(payload["config"])
    model = NextLocMoE(cfg, seed=int(payload["seed"]))
    state = payload["state_dict"]
    dtype = next(iter(state.values())).dtype if state else torch.float32
    model.to(dtype)
    model.load_state_dict(state)
    apply_freeze_policy(model)
    return model, payload
