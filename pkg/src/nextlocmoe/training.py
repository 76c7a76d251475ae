"""Losses, the Adam + plateau-scheduler training loop, and a finite-difference
gradient check."""

from __future__ import annotations

import copy
import json
import math
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import torch

from .backbone import NextLocMoE, RoutingOverride, TrajectoryBatch, collate, trainable_parameters
from .data import Sample


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    lam: float = 300.0
    batch_size: int = 64
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    min_lr: float = 1e-6
    grad_clip: float | None = 1.0
    seed: int = 0
    early_stop_patience: int | None = None
    stride: int = 1
    profile: str = "desk"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**values)


TRAIN_PROFILES = {
    "desk": TrainConfig(lr=2e-3, batch_size=8),
    "paper": TrainConfig(epochs=100, lr=1e-4, lam=300.0, profile="paper"),
    "tiny": TrainConfig(epochs=2, batch_size=8, profile="tiny"),
}


def train_config(profile: str = "desk", **overrides) -> TrainConfig:
    try:
        return replace(TRAIN_PROFILES[profile], **overrides)
    except KeyError:
        raise ValueError(f"unknown profile {profile!r}") from None


@dataclass
class EpochLog:
    epoch: int
    train_dist: float
    train_entropy: float
    train_total: float
    val_dist: float
    lr: float
    mean_activated: float
    wall_time: float


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e)) + "\n" for e in self.epochs)

    def losses(self) -> list[tuple[float, float, float]]:
        return [(e.train_dist, e.train_total, e.val_dist) for e in self.epochs]


@dataclass
class TrainResult:
    best_state: dict[str, torch.Tensor]
    log: TrainLog
    best_epoch: int
    best_val: float


# ---------------------------------------------------------------- losses

def distance_loss(preds: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean Euclidean distance between predicted and true coordinates."""
    if preds.shape != targets.shape or preds.shape[-1] != 2:
        raise ValueError(f"shape mismatch: {tuple(preds.shape)} vs {tuple(targets.shape)}")
    return torch.linalg.vector_norm(preds - targets, dim=-1).mean()


def total_loss(l_dist: torch.Tensor | float, entropies: torch.Tensor, lam: float) -> torch.Tensor:
    """L_dist + lam * mean(entropies); entropies are per sample and MoE layer."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    l_dist = torch.as_tensor(l_dist)
    ent = entropies.mean() if entropies.numel() else torch.zeros((), dtype=l_dist.dtype)
    return l_dist + lam * ent


def batch_loss(model: NextLocMoE, batch: TrajectoryBatch, lam: float, override: RoutingOverride | None = None):
    pred, trace = model(batch, override)
    l_dist = distance_loss(pred, batch.target_xy)
    ent = trace.per_sample_entropies()
    return total_loss(l_dist, ent, lam), l_dist, ent, trace


@torch.no_grad()
def mean_distance(model: NextLocMoE, batch: TrajectoryBatch, batch_size: int = 256) -> float:
    was = model.training
    model.eval()
    total, n = 0.0, len(batch)
    try:
        for start in range(0, n, batch_size):
            part = batch.index(slice(start, start + batch_size))
            pred, _ = model(part)
            total += float(torch.linalg.vector_norm(pred - part.target_xy, dim=-1).sum())
    finally:
        model.train(was)
    return total / n


# ---------------------------------------------------------------- training loop

def _dump_batch(batch: TrajectoryBatch, dump_dir: str | Path | None) -> Path:
    directory = Path(dump_dir) if dump_dir else Path(tempfile.mkdtemp(prefix="nextlocmoe-"))
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "nonfinite_batch.pt"
    torch.save(dict(batch.__dict__), path)
    return path


def train(
    model: NextLocMoE,
    data: tuple[Sequence[Sample], Sequence[Sample]],
    cfg: TrainConfig,
    on_epoch: Callable[[EpochLog], None] | None = None,
    dump_dir: str | Path | None = None,
) -> TrainResult:
    """Train the trainable manifest only; the model ends holding the best
    validation weights, which are also returned."""
    train_samples, val_samples = data
    if not train_samples or not val_samples:
        raise ValueError("need non-empty train and validation samples")
    overlap = {s.user_id for s in train_samples} & {s.user_id for s in val_samples}
    if overlap:
        raise ValueError(f"train and validation share users: {sorted(overlap)[:5]}")

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    dtype = model.dtype
    train_batch = collate(train_samples, dtype)
    val_batch = collate(val_samples, dtype)
    params = [p for _, p in trainable_parameters(model)]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience, min_lr=cfg.min_lr
    )

    log = TrainLog()
    best_val, best_epoch = math.inf, -1
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    n = len(train_batch)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        order = torch.randperm(n, generator=gen)
        sums = {"dist": 0.0, "ent": 0.0, "total": 0.0, "active": 0.0}
        for start in range(0, n, cfg.batch_size):
            batch = train_batch.index(order[start:start + cfg.batch_size])
            loss, l_dist, ent, trace = batch_loss(model, batch, cfg.lam)
            if not torch.isfinite(loss):
                path = _dump_batch(batch, dump_dir)
                raise NonFiniteLossError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch offset {start}; batch dumped to {path}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            b = len(batch)
            sums["dist"] += l_dist.item() * b
            sums["ent"] += ent.mean().item() * b if ent.numel() else 0.0
            sums["total"] += loss.item() * b
            if trace.user_selected:
                sums["active"] += float(torch.stack([s.sum(-1).float().mean() for s in trace.user_selected]).mean()) * b

        val = mean_distance(model, val_batch)
        sched.step(val)
        entry = EpochLog(
            epoch=epoch,
            train_dist=sums["dist"] / n,
            train_entropy=sums["ent"] / n,
            train_total=sums["total"] / n,
            val_dist=val,
            lr=opt.param_groups[0]["lr"],
            mean_activated=sums["active"] / n,
            wall_time=time.perf_counter() - t0,
        )
        log.epochs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
                break

    model.load_state_dict(best_state)
    return TrainResult(best_state, log, best_epoch, best_val)


# ---------------------------------------------------------------- gradient check

def analytic_gradient(
    model: NextLocMoE, batch: TrajectoryBatch, lam: float, override: RoutingOverride | None = None
) -> torch.Tensor:
    """Flat gradient of the total loss over the trainable manifest."""
    params = [p for _, p in trainable_parameters(model)]
    if not params:
        return torch.zeros(0, dtype=model.dtype)
    loss = batch_loss(model, batch, lam, override)[0]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)])


@torch.no_grad()
def _loss_value(model, batch, lam, override) -> float:
    return float(batch_loss(model, batch, lam, override)[0])


def gradient_check(
    model: NextLocMoE,
    batch: TrajectoryBatch,
    eps: float = 1e-5,
    lam: float = 300.0,
    floor: float | None = None,
    only: Callable[[str], bool] | None = None,
) -> float:
    """Max relative error between autograd and central finite differences.

    Expert sets are frozen to the ones chosen at the current parameters so
    the loss is smooth in a neighbourhood. Relative error of one entry is
    |a - n| / max(|a|, |n|, floor). The default floor is 1e-6 * max(1, |L|):
    rounding noise in a finite difference grows with the loss value, which
    the entropy term can make several hundred times larger than L_dist.
    ``only`` restricts the finite differences to parameters whose name it
    accepts (the analytic gradient is still taken over the whole manifest).
    """
    model.eval()
    batch = batch.to(model.dtype)
    with torch.no_grad():
        _, trace = model(batch)
    override = trace.selection()
    if floor is None:
        floor = 1e-6 * max(1.0, abs(_loss_value(model, batch, lam, override)))
    analytic = analytic_gradient(model, batch, lam, override)
    worst = 0.0
    offset = 0
    for name, p in trainable_parameters(model):
        flat = p.data.view(-1)
        if only is not None and not only(name):
            offset += flat.numel()
            continue
        for j in range(flat.numel()):
            orig = float(flat[j])
            flat[j] = orig + eps
            up = _loss_value(model, batch, lam, override)
            flat[j] = orig - eps
            down = _loss_value(model, batch, lam, override)
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic[offset + j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        offset += flat.numel()
    return worst
