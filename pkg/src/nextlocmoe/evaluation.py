"""Hit@k evaluation, zero-shot transfer, routing activation statistics and
structured reports."""

from __future__ import annotations

import hashlib
import json
import os
import statistics
from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import torch

from .backbone import RoutingTrace, SampleTrace, collate, state_checksum
from .data import Dataset, Sample, dataset_samples, normalize_coordinates
from .persona_moe import select_experts_by_threshold
from .retrieval import LocationIndex, build_location_index

DEFAULT_KS = (1, 5, 10)

# Mean activated user-group experts reported for full-scale real-city runs.
# Shown next to our own numbers for comparison; never used as a threshold.
REFERENCE_ACTIVATION_MEANS = {"shanghai": 1.37, "singapore": 1.78, "kumamoto": 1.64}


class ParameterWriteError(RuntimeError):
    pass


@dataclass(frozen=True)
class Metrics:
    hits: dict[int, float]  # k -> percentage
    n_samples: int
    mean_error: float  # Euclidean, normalized units
    median_error: float

    def __post_init__(self):
        vals = [self.hits[k] for k in sorted(self.hits)]
        if any(not 0.0 <= v <= 100.0 for v in vals) or vals != sorted(vals):
            raise ValueError(f"inconsistent hit rates: {self.hits}")

    def hit(self, k: int) -> float:
        return self.hits[k]

    def to_dict(self) -> dict[str, Any]:
        return {
            "hits": {f"hit@{k}": v for k, v in sorted(self.hits.items())},
            "n_samples": self.n_samples,
            "mean_error": self.mean_error,
            "median_error": self.median_error,
        }


@dataclass(frozen=True)
class ActivationStats:
    mean_activated: float
    expert_frequency: tuple[float, ...]  # share of routings that selected each expert
    mean_entropy: float
    n_routings: int
    tau: float
    references: Mapping[str, float] = field(default_factory=lambda: dict(REFERENCE_ACTIVATION_MEANS))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["expert_frequency"] = list(self.expert_frequency)
        d["references"] = dict(self.references)
        return d


# ---------------------------------------------------------------- activation stats

def _routing_arrays(traces: Sequence[RoutingTrace | SampleTrace]) -> tuple[np.ndarray, np.ndarray, float]:
    probs, masks, taus = [], [], set()
    for t in traces:
        taus.add(t.tau)
        if isinstance(t, RoutingTrace):
            for p, s in zip(t.user_probs, t.user_selected):
                K = p.shape[-1]
                probs.append(p.detach().double().reshape(-1, K).numpy())
                masks.append(s.reshape(-1, K).numpy())
        else:
            for r in t.user:
                m = np.zeros(len(r.probs), dtype=bool)
                m[list(r.selected)] = True
                probs.append(np.asarray(r.probs, dtype=np.float64)[None])
                masks.append(m[None])
    if not probs:
        raise ValueError("no user-group routings in the given traces")
    if len(taus) != 1:
        raise ValueError(f"traces mix thresholds {sorted(taus)}")
    return np.concatenate(probs), np.concatenate(masks), taus.pop()


def expert_activation_report(traces: Sequence[RoutingTrace | SampleTrace], tau: float | None = None) -> ActivationStats:
    """Aggregate routing decisions over samples and MoE layers.

    With ``tau`` the expert sets are re-derived from the recorded
    probabilities at that threshold instead of using the recorded sets.
    """
    if not traces:
        raise ValueError("expert_activation_report needs at least one trace")
    P, S, recorded_tau = _routing_arrays(traces)
    if tau is not None:
        S = np.zeros_like(S)
        for i, p in enumerate(P):
            S[i, list(select_experts_by_threshold(p / p.sum(), tau))] = True
    else:
        tau = recorded_tau
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(P > 0, P * np.log(P), 0.0).sum(axis=1)
    return ActivationStats(
        mean_activated=float(S.sum(axis=1).mean()),
        expert_frequency=tuple(float(v) for v in S.mean(axis=0)),
        mean_entropy=float(ent.mean()),
        n_routings=int(P.shape[0]),
        tau=float(tau),
    )


# ---------------------------------------------------------------- evaluation

def _hit_metrics(ranked: Sequence[Sequence[int]], targets: Sequence[int], errors: Sequence[float], ks) -> Metrics:
    n = len(targets)
    hits = {k: 100.0 * sum(t in r[:k] for r, t in zip(ranked, targets)) / n for k in ks}
    return Metrics(hits, n, float(np.mean(errors)), float(statistics.median(errors)))


def evaluate_samples(
    model, samples: Sequence[Sample], index: LocationIndex, ks: Sequence[int] = DEFAULT_KS, batch_size: int = 256
) -> tuple[Metrics, list[RoutingTrace]]:
    """Score samples with one retrieval list of length max(ks) per sample.

    ``model`` only needs ``predict_batch(batch) -> (pred (B, 2), trace | None)``.
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    ks = tuple(sorted(set(ks)))
    depth = max(ks)
    ranked, targets, errors, traces = [], [], [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = collate(chunk, torch.float64)
        pred, trace = model.predict_batch(batch)
        pred = pred.detach().double().numpy()
        if trace is not None:
            traces.append(trace)
        for s, (x, y) in zip(chunk, pred):
            ranked.append(index.nearest(float(x), float(y), depth))
            targets.append(s.target.id)
            errors.append(float(np.hypot(x - s.target.x, y - s.target.y)))
    return _hit_metrics(ranked, targets, errors, ks), traces


def _prepare(ds: Dataset) -> Dataset:
    return ds if ds.normalized else normalize_coordinates(ds)


def evaluate(
    model, test: Dataset, ks: Sequence[int] = DEFAULT_KS, stride: int = 1, batch_size: int = 256
) -> tuple[Metrics, ActivationStats | None]:
    """Evaluate on ``test`` normalized with its own stats, retrieving from its
    own full location set."""
    test = _prepare(test)
    cfg = model.config
    samples = dataset_samples(test, cfg.M, cfg.N, stride)
    index = build_location_index(test.locations.values())
    metrics, traces = evaluate_samples(model, samples, index, ks, batch_size)
    has_routing = any(t.user_probs for t in traces if isinstance(t, RoutingTrace))
    return metrics, (expert_activation_report(traces) if has_routing else None)


def _tensor_versions(model: torch.nn.Module) -> dict[str, int]:
    tensors = dict(model.named_parameters())
    tensors.update(model.named_buffers())
    return {k: v._version for k, v in tensors.items()}


@contextmanager
def no_parameter_writes(model: torch.nn.Module):
    """Fail loudly if anything inside the block modifies the model state."""
    before_sum, before_ver = state_checksum(model), _tensor_versions(model)
    yield before_sum
    changed = [k for k, v in _tensor_versions(model).items() if before_ver.get(k) != v]
    if changed or state_checksum(model) != before_sum:
        raise ParameterWriteError(f"model state was modified during a read-only run: {changed[:5]}")


def zero_shot_transfer(model, target_city: Dataset, ks: Sequence[int] = DEFAULT_KS, stride: int = 1):
    """Evaluate on another city exactly as-is: no fitting, no parameter writes."""
    with no_parameter_writes(model):
        return evaluate(model, target_city, ks, stride)


def uniform_random_hit_rate(n_locations: int, k: int) -> float:
    """Expected Hit@k (%) of retrieving k distinct uniformly random locations."""
    return 100.0 * min(k, n_locations) / n_locations


def most_frequent_locations(samples: Iterable[Sample], k: int = 10) -> list[int]:
    counts = Counter(s.target.id for s in samples)
    return [loc for loc, _ in sorted(counts.items(), key=lambda t: (-t[1], t[0]))[:k]]


def frequency_baseline(
    train_samples: Sequence[Sample], test_samples: Sequence[Sample], ks: Sequence[int] = DEFAULT_KS
) -> Metrics:
    """Predict the globally most frequent training targets for every test sample."""
    ks = tuple(sorted(set(ks)))
    ranked = most_frequent_locations(train_samples, max(ks))
    hits = {k: 100.0 * sum(s.target.id in ranked[:k] for s in test_samples) / len(test_samples) for k in ks}
    return Metrics(hits, len(test_samples), float("nan"), float("nan"))


# ---------------------------------------------------------------- reports

def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    for loc_id in sorted(ds.locations):
        l = ds.locations[loc_id]
        h.update(f"L{l.id},{l.x!r},{l.y!r};".encode())
    for user in sorted(ds.users):
        h.update(f"U{user};".encode())
        for r in ds.users[user]:
            h.update(f"{r.location.id},{r.w},{r.d},{r.dur!r};".encode())
    return h.hexdigest()


def config_digest(config: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def build_report(
    metrics: Metrics,
    stats: ActivationStats | None,
    config: Mapping[str, Any],
    dataset: Dataset | None = None,
    extra: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    report = {
        "config_digest": config_digest(config),
        "dataset_digest": dataset_digest(dataset) if dataset is not None else None,
        "metrics": metrics.to_dict(),
        "activation": stats.to_dict() if stats is not None else None,
    }
    report.update(extra or {})
    return report


def write_json_atomic(path: str | Path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def format_table(rows: Mapping[str, tuple[Metrics, ActivationStats | None]]) -> str:
    """Aligned plain-text table; one row per named (metrics, stats) result."""
    header = ["run", "n", "hit@1", "hit@5", "hit@10", "mean_err", "mean|E|", "entropy"]
    lines = []
    for name, (m, s) in rows.items():
        lines.append([
            name,
            str(m.n_samples),
            *(f"{m.hits.get(k, float('nan')):.2f}" for k in DEFAULT_KS),
            f"{m.mean_error:.4f}",
            f"{s.mean_activated:.3f}" if s else "-",
            f"{s.mean_entropy:.4f}" if s else "-",
        ])
    widths = [max(len(r[i]) for r in [header, *lines]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header), fmt(["-" * w for w in widths]), *map(fmt, lines)])
