"""``nextlocmoe`` command line: data generation, training, evaluation,
prediction, zero-shot transfer and routing reports.

Settings resolve as defaults < profile < config file < NEXTLOCMOE_* env
vars < command-line flags, and the resolved snapshot is written into every
run manifest.

Config files are INI-style with ``[city]``, ``[model]`` and ``[train]``
sections; values are parsed as JSON when possible (``epochs = 5``,
``function_mix = [0.2, 0.2, 0.2, 0.2, 0.2]``) and kept as strings otherwise.
Env vars take the form ``NEXTLOCMOE_<SECTION>_<KEY>``, e.g.
``NEXTLOCMOE_TRAIN_EPOCHS=5``. ``--set section.key=value`` works the same way
from the command line.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import torch

from . import __version__
from .backbone import ModelConfig, build_model, load_checkpoint, model_config, save_checkpoint, state_checksum
from .data import (
    SyntheticCityConfig,
    dataset_samples,
    generate_synthetic_city,
    load_city,
    normalize_coordinates,
    partition_users,
    save_city,
)
from .evaluation import (
    build_report,
    dataset_digest,
    evaluate,
    expert_activation_report,
    evaluate_samples,
    format_table,
    frequency_baseline,
    uniform_random_hit_rate,
    write_json_atomic,
    zero_shot_transfer,
)
from .retrieval import build_location_index
from .training import TrainConfig, train, train_config

log = logging.getLogger("nextlocmoe")

ERROR_PREFIX = "nextlocmoe-error:"
ENV_PREFIX = "NEXTLOCMOE_"
SECTIONS = ("city", "model", "train")
SPLIT_RATIOS = (7, 1, 2)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{ERROR_PREFIX} usage: {message}", file=sys.stderr)
        raise SystemExit(2)


# ---------------------------------------------------------------- config resolution

def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def read_config_file(path: str | Path) -> dict[str, dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep key case (M, N, L1, ...)
    parser.read(path, encoding="utf-8")
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise UsageError(f"{path}: unknown config sections {sorted(unknown)}")
    return {s: {k: _parse_value(v) for k, v in parser[s].items()} for s in parser.sections()}


def _field_names(section: str) -> dict[str, str]:
    cls = {"city": SyntheticCityConfig, "model": ModelConfig, "train": TrainConfig}[section]
    return {f.name.lower(): f.name for f in fields(cls)}


def env_overrides(environ: Mapping[str, str]) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX) or key == ENV_PREFIX + "SEED":
            continue
        section, _, name = key[len(ENV_PREFIX):].lower().partition("_")
        if section not in SECTIONS or not name:
            raise UsageError(f"unrecognized environment override {key}")
        try:
            field_name = _field_names(section)[name]
        except KeyError:
            raise UsageError(f"{key}: no {section} setting named {name!r}") from None
        out.setdefault(section, {})[field_name] = _parse_value(raw)
    return out


def flag_overrides(pairs: Sequence[str]) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        section, _, name = key.partition(".")
        if not sep or section not in SECTIONS or not name:
            raise UsageError(f"--set expects section.key=value with section in {SECTIONS}, got {pair!r}")
        out.setdefault(section, {})[name] = _parse_value(raw)
    return out


def resolve_settings(args, environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """Layer every settings source and return a snapshot plus where each layer came from."""
    environ = os.environ if environ is None else environ
    layers = [
        ("config", read_config_file(args.config) if args.config else {}),
        ("env", env_overrides(environ)),
        ("flags", flag_overrides(args.set or [])),
    ]
    merged = {s: {} for s in SECTIONS}
    for _, layer in layers:
        for section, values in layer.items():
            merged[section].update(values)

    seed = 0
    if ENV_PREFIX + "SEED" in environ:
        seed = int(environ[ENV_PREFIX + "SEED"])
    if args.seed is not None:
        seed = args.seed
    profile = args.profile
    return {
        "seed": seed,
        "profile": profile,
        "overrides": merged,
        "sources": {name: layer for name, layer in layers if layer},
    }


def resolved_model_config(settings: Mapping[str, Any]) -> ModelConfig:
    cfg = model_config(settings["profile"])
    if settings["overrides"]["model"]:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), **settings["overrides"]["model"]})
    return cfg


def resolved_train_config(settings: Mapping[str, Any]) -> TrainConfig:
    values = {**asdict(train_config(settings["profile"])), "seed": settings["seed"]}
    values.update(settings["overrides"]["train"])
    if settings.get("seed_from_flag"):
        values["seed"] = settings["seed"]
    return TrainConfig.from_dict(values)


def resolved_city_config(settings: Mapping[str, Any]) -> SyntheticCityConfig:
    values = {"seed": settings["seed"], **settings["overrides"]["city"]}
    if settings.get("seed_from_flag"):
        values["seed"] = settings["seed"]
    return SyntheticCityConfig.from_mapping(values)


# ---------------------------------------------------------------- manifests

def write_manifest(out_dir: Path, command: str, settings: Mapping[str, Any], snapshot: Mapping[str, Any],
                   inputs: Mapping[str, Any], outputs: Sequence[Path], started: float) -> Path:
    manifest = {
        "command": command,
        "code_version": __version__,
        "torch_version": torch.__version__,
        "seed": settings["seed"],
        "profile": settings["profile"],
        "config": snapshot,
        "config_sources": settings["sources"],
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": [str(p) for p in outputs],
        "wall_time_s": round(time.time() - started, 3),
    }
    return write_json_atomic(out_dir / "manifest.json", manifest)


# ---------------------------------------------------------------- helpers

def _load_model(path: str, ablate: Sequence[str]):
    model, payload = load_checkpoint(path)
    model.ablate = set(ablate)
    return model, payload


def _load_eval_city(path: str):
    ds = load_city(path)
    return ds if ds.normalized else normalize_coordinates(ds)


def _test_users(payload: Mapping[str, Any], ds) -> list[str] | None:
    extra = payload.get("extra", {})
    if extra.get("dataset_digest") == dataset_digest(ds) and extra.get("split"):
        return list(extra["split"]["test"])
    return None


def _print_report(rows) -> None:
    print(format_table(rows))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, settings) -> list[Path]:
    city = resolved_city_config(settings)
    ds = generate_synthetic_city(city)
    out = Path(args.out)
    save_city(ds, out, args.format)
    outputs = [out / f"records.{args.format}", out / "locations.csv", out / "meta.json"]
    print(f"wrote {len(ds.locations)} locations, {len(ds.users)} users, {ds.n_records} records to {out}")
    settings["_snapshot"] = {"city": asdict(city)}
    return outputs


def cmd_train(args, settings) -> list[Path]:
    mcfg = resolved_model_config(settings)
    tcfg = resolved_train_config(settings)
    raw = load_city(args.data)
    ds = normalize_coordinates(raw)
    train_ds, val_ds, test_ds = partition_users(ds, SPLIT_RATIOS, tcfg.seed)
    train_s = dataset_samples(train_ds, mcfg.M, mcfg.N, tcfg.stride)
    val_s = dataset_samples(val_ds, mcfg.M, mcfg.N, tcfg.stride)
    if not train_s or not val_s:
        raise UsageError(f"trajectories too short for M={mcfg.M}, N={mcfg.N}: no training or validation samples")
    model = build_model(mcfg, tcfg.seed)
    model.ablate = set(args.ablate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(e):
        print(f"epoch {e.epoch:3d}  train_dist {e.train_dist:.5f}  entropy {e.train_entropy:.5f}  "
              f"val_dist {e.val_dist:.5f}  lr {e.lr:.2e}  |E| {e.mean_activated:.2f}  {e.wall_time:.1f}s", flush=True)

    result = train(model, (train_s, val_s), tcfg, on_epoch=progress, dump_dir=out)
    extra = {
        "train_config": asdict(tcfg),
        "ablate": sorted(args.ablate),
        "best_epoch": result.best_epoch,
        "best_val_dist": result.best_val,
        "dataset_digest": dataset_digest(raw),
        "norm_stats": ds.norm_stats.to_dict(),
        "split": {"train": sorted(train_ds.users), "val": sorted(val_ds.users), "test": sorted(test_ds.users)},
    }
    ckpt = save_checkpoint(out / "best.ckpt", model, extra)
    trainlog = out / "trainlog.jsonl"
    tmp = trainlog.with_name(trainlog.name + ".tmp")
    tmp.write_text(result.log.to_jsonl(), encoding="utf-8")
    os.replace(tmp, trainlog)
    print(f"best epoch {result.best_epoch}, validation distance {result.best_val:.5f}; checkpoint {ckpt}")
    settings["_snapshot"] = {"model": mcfg.to_dict(), "train": asdict(tcfg), "ablate": sorted(args.ablate)}
    return [ckpt, trainlog]


def cmd_eval(args, settings) -> list[Path]:
    model, payload = _load_model(args.ckpt, args.ablate)
    ds = _load_eval_city(args.data)
    users = _test_users(payload, load_city(args.data)) if args.users == "test" else None
    subset = ds.subset(users) if users else ds
    metrics, stats = evaluate(model, subset, stride=args.stride)
    rows = {"model": (metrics, stats)}
    extra: dict[str, Any] = {"users": "test-split" if users else "all", "ablate": sorted(args.ablate)}
    if users:
        train_s = dataset_samples(ds.subset(payload["extra"]["split"]["train"]), model.config.M, model.config.N)
        test_s = dataset_samples(subset, model.config.M, model.config.N, args.stride)
        base = frequency_baseline(train_s, test_s)
        rows["most-frequent"] = (base, None)
        extra["frequency_baseline"] = base.to_dict()
    _print_report(rows)
    settings["_snapshot"] = {"model": model.config.to_dict(), "ablate": sorted(args.ablate), "checkpoint": args.ckpt}
    if not args.out:
        return []
    report = build_report(metrics, stats, model.config.to_dict(), subset, extra)
    return [write_json_atomic(Path(args.out) / "report.json", report)]


def cmd_predict(args, settings) -> list[Path]:
    model, _ = _load_model(args.ckpt, args.ablate)
    ds = _load_eval_city(args.data)
    if args.user not in ds.users:
        raise UsageError(f"user {args.user!r} not in {args.data}")
    samples = dataset_samples(ds.subset([args.user]), model.config.M, model.config.N)
    if not samples:
        raise UsageError(f"user {args.user!r} has fewer than M + N + 1 = {model.config.M + model.config.N + 1} records")
    sample = samples[args.index]
    (x, y), trace = model.predict(sample)
    ids = build_location_index(ds.locations.values()).nearest(x, y, 10)
    result = {
        "user": args.user,
        "sample_index": args.index if args.index >= 0 else len(samples) + args.index,
        "predicted_xy": [x, y],
        "top10": ids,
        "target": sample.target.id,
        "user_experts": [list(r.selected) for r in trace.user],
    }
    print(json.dumps(result))
    settings["_snapshot"] = {"model": model.config.to_dict(), "ablate": sorted(args.ablate), "checkpoint": args.ckpt}
    if not args.out:
        return []
    return [write_json_atomic(Path(args.out) / "prediction.json", result)]


def cmd_transfer_eval(args, settings) -> list[Path]:
    model, payload = _load_model(args.ckpt, args.ablate)
    raw = load_city(args.data)
    if payload.get("extra", {}).get("dataset_digest") == dataset_digest(raw):
        log.warning("target city is the training city; this is not a transfer run")
    before = state_checksum(model)
    metrics, stats = zero_shot_transfer(model, raw, stride=args.stride)
    chance = uniform_random_hit_rate(len(raw.locations), 10)
    _print_report({"zero-shot": (metrics, stats)})
    print(f"uniform-random hit@10: {chance:.2f}%")
    settings["_snapshot"] = {"model": model.config.to_dict(), "ablate": sorted(args.ablate), "checkpoint": args.ckpt}
    if not args.out:
        return []
    extra = {"uniform_random_hit@10": chance, "checksum_before": before, "checksum_after": state_checksum(model)}
    report = build_report(metrics, stats, model.config.to_dict(), raw, extra)
    return [write_json_atomic(Path(args.out) / "transfer_report.json", report)]


def cmd_report_routing(args, settings) -> list[Path]:
    ds = _load_eval_city(args.data)
    reports = {}
    for path in args.ckpt:
        model, payload = _load_model(path, args.ablate)
        users = _test_users(payload, load_city(args.data)) if args.users == "test" else None
        subset = ds.subset(users) if users else ds
        samples = dataset_samples(subset, model.config.M, model.config.N, args.stride)
        index = build_location_index(ds.locations.values())
        _, traces = evaluate_samples(model, samples, index)
        stats = expert_activation_report(traces, args.tau)
        lam = payload.get("extra", {}).get("train_config", {}).get("lam")
        reports[path] = {"lambda": lam, **stats.to_dict()}
    width = max(len(p) for p in reports)
    print(f"{'checkpoint'.ljust(width)}  {'lambda':>8}  {'mean|E|':>8}  {'entropy':>8}")
    for path, r in reports.items():
        lam = "-" if r["lambda"] is None else f"{r['lambda']:g}"
        print(f"{path.ljust(width)}  {lam:>8}  {r['mean_activated']:8.3f}  {r['mean_entropy']:8.4f}")
    settings["_snapshot"] = {"checkpoints": list(args.ckpt), "tau": args.tau, "ablate": sorted(args.ablate)}
    if not args.out:
        return []
    return [write_json_atomic(Path(args.out) / "routing_report.json", {"reports": reports})]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "transfer-eval": cmd_transfer_eval,
    "report-routing": cmd_report_routing,
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    shared.add_argument("--profile", choices=("desk", "paper", "tiny"), default="desk")
    shared.add_argument("--config", help="INI file with [city], [model] and [train] sections")
    shared.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one setting")
    shared.add_argument("--ablate", action="append", choices=("loc-moe", "persona-moe"), default=[])
    shared.add_argument("--verbose", "-v", action="store_true")

    parser = _Parser(prog="nextlocmoe", description="Next-location prediction with a two-level mixture of experts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[shared], help="generate a synthetic city")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    p = sub.add_parser("train", parents=[shared], help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")

    for name, help_text in (("eval", "Hit@k on a dataset"), ("transfer-eval", "zero-shot evaluation on another city")):
        p = sub.add_parser(name, parents=[shared], help=help_text)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", help="directory for the report and manifest")
        p.add_argument("--stride", type=int, default=1)
        if name == "eval":
            p.add_argument("--users", choices=("test", "all"), default="test",
                           help="'test' uses the checkpoint's held-out users when DATA is its training city")

    p = sub.add_parser("predict", parents=[shared], help="top-10 location ids for one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--index", type=int, default=-1, help="sample index within the user's windows (default: last)")
    p.add_argument("--out")

    p = sub.add_parser("report-routing", parents=[shared], help="expert activation statistics")
    p.add_argument("--ckpt", required=True, nargs="+", help="one or more checkpoints, reported side by side")
    p.add_argument("--data", required=True)
    p.add_argument("--tau", type=float, default=None, help="re-select experts at this threshold")
    p.add_argument("--users", choices=("test", "all"), default="test")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    try:
        settings = resolve_settings(args)
        settings["seed_from_flag"] = args.seed is not None or ENV_PREFIX + "SEED" in os.environ
        outputs = COMMANDS[args.command](args, settings)
        if args.out:
            inputs = {k: getattr(args, k) for k in ("data", "ckpt", "config") if getattr(args, k, None)}
            snapshot = settings.pop("_snapshot", {})
            settings.pop("seed_from_flag", None)
            write_manifest(Path(args.out), args.command, settings, snapshot, inputs, outputs, started)
    except KeyboardInterrupt:
        print(f"{ERROR_PREFIX} interrupted", file=sys.stderr)
        return 130
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{ERROR_PREFIX} usage: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # every failure ends in one parseable line
        if getattr(args, "verbose", False):
            log.exception("command failed")
        msg = str(exc).replace("\n", " ")
        print(f"{ERROR_PREFIX} {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
