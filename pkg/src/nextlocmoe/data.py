"""Records, trajectories and datasets: file IO, normalization, user-level
splits, windowing, and a persona-driven synthetic city generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .taxonomy import LOCATION_FUNCTIONS, USER_GROUPS

CSV_FIELDS = ("user_id", "loc_id", "x", "y", "w", "d", "dur", "timestamp")
LOCATION_FIELDS = ("loc_id", "x", "y")
DEFAULT_DUR_CAP = 24.0


class DataError(ValueError):
    """Raised for malformed or out-of-range dataset input."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.field = field


@dataclass(frozen=True)
class Location:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class Record:
    location: Location
    w: int
    d: int
    dur: float
    timestamp: datetime | None = None

    def __post_init__(self):
        if not 0 <= self.w <= 6:
            raise DataError(f"day-of-week {self.w} outside [0, 6]", field="w")
        if not 0 <= self.d <= 23:
            raise DataError(f"hour {self.d} outside [0, 23]", field="d")
        if not self.dur >= 0:
            raise DataError(f"duration {self.dur} is negative", field="dur")


@dataclass(frozen=True)
class Sample:
    user_id: str
    historical: tuple[Record, ...]
    current: tuple[Record, ...]
    target: Location


@dataclass(frozen=True)
class NormStats:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    dur_cap: float = DEFAULT_DUR_CAP

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise DataError("degenerate axis: max must exceed min on both axes")
        if self.dur_cap <= 0:
            raise DataError("duration cap must be positive")

    def to_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("x_min", "x_max", "y_min", "y_max", "dur_cap")}


@dataclass(frozen=True)
class Dataset:
    locations: Mapping[int, Location]
    users: Mapping[str, tuple[Record, ...]]
    norm_stats: NormStats | None = None
    meta: Mapping[str, Any] = field(default_factory=dict)

    @property
    def normalized(self) -> bool:
        return self.norm_stats is not None

    @property
    def n_records(self) -> int:
        return sum(len(r) for r in self.users.values())

    def subset(self, user_ids: Iterable[str]) -> "Dataset":
        ids = sorted(set(user_ids))
        return replace(self, users={u: self.users[u] for u in ids})


# ---------------------------------------------------------------- file IO

def _parse_row(row: Mapping[str, str], line: int) -> tuple[str, Location, int, int, float, datetime | None]:
    missing = [f for f in CSV_FIELDS if f not in row or row[f] is None]
    if missing:
        raise DataError("missing value", line=line, field=missing[0])

    def conv(name, fn):
        try:
            return fn(row[name])
        except (TypeError, ValueError):
            raise DataError(f"cannot parse {row[name]!r}", line=line, field=name) from None

    user = str(row["user_id"])
    loc = Location(conv("loc_id", int), conv("x", float), conv("y", float))
    w, d, dur = conv("w", int), conv("d", int), conv("dur", float)
    ts_raw = row["timestamp"]
    ts = conv("timestamp", datetime.fromisoformat) if ts_raw not in ("", None) else None
    if not 0 <= w <= 6:
        raise DataError(f"day-of-week {w} outside [0, 6]", line=line, field="w")
    if not 0 <= d <= 23:
        raise DataError(f"hour {d} outside [0, 23]", line=line, field="d")
    if not (dur >= 0 and math.isfinite(dur)):
        raise DataError(f"duration {dur} must be finite and >= 0", line=line, field="dur")
    return user, loc, w, d, dur, ts


def _iter_rows(path: Path, fmt: str):
    with path.open(encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_FIELDS:
                raise DataError(f"header must be {','.join(CSV_FIELDS)}, got {reader.fieldnames}", line=1)
            for row in reader:
                yield reader.line_num, row
        elif fmt == "jsonl":
            for lineno, text in enumerate(fh, start=1):
                if not text.strip():
                    continue
                try:
                    obj = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise DataError(f"invalid JSON: {exc.msg}", line=lineno) from None
                if not isinstance(obj, dict):
                    raise DataError("expected a JSON object", line=lineno)
                yield lineno, {k: ("" if v is None else str(v)) for k, v in obj.items()}
        else:
            raise ValueError(f"unknown format {fmt!r}")


def _infer_format(path: Path) -> str:
    return "jsonl" if path.suffix in (".jsonl", ".json") else "csv"


def load_dataset(path: str | Path, fmt: str | None = None, locations_path: str | Path | None = None) -> Dataset:
    """Load a record file; coordinates stay raw (not normalized).

    Records are grouped per user and sorted by timestamp (file order breaks
    ties). If ``locations_path`` is given, its locations are added so that
    never-visited candidates are part of the dataset too.
    """
    path = Path(path)
    fmt = fmt or _infer_format(path)
    locations: dict[int, Location] = {}
    if locations_path is not None:
        locations.update(load_locations(locations_path))
    rows: dict[str, list[tuple[int, Record]]] = {}
    for line, row in _iter_rows(path, fmt):
        user, loc, w, d, dur, ts = _parse_row(row, line)
        known = locations.setdefault(loc.id, loc)
        if (known.x, known.y) != (loc.x, loc.y):
            raise DataError(f"location {loc.id} has inconsistent coordinates", line=line, field="x")
        rows.setdefault(user, []).append((line, Record(known, w, d, dur, ts)))
    users = {}
    for user in sorted(rows):
        recs = rows[user]
        if all(r.timestamp is not None for _, r in recs):
            recs = sorted(recs, key=lambda lr: (lr[1].timestamp, lr[0]))
        users[user] = tuple(r for _, r in recs)
    return Dataset(locations=dict(sorted(locations.items())), users=users, meta={"source": str(path)})


def load_locations(path: str | Path) -> dict[int, Location]:
    out: dict[int, Location] = {}
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames[:3]) != LOCATION_FIELDS:
            raise DataError(f"locations header must start with {','.join(LOCATION_FIELDS)}", line=1)
        for row in reader:
            try:
                loc = Location(int(row["loc_id"]), float(row["x"]), float(row["y"]))
            except (TypeError, ValueError):
                raise DataError("cannot parse location row", line=reader.line_num) from None
            if loc.id in out:
                raise DataError(f"duplicate location id {loc.id}", line=reader.line_num, field="loc_id")
            out[loc.id] = loc
    return out


def _record_row(user: str, r: Record) -> dict[str, Any]:
    return {
        "user_id": user,
        "loc_id": r.location.id,
        "x": r.location.x,
        "y": r.location.y,
        "w": r.w,
        "d": r.d,
        "dur": r.dur,
        "timestamp": r.timestamp.isoformat() if r.timestamp is not None else "",
    }


def write_dataset(ds: Dataset, path: str | Path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or _infer_format(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
            writer.writeheader()
            for user, recs in ds.users.items():
                for r in recs:
                    writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in _record_row(user, r).items()})
        elif fmt == "jsonl":
            for user, recs in ds.users.items():
                for r in recs:
                    fh.write(json.dumps(_record_row(user, r)) + "\n")
        else:
            raise ValueError(f"unknown format {fmt!r}")


def write_locations(ds: Dataset, path: str | Path) -> None:
    functions = ds.meta.get("functions", {})
    extra = list(LOCATION_FUNCTIONS) if functions else []
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*LOCATION_FIELDS, *extra])
        for loc in ds.locations.values():
            row = [loc.id, repr(loc.x), repr(loc.y)]
            if extra:
                row += [repr(float(v)) for v in functions[loc.id]]
            writer.writerow(row)


def save_city(ds: Dataset, directory: str | Path, fmt: str = "csv") -> Path:
    """Write ``records.<fmt>``, ``locations.csv`` and ``meta.json`` into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, directory / f"records.{fmt}", fmt)
    write_locations(ds, directory / "locations.csv")
    meta = {k: v for k, v in ds.meta.items() if k != "functions"}
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return directory


def load_city(directory: str | Path) -> Dataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a dataset directory")
    for fmt in ("csv", "jsonl"):
        records = directory / f"records.{fmt}"
        if records.exists():
            break
    else:
        raise FileNotFoundError(f"{directory}: no records.csv or records.jsonl")
    loc_path = directory / "locations.csv"
    ds = load_dataset(records, fmt, loc_path if loc_path.exists() else None)
    meta = dict(ds.meta)
    if (directory / "meta.json").exists():
        meta.update(json.loads((directory / "meta.json").read_text(encoding="utf-8")))
    if loc_path.exists():
        with loc_path.open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if set(LOCATION_FUNCTIONS) <= set(reader.fieldnames or ()):
                meta["functions"] = {
                    int(row["loc_id"]): [float(row[f]) for f in LOCATION_FUNCTIONS] for row in reader
                }
    return replace(ds, meta=meta)


# ---------------------------------------------------------------- normalization

def normalize_coordinates(ds: Dataset, dur_cap: float = DEFAULT_DUR_CAP) -> Dataset:
    """Per-axis min-max scale of coordinates into [0, 1]; durations divided by
    ``dur_cap`` and clipped to [0, 1]. Stats come from the dataset's own locations."""
    if ds.normalized:
        raise DataError("dataset is already normalized")
    xs = np.array([loc.x for loc in ds.locations.values()])
    ys = np.array([loc.y for loc in ds.locations.values()])
    if len(np.unique(xs)) < 2 or len(np.unique(ys)) < 2:
        raise DataError("degenerate axis: need at least two distinct x and two distinct y values")
    stats = NormStats(float(xs.min()), float(xs.max()), float(ys.min()), float(ys.max()), dur_cap)
    sx, sy = stats.x_max - stats.x_min, stats.y_max - stats.y_min
    locs = {
        i: Location(i, (loc.x - stats.x_min) / sx, (loc.y - stats.y_min) / sy)
        for i, loc in ds.locations.items()
    }
    users = {
        u: tuple(replace(r, location=locs[r.location.id], dur=min(r.dur / dur_cap, 1.0)) for r in recs)
        for u, recs in ds.users.items()
    }
    return Dataset(locs, users, stats, ds.meta)


def denormalize_coordinates(ds: Dataset) -> Dataset:
    """Inverse of :func:`normalize_coordinates` (exact only for durations
    that were not clipped)."""
    stats = ds.norm_stats
    if stats is None:
        raise DataError("dataset is not normalized")
    locs = {
        i: Location(
            i,
            loc.x * (stats.x_max - stats.x_min) + stats.x_min,
            loc.y * (stats.y_max - stats.y_min) + stats.y_min,
        )
        for i, loc in ds.locations.items()
    }
    users = {
        u: tuple(replace(r, location=locs[r.location.id], dur=r.dur * stats.dur_cap) for r in recs)
        for u, recs in ds.users.items()
    }
    return Dataset(locs, users, None, ds.meta)


def denormalize_xy(xy: np.ndarray, stats: NormStats) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64)
    scale = np.array([stats.x_max - stats.x_min, stats.y_max - stats.y_min])
    return xy * scale + np.array([stats.x_min, stats.y_min])


# ---------------------------------------------------------------- splits and windows

def partition_users(
    ds: Dataset, ratios: Sequence[float] = (7, 1, 2), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Split users (not records) into train/val/test.

    Sizes are floor(r_train * U), floor(r_val * U) and the remainder, with the
    ratios normalized to sum to one.
    """
    ids = sorted(ds.users)
    n = len(ids)
    if n < 10:
        raise DataError(f"need at least 10 users for a {':'.join(map(str, ratios))} split, got {n}")
    total = float(sum(ratios))
    n_train = math.floor(ratios[0] / total * n + 1e-9)
    n_val = math.floor(ratios[1] / total * n + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return (
        ds.subset(shuffled[:n_train]),
        ds.subset(shuffled[n_train:n_train + n_val]),
        ds.subset(shuffled[n_train + n_val:]),
    )


def window_trajectories(
    user_records: Sequence[Record], M: int, N: int, stride: int = 1, user_id: str = ""
) -> list[Sample]:
    if M < 1 or N < 1 or stride < 1:
        raise ValueError("M, N and stride must all be >= 1")
    out = []
    for i in range(0, len(user_records) - (M + N), stride):
        out.append(
            Sample(
                user_id=user_id,
                historical=tuple(user_records[i:i + M]),
                current=tuple(user_records[i + M:i + M + N]),
                target=user_records[i + M + N].location,
            )
        )
    return out


def dataset_samples(ds: Dataset, M: int, N: int, stride: int = 1) -> list[Sample]:
    samples = []
    for user, recs in ds.users.items():
        samples.extend(window_trajectories(recs, M, N, stride, user))
    return samples


# ---------------------------------------------------------------- synthetic city

@dataclass(frozen=True)
class SyntheticCityConfig:
    grid: int = 20
    n_locations: int = 300
    function_mix: tuple[float, ...] = (0.15, 0.30, 0.10, 0.15, 0.30)
    n_users: int = 150
    persona_mix: tuple[float, ...] = tuple([1.0 / len(USER_GROUPS)] * len(USER_GROUPS))
    days: int = 28
    seed: int = 0
    cell_size: float = 500.0
    origin: tuple[float, float] = (0.0, 0.0)
    name: str = "synthetic"
    start_date: str = "2024-01-01"  # a Monday

    def __post_init__(self):
        for name, mix, size in (
            ("function_mix", self.function_mix, len(LOCATION_FUNCTIONS)),
            ("persona_mix", self.persona_mix, len(USER_GROUPS)),
        ):
            if len(mix) != size:
                raise ValueError(f"{name} needs {size} weights, got {len(mix)}")
            if any(w < 0 for w in mix) or abs(sum(mix) - 1.0) > 1e-6:
                raise ValueError(f"{name} weights must be nonnegative and sum to 1")
        if self.grid < 2:
            raise ValueError("grid must have at least 2 cells per axis")
        if not 1 <= self.n_locations <= self.grid * self.grid:
            raise ValueError(f"n_locations must be in [1, {self.grid * self.grid}]")
        if self.n_users < 0 or self.days < 1:
            raise ValueError("n_users must be >= 0 and days >= 1")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "SyntheticCityConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown city config keys: {sorted(unknown)}")
        kwargs = dict(values)
        for key in ("function_mix", "persona_mix", "origin"):
            if key in kwargs:
                kwargs[key] = tuple(float(v) for v in kwargs[key])
        return cls(**kwargs)


F_ENT, F_COM, F_EDU, F_PUB, F_RES = range(5)

# anchor function, secondary functions (near anchor), leisure functions (near home)
_PERSONA_PLACES: dict[str, tuple[int | None, tuple[int, ...], tuple[int, ...]]] = {
    "student": (F_EDU, (F_COM, F_EDU), (F_ENT, F_COM)),
    "teacher": (F_EDU, (F_COM, F_PUB), (F_ENT, F_COM)),
    "office_worker": (F_COM, (F_COM,), (F_ENT, F_COM)),
    "visitor": (None, (F_ENT, F_COM), (F_ENT, F_COM)),
    "night_shift_worker": (F_PUB, (F_COM, F_ENT), (F_COM,)),
    "remote_worker": (None, (F_COM,), (F_COM, F_ENT)),
    "service_industry_worker": (F_COM, (F_ENT, F_COM), (F_COM,)),
    "public_service_official": (F_PUB, (F_PUB, F_COM), (F_ENT, F_COM)),
    "fitness_enthusiast": (F_COM, (F_COM,), (F_ENT,)),
    "retail_employee": (F_COM, (F_COM,), (F_ENT, F_COM)),
    "undefined_persona": (None, (F_ENT, F_COM, F_EDU, F_PUB), (F_ENT, F_COM)),
}


class _CityPlanner:
    """Per-user place sets and day plans driven by a seeded generator."""

    def __init__(self, rng: np.random.Generator, coords: np.ndarray, dominant: np.ndarray):
        self.rng = rng
        self.coords = coords
        self.dominant = dominant
        self.by_function = {f: np.flatnonzero(dominant == f) for f in range(len(LOCATION_FUNCTIONS))}
        # shared popularity so that some anchors (big schools, offices) draw many users
        self.popularity = rng.pareto(1.5, size=len(coords)) + 1.0

    def pick(self, functions: Sequence[int], near: int | None = None, k_near: int = 6) -> int:
        pool = np.concatenate([self.by_function[f] for f in functions])
        if near is not None:
            dist = np.linalg.norm(self.coords[pool] - self.coords[near], axis=1)
            pool = pool[np.argsort(dist, kind="stable")[:k_near]]
        weights = self.popularity[pool] / self.popularity[pool].sum()
        return int(self.rng.choice(pool, p=weights))

    def places(self, persona: str) -> dict[str, list[int]]:
        anchor_f, secondary_f, leisure_f = _PERSONA_PLACES[persona]
        home = self.pick((F_RES,))
        places = {"home": [home]}
        if anchor_f is not None:
            anchor = self.pick((anchor_f,))
            same = self.by_function[anchor_f]
            dist = np.linalg.norm(self.coords[same] - self.coords[anchor], axis=1)
            order = same[np.argsort(dist, kind="stable")]
            places["anchor"] = [anchor, int(order[1]) if len(order) > 1 else anchor]
        near = places.get("anchor", [home])[0]
        places["secondary"] = sorted({self.pick(secondary_f, near) for _ in range(3)})
        places["leisure"] = sorted({self.pick(leisure_f, home, 8) for _ in range(3)})
        places["explore_functions"] = list(secondary_f + leisure_f)
        return places

    def _h(self, options: Sequence[float]) -> float:
        return float(self.rng.choice(options))

    def day_plan(self, persona: str, day: int, weekday: int) -> list[tuple[float, str]]:
        """(start hour, place kind) pairs for one day, in time order."""
        r, h = self.rng.random, self._h
        workday = weekday < 5
        plan: list[tuple[float, str]] = [(0.0, "home")]
        if persona in ("student", "teacher"):
            if workday:
                start = h([8.0, 8.5, 9.0]) if persona == "student" else h([7.5, 8.0])
                plan.append((start, "anchor"))
                if r() < 0.7:
                    plan.append((h([12.0, 12.5, 13.0]), "anchor2"))
                end = h([15.0, 15.5, 16.0]) if persona == "student" else h([16.5, 17.0])
                if r() < 0.4:
                    plan.append((end, "secondary"))
                    end += h([1.0, 1.5])
                plan.append((end + h([0.5, 1.0]), "home"))
            elif r() < 0.6:
                t = h([10.0, 11.0, 13.0, 14.0])
                plan += [(t, "leisure"), (t + h([2.0, 3.0]), "home")]
        elif persona in ("office_worker", "fitness_enthusiast"):
            if persona == "fitness_enthusiast" and (r() < 0.7 or not workday):
                t = h([6.0, 6.5]) if workday else h([8.0, 9.0, 10.0])
                plan += [(t, "leisure"), (t + 1.5, "home")]
            if workday:
                plan.append((h([8.5, 9.0]) if persona == "office_worker" else 9.0, "anchor"))
                if r() < 0.5:
                    lunch = h([12.0, 12.5])
                    plan += [(lunch, "secondary"), (lunch + 1.0, "anchor")]
                t = h([18.0, 18.5, 19.0])
                if persona == "fitness_enthusiast" and r() < 0.6:
                    plan += [(t, "leisure"), (t + 1.5, "home")]
                else:
                    plan.append((t, "home"))
            elif persona == "office_worker" and r() < 0.5:
                t = h([11.0, 14.0])
                plan += [(t, "leisure"), (t + 2.0, "home")]
        elif persona == "night_shift_worker":
            # the previous night's shift ends in the morning
            plan = [(0.0, "anchor")] if day > 0 and weekday != 6 else [(0.0, "home")]
            plan.append((h([6.5, 7.0]), "home"))
            if weekday < 6:
                if r() < 0.4:
                    plan.append((h([19.0, 19.5]), "secondary"))
                plan.append((h([21.0, 21.5, 22.0]), "anchor"))
        elif persona == "public_service_official":
            if workday:
                start = 7.0 if (day // 7) % 2 == 0 else 15.0
                plan += [(start, "anchor")]
                if r() < 0.3:
                    plan.append((start + 4.0, "anchor2"))
                plan.append((start + 8.0, "home"))
        elif persona == "service_industry_worker":
            if weekday != 2:
                start = h([10.0, 14.0, 17.0])
                plan.append((start, "anchor"))
                if r() < 0.4:
                    plan.append((start + 4.0, "secondary"))
                plan.append((min(start + 7.0, 23.5), "home"))
        elif persona == "retail_employee":
            if weekday != 6:
                plan += [(h([10.5, 11.0]), "anchor"), (h([19.5, 20.0, 20.5]), "home")]
        elif persona == "remote_worker":
            t = h([8.0, 9.0, 10.0, 11.0])
            for _ in range(int(self.rng.integers(1, 3))):
                plan.append((t, "secondary"))
                t += h([2.0, 3.0])
            plan.append((t, "home"))
        elif persona == "visitor":
            t = h([8.5, 9.0, 9.5])
            for _ in range(int(self.rng.integers(2, 5))):
                plan.append((t, "secondary" if r() < 0.6 else "explore"))
                t += h([1.5, 2.0, 2.5])
            plan.append((min(t, 23.5), "home"))
        else:  # undefined persona
            t = h([7.0, 9.0, 11.0, 13.0])
            for _ in range(int(self.rng.integers(1, 4))):
                plan.append((t, "explore" if r() < 0.5 else "leisure"))
                t += h([1.0, 2.0, 3.0])
                if t >= 22.0:
                    break
            plan.append((min(t, 23.5), "home"))
        return plan

    def resolve(self, kind: str, places: dict[str, list[int]]) -> int:
        if kind == "home":
            return places["home"][0]
        if kind == "anchor":
            return places["anchor"][0]
        if kind == "anchor2":
            return places["anchor"][1]
        if kind in ("secondary", "leisure"):
            return int(self.rng.choice(places[kind]))
        return self.pick(places["explore_functions"])


def generate_synthetic_city(cfg: SyntheticCityConfig) -> Dataset:
    """Persona-conditioned synthetic mobility on a grid city (raw coordinates)."""
    rng = np.random.default_rng(cfg.seed)
    g = cfg.grid
    cells = np.sort(rng.choice(g * g, size=cfg.n_locations, replace=False))
    rows, cols = np.divmod(cells, g)
    coords = np.stack([(cols + 0.5) * cfg.cell_size + cfg.origin[0], (rows + 0.5) * cfg.cell_size + cfg.origin[1]], 1)

    # central cells lean commercial/entertainment, outer cells residential
    centre = np.array([(g / 2) * cfg.cell_size + cfg.origin[0], (g / 2) * cfg.cell_size + cfg.origin[1]])
    radial = np.linalg.norm(coords - centre, axis=1) / (np.sqrt(2) * g / 2 * cfg.cell_size)
    base = np.asarray(cfg.function_mix, dtype=np.float64)
    dominant = np.empty(cfg.n_locations, dtype=np.int64)
    mixtures = np.empty((cfg.n_locations, len(LOCATION_FUNCTIONS)))
    for i in range(cfg.n_locations):
        c = 1.0 - radial[i]
        w = base.copy()
        w[[F_ENT, F_COM]] *= 0.5 + c
        w[F_RES] *= 1.5 - c
        w /= w.sum()
        f = int(rng.choice(len(w), p=w))
        mix = 0.45 * rng.dirichlet(np.ones(len(w)))
        mix[f] += 0.55
        dominant[i], mixtures[i] = f, mix

    loc_ids = [int(c) for c in cells]
    locations = {lid: Location(lid, float(coords[i, 0]), float(coords[i, 1])) for i, lid in enumerate(loc_ids)}
    planner = _CityPlanner(rng, coords, dominant)

    personas = rng.choice(len(USER_GROUPS), size=cfg.n_users, p=np.asarray(cfg.persona_mix))
    present = set(dominant.tolist())
    for p in sorted(set(personas.tolist())):
        anchor_f, secondary_f, leisure_f = _PERSONA_PLACES[USER_GROUPS[p]]
        need = {F_RES} | ({anchor_f} if anchor_f is not None else set())
        missing = [LOCATION_FUNCTIONS[f] for f in sorted(need - present)]
        if not (set(secondary_f) & present):
            missing.append("/".join(LOCATION_FUNCTIONS[f] for f in secondary_f))
        if not (set(leisure_f) & present):
            missing.append("/".join(LOCATION_FUNCTIONS[f] for f in leisure_f))
        if missing:
            raise ValueError(f"persona {USER_GROUPS[p]!r} needs functions absent from the city: {missing}")

    start = datetime.fromisoformat(cfg.start_date)
    users: dict[str, tuple[Record, ...]] = {}
    persona_of: dict[str, str] = {}
    for u in range(cfg.n_users):
        uid = f"u{u:04d}"
        persona = USER_GROUPS[personas[u]]
        persona_of[uid] = persona
        places = planner.places(persona)
        stays: list[tuple[float, int]] = []
        for day in range(cfg.days):
            weekday = (start + timedelta(days=day)).weekday()
            for hour, kind in planner.day_plan(persona, day, weekday):
                t = day * 24.0 + hour
                loc_idx = planner.resolve(kind, places)
                if stays and stays[-1][1] == loc_idx:
                    continue
                if stays and t <= stays[-1][0]:
                    continue
                stays.append((t, loc_idx))
        end = cfg.days * 24.0
        recs = []
        for j, (t, loc_idx) in enumerate(stays):
            t_next = stays[j + 1][0] if j + 1 < len(stays) else end
            ts = start + timedelta(hours=t)
            recs.append(Record(locations[loc_ids[loc_idx]], ts.weekday(), ts.hour, t_next - t, ts))
        users[uid] = tuple(recs)

    meta = {
        "name": cfg.name,
        "grid": g,
        "cell_size": cfg.cell_size,
        "seed": cfg.seed,
        "personas": persona_of,
        "functions": {lid: mixtures[i].tolist() for i, lid in enumerate(loc_ids)},
    }
    return Dataset(locations=locations, users=users, meta=meta)


def function_weights(ds: Dataset) -> dict[int, list[float]]:
    """Per-location function mixture (synthetic cities only)."""
    return {int(k): v for k, v in ds.meta.get("functions", {}).items()}
