"""Per-cell weekly traffic records: domain types, CSV ingestion and POI bucketing."""
from __future__ import annotations

import configparser
import csv
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field, fields
from datetime import date
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

CSV_COLUMNS = ("cell_id", "week", "poi", "downlink_volume", "avg_user_count")

OTHERS = "Others"

# Default taxonomy: twelve categories in descending order of their reference cell counts.
DEFAULT_POIS = (
    "Low Rise Residential Area",
    "High Rise Residential Area",
    "Industrial Park",
    "Colleges and Universities",
    OTHERS,
    "Village",
    "Office Building",
    "Hospital",
    "Commercial Center",
    "Enterprises and Institutions",
    "Urban Road",
    "Square Park",
)

REFERENCE_POI_COUNTS = (7484, 2285, 1468, 1156, 826, 541, 360, 342, 257, 237, 235, 122)

DROP_REASONS = ("incomplete", "non-finite", "negative", "zero-downlink", "extreme")


class DatasetError(ValueError):
    """Raised for unreadable or malformed input and violated dataset invariants."""


def canonical_label(label: str) -> str:
    return label.strip().casefold()


@dataclass(frozen=True, order=True)
class PoiCategory:
    id: int
    name: str

    @property
    def is_others(self) -> bool:
        return canonical_label(self.name) == canonical_label(OTHERS)

    def __str__(self) -> str:
        return f"{self.id}-{self.name}"


def default_categories() -> tuple[PoiCategory, ...]:
    return tuple(PoiCategory(i + 1, name) for i, name in enumerate(DEFAULT_POIS))


@dataclass(frozen=True)
class WeekSample:
    week_index: int
    downlink_volume: float
    avg_user_count: float


@dataclass(frozen=True, eq=False)
class CellSeries:
    """One cell's contiguous weekly history of both channels.

    ``downlink`` and ``users`` are read-only float64 arrays aligned on
    ``start_week, start_week + 1, ...``.
    """

    cell_id: str
    poi: PoiCategory
    start_week: int
    downlink: np.ndarray
    users: np.ndarray

    def __post_init__(self):
        dl = np.array(self.downlink, dtype=np.float64)
        us = np.array(self.users, dtype=np.float64)
        if dl.ndim != 1 or dl.shape != us.shape:
            raise DatasetError(f"cell {self.cell_id}: channels must be equal-length 1-D series")
        dl.setflags(write=False)
        us.setflags(write=False)
        object.__setattr__(self, "downlink", dl)
        object.__setattr__(self, "users", us)

    def __len__(self) -> int:
        return len(self.downlink)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CellSeries):
            return NotImplemented
        return (
            self.cell_id == other.cell_id
            and self.poi == other.poi
            and self.start_week == other.start_week
            and np.array_equal(self.downlink, other.downlink)
            and np.array_equal(self.users, other.users)
        )

    __hash__ = None

    @property
    def weeks(self) -> tuple[WeekSample, ...]:
        return tuple(
            WeekSample(self.start_week + i, float(d), float(u))
            for i, (d, u) in enumerate(zip(self.downlink, self.users))
        )

    @property
    def values(self) -> np.ndarray:
        """(n_weeks, 2) matrix, column 0 downlink volume, column 1 user count."""
        return np.column_stack([self.downlink, self.users])


@dataclass(frozen=True)
class IngestReport:
    rows_read: int
    cells_seen: int
    cells_kept: int
    dropped: dict[str, str]
    extreme_threshold: float | None

    @property
    def drop_counts(self) -> dict[str, int]:
        counts = Counter(self.dropped.values())
        return {reason: counts.get(reason, 0) for reason in DROP_REASONS}

    def to_dict(self) -> dict:
        return {
            "rows_read": self.rows_read,
            "cells_seen": self.cells_seen,
            "cells_kept": self.cells_kept,
            "cells_dropped": len(self.dropped),
            "drop_counts": self.drop_counts,
            "dropped": dict(sorted(self.dropped.items())),
            "extreme_threshold": self.extreme_threshold,
        }


@dataclass(frozen=True)
class TrafficDataset:
    cells: tuple[CellSeries, ...]
    n_weeks: int = 31
    train_weeks: int = 20
    lookback: int = 4
    horizon: int = 2
    start_week: int = 0
    categories: tuple[PoiCategory, ...] = field(default_factory=default_categories)
    report: IngestReport | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(sorted(self.cells, key=lambda c: c.cell_id)))
        if not 0 < self.train_weeks < self.n_weeks:
            raise DatasetError(f"need 0 < train_weeks < n_weeks, got {self.train_weeks}, {self.n_weeks}")
        if self.lookback < 1 or self.horizon < 1:
            raise DatasetError("lookback and horizon must be >= 1")
        if self.lookback + self.horizon > self.train_weeks:
            raise DatasetError(
                f"lookback + horizon ({self.lookback + self.horizon}) exceeds train_weeks ({self.train_weeks})"
            )
        seen = set()
        for cell in self.cells:
            if cell.cell_id in seen:
                raise DatasetError(f"duplicate cell_id {cell.cell_id!r}")
            seen.add(cell.cell_id)
            if len(cell) != self.n_weeks or cell.start_week != self.start_week:
                raise DatasetError(f"cell {cell.cell_id!r} does not cover the dataset week axis")

    def __len__(self) -> int:
        return len(self.cells)

    def __iter__(self) -> Iterator[CellSeries]:
        return iter(self.cells)

    def cell(self, cell_id: str) -> CellSeries:
        for c in self.cells:
            if c.cell_id == cell_id:
                return c
        raise KeyError(cell_id)

    def by_poi(self) -> dict[PoiCategory, list[CellSeries]]:
        groups: dict[PoiCategory, list[CellSeries]] = defaultdict(list)
        for c in self.cells:
            groups[c.poi].append(c)
        return dict(sorted(groups.items()))

    def poi_counts(self) -> dict[PoiCategory, int]:
        return {poi: len(cells) for poi, cells in self.by_poi().items()}

    def with_cells(self, cells: Iterable[CellSeries]) -> "TrafficDataset":
        return TrafficDataset(
            tuple(cells), self.n_weeks, self.train_weeks, self.lookback, self.horizon,
            self.start_week, self.categories,
        )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class IngestConfig:
    """Ingestion settings.

    ``categories=None`` derives the POI taxonomy from the data with
    :func:`bucket_pois` at ``coverage``; otherwise labels are matched against
    the given names and unknown labels fall back to "Others" when allowed.
    """

    epoch: str = "2021-05-03"
    n_weeks: int = 31
    train_weeks: int = 20
    lookback: int = 4
    horizon: int = 2
    first_week: int | None = None
    extreme_percentile: float | None = 99.9
    coverage: float = 0.95
    categories: tuple[str, ...] | None = DEFAULT_POIS
    others_fallback: bool = True

    def __post_init__(self):
        epoch = date.fromisoformat(self.epoch)
        if epoch.weekday() != 0:
            raise DatasetError(f"epoch {self.epoch} is not a Monday")
        if self.extreme_percentile is not None and not 0 < self.extreme_percentile <= 100:
            raise DatasetError("extreme_percentile must be in (0, 100]")
        if not 0 < self.coverage <= 1:
            raise DatasetError("coverage must be in (0, 1]")
        if self.categories is not None:
            self.categories = tuple(self.categories)

    @property
    def epoch_date(self) -> date:
        return date.fromisoformat(self.epoch)

    @classmethod
    def from_dict(cls, data: dict) -> "IngestConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DatasetError(f"unknown ingest config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        if out["categories"] is not None:
            out["categories"] = list(out["categories"])
        return out


def load_ingest_config(path: str | Path) -> IngestConfig:
    """Read an IngestConfig from JSON or from a flat ``key = value`` file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read ingest config {path}: {exc}") from exc
    if path.suffix == ".json":
        return IngestConfig.from_dict(json.loads(text))

    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read_string("[ingest]\n" + text)
    raw = dict(parser["ingest"])
    data: dict = {}
    for key, value in raw.items():
        value = value.strip()
        if key in ("epoch",):
            data[key] = value
        elif key in ("n_weeks", "train_weeks", "lookback", "horizon", "first_week"):
            data[key] = None if value.lower() == "none" else int(value)
        elif key in ("extreme_percentile", "coverage"):
            data[key] = None if value.lower() == "none" else float(value)
        elif key == "others_fallback":
            data[key] = value.lower() in ("1", "true", "yes", "on")
        elif key == "categories":
            data[key] = None if value.lower() in ("none", "auto") else tuple(
                s.strip() for s in value.split(",") if s.strip()
            )
        else:
            data[key] = value
    return IngestConfig.from_dict(data)


# ---------------------------------------------------------------------------
# POI bucketing
# ---------------------------------------------------------------------------

def bucket_pois(raw_labels: list[tuple[str, int]], coverage: float = 0.95) -> dict[str, PoiCategory]:
    """Map raw POI labels onto categories, folding the low-count tail into "Others".

    Labels are ranked by descending count; the shortest prefix reaching
    ``coverage`` of all cells stays distinct. Category ids follow descending
    count with "Others" ranked by its pooled count. Returned keys are the
    canonical (trimmed, case-folded) labels.
    """
    if not raw_labels:
        raise DatasetError("bucket_pois needs at least one label")
    if not 0 < coverage <= 1:
        raise DatasetError("coverage must be in (0, 1]")

    counts: dict[str, int] = defaultdict(int)
    display: dict[str, str] = {}
    for label, count in raw_labels:
        if count < 0:
            raise DatasetError(f"negative count for label {label!r}")
        key = canonical_label(label)
        counts[key] += int(count)
        display[key] = min(display.get(key, label.strip()), label.strip())

    others_key = canonical_label(OTHERS)
    total = sum(counts.values())
    ranked = sorted((k for k in counts if k != others_key), key=lambda k: (-counts[k], k))

    target = coverage * total
    n_keep = cumulative = 0
    while n_keep < len(ranked) and cumulative < target:
        cumulative += counts[ranked[n_keep]]
        n_keep += 1

    kept = ranked[:n_keep]
    others_count = total - sum(counts[k] for k in kept)
    order = sorted(
        [(counts[k], display[k], k) for k in kept] + [(others_count, OTHERS, others_key)],
        key=lambda item: (-item[0], item[2] == others_key, item[2]),
    )
    categories = {key: PoiCategory(i + 1, name) for i, (_, name, key) in enumerate(order)}
    mapping = {k: categories[k] for k in kept}
    for k in counts:
        if k not in mapping:
            mapping[k] = categories[others_key]
    mapping.setdefault(others_key, categories[others_key])
    return mapping


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _parse_week(text: str, epoch: date, line_no: int) -> tuple[int, bool]:
    text = text.strip()
    try:
        week = int(text)
        is_date = False
    except ValueError:
        try:
            day = date.fromisoformat(text)
        except ValueError:
            raise DatasetError(f"line {line_no}: week {text!r} is neither an integer nor an ISO date") from None
        week = (day - epoch).days // 7
        is_date = True
    if week < 0:
        raise DatasetError(f"line {line_no}: week {text!r} precedes the epoch")
    return week, is_date


def _parse_float(text: str, column: str, line_no: int) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise DatasetError(f"line {line_no}: {column} {text!r} is not a number") from None


def ingest_csv(path: str | Path, config: IngestConfig | None = None) -> TrafficDataset:
    """Load, aggregate and validate a traffic CSV.

    Rows with ISO dates are projected onto weeks since ``config.epoch`` and
    averaged within each week; integer weeks must be unique per cell. Cells
    failing any check are dropped whole and listed in ``dataset.report``.
    """
    config = config or IngestConfig()
    path = Path(path)
    epoch = config.epoch_date

    # (cell, week) -> list of (downlink, users); integer-week keys must not repeat
    samples: dict[tuple[str, int], list[tuple[float, float]]] = defaultdict(list)
    explicit: set[tuple[str, int]] = set()
    labels: dict[str, str] = {}
    rows_read = 0

    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file, expected header {','.join(CSV_COLUMNS)}")
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DatasetError(f"{path}: header lacks columns {missing}")
        idx = {c: header.index(c) for c in CSV_COLUMNS}

        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
            rows_read += 1
            cell_id = row[idx["cell_id"]].strip()
            if not cell_id:
                raise DatasetError(f"line {line_no}: empty cell_id")
            week, is_date = _parse_week(row[idx["week"]], epoch, line_no)
            label = row[idx["poi"]].strip()
            if not label:
                raise DatasetError(f"line {line_no}: empty poi label")
            dl = _parse_float(row[idx["downlink_volume"]], "downlink_volume", line_no)
            us = _parse_float(row[idx["avg_user_count"]], "avg_user_count", line_no)

            previous = labels.setdefault(cell_id, label)
            if canonical_label(previous) != canonical_label(label):
                raise DatasetError(f"line {line_no}: cell {cell_id!r} has conflicting poi labels")
            key = (cell_id, week)
            if not is_date:
                if key in explicit or (key in samples and key not in explicit):
                    raise DatasetError(f"line {line_no}: duplicate (cell_id, week) pair ({cell_id!r}, {week})")
                explicit.add(key)
            elif key in explicit:
                raise DatasetError(f"line {line_no}: duplicate (cell_id, week) pair ({cell_id!r}, {week})")
            samples[key].append((dl, us))

    weekly: dict[str, dict[int, tuple[float, float]]] = defaultdict(dict)
    for (cell_id, week), vals in samples.items():
        arr = np.asarray(vals, dtype=np.float64)
        weekly[cell_id][week] = (float(arr[:, 0].mean()), float(arr[:, 1].mean()))

    if config.first_week is not None:
        start = config.first_week
    else:
        start = min((w for weeks in weekly.values() for w in weeks), default=0)
    axis = range(start, start + config.n_weeks)

    threshold = None
    if config.extreme_percentile is not None:
        observations = np.array(
            [v[0] for weeks in weekly.values() for w, v in weeks.items() if w in axis], dtype=np.float64
        )
        observations = observations[np.isfinite(observations)]
        if observations.size:
            threshold = float(np.percentile(observations, config.extreme_percentile))

    dropped: dict[str, str] = {}
    kept: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for cell_id in sorted(weekly):
        weeks = weekly[cell_id]
        if set(weeks) != set(axis):
            dropped[cell_id] = "incomplete"
            continue
        values = np.array([weeks[w] for w in axis], dtype=np.float64)
        dl, us = values[:, 0], values[:, 1]
        if not np.all(np.isfinite(values)):
            dropped[cell_id] = "non-finite"
        elif np.any(values < 0):
            dropped[cell_id] = "negative"
        elif np.any(dl == 0):
            dropped[cell_id] = "zero-downlink"
        elif threshold is not None and np.any(dl > threshold):
            dropped[cell_id] = "extreme"
        else:
            kept[cell_id] = (dl, us)

    mapping, categories = _resolve_pois({c: labels[c] for c in kept}, config)
    cells = [
        CellSeries(cell_id, mapping[canonical_label(labels[cell_id])], start, dl, us)
        for cell_id, (dl, us) in kept.items()
    ]
    report = IngestReport(
        rows_read=rows_read,
        cells_seen=len(weekly),
        cells_kept=len(cells),
        dropped=dropped,
        extreme_threshold=threshold,
    )
    return TrafficDataset(
        tuple(cells),
        n_weeks=config.n_weeks,
        train_weeks=config.train_weeks,
        lookback=config.lookback,
        horizon=config.horizon,
        start_week=start,
        categories=categories,
        report=report,
    )


def _resolve_pois(
    labels: dict[str, str], config: IngestConfig
) -> tuple[dict[str, PoiCategory], tuple[PoiCategory, ...]]:
    others_key = canonical_label(OTHERS)
    if config.categories is None:
        if not labels:
            return {}, ()
        counts = Counter(canonical_label(label) for label in labels.values())
        display = {canonical_label(label): label for label in sorted(labels.values(), reverse=True)}
        mapping = bucket_pois([(display[k], n) for k, n in counts.items()], config.coverage)
        return mapping, tuple(sorted(set(mapping.values())))

    names = list(config.categories)
    if config.others_fallback and others_key not in {canonical_label(n) for n in names}:
        names.append(OTHERS)
    categories = tuple(PoiCategory(i + 1, name) for i, name in enumerate(names))
    by_key = {canonical_label(c.name): c for c in categories}
    mapping = {}
    for label in labels.values():
        key = canonical_label(label)
        if key in by_key:
            mapping[key] = by_key[key]
        elif config.others_fallback:
            mapping[key] = by_key[others_key]
        else:
            raise DatasetError(f"unknown POI label {label!r} and no 'Others' fallback")
    return mapping, categories


def write_csv(dataset: TrafficDataset, path: str | Path) -> None:
    """Serialize retained cells in the ingest schema (integer weeks, exact floats)."""
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for cell in dataset.cells:
            for sample in cell.weeks:
                writer.writerow([
                    cell.cell_id, sample.week_index, cell.poi.name,
                    repr(sample.downlink_volume), repr(sample.avg_user_count),
                ])


# ---------------------------------------------------------------------------
# Train/test split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitView:
    """Windows of one region; ``t`` is the first target week, relative to the axis start."""

    region: str
    weeks: range
    windows: tuple[tuple[str, int], ...]
    lookback: int
    horizon: int

    def starts(self) -> list[int]:
        return sorted({t for _, t in self.windows})

    def target_weeks(self) -> Iterator[int]:
        for _, t in self.windows:
            yield from range(t, t + self.horizon)


def window_starts(n_weeks: int, train_weeks: int, lookback: int, horizon: int, region: str) -> range:
    if region == "train":
        return range(lookback, train_weeks - horizon + 1)
    if region == "test":
        return range(max(train_weeks, lookback), n_weeks - horizon + 1)
    raise ValueError(f"unknown region {region!r}")


def split(dataset: TrafficDataset) -> tuple[SplitView, SplitView]:
    """Train windows have all targets before ``train_weeks``; test windows all at or after it.

    Test inputs may reach back into training weeks, which is history that is
    legitimately observed at forecast time.
    """
    views = []
    for region, weeks in (("train", range(0, dataset.train_weeks)), ("test", range(dataset.train_weeks, dataset.n_weeks))):
        starts = window_starts(dataset.n_weeks, dataset.train_weeks, dataset.lookback, dataset.horizon, region)
        windows = tuple((c.cell_id, t) for c in dataset.cells for t in starts)
        views.append(SplitView(region, weeks, windows, dataset.lookback, dataset.horizon))
    return views[0], views[1]
