"""Deterministic synthetic corpus of POI-shaped weekly cell traffic.

Each POI draws one archetype per shape kind (a trend, a multi-week cycle, a
level-shift regime or flat noise); each cell picks an archetype according to
the POI's shape mix, jitters its parameters in proportion to the noise scale
and applies multiplicative log-normal noise. The chosen archetype index is
the cell's planted cluster.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .dataset import CSV_COLUMNS, REFERENCE_POI_COUNTS, DEFAULT_POIS

SHAPES = ("trend", "season", "level-shift", "noise")


@dataclass
class PoiSpec:
    name: str
    n_cells: int
    shape_mix: dict[str, float] = field(default_factory=lambda: {"trend": 1.0, "season": 1.0})
    noise_scale: float = 0.05
    volume_range: tuple[float, float] = (1e9, 1e11)

    def __post_init__(self):
        if self.n_cells < 0:
            raise ValueError(f"{self.name}: n_cells must be >= 0")
        unknown = set(self.shape_mix) - set(SHAPES)
        if unknown:
            raise ValueError(f"{self.name}: unknown shapes {sorted(unknown)}")
        if any(w < 0 for w in self.shape_mix.values()) or (self.n_cells and sum(self.shape_mix.values()) <= 0):
            raise ValueError(f"{self.name}: shape weights must be non-negative with a positive sum")
        if self.noise_scale < 0:
            raise ValueError(f"{self.name}: noise_scale must be >= 0")
        lo, hi = self.volume_range
        if not 0 < lo <= hi:
            raise ValueError(f"{self.name}: volume_range must satisfy 0 < lo <= hi")
        self.volume_range = (float(lo), float(hi))

    @property
    def kinds(self) -> list[str]:
        return [s for s in SHAPES if self.shape_mix.get(s, 0) > 0]


@dataclass
class SynthConfig:
    seed: int = 0
    n_weeks: int = 31
    poi_specs: list[PoiSpec] = field(default_factory=list)
    dropout_prob: float = 0.0
    zero_week_prob: float = 0.0
    emit_dates: bool = False
    epoch: str = "2021-05-03"

    def __post_init__(self):
        self.poi_specs = [p if isinstance(p, PoiSpec) else PoiSpec(**p) for p in self.poi_specs]
        for p in (self.dropout_prob, self.zero_week_prob):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.n_weeks < 1:
            raise ValueError("n_weeks must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for spec in d["poi_specs"]:
            spec["volume_range"] = list(spec["volume_range"])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        data["poi_specs"] = [PoiSpec(**{**p, "volume_range": tuple(p["volume_range"])}) for p in data.get("poi_specs", [])]
        return cls(**data)


# Shape presets for the twelve default POIs; "Colleges and Universities" and
# "Commercial Center" are level-shift heavy, with no stable pattern.
_DEFAULT_MIXES = {
    "Low Rise Residential Area": ({"trend": 0.35, "season": 0.45, "noise": 0.2}, 0.05),
    "High Rise Residential Area": ({"trend": 0.3, "season": 0.5, "noise": 0.2}, 0.05),
    "Industrial Park": ({"trend": 0.5, "season": 0.3, "level-shift": 0.2}, 0.05),
    "Colleges and Universities": ({"level-shift": 0.7, "season": 0.3}, 0.12),
    "Others": ({"trend": 0.25, "season": 0.25, "level-shift": 0.25, "noise": 0.25}, 0.08),
    "Village": ({"trend": 0.4, "season": 0.4, "noise": 0.2}, 0.05),
    "Office Building": ({"season": 0.6, "trend": 0.2, "noise": 0.2}, 0.06),
    "Hospital": ({"season": 0.5, "noise": 0.3, "trend": 0.2}, 0.05),
    "Commercial Center": ({"level-shift": 0.5, "season": 0.5}, 0.1),
    "Enterprises and Institutions": ({"noise": 0.6, "level-shift": 0.4}, 0.08),
    "Urban Road": ({"trend": 0.5, "season": 0.5}, 0.05),
    "Square Park": ({"season": 0.7, "trend": 0.3}, 0.06),
}


def reference_cell_counts(total: int) -> list[int]:
    """Reference counts scaled to ``total`` by largest remainder (at least one cell each)."""
    raw = np.asarray(REFERENCE_POI_COUNTS, dtype=np.float64) * total / sum(REFERENCE_POI_COUNTS)
    counts = np.maximum(np.floor(raw).astype(int), 1)
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    i = 0
    while counts.sum() < total:
        counts[order[i % len(order)]] += 1
        i += 1
    return counts.tolist()


def default_config(seed: int = 0, total_cells: int = 600, dropout_prob: float = 0.02,
                   zero_week_prob: float = 0.01) -> SynthConfig:
    specs = []
    for name, n in zip(DEFAULT_POIS, reference_cell_counts(total_cells)):
        mix, noise = _DEFAULT_MIXES[name]
        specs.append(PoiSpec(name, n, dict(mix), noise))
    return SynthConfig(seed=seed, poi_specs=specs, dropout_prob=dropout_prob, zero_week_prob=zero_week_prob)


@dataclass
class SynthCorpus:
    rows: list[tuple]
    planted: dict[str, int]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(self.rows)
        return buf.getvalue()

    def planted_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["cell_id", "planted_cluster"])
        writer.writerows(sorted(self.planted.items()))
        return buf.getvalue()

    def write(self, corpus_path: str | Path, planted_path: str | Path) -> None:
        Path(corpus_path).write_text(self.to_csv(), encoding="utf-8")
        Path(planted_path).write_text(self.planted_csv(), encoding="utf-8")


def _archetype(kind: str, rng: np.random.Generator) -> dict:
    if kind == "trend":
        return {"growth": rng.choice([-1.0, 1.0]) * rng.uniform(0.4, 0.9)}
    if kind == "season":
        return {
            "amplitude": rng.uniform(0.25, 0.4),
            "period": float(rng.choice([4, 5, 6, 8])),
            "phase": rng.uniform(0, 2 * np.pi),
        }
    if kind == "level-shift":
        return {"n_shifts": int(rng.integers(2, 5)), "max_jump": 0.5}
    return {}


def _shape(kind: str, arche: dict, n_weeks: int, jitter: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n_weeks, dtype=np.float64)
    if kind == "trend":
        g = arche["growth"] * (1 + jitter * rng.standard_normal())
        return np.exp(g * t / max(n_weeks - 1, 1))
    if kind == "season":
        a = arche["amplitude"] * (1 + jitter * rng.standard_normal())
        phase = arche["phase"] + jitter * rng.standard_normal()
        return 1 + a * np.sin(2 * np.pi * t / arche["period"] + phase)
    if kind == "level-shift":
        # shift weeks are drawn per cell: no pattern shared across the POI
        log_level = np.zeros(n_weeks)
        for week in rng.integers(1, n_weeks, size=arche["n_shifts"]):
            jump = rng.choice([-1.0, 1.0]) * rng.uniform(0.2, arche["max_jump"])
            log_level[week:] += jump
        return np.exp(log_level)
    return np.ones(n_weeks)


def generate(config: SynthConfig) -> SynthCorpus:
    n = config.n_weeks
    epoch = date.fromisoformat(config.epoch)
    rows: list[tuple] = []
    planted: dict[str, int] = {}
    for p_idx, spec in enumerate(config.poi_specs):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(p_idx,)))
        kinds = spec.kinds
        if spec.n_cells == 0:
            continue
        archetypes = [_archetype(kind, rng) for kind in kinds]
        weights = np.asarray([spec.shape_mix[k] for k in kinds], dtype=np.float64)
        weights /= weights.sum()
        lo, hi = spec.volume_range
        for i in range(spec.n_cells):
            cell_id = f"C{p_idx + 1:02d}-{i:04d}"
            a = int(rng.choice(len(kinds), p=weights))
            planted[cell_id] = a
            volume = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
            shape = _shape(kinds[a], archetypes[a], n, spec.noise_scale, rng)
            downlink = volume * shape * np.exp(spec.noise_scale * rng.standard_normal(n))
            user_scale = float(np.exp(rng.uniform(np.log(20), np.log(400))))
            users = user_scale * (downlink / volume) ** 0.8 * np.exp(0.02 * rng.standard_normal(n))

            if rng.random() < config.zero_week_prob:
                downlink[int(rng.integers(n))] = 0.0
            missing = int(rng.integers(n)) if rng.random() < config.dropout_prob else -1
            weekday = int(rng.integers(7))
            for w in range(n):
                if w == missing:
                    continue
                week = (epoch + timedelta(weeks=w, days=weekday)).isoformat() if config.emit_dates else w
                rows.append((cell_id, week, spec.name, f"{downlink[w]:.4f}", f"{users[w]:.6f}"))
    return SynthCorpus(rows, planted)
