"""Naive baseline, MAPE, and the per-POI comparison report."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .clustering import ClusterModel
from .dataset import PoiCategory, TrafficDataset, window_starts
from .preprocess import CHANNELS, Scaler

MAPE_FLOOR = 1e-9
NAIVE_VARIANTS = ("persistence", "seasonal")
WEIGHTINGS = ("window", "cell")

Forecaster = Callable[[np.ndarray], np.ndarray]


class EvaluationError(ValueError):
    pass


def naive_forecast(history, horizon: int, season: int = 1) -> np.ndarray:
    """Repeat the last ``season`` observations over the horizon (season 1 is persistence)."""
    history = np.asarray(history, dtype=np.float64)
    if history.shape[0] == 0:
        raise EvaluationError("empty history")
    if not 1 <= season <= history.shape[0]:
        raise EvaluationError(f"season {season} must lie in [1, {history.shape[0]}]")
    tail = history[-season:]
    return tail[np.arange(horizon) % season]


def absolute_percentage_errors(actual, predicted, floor: float = MAPE_FLOOR) -> np.ndarray:
    actual = np.asarray(actual, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if actual.shape != predicted.shape:
        raise EvaluationError(f"length mismatch: {actual.shape} vs {predicted.shape}")
    if actual.size == 0:
        raise EvaluationError("empty input")
    return np.abs(actual - predicted) / np.maximum(np.abs(actual), floor)


def mape(actual, predicted, floor: float = MAPE_FLOOR) -> float:
    """Mean absolute percentage error, in percent."""
    return 100.0 * float(np.mean(absolute_percentage_errors(actual, predicted, floor)))


@dataclass
class PoiRow:
    poi: PoiCategory
    model_mape: float
    naive_mape: float
    n_cells: int
    n_windows: int
    model_mape_users: float
    naive_mape_users: float


@dataclass
class EvaluationReport:
    rows: list[PoiRow]
    overall: dict[str, float]
    unmodeled_cells: int
    n_cells: int = 0
    n_windows: int = 0
    predictions: list[tuple] = field(default_factory=list, repr=False)

    def row(self, poi_name: str) -> PoiRow:
        for r in self.rows:
            if r.poi.name == poi_name:
                return r
        raise KeyError(poi_name)

    def to_dict(self) -> dict:
        rows = []
        for r in self.rows:
            d = asdict(r)
            d["poi"] = {"id": r.poi.id, "name": r.poi.name}
            rows.append(d)
        return {
            "rows": rows,
            "overall": dict(self.overall),
            "n_cells": self.n_cells,
            "n_windows": self.n_windows,
            "unmodeled_cells": self.unmodeled_cells,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluationReport":
        rows = []
        for d in data["rows"]:
            d = dict(d)
            d["poi"] = PoiCategory(d["poi"]["id"], d["poi"]["name"])
            rows.append(PoiRow(**d))
        return cls(rows, data["overall"], data["unmodeled_cells"], data["n_cells"], data["n_windows"])


def _aggregate(errors: list[np.ndarray], weighting: str) -> float:
    """``errors`` holds one (n_windows, H) array per cell."""
    if weighting == "window":
        return 100.0 * float(np.mean(np.concatenate([e.ravel() for e in errors])))
    return 100.0 * float(np.mean([e.mean() for e in errors]))


def evaluate_pipeline(
    dataset: TrafficDataset,
    scaler: Scaler,
    cluster_models: Mapping[PoiCategory, ClusterModel],
    trained_models: Mapping[tuple[int, int], Forecaster],
    naive: str = "persistence",
    season: int = 1,
    weighting: str = "window",
    keep_predictions: bool = False,
) -> EvaluationReport:
    """Score every test window of every modeled cell in original units.

    ``trained_models`` maps ``(poi.id, cluster)`` to a callable taking an
    ``(n, L, 2)`` standardized batch and returning ``(n, H, 2)`` forecasts.
    """
    if naive not in NAIVE_VARIANTS:
        raise EvaluationError(f"naive must be one of {NAIVE_VARIANTS}")
    if weighting not in WEIGHTINGS:
        raise EvaluationError(f"weighting must be one of {WEIGHTINGS}")
    season = 1 if naive == "persistence" else season
    L, H = dataset.lookback, dataset.horizon
    starts = np.asarray(window_starts(dataset.n_weeks, dataset.train_weeks, L, H, "test"))
    if starts.size == 0:
        raise EvaluationError("dataset has no test windows")

    cells_by_id = {c.cell_id: c for c in dataset.cells}
    rows: list[PoiRow] = []
    all_errors = {key: [] for key in ("model", "naive", "model_users", "naive_users")}
    predictions = []
    unmodeled = 0

    for poi, cmodel in sorted(cluster_models.items()):
        unmodeled += len(cmodel.unmodeled_cells)
        poi_errors = {key: [] for key in all_errors}
        n_cells = 0
        for cluster in sorted(cmodel.retained):
            if (poi.id, cluster) not in trained_models:
                raise EvaluationError(f"missing model for POI {poi} cluster {cluster}")
            model = trained_models[(poi.id, cluster)]
            for cell_id in cmodel.members(cluster):
                cell = cells_by_id[cell_id]
                raw = cell.values
                z = scaler.transform(cell_id, raw)
                inputs = np.stack([z[t - L:t] for t in starts])
                actual = np.stack([raw[t:t + H] for t in starts])
                predicted = scaler.inverse_transform(cell_id, np.asarray(model(inputs)))
                baseline = np.stack([
                    np.column_stack([naive_forecast(raw[t - L:t, ch], H, season) for ch in range(2)])
                    for t in starts
                ])
                n_cells += 1
                for ch, suffix in ((0, ""), (1, "_users")):
                    poi_errors["model" + suffix].append(
                        absolute_percentage_errors(actual[:, :, ch], predicted[:, :, ch]))
                    poi_errors["naive" + suffix].append(
                        absolute_percentage_errors(actual[:, :, ch], baseline[:, :, ch]))
                if keep_predictions:
                    for i, t in enumerate(starts):
                        for step in range(H):
                            week = dataset.start_week + int(t) + step
                            for ch, name in enumerate(CHANNELS):
                                predictions.append((
                                    cell_id, week, step + 1, name, float(actual[i, step, ch]),
                                    float(predicted[i, step, ch]), float(baseline[i, step, ch]),
                                ))
        if n_cells == 0:
            continue
        for key in all_errors:
            all_errors[key].extend(poi_errors[key])
        rows.append(PoiRow(
            poi=poi,
            model_mape=_aggregate(poi_errors["model"], weighting),
            naive_mape=_aggregate(poi_errors["naive"], weighting),
            n_cells=n_cells,
            n_windows=n_cells * len(starts),
            model_mape_users=_aggregate(poi_errors["model_users"], weighting),
            naive_mape_users=_aggregate(poi_errors["naive_users"], weighting),
        ))

    if not rows:
        raise EvaluationError("no modeled cells to evaluate")
    overall = {key + "_mape": _aggregate(errs, weighting) for key, errs in all_errors.items()}
    n_cells = sum(r.n_cells for r in rows)
    return EvaluationReport(
        rows=rows,
        overall={
            "model_mape": overall["model_mape"],
            "naive_mape": overall["naive_mape"],
            "model_mape_users": overall["model_users_mape"],
            "naive_mape_users": overall["naive_users_mape"],
        },
        unmodeled_cells=unmodeled,
        n_cells=n_cells,
        n_windows=sum(r.n_windows for r in rows),
        predictions=predictions,
    )


REPORT_COLUMNS = ("poi", "model_mape", "naive_mape", "n_cells", "n_windows", "model_mape_users", "naive_mape_users")


def write_report_csv(report: EvaluationReport, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in report.rows:
            writer.writerow([
                r.poi.name, f"{r.model_mape:.4f}", f"{r.naive_mape:.4f}", r.n_cells, r.n_windows,
                f"{r.model_mape_users:.4f}", f"{r.naive_mape_users:.4f}",
            ])
        o = report.overall
        writer.writerow([
            "Overall", f"{o['model_mape']:.4f}", f"{o['naive_mape']:.4f}", report.n_cells, report.n_windows,
            f"{o['model_mape_users']:.4f}", f"{o['naive_mape_users']:.4f}",
        ])


def write_report_json(report: EvaluationReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_predictions_csv(report: EvaluationReport, path: str | Path) -> None:
    """Per-cell test predictions; ``step`` is the horizon step (1-based) that produced the row."""
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["cell_id", "week", "step", "channel", "actual", "predicted", "naive"])
        for cell_id, week, step, channel, actual, predicted, baseline in report.predictions:
            writer.writerow([cell_id, week, step, channel, repr(actual), repr(predicted), repr(baseline)])


def format_table(report: EvaluationReport) -> str:
    width = max([len(r.poi.name) for r in report.rows] + [len("Overall")])
    lines = [f"{'POI':<{width}}  {'model':>9}  {'naive':>9}  {'cells':>6}"]
    for r in report.rows:
        lines.append(f"{r.poi.name:<{width}}  {r.model_mape:9.2f}  {r.naive_mape:9.2f}  {r.n_cells:6d}")
    o = report.overall
    lines.append(f"{'Overall':<{width}}  {o['model_mape']:9.2f}  {o['naive_mape']:9.2f}  {report.n_cells:6d}")
    return "\n".join(lines)
