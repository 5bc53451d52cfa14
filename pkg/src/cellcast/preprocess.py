"""Per-cell standardization and (lookback, horizon) window construction."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .dataset import DatasetError, TrafficDataset, window_starts

STD_FLOOR = 1e-12
CHANNELS = ("downlink_volume", "avg_user_count")


@dataclass(frozen=True)
class Scaler:
    """Per-cell, per-channel z-score statistics fitted on training weeks.

    ``mean`` and ``std`` map cell_id to a length-2 array (downlink, users).
    """

    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    def transform(self, cell_id: str, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean[cell_id]) / self.std[cell_id]

    def inverse_transform(self, cell_id: str, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std[cell_id] + self.mean[cell_id]

    def to_dict(self) -> dict:
        return {
            cid: {"mean": [float(v) for v in self.mean[cid]], "std": [float(v) for v in self.std[cid]]}
            for cid in sorted(self.mean)
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scaler":
        mean = {cid: np.asarray(v["mean"], dtype=np.float64) for cid, v in data.items()}
        std = {cid: np.asarray(v["std"], dtype=np.float64) for cid, v in data.items()}
        return cls(mean, std)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scaler) or self.mean.keys() != other.mean.keys():
            return False
        return all(
            np.array_equal(self.mean[c], other.mean[c]) and np.array_equal(self.std[c], other.std[c])
            for c in self.mean
        )


def fit_scaler(dataset: TrafficDataset) -> Scaler:
    if dataset.train_weeks < 2:
        raise DatasetError("fit_scaler needs at least 2 training weeks")
    mean, std = {}, {}
    for cell in dataset.cells:
        train = cell.values[: dataset.train_weeks]
        mu = train.mean(axis=0)
        sigma = train.std(axis=0)
        sigma = np.where(sigma < STD_FLOOR, 1.0, sigma)
        mu.setflags(write=False)
        sigma.setflags(write=False)
        mean[cell.cell_id] = mu
        std[cell.cell_id] = sigma
    return Scaler(mean, std)


@dataclass(frozen=True)
class WindowSet:
    """Supervised windows in standardized space.

    Row ``i`` pairs ``inputs[i]`` (L x 2, weeks ``t-L .. t-1``) with
    ``targets[i]`` (H x 2, weeks ``t .. t+H-1``); ``t`` is relative to the
    dataset's first week. Rows are ordered by cell_id, then ``t``.
    """

    cell_ids: tuple[str, ...]
    starts: np.ndarray
    regions: tuple[str, ...]
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.cell_ids)

    @property
    def lookback(self) -> int:
        return self.inputs.shape[1]

    @property
    def horizon(self) -> int:
        return self.targets.shape[1]

    @property
    def entries(self) -> Iterator[tuple[str, np.ndarray, np.ndarray, str]]:
        for i in range(len(self)):
            yield self.cell_ids[i], self.inputs[i], self.targets[i], self.regions[i]

    def subset(self, mask: np.ndarray) -> "WindowSet":
        idx = np.flatnonzero(mask)
        return WindowSet(
            tuple(self.cell_ids[i] for i in idx),
            self.starts[idx],
            tuple(self.regions[i] for i in idx),
            self.inputs[idx],
            self.targets[idx],
        )

    def select(self, region: str | None = None, cells: Iterable[str] | None = None) -> "WindowSet":
        mask = np.ones(len(self), dtype=bool)
        if region is not None:
            mask &= np.array([r == region for r in self.regions], dtype=bool)
        if cells is not None:
            wanted = set(cells)
            mask &= np.array([c in wanted for c in self.cell_ids], dtype=bool)
        return self.subset(mask)

    def to_csv(self, path: str | Path) -> None:
        """Debug dump, one row per value; ``k`` is the offset from ``t`` (negative = input)."""
        lookback = self.lookback
        with Path(path).open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["cell_id", "region", "t", "channel", "k", "value"])
            for i in range(len(self)):
                block = np.concatenate([self.inputs[i], self.targets[i]])
                for ch, name in enumerate(CHANNELS):
                    for j, value in enumerate(block[:, ch]):
                        writer.writerow([
                            self.cell_ids[i], self.regions[i], int(self.starts[i]), name,
                            j - lookback, repr(float(value)),
                        ])


def make_windows(dataset: TrafficDataset, scaler: Scaler) -> WindowSet:
    L, H = dataset.lookback, dataset.horizon
    if L + H > dataset.train_weeks:
        raise DatasetError("dataset too short for a single training window")
    regions = [
        (region, window_starts(dataset.n_weeks, dataset.train_weeks, L, H, region))
        for region in ("train", "test")
    ]
    cell_ids, starts, region_tags, inputs, targets = [], [], [], [], []
    for cell in dataset.cells:
        z = scaler.transform(cell.cell_id, cell.values)
        for region, ts in regions:
            for t in ts:
                cell_ids.append(cell.cell_id)
                starts.append(t)
                region_tags.append(region)
                inputs.append(z[t - L:t])
                targets.append(z[t:t + H])

    inputs_arr = np.asarray(inputs, dtype=np.float64).reshape(len(cell_ids), L, 2)
    targets_arr = np.asarray(targets, dtype=np.float64).reshape(len(cell_ids), H, 2)
    if not (np.all(np.isfinite(inputs_arr)) and np.all(np.isfinite(targets_arr))):
        raise DatasetError("non-finite value in standardized windows")
    for arr in (inputs_arr, targets_arr):
        arr.setflags(write=False)
    return WindowSet(
        tuple(cell_ids), np.asarray(starts, dtype=np.int64), tuple(region_tags), inputs_arr, targets_arr,
    )
