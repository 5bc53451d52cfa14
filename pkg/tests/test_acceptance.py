"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (with the measured quantity and runtime);
the lines are printed in the pytest terminal summary. Run standalone with
``python tests/test_acceptance.py``.
"""
import json
import sys
import time
from contextlib import contextmanager
from fractions import Fraction
from functools import reduce

import numpy as np
import pytest

from cellcast import cli
from cellcast.clustering import _retained, cluster_pipeline, fit_kmeans, kmeans_plusplus
from cellcast.dataset import CellSeries, IngestConfig, ingest_csv
from cellcast.evaluate import mape, naive_forecast
from cellcast.nbeats import (
    NBeatsConfig,
    NBeatsNet,
    TrainConfig,
    _branch_forward_cached,
    branch_forward,
    model_forward,
    train_cluster_model,
)
from cellcast.preprocess import fit_scaler, make_windows
from cellcast.synth import PoiSpec, SynthConfig, generate

from conftest import random_dataset

RESULTS: list[tuple[str, bool, str]] = []


@contextmanager
def criterion(name):
    """Record PASS/FAIL for ``name``; the body fills ``detail`` and raises on failure."""
    detail = {}
    start = time.perf_counter()
    ok = False
    try:
        yield detail
        ok = True
    finally:
        detail["runtime"] = f"{time.perf_counter() - start:.2f}s"
        text = ", ".join(f"{k}={v}" for k, v in detail.items())
        RESULTS.append((name, ok, text))
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({text})")


def check_runtime(start, limit):
    elapsed = time.perf_counter() - start
    assert elapsed < limit, f"runtime {elapsed:.1f}s exceeds {limit}s"


# -- 1. gradient correctness ------------------------------------------------

def _min_relu_margin(model, X):
    margin = np.inf
    for branch, x in zip(model.branches, model.branch_inputs(X)):
        _, caches = _branch_forward_cached(branch, x)
        for _, trunk_tape, _, _ in caches:
            margin = min(margin, min(np.abs(z).min() for z in trunk_tape.pre_activations))
    return margin


def test_gradient_correctness():
    with criterion("gradient check: tiny N-Beats vs central differences, 20 seeds") as d:
        start = time.perf_counter()
        cfg = NBeatsConfig(lookback=4, horizon=2, n_stacks=1, blocks_per_stack=1, fc_width=8)
        h = 1e-5
        worst, redraws = 0.0, 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            model = NBeatsNet(cfg, seed=None)
            model.params[...] = 0.5 * rng.standard_normal(model.n_params)
            # random point away from ReLU kinks (|pre-activation| > 1e-3)
            while True:
                X, Y = rng.normal(size=(2, 4, 2)), rng.normal(size=(2, 2, 2))
                if _min_relu_margin(model, X) > 1e-3:
                    break
                redraws += 1
            _, grad = model.loss_and_grad(X, Y)
            grad = grad.copy()
            for i in range(model.n_params):
                old = model.params[i]
                model.params[i] = old + h
                up = model.loss(X, Y)
                model.params[i] = old - h
                down = model.loss(X, Y)
                model.params[i] = old
                numeric = (up - down) / (2 * h)
                rel = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), 1e-6)
                worst = max(worst, rel)
        d.update(seeds=20, n_params=model.n_params, max_rel_err=f"{worst:.2e}", redraws=redraws)
        assert worst < 1e-4
        check_runtime(start, 10)


# -- 2. doubly residual algebra -----------------------------------------------

def test_doubly_residual_algebra():
    with criterion("doubly residual algebra: 100 random models") as d:
        start = time.perf_counter()
        rng = np.random.default_rng(0)
        eps = np.finfo(np.float64).eps
        checked = 0
        for _ in range(100):
            cfg = NBeatsConfig(
                lookback=int(rng.integers(1, 7)), horizon=int(rng.integers(1, 4)),
                n_stacks=int(rng.integers(1, 4)), blocks_per_stack=int(rng.integers(1, 4)),
                fc_layers_per_block=int(rng.integers(1, 4)), fc_width=int(rng.integers(2, 17)),
                theta_dim=int(rng.integers(1, 9)), input_mode=str(rng.choice(["concat", "own"])),
            )
            model = NBeatsNet(cfg, seed=None)
            model.params[...] = rng.normal(scale=0.5, size=model.n_params)
            window = rng.normal(size=(cfg.lookback, 2))
            out = model_forward(model, window)
            for branch, x in zip(model.branches, model.branch_inputs(window[None])):
                x = x[0]
                forecast, trace = branch_forward(branch, x)
                # forecast is exactly the sum of block forecasts
                assert np.array_equal(forecast, reduce(np.add, trace.forecasts))
                assert np.array_equal(out[:, branch.channel], forecast)
                # final residual is exactly the input with every backcast removed in turn
                assert np.array_equal(trace.residuals[-1], reduce(np.subtract, trace.backcasts, x))
                # additive form holds to rounding: input = final residual + sum of backcasts
                total_b = reduce(np.add, trace.backcasts)
                scale = np.abs(x) + reduce(np.add, [np.abs(b) for b in trace.backcasts])
                assert np.all(np.abs(trace.residuals[-1] + total_b - x) <= 4 * len(trace.backcasts) * eps * scale)
                checked += 1
        d.update(models=100, branches_checked=checked)
        check_runtime(start, 5)


# -- 3. K-Means oracle equivalence ---------------------------------------------

def reference_lloyd(X, init, max_iter=300, tol=1e-6):
    n, k = len(X), len(init)
    C = [list(map(float, c)) for c in init]

    def assign(C):
        labels, dist = [], []
        for x in X:
            ds = [sum((a - b) ** 2 for a, b in zip(x, c)) for c in C]
            j = min(range(k), key=lambda j: (ds[j], j))
            labels.append(j)
            dist.append(ds[j])
        return labels, dist

    labels, dist = assign(C)
    inertia = sum(dist)
    for _ in range(max_iter):
        worst = sorted(range(n), key=lambda i: (-dist[i], i))
        taken, new = set(), []
        for j in range(k):
            members = [X[i] for i in range(n) if labels[i] == j]
            if members:
                new.append([sum(col) / len(members) for col in zip(*members)])
            else:
                pick = next(i for i in worst if i not in taken)
                taken.add(pick)
                new.append(list(map(float, X[pick])))
        C = new
        labels, dist = assign(C)
        previous, inertia = inertia, sum(dist)
        if previous <= 0 or previous - inertia < tol * previous:
            break
    return labels, inertia


def test_kmeans_oracle_equivalence():
    with criterion("K-Means vs reference Lloyd: 50 instances") as d:
        start = time.perf_counter()
        rng = np.random.default_rng(0)
        worst = 0.0
        for trial in range(50):
            n, k, dim = int(rng.integers(1, 31)), int(rng.integers(1, 6)), int(rng.integers(1, 8))
            X = rng.normal(size=(n, dim))
            if trial % 5 == 0 and n > 3:
                X[: n // 2] = X[0]  # duplicates exercise empty-cluster reseeding
            profiles = {f"p{i:02d}": X[i] for i in range(n)}
            model = fit_kmeans(profiles, k, seed=trial)
            init = X[kmeans_plusplus(X, min(k, n), np.random.default_rng(trial))]
            labels, inertia = reference_lloyd(X, init)
            worst = max(worst, abs(model.inertia - inertia))
            assert abs(model.inertia - inertia) <= 1e-9
            assert [model.assignments[f"p{i:02d}"] for i in range(n)] == labels
            trace = model.inertia_trace
            assert all(b <= a for a, b in zip(trace, trace[1:]))
            for i in range(n):
                dists = ((model.centroids - X[i]) ** 2).sum(axis=1)
                assert dists[model.assignments[f"p{i:02d}"]] <= dists.min() + 1e-9
        d.update(instances=50, max_inertia_gap=f"{worst:.1e}")
        check_runtime(start, 30)


# -- 4. cluster filter rule -------------------------------------------------------

def test_cluster_filter_rule():
    with criterion("cluster filter: size >= 0.2 x max, brute force") as d:
        rng = np.random.default_rng(0)
        for _ in range(2000):
            sizes = rng.integers(0, 120, size=int(rng.integers(1, 51))).tolist()
            if max(sizes) == 0:
                continue
            expected = {c for c, s in enumerate(sizes) if Fraction(s) >= Fraction(1, 5) * max(sizes)}
            assert _retained(sizes, 0.2) == expected
        assert _retained([100, 25, 19, 0], 0.2) == {0, 1}
        assert _retained([35, 7], 0.2) == {0, 1}
        d.update(vectors=2000)


# -- 5. planted-cluster recovery ---------------------------------------------------

def test_planted_cluster_recovery(tmp_path):
    with criterion("planted recovery: two-shape POIs, k=2, 20 trials per noise level") as d:
        start = time.perf_counter()
        rates = {}
        for noise in (0.05, 0.1):
            hits = 0
            for trial in range(20):
                spec = PoiSpec("Urban Road", 40, {"trend": 1.0, "season": 1.0}, noise_scale=noise)
                corpus = generate(SynthConfig(seed=trial, poi_specs=[spec]))
                path = tmp_path / f"c{trial}.csv"
                path.write_text(corpus.to_csv())
                ds = ingest_csv(path, IngestConfig(extreme_percentile=None))
                (model,) = cluster_pipeline(ds, fit_scaler(ds), k=2, seed=trial).values()
                pairs = {(corpus.planted[c], a) for c, a in model.assignments.items()}
                hits += len(pairs) == 2 and len({p for p, _ in pairs}) == 2 and len({a for _, a in pairs}) == 2
            rates[noise] = hits / 20
        d.update(recovery=rates)
        assert all(r >= 0.95 for r in rates.values())
        check_runtime(start, 60)


# -- 6. window-count law -----------------------------------------------------------------

def test_window_count_law():
    with criterion("window counts: 15 train / 10 test per cell") as d:
        ds = random_dataset(n_cells=5, n_weeks=31, train_weeks=20, lookback=4, horizon=2)
        ws = make_windows(ds, fit_scaler(ds))
        counts = {}
        for cid, region in zip(ws.cell_ids, ws.regions):
            counts.setdefault(cid, {"train": 0, "test": 0})[region] += 1
        d.update(per_cell=sorted({(c["train"], c["test"]) for c in counts.values()}))
        assert all(c == {"train": 15, "test": 10} for c in counts.values()) and len(counts) == 5


# -- 7. metric oracles -------------------------------------------------------------------

def test_metric_oracles():
    with criterion("metric oracles: mape formula, scale invariance, persistence") as d:
        rng = np.random.default_rng(0)
        worst = 0.0
        scale_checks = 0
        for _ in range(500):
            n = int(rng.integers(1, 40))
            a, p = rng.uniform(1, 1000, n), rng.uniform(1, 1000, n)
            brute = 100.0 * sum(abs(x - y) / max(abs(x), 1e-9) for x, y in zip(a, p)) / n
            worst = max(worst, abs(mape(a, p) - brute))
            # scaling by a power of two is exact in binary floating point
            c = 2.0 ** int(rng.integers(-30, 31))
            assert mape(c * a, c * p) == mape(a, p)
            scale_checks += 1
            const = rng.uniform(1, 1e6)
            history = np.concatenate([rng.uniform(1, 10, 3), [const]])
            assert mape(np.full(2, const), naive_forecast(history, 2)) == 0.0
        d.update(max_abs_err=f"{worst:.1e}", scale_checks=scale_checks)
        assert worst <= 1e-12


# -- 8 & 9. end-to-end run-all: direction and determinism ------------------------------------

@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "run"
    start = time.perf_counter()
    code = cli.main(["run-all", "--out", str(out), "--seed", "0"])
    return out, code, time.perf_counter() - start


@pytest.mark.slow
def test_directional_reproduction(default_run):
    with criterion("run-all default corpus: model >= 10% below naive, wins >= 9/12") as d:
        out, code, elapsed = default_run
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        rows = report["rows"]
        overall = report["overall"]
        wins = sum(r["model_mape"] < r["naive_mape"] for r in rows)
        rel = 1 - overall["model_mape"] / overall["naive_mape"]
        d.update(model=f"{overall['model_mape']:.2f}%", naive=f"{overall['naive_mape']:.2f}%",
                 relative_gain=f"{rel:.1%}", wins=f"{wins}/{len(rows)}", run_all=f"{elapsed:.0f}s")
        assert len(rows) == 12
        assert overall["model_mape"] <= 0.9 * overall["naive_mape"]
        assert wins >= 9
        assert elapsed < 15 * 60


@pytest.mark.slow
def test_determinism(default_run, tmp_path):
    with criterion("determinism: two identical run-all invocations, byte-identical reports") as d:
        out, code, _ = default_run
        assert code == 0
        again = tmp_path / "again"
        assert cli.main(["run-all", "--out", str(again), "--seed", "0"]) == 0
        names = ("report.csv", "report.json", "predictions.csv", "cluster_report.csv", "models/manifest.json")
        same = [n for n in names if (out / n).read_bytes() == (again / n).read_bytes()]
        d.update(identical=f"{len(same)}/{len(names)}")
        assert len(same) == len(names)


# -- 10. leakage guard -----------------------------------------------------------------------

def _fit_all(ds, model_cfg, train_cfg):
    scaler = fit_scaler(ds)
    clusters = cluster_pipeline(ds, scaler, k=3, seed=0)
    windows = make_windows(ds, scaler).select(region="train")
    params = {}
    for poi, m in sorted(clusters.items()):
        for c in sorted(m.retained):
            model, _ = train_cluster_model(windows.select(cells=m.members(c)), model_cfg, train_cfg, seed=poi.id * 100 + c)
            params[(poi.id, c)] = model.params.tobytes()
    return scaler, {p.id: m.assignments for p, m in clusters.items()}, params


def _perturb(ds, rng, everything=False):
    cells = []
    target = rng.integers(len(ds.cells))
    for i, cell in enumerate(ds.cells):
        dl, us = cell.downlink.copy(), cell.users.copy()
        if everything:
            dl[ds.train_weeks:] *= rng.uniform(0.1, 10.0, ds.n_weeks - ds.train_weeks)
            us[ds.train_weeks:] *= rng.uniform(0.1, 10.0, ds.n_weeks - ds.train_weeks)
        elif i == target:
            week = rng.integers(ds.train_weeks, ds.n_weeks)
            (dl if rng.random() < 0.5 else us)[week] *= rng.uniform(2.0, 100.0)
        cells.append(CellSeries(cell.cell_id, cell.poi, cell.start_week, dl, us))
    return ds.with_cells(cells)


def test_leakage_guard():
    with criterion("leakage guard: test-region perturbations leave scaler, clusters, params bit-identical") as d:
        ds = random_dataset(n_cells=24, n_pois=2, seed=11)
        model_cfg = NBeatsConfig(fc_width=8, fc_layers_per_block=2, blocks_per_stack=2)
        train_cfg = TrainConfig(max_epochs=5, batch_size=32)
        base = _fit_all(ds, model_cfg, train_cfg)
        rng = np.random.default_rng(0)
        trials = [_perturb(ds, rng) for _ in range(4)] + [_perturb(ds, rng, everything=True)]
        for perturbed in trials:
            assert perturbed != ds
            scaler, assignments, params = _fit_all(perturbed, model_cfg, train_cfg)
            assert scaler == base[0]
            assert assignments == base[1]
            assert params == base[2]
        d.update(trials=len(trials), models_compared=len(base[2]))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
