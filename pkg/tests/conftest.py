import numpy as np
import pytest

from cellcast.dataset import CSV_COLUMNS, CellSeries, TrafficDataset, default_categories
from cellcast.nbeats import NBeatsConfig


def random_dataset(n_cells=8, n_weeks=31, train_weeks=20, lookback=4, horizon=2, seed=0, n_pois=2):
    rng = np.random.default_rng(seed)
    cats = default_categories()[:n_pois]
    cells = []
    for i in range(n_cells):
        base = rng.uniform(1e3, 1e5)
        dl = base * np.exp(np.cumsum(0.05 * rng.standard_normal(n_weeks)))
        users = 50 * (dl / base) ** 0.8
        cells.append(CellSeries(f"c{i:03d}", cats[i % n_pois], 0, dl, users))
    return TrafficDataset(tuple(cells), n_weeks, train_weeks, lookback, horizon)


def write_rows(path, rows, header=CSV_COLUMNS):
    lines = [",".join(header)] + [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def cell_rows(cell_id, poi, n_weeks=31, value=lambda w: 100.0 + w, users=lambda w: 10.0):
    return [(cell_id, w, poi, value(w), users(w)) for w in range(n_weeks)]


def random_params(model, rng, scale=0.5):
    model.params[...] = scale * rng.standard_normal(model.n_params)
    return model


@pytest.fixture
def tiny_config():
    return NBeatsConfig(n_stacks=1, blocks_per_stack=2, fc_layers_per_block=2, fc_width=8, theta_dim=4)


def pytest_terminal_summary(terminalreporter):
    module = next((m for name, m in __import__("sys").modules.items() if name.endswith("test_acceptance")), None)
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in results:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
