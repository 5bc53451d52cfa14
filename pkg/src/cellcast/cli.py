"""Command-line pipeline: synth -> ingest -> cluster -> train -> evaluate -> report.

Every stage writes its artifacts plus a ``<stage>.stage.json`` record into the
run directory. A record pins the config section the stage used and the
SHA-256 of the upstream files it read, so a later stage refuses to mix
artifacts produced under a different config or from stale inputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import ClusterModel, ClusteringError, cluster_pipeline, write_cluster_report
from .dataset import DatasetError, IngestConfig, PoiCategory, TrafficDataset, ingest_csv, write_csv
from .evaluate import (
    EvaluationError,
    EvaluationReport,
    evaluate_pipeline,
    format_table,
    write_predictions_csv,
    write_report_csv,
    write_report_json,
)
from .nbeats import (
    CheckpointError,
    NBeatsConfig,
    TrainConfig,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
    train_cluster_model,
)
from .neural import TrainingDivergence
from .preprocess import Scaler, fit_scaler, make_windows
from .synth import default_config, generate

log = logging.getLogger("cellcast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3
STAGE_VERSION = 1


class StageError(RuntimeError):
    """Missing, stale or inconsistent stage artifacts."""


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass
class ClusteringParams:
    k: int = 50
    ratio: float = 0.2
    max_iter: int = 300
    tol: float = 1e-6


@dataclass
class EvaluationParams:
    naive: str = "persistence"
    season: int = 1
    weighting: str = "window"
    dump_predictions: bool = True


@dataclass
class SynthParams:
    total_cells: int = 600
    dropout_prob: float = 0.02
    zero_week_prob: float = 0.01


@dataclass
class RunConfig:
    input: str | None = None
    out: str = "run"
    seed: int = 0
    jobs: int = 1
    ingest: IngestConfig = field(default_factory=IngestConfig)
    clustering: ClusteringParams = field(default_factory=ClusteringParams)
    model: NBeatsConfig = field(default_factory=NBeatsConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationParams = field(default_factory=EvaluationParams)
    synth: SynthParams = field(default_factory=SynthParams)

    def __post_init__(self):
        if (self.model.lookback, self.model.horizon) != (self.ingest.lookback, self.ingest.horizon):
            raise UsageError("model lookback/horizon must match the ingest lookback/horizon")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ingest"] = self.ingest.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        sections = {
            "ingest": IngestConfig.from_dict,
            "clustering": lambda d: ClusteringParams(**d),
            "model": lambda d: NBeatsConfig(**d),
            "training": lambda d: TrainConfig(**d),
            "evaluation": lambda d: EvaluationParams(**d),
            "synth": lambda d: SynthParams(**d),
        }
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            try:
                kwargs[key] = sections[key](value) if key in sections else value
            except TypeError as exc:
                raise UsageError(f"bad [{key}] section: {exc}") from None
        return cls(**kwargs)

    def section_digest(self, *names: str) -> str:
        d = self.to_dict()
        return _digest_json({n: d[n] for n in names})


def _digest_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise StageError(f"missing {path}; run the stage that produces it first") from None


# ---------------------------------------------------------------------------
# Stage bookkeeping
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, config: RunConfig):
        self.config = config
        self.dir = Path(config.out)

    def path(self, name: str) -> Path:
        return self.dir / name

    def archive_config(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        _write_json(self.path("run_config.json"), self.config.to_dict())

    def record(self, stage: str, sections: tuple[str, ...], inputs: dict[str, Path], outputs: dict[str, Path],
               extra: dict | None = None) -> None:
        _write_json(self.path(f"{stage}.stage.json"), {
            "stage": stage,
            "version": STAGE_VERSION,
            "config_digest": self.config.section_digest(*sections),
            "inputs": {k: _sha256(p) for k, p in inputs.items()},
            "outputs": {k: _sha256(p) for k, p in outputs.items()},
            **(extra or {}),
        })

    def require(self, stage: str, sections: tuple[str, ...]) -> dict:
        """Load a stage record and verify its outputs and config are current."""
        meta = _read_json(self.path(f"{stage}.stage.json"))
        if meta.get("version") != STAGE_VERSION:
            raise StageError(f"{stage} artifacts have version {meta.get('version')}, expected {STAGE_VERSION}; re-run `{stage}`")
        if meta["config_digest"] != self.config.section_digest(*sections):
            raise StageError(
                f"{stage} artifacts were produced with a different {'/'.join(sections)} config; re-run `{stage}`"
            )
        for name, digest in meta["outputs"].items():
            p = self.path(name)
            if not p.exists():
                raise StageError(f"missing {p}; re-run `{stage}`")
            if _sha256(p) != digest:
                raise StageError(f"{p} changed since `{stage}` wrote it; re-run `{stage}`")
        return meta

    # artifact loaders

    def dataset(self) -> TrafficDataset:
        """Reload the retained cells exactly as ingest wrote them (no filters re-applied)."""
        self.require("ingest", ("ingest",))
        meta = _read_json(self.path("dataset.meta.json"))
        names = tuple(c["name"] for c in sorted(meta["categories"], key=lambda c: c["id"]))
        cfg = replace(self.config.ingest, extreme_percentile=None, first_week=meta["start_week"],
                      categories=names, others_fallback=False)
        ds = ingest_csv(self.path("dataset.csv"), cfg)
        expected = tuple(PoiCategory(c["id"], c["name"]) for c in meta["categories"])
        if tuple(sorted(ds.categories)) != tuple(sorted(expected)):
            raise StageError("dataset.meta.json does not match dataset.csv; re-run `ingest`")
        return ds

    def scaler(self) -> Scaler:
        return Scaler.from_dict(_read_json(self.path("scaler.json")))

    def clusters(self) -> dict[PoiCategory, ClusterModel]:
        self.require("cluster", ("ingest", "clustering", "seed"))
        models = [ClusterModel.from_dict(d) for d in _read_json(self.path("clusters.json"))["models"]]
        return {m.poi: m for m in models}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(run: Run) -> int:
    cfg = run.config
    synth_cfg = default_config(cfg.seed, cfg.synth.total_cells, cfg.synth.dropout_prob, cfg.synth.zero_week_prob)
    synth_cfg.n_weeks = cfg.ingest.n_weeks
    synth_cfg.epoch = cfg.ingest.epoch
    corpus = generate(synth_cfg)
    run.dir.mkdir(parents=True, exist_ok=True)
    corpus.write(run.path("corpus.csv"), run.path("planted.csv"))
    _write_json(run.path("synth_config.json"), synth_cfg.to_dict())
    log.info("synth: %d rows, %d cells -> %s", len(corpus.rows), len(corpus.planted), run.path("corpus.csv"))
    return EXIT_OK


def cmd_ingest(run: Run) -> int:
    cfg = run.config
    source = Path(cfg.input) if cfg.input else run.path("corpus.csv")
    if not source.exists():
        raise StageError(f"input corpus {source} not found; pass --input or run `synth` first")
    ds = ingest_csv(source, cfg.ingest)
    run.archive_config()
    write_csv(ds, run.path("dataset.csv"))
    _write_json(run.path("dataset.meta.json"), {
        "start_week": ds.start_week,
        "categories": [{"id": c.id, "name": c.name} for c in ds.categories],
    })
    _write_json(run.path("ingest_report.json"), ds.report.to_dict())
    run.record("ingest", ("ingest",), {"corpus": source},
               {"dataset.csv": run.path("dataset.csv"), "dataset.meta.json": run.path("dataset.meta.json")})
    r = ds.report
    log.info("ingest: %d rows, %d cells seen, %d kept, dropped %s", r.rows_read, r.cells_seen, r.cells_kept,
             {k: v for k, v in r.drop_counts.items() if v})
    return EXIT_OK


def cmd_cluster(run: Run) -> int:
    cfg = run.config
    ds = run.dataset()
    scaler = fit_scaler(ds)
    models = cluster_pipeline(ds, scaler, cfg.clustering.k, cfg.clustering.ratio, cfg.seed,
                              cfg.clustering.max_iter, cfg.clustering.tol)
    run.archive_config()
    _write_json(run.path("scaler.json"), scaler.to_dict())
    _write_json(run.path("clusters.json"), {"models": [m.to_dict() for _, m in sorted(models.items())]})
    write_cluster_report(models, run.path("cluster_report.csv"), ds, scaler)
    run.record("cluster", ("ingest", "clustering", "seed"), {"dataset.csv": run.path("dataset.csv")},
               {"scaler.json": run.path("scaler.json"), "clusters.json": run.path("clusters.json")})
    n_retained = sum(len(m.retained) for m in models.values())
    n_unmodeled = sum(len(m.unmodeled_cells) for m in models.values())
    log.info("cluster: %d POIs, %d retained clusters, %d unmodeled cells", len(models), n_retained, n_unmodeled)
    return EXIT_OK


def _cluster_seed(seed: int, poi_id: int, cluster: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(poi_id, cluster)).generate_state(1)[0])


def _train_job(job: dict) -> dict:
    model, tlog = train_cluster_model(job["windows"], job["model"], job["training"], job["seed"])
    save_checkpoint(model, job["path"], {**job["meta"], "training_log": tlog.to_dict()})
    return {"poi_id": job["meta"]["poi_id"], "cluster": job["meta"]["cluster"], "epochs": len(tlog.epochs)}


def cmd_train(run: Run) -> int:
    cfg = run.config
    ds = run.dataset()
    models = run.clusters()
    scaler = run.scaler()
    windows = make_windows(ds, scaler).select(region="train")
    clusters_digest = _sha256(run.path("clusters.json"))
    model_digest = run.config.section_digest("model", "training", "seed")

    jobs, entries = [], []
    for poi, cmodel in sorted(models.items()):
        for cluster in sorted(cmodel.retained):
            rel = f"models/{poi.id}/{cluster}.model"
            path = run.path(rel)
            seed = _cluster_seed(cfg.seed, poi.id, cluster)
            subset = windows.select(cells=cmodel.members(cluster))
            data_digest = hashlib.sha256(subset.inputs.tobytes() + subset.targets.tobytes()).hexdigest()
            meta = {"poi_id": poi.id, "cluster": cluster, "seed": seed, "run_digest": model_digest,
                    "data_digest": data_digest}
            entries.append({"poi_id": poi.id, "poi": poi.name, "cluster": cluster, "path": rel,
                            "config_digest": cfg.model.digest, "n_cells": len(cmodel.members(cluster))})
            if path.exists():
                try:
                    header = read_checkpoint_header(path)
                except (CheckpointError, OSError):
                    header = {}
                stored = header.get("metadata", {})
                if all(stored.get(k) == v for k, v in meta.items()) and header.get("config_digest") == cfg.model.digest:
                    continue
            jobs.append({"windows": subset, "model": cfg.model, "training": cfg.training, "seed": seed,
                         "path": str(path), "meta": meta})

    log.info("train: %d retained clusters, %d to train (%d up to date)", len(entries), len(jobs), len(entries) - len(jobs))
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for done in pool.map(_train_job, jobs):
                log.debug("trained %s", done)
    else:
        for job in jobs:
            log.debug("trained %s", _train_job(job))

    run.archive_config()
    manifest = run.path("models/manifest.json")
    manifest.parent.mkdir(parents=True, exist_ok=True)
    for entry in entries:
        entry["sha256"] = _sha256(run.path(entry["path"]))
    _write_json(manifest, {"clusters_sha256": clusters_digest, "model_config": cfg.model.to_dict(),
                           "config_digest": cfg.model.digest, "models": entries})
    run.record("train", ("ingest", "clustering", "seed", "model", "training"),
               {"clusters.json": run.path("clusters.json")}, {"models/manifest.json": manifest})
    return EXIT_OK


def _load_models(run: Run, models: dict[PoiCategory, ClusterModel]):
    manifest_path = run.path("models/manifest.json")
    if not manifest_path.exists():
        raise StageError(f"missing model: no trained models in {run.path('models')}; run `train` first")
    run.require("train", ("ingest", "clustering", "seed", "model", "training"))
    manifest = _read_json(manifest_path)
    if manifest["clusters_sha256"] != _sha256(run.path("clusters.json")):
        raise StageError("models were trained on different clusters; re-run `train`")
    trained = {}
    for poi, cmodel in models.items():
        for cluster in sorted(cmodel.retained):
            path = run.path(f"models/{poi.id}/{cluster}.model")
            if not path.exists():
                raise StageError(f"missing model for POI {poi} cluster {cluster} ({path}); re-run `train`")
            trained[(poi.id, cluster)], _ = load_checkpoint(path, expected=run.config.model)
    return trained, manifest


def cmd_evaluate(run: Run) -> int:
    cfg = run.config
    ds = run.dataset()
    models = run.clusters()
    trained, _ = _load_models(run, models)
    report = evaluate_pipeline(ds, run.scaler(), models, trained, cfg.evaluation.naive, cfg.evaluation.season,
                               cfg.evaluation.weighting, keep_predictions=cfg.evaluation.dump_predictions)
    run.archive_config()
    _write_json(run.path("evaluation.json"), {
        "report": report.to_dict(),
        "predictions": [list(p) for p in report.predictions],
    })
    run.record("evaluate", ("ingest", "clustering", "seed", "model", "training", "evaluation"),
               {"models/manifest.json": run.path("models/manifest.json")},
               {"evaluation.json": run.path("evaluation.json")})
    log.info("evaluate: overall model MAPE %.2f%%, naive %.2f%%", report.overall["model_mape"], report.overall["naive_mape"])
    return EXIT_OK


def cmd_report(run: Run) -> int:
    run.require("evaluate", ("ingest", "clustering", "seed", "model", "training", "evaluation"))
    data = _read_json(run.path("evaluation.json"))
    report = EvaluationReport.from_dict(data["report"])
    report.predictions = [tuple(p) for p in data["predictions"]]
    write_report_csv(report, run.path("report.csv"))
    write_report_json(report, run.path("report.json"))
    if report.predictions:
        write_predictions_csv(report, run.path("predictions.csv"))
    print(format_table(report))
    return EXIT_OK


def cmd_run_all(run: Run) -> int:
    if not run.config.input:
        cmd_synth(run)
    for step in (cmd_ingest, cmd_cluster, cmd_train, cmd_evaluate, cmd_report):
        step(run)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "run-all": cmd_run_all,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file; flags override it")
    common.add_argument("--out", help="run directory (default: from config, else ./run)")
    common.add_argument("--input", help="input corpus CSV (default: <out>/corpus.csv)")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="parallel training processes")
    common.add_argument("-k", "--k", dest="k", type=int, help="K-Means clusters per POI")
    common.add_argument("--ratio", type=float, help="cluster retention ratio")
    common.add_argument("--lookback", type=int)
    common.add_argument("--horizon", type=int)
    common.add_argument("--train-weeks", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="cellcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        base = RunConfig.from_dict(data)
    else:
        archived = Path(args.out or "run") / "run_config.json"
        base = RunConfig.from_dict(json.loads(archived.read_text())) if archived.exists() and args.command != "run-all" else RunConfig()

    ingest = base.ingest
    model = base.model
    if args.lookback is not None or args.horizon is not None or args.train_weeks is not None:
        lookback = args.lookback if args.lookback is not None else ingest.lookback
        horizon = args.horizon if args.horizon is not None else ingest.horizon
        train_weeks = args.train_weeks if args.train_weeks is not None else ingest.train_weeks
        ingest = replace(ingest, lookback=lookback, horizon=horizon, train_weeks=train_weeks)
        model = replace(model, lookback=lookback, horizon=horizon)
    clustering = base.clustering
    if args.k is not None:
        clustering = replace(clustering, k=args.k)
    if args.ratio is not None:
        clustering = replace(clustering, ratio=args.ratio)
    cfg = replace(
        base,
        out=args.out or base.out,
        input=args.input if args.input is not None else base.input,
        seed=args.seed if args.seed is not None else base.seed,
        jobs=args.jobs if args.jobs is not None else base.jobs,
        ingest=ingest,
        model=model,
        clustering=clustering,
    )
    if cfg.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if cfg.clustering.k < 1 or not 0 < cfg.clustering.ratio <= 1:
        raise UsageError("need k >= 1 and 0 < ratio <= 1")
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        run = Run(resolve_config(args))
        return COMMANDS[args.command](run)
    except (UsageError, TypeError) as exc:
        print(f"cellcast: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        if isinstance(exc, (DatasetError, ClusteringError, EvaluationError, CheckpointError)):
            print(f"cellcast: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"cellcast: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"cellcast: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"cellcast: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
