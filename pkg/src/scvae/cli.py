"""Command-line driver: prepare, train, score, eval, consensus, bench, describe, run, grid.

Every command takes a flat JSON run config (``--config``) whose fields can be
overridden by flags. Results go to ``<out>/<config-hash>/``; the hash covers
every field except the output directory.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure, 5 I/O.
Failures print a JSON error document on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

import numpy as np

from . import autodiff as ad
from . import bench as benchmod
from . import checkpoint, data
from .baselines import DETECTORS, ConvergenceError, SingularCovarianceError, default_params, make_detector
from .container import ContainerError
from .metrics import config_hash, match_general, metric_record, prauc, threshold_by_ratio, to_kv_text
from .models import SPEC_BUILDERS, build
from .vae import TrainConfig, TrainingError, score_windows, train

log = logging.getLogger("scvae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5
ENSEMBLE = ("IF", "LOF", "OCSVM", "EE", "CNN_VAE", "SCVAE")
MODELS = tuple(SPEC_BUILDERS) + tuple(DETECTORS)

# named public datasets: file name inside the data directory
NAMED = {"occupancy": "datatraining.txt", "ozone": "onehr.data"}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: str = "occupancy"  # named UCI set, "synth:A".."synth:D", or a CSV path
    schema: str | None = None  # required for CSV paths; named sets use the shipped schema
    tw: int = 16
    stride: int = 1
    model: str = "SCVAE"
    batch_size: int = 64
    learning_rate: float = 2e-4
    epochs: int = 50
    latent_dim: int = 100
    mc_samples_train: int = 1
    mc_samples_score: int = 16
    detector: dict = field(default_factory=dict)
    anomaly_ratio: float = 0.05
    seed: int = 0
    synth_scale: float = 0.02
    bench_repetitions: int = 30
    bench_warmups: int = 3
    bench_max_windows: int = 64
    out: str = "out"

    def __post_init__(self):
        if self.model not in MODELS:
            raise UsageError(f"unknown model {self.model!r}; expected one of {list(MODELS)}")
        if self.tw < 1:
            raise UsageError(f"tw must be positive, got {self.tw}")
        if not 0.0 < self.anomaly_ratio < 1.0:
            raise UsageError(f"anomaly_ratio must lie in (0, 1), got {self.anomaly_ratio}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config keys {unknown}")
        return cls(**d)

    def content(self) -> dict:
        d = asdict(self)
        d.pop("out")
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.content())

    @property
    def run_dir(self) -> str:
        return os.path.join(self.out, self.hash)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.learning_rate, self.epochs, self.latent_dim,
                           self.mc_samples_train, self.mc_samples_score, self.seed)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def data_dir() -> str:
    return os.environ.get("SCVAE_DATA_DIR", "data")


def locate_named(name: str) -> str:
    fname = NAMED[name]
    for cand in (os.path.join(data_dir(), name, fname), os.path.join(data_dir(), fname)):
        if os.path.exists(cand):
            return cand
    raise data.DataError(
        f"dataset {name!r} not found: place the UCI file {fname} in {data_dir()}/{name}/ "
        f"(or set SCVAE_DATA_DIR)"
    )


def shipped_schema(name: str) -> str:
    return str(resources.files("scvae").joinpath("schemas", f"{name}.schema"))


def _write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _sha(*chunks) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c if isinstance(c, bytes) else str(c).encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()[:16]


def load_series(cfg: RunConfig):
    """(RawSeries loader, cache key) for the configured dataset."""
    if cfg.dataset.startswith("synth:"):
        name = cfg.dataset.split(":", 1)[1]
        key = _sha("synth", name, cfg.synth_scale, cfg.anomaly_ratio, cfg.seed)
        return (lambda: data.cnc_standin(name, cfg.synth_scale, cfg.anomaly_ratio, cfg.seed)), key
    if cfg.dataset in NAMED:
        path = locate_named(cfg.dataset)
        schema_path = cfg.schema or shipped_schema(cfg.dataset)
    else:
        path = cfg.dataset
        if cfg.schema is None:
            raise UsageError("a CSV dataset needs --schema")
        schema_path = cfg.schema
    if not os.path.exists(path):
        raise data.DataError(f"no such file: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    with open(schema_path, "rb") as fh:
        schema_raw = fh.read()
    key = _sha("csv", raw, schema_raw)
    return (lambda: data.ingest_csv(path, data.load_schema(schema_path))), key


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_prepare(cfg: RunConfig) -> dict:
    """Window the dataset once; later calls with identical inputs hit the cache."""
    loader, key = load_series(cfg)
    path = os.path.join(cfg.out, "cache", f"{key}-tw{cfg.tw}-s{cfg.stride}.scvw")
    if os.path.exists(path):
        ds = data.load_windowed(path)
        hit = True
    else:
        series = loader()
        ds = data.prepare(series, cfg.tw, cfg.stride, {
            "source": series.source,
            "rows": series.n_rows,
            "dropped_rows": series.dropped_rows,
            "filled_cells": series.filled_cells,
            "content_key": key,
        })
        os.makedirs(os.path.dirname(path), exist_ok=True)
        data.save_windowed(ds, path)
        hit = False
    return {"path": path, "cache_hit": hit, "windows": len(ds), "features": ds.num_features,
            "tw": ds.tw, "dataset": ds}


def _dataset(cfg):
    return cmd_prepare(cfg)["dataset"]


def cmd_train(cfg: RunConfig) -> dict:
    if cfg.model not in SPEC_BUILDERS:
        raise UsageError(f"{cfg.model} is a classical detector; it is fit by `score`, not `train`")
    ds = _dataset(cfg)
    model = build(cfg.model, cfg.tw, ds.num_features, cfg.latent_dim, seed=cfg.seed)
    result = train(model, ds.windows, cfg.train_config())
    ckpt = os.path.join(cfg.run_dir, "model.scvz")
    os.makedirs(cfg.run_dir, exist_ok=True)
    size = checkpoint.save_checkpoint(result.model, ckpt)
    _write_json(os.path.join(cfg.run_dir, "train_log.json"),
                {"config_hash": cfg.hash, "config": cfg.content(), "loss": result.history})
    return {"checkpoint": ckpt, "bytes": size, "final_loss": result.history[-1] if result.history else None}


def compute_scores(cfg: RunConfig, ds) -> np.ndarray:
    if cfg.model in SPEC_BUILDERS:
        ckpt = os.path.join(cfg.run_dir, "model.scvz")
        if not os.path.exists(ckpt):
            raise FileNotFoundError(f"no checkpoint at {ckpt}; run `train` with the same config first")
        model = checkpoint.load_checkpoint(ckpt, expected=cfg.model)
        return score_windows(model, ds.windows, cfg.mc_samples_score, cfg.seed)
    X = ds.flat()
    params = default_params(cfg.model, X.shape[0], X.shape[1], cfg.anomaly_ratio, cfg.seed)
    params.update(cfg.detector)
    return make_detector(cfg.model, **params).fit_score(X)


def cmd_score(cfg: RunConfig) -> dict:
    ds = _dataset(cfg)
    scores = compute_scores(cfg, ds)
    path = os.path.join(cfg.run_dir, "scores.json")
    _write_json(path, {
        "config_hash": cfg.hash,
        "config": cfg.content(),
        "model": cfg.model,
        "dataset": cfg.dataset,
        "tw": cfg.tw,
        "scores": [float(s) for s in scores],
        "labels": None if ds.labels is None else [int(v) for v in ds.labels],
    })
    return {"scores": path, "n": len(scores)}


def cmd_eval(score_path: str) -> dict:
    doc = _read_json(score_path)
    if doc.get("labels") is None:
        raise data.DataError(f"{score_path} carries no labels; PRAUC needs a labeled dataset")
    value = prauc(doc["scores"], doc["labels"])
    rec = metric_record("PRAUC", doc["dataset"], doc["tw"], doc["model"], value, doc["config_hash"])
    out_dir = os.path.dirname(score_path)
    _write_json(os.path.join(out_dir, "metrics.json"), [rec])
    with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(to_kv_text([rec]))
    return rec


def cmd_consensus(score_paths, ratio: float, out: str, override: bool = False, majority: int = 3) -> dict:
    if not override and len(score_paths) != len(ENSEMBLE):
        raise UsageError(
            f"consensus needs the 6 models {list(ENSEMBLE)}, got {len(score_paths)} score files "
            f"(pass --override-ensemble to use a different set)"
        )
    docs = [_read_json(p) for p in score_paths]
    names = [d["model"] for d in docs]
    if not override and sorted(names) != sorted(ENSEMBLE):
        raise UsageError(f"consensus needs the 6 models {list(ENSEMBLE)}, got {names}")
    n = {len(d["scores"]) for d in docs}
    if len(n) != 1:
        raise data.DataError(f"score files disagree on the window count: {sorted(n)}")
    majority = min(majority, len(docs))
    votes = np.column_stack([threshold_by_ratio(d["scores"], ratio) for d in docs])
    result = match_general(votes, majority, names)
    report = result.as_dict()
    report["ratio"] = ratio
    report["inputs"] = {d["model"]: d["config_hash"] for d in docs}
    labels = next((d["labels"] for d in docs if d.get("labels") is not None), None)
    if labels is not None:
        truth = np.asarray(labels)
        report["ground_truth_agreement"] = {
            "consensus": float(np.mean(result.consensus_labels == truth)),
            **{m: float(np.mean(votes[:, i] == truth)) for i, m in enumerate(names)},
        }
    key = config_hash({"inputs": report["inputs"], "ratio": ratio, "majority": majority})
    path = os.path.join(out, key, "consensus.json")
    _write_json(path, report)
    report["path"] = path
    return report


def cmd_bench(cfg: RunConfig) -> dict:
    ds = _dataset(cfg)
    pair = benchmod.bench_pair(ds, cfg.train_config(), cfg.dataset, cfg.bench_repetitions,
                               cfg.bench_warmups, cfg.bench_max_windows)
    os.makedirs(cfg.run_dir, exist_ok=True)
    doc = pair.as_dict()
    doc["config_hash"] = cfg.hash
    _write_json(os.path.join(cfg.run_dir, "bench.json"), doc)
    reports = [pair.cnn, pair.scvae]
    with open(os.path.join(cfg.run_dir, "bench.txt"), "w", encoding="utf-8") as fh:
        fh.write(benchmod.format_table(reports))
    with open(os.path.join(cfg.run_dir, "timings.csv"), "w", encoding="utf-8") as fh:
        fh.write(benchmod.timings_csv(reports))
    return {"bench": os.path.join(cfg.run_dir, "bench.json"), "ratios": pair.ratios()}


def cmd_describe(path: str) -> str:
    return checkpoint.load_checkpoint(path).arch.describe()


def cmd_run(cfg: RunConfig) -> dict:
    """One-shot recipe: prepare, train (neural models), score, eval when labels exist."""
    prep = cmd_prepare(cfg)
    out = {"config_hash": cfg.hash, "windows": prep["windows"]}
    if cfg.model in SPEC_BUILDERS:
        out["train"] = cmd_train(cfg)
    out["score"] = cmd_score(cfg)
    if prep["dataset"].labels is not None:
        out["metric"] = cmd_eval(out["score"]["scores"])
    return out


def _run_file(path, overrides):
    cfg = load_config(path, overrides)
    return path, cmd_run(cfg)


def cmd_grid(config_paths, overrides, jobs: int = 1) -> dict:
    """Run independent recipes, optionally in parallel processes."""
    results, failures = {}, {}
    if jobs <= 1:
        pairs = []
        for p in config_paths:
            try:
                pairs.append(_run_file(p, overrides))
            except Exception as err:  # one bad cell must not stop the grid
                failures[p] = f"{type(err).__name__}: {err}"
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {p: pool.submit(_run_file, p, overrides) for p in config_paths}
            pairs = []
            for p, f in futs.items():
                try:
                    pairs.append(f.result())
                except Exception as err:
                    failures[p] = f"{type(err).__name__}: {err}"
    for p, r in pairs:
        results[p] = r
    return {"completed": results, "failed": failures}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

FLAG_FIELDS = ("dataset", "schema", "tw", "model", "seed", "out", "epochs")


def load_config(path, overrides: dict | None = None) -> RunConfig:
    d = {}
    if path:
        try:
            d = _read_json(path)
        except json.JSONDecodeError as err:
            raise UsageError(f"config {path} is not valid JSON: {err}") from err
        if not isinstance(d, dict):
            raise UsageError(f"config {path} must be a JSON object")
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(d)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON run config")
    common.add_argument("--dataset", help="occupancy, ozone, synth:A..D or a CSV path")
    common.add_argument("--schema", help="schema file for CSV datasets")
    common.add_argument("--tw", type=int)
    common.add_argument("--model", choices=MODELS)
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="scvae", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("prepare", "train", "score", "bench", "run"):
        sub.add_parser(name, parents=[common])
    ev = sub.add_parser("eval", parents=[common])
    ev.add_argument("scores")
    cons = sub.add_parser("consensus", parents=[common])
    cons.add_argument("scores", nargs="+")
    cons.add_argument("--ratio", type=float, default=0.05)
    cons.add_argument("--override-ensemble", action="store_true")
    cons.add_argument("--majority", type=int, default=3)
    desc = sub.add_parser("describe", parents=[common])
    desc.add_argument("checkpoint")
    grid = sub.add_parser("grid", parents=[common])
    grid.add_argument("configs", nargs="+")
    grid.add_argument("--jobs", type=int, default=1)
    return p


def _summary(obj):
    if isinstance(obj, dict):
        return {k: _summary(v) for k, v in obj.items() if not isinstance(v, data.WindowedDataset)}
    return obj


def error_document(err: BaseException) -> tuple[int, dict]:
    if isinstance(err, UsageError):
        code = EXIT_USAGE
    elif isinstance(err, (ContainerError, OSError)):
        code = EXIT_IO
    elif isinstance(err, (TrainingError, ad.NonFiniteGradientError, ConvergenceError,
                          SingularCovarianceError, FloatingPointError)):
        code = EXIT_NUMERIC
    elif isinstance(err, (data.DataError, ad.ShapeError, ValueError)):
        code = EXIT_DATA
    else:
        raise err
    doc = {"error": type(err).__name__, "message": str(err), "exit_code": code}
    diag = getattr(err, "diagnostics", None)
    if diag:
        doc["diagnostics"] = {k: (v if isinstance(v, (int, float, str)) else str(v)) for k, v in diag.items()}
    return code, doc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {k: getattr(args, k, None) for k in FLAG_FIELDS}
    try:
        if args.command == "eval":
            result = cmd_eval(args.scores)
        elif args.command == "consensus":
            cfg = load_config(args.config, overrides)
            result = cmd_consensus(args.scores, args.ratio, cfg.out, args.override_ensemble, args.majority)
        elif args.command == "describe":
            print(cmd_describe(args.checkpoint), end="")
            return EXIT_OK
        elif args.command == "grid":
            result = cmd_grid(args.configs, overrides, args.jobs)
        else:
            cfg = load_config(args.config, overrides)
            result = {"prepare": cmd_prepare, "train": cmd_train, "score": cmd_score,
                      "bench": cmd_bench, "run": cmd_run}[args.command](cfg)
    except Exception as err:
        code, doc = error_document(err)
        print(json.dumps(doc, sort_keys=True), file=sys.stderr)
        return code
    print(json.dumps(_summary(result), indent=1, sort_keys=True, default=str))
    if args.command == "grid" and result["failed"]:
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
