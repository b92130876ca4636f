"""Size, training-time and per-window latency comparison of SCVAE against CNN-VAE."""

from __future__ import annotations

import csv
import io
import json
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from .metrics import DegenerateLabelsError, prauc
from .models import CNN_VAE, SCVAE, FrozenModel, build, param_count
from .vae import TrainConfig, score_batch, score_windows, train, window_noise


def environment(precision: str = "float32") -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "numpy": np.__version__,
        "precision": precision,
        "threads": 1,
    }


@dataclass
class LatencyStats:
    mean: float
    p50: float
    p95: float
    repetitions: int
    warmups: int
    n_windows: int
    timings: np.ndarray = field(repr=False)  # (repetitions, n_windows) seconds

    def summary(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "timings"}


@dataclass
class BenchReport:
    model: str
    dataset: str
    tw: int
    training_wall_time: float
    latency: LatencyStats
    param_count: int
    serialized_bytes: int
    prauc: float | None = None
    environment: dict = field(default_factory=environment)

    def __post_init__(self):
        lat = self.latency
        if not (lat.p50 <= lat.p95):
            raise ValueError("latency p50 exceeds p95")
        if self.training_wall_time < 0 or lat.mean <= 0:
            raise ValueError("times must be positive")

    def as_dict(self) -> dict:
        return {
            "model": self.model,
            "dataset": self.dataset,
            "tw": self.tw,
            "training_wall_time": self.training_wall_time,
            "inference_latency": self.latency.summary(),
            "param_count": self.param_count,
            "serialized_bytes": self.serialized_bytes,
            "prauc": self.prauc,
            "environment": self.environment,
        }


def bench_inference(model, windows, repetitions: int = 30, warmups: int = 3, n_samples: int = 16,
                    seed: int = 0, max_windows: int | None = None) -> LatencyStats:
    """Time the full scoring path of every window, one window per call.

    Timing covers noise draw, encode, sampling, decode and the log-mean-exp
    reduction, single-threaded at float32. ``max_windows`` takes an evenly
    spaced subset so large datasets stay affordable.
    """
    if repetitions < 30:
        raise ValueError(f"repetitions must be >= 30, got {repetitions}")
    windows = np.asarray(windows)
    if windows.ndim != 3 or len(windows) == 0:
        raise ValueError("cannot benchmark an empty dataset")
    index = np.arange(len(windows))
    if max_windows is not None and max_windows < len(windows):
        index = np.linspace(0, len(windows) - 1, max_windows).astype(int)
    frozen = model if isinstance(model, FrozenModel) else FrozenModel.from_model(model, np.float32)
    zdim = frozen.arch.latent_dim
    xs = [windows[i : i + 1].astype(np.float32) for i in index]

    def one(j):
        noise = window_noise(seed, int(index[j]), n_samples, zdim)[None]
        return score_batch(frozen, xs[j], noise)

    timings = np.empty((repetitions, len(index)))
    with threadpool_limits(limits=1):
        for _ in range(warmups):
            for j in range(len(index)):
                one(j)
        for r in range(repetitions):
            for j in range(len(index)):
                t0 = time.perf_counter()
                one(j)
                timings[r, j] = time.perf_counter() - t0
    flat = timings.ravel()
    return LatencyStats(
        mean=float(flat.mean()),
        p50=float(np.percentile(flat, 50)),
        p95=float(np.percentile(flat, 95)),
        repetitions=repetitions,
        warmups=warmups,
        n_windows=len(index),
        timings=timings,
    )


def bench_model(kind: str, dataset, config: TrainConfig, dataset_name: str = "", repetitions: int = 30,
                warmups: int = 3, max_windows: int | None = 64) -> BenchReport:
    model = build(kind, dataset.tw, dataset.num_features, config.latent_dim, seed=config.seed)
    t0 = time.perf_counter()
    train(model, dataset.windows, config)
    train_time = time.perf_counter() - t0
    latency = bench_inference(model, dataset.windows, repetitions, warmups, config.mc_samples_score,
                              config.seed, max_windows)
    score = None
    if dataset.labels is not None:
        scores = score_windows(model, dataset.windows, config.mc_samples_score, config.seed)
        try:
            score = prauc(scores, dataset.labels)
        except DegenerateLabelsError:
            score = None
    return BenchReport(kind, dataset_name, dataset.tw, train_time, latency, param_count(model),
                       checkpoint.serialized_size(model), score)


@dataclass
class PairReport:
    cnn: BenchReport
    scvae: BenchReport

    def ratios(self) -> dict:
        a, b = self.scvae, self.cnn
        return {
            "training_time": a.training_wall_time / b.training_wall_time if b.training_wall_time else None,
            "latency": a.latency.mean / b.latency.mean,
            "param_count": a.param_count / b.param_count,
            "serialized_bytes": a.serialized_bytes / b.serialized_bytes,
        }

    def as_dict(self) -> dict:
        return {CNN_VAE: self.cnn.as_dict(), SCVAE: self.scvae.as_dict(), "ratios": self.ratios()}


def bench_pair(dataset, config: TrainConfig, dataset_name: str = "", repetitions: int = 30,
               warmups: int = 3, max_windows: int | None = 64) -> PairReport:
    """Train and measure both architectures with the same seed and config."""
    reports = [bench_model(k, dataset, config, dataset_name, repetitions, warmups, max_windows)
               for k in (CNN_VAE, SCVAE)]
    return PairReport(*reports)


def format_table(reports) -> str:
    """Plain-text table: learning time, inference time, memory, PRAUC."""
    head = f"{'Model':<10}{'Dataset':<14}{'tw':>4}{'Learning(s)':>14}{'Inference(s)':>15}{'Memory(Mb)':>12}{'Params':>12}{'PRAUC':>8}"
    lines = [head, "-" * len(head)]
    for r in reports:
        pr = f"{100 * r.prauc:.2f}" if r.prauc is not None else "-"
        lines.append(
            f"{r.model:<10}{r.dataset:<14}{r.tw:>4}{r.training_wall_time:>14.2f}"
            f"{r.latency.mean:>15.6f}{r.serialized_bytes / 2**20:>12.3f}{r.param_count:>12d}{pr:>8}"
        )
    return "\n".join(lines) + "\n"


def timings_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["model", "dataset", "tw", "repetition", "window", "seconds"])
    for r in reports:
        for rep, row in enumerate(r.latency.timings):
            for j, t in enumerate(row):
                w.writerow([r.model, r.dataset, r.tw, rep, j, f"{t:.9f}"])
    return buf.getvalue()


def to_json(obj) -> str:
    return json.dumps(obj.as_dict() if hasattr(obj, "as_dict") else obj, indent=2, sort_keys=True)
