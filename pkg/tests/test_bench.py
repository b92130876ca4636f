import csv
import io
import json

import numpy as np
import pytest

from scvae import bench
from scvae.data import make_windows, synth_cnc, standardize
from scvae.models import build
from scvae.vae import TrainConfig, score_windows


@pytest.fixture(scope="module")
def dataset():
    s, _ = standardize(synth_cnc(120, 4, 0.05, seed=0))
    return make_windows(s, 4)


@pytest.fixture(scope="module")
def pair(dataset):
    cfg = TrainConfig(batch_size=32, epochs=1, latent_dim=3, mc_samples_score=4)
    return bench.bench_pair(dataset, cfg, "synth", repetitions=30, warmups=1, max_windows=5)


def test_inference_timings_shape(dataset):
    m = build("SCVAE", 4, 4, latent_dim=3)
    stats = bench.bench_inference(m, dataset.windows, repetitions=30, warmups=0, n_samples=2, max_windows=7)
    assert stats.timings.shape == (30, 7) and stats.n_windows == 7
    assert np.all(stats.timings > 0)
    assert stats.p50 <= stats.p95
    assert stats.mean == pytest.approx(stats.timings.mean())


def test_inference_uses_every_window_by_default(dataset):
    m = build("SCVAE", 4, 4, latent_dim=3)
    stats = bench.bench_inference(m, dataset.windows[:9], repetitions=30, warmups=0, n_samples=1)
    assert stats.timings.size == 30 * 9


def test_inference_errors(dataset):
    m = build("SCVAE", 4, 4, latent_dim=3)
    with pytest.raises(ValueError, match=">= 30"):
        bench.bench_inference(m, dataset.windows, repetitions=29)
    with pytest.raises(ValueError, match="empty"):
        bench.bench_inference(m, np.zeros((0, 4, 4)))


def test_report_validation():
    stats = bench.LatencyStats(1e-3, 2e-3, 1e-3, 30, 3, 1, np.ones((30, 1)))
    with pytest.raises(ValueError, match="p50"):
        bench.BenchReport("SCVAE", "d", 4, 1.0, stats, 10, 100)
    ok = bench.LatencyStats(1e-3, 1e-3, 2e-3, 30, 3, 1, np.ones((30, 1)))
    with pytest.raises(ValueError, match="positive"):
        bench.BenchReport("SCVAE", "d", 4, -1.0, ok, 10, 100)


def test_pair_report(pair, dataset):
    r = pair.ratios()
    assert r["param_count"] < 1 and r["serialized_bytes"] < 1
    assert r["latency"] > 0 and r["training_time"] > 0
    for rep in (pair.cnn, pair.scvae):
        assert rep.latency.timings.shape == (30, 5)
        assert rep.prauc is None or 0 <= rep.prauc <= 1
    d = json.loads(bench.to_json(pair))
    assert set(d) == {"CNN_VAE", "SCVAE", "ratios"}
    assert d["SCVAE"]["environment"]["threads"] == 1


def test_table_and_csv(pair):
    reports = [pair.cnn, pair.scvae]
    table = bench.format_table(reports)
    lines = table.splitlines()
    assert lines[0].split()[:4] == ["Model", "Dataset", "tw", "Learning(s)"]
    assert lines[2].startswith("CNN_VAE") and lines[3].startswith("SCVAE")
    rows = list(csv.reader(io.StringIO(bench.timings_csv(reports))))
    assert rows[0] == ["model", "dataset", "tw", "repetition", "window", "seconds"]
    assert len(rows) == 1 + 2 * 30 * 5


def test_benchmark_does_not_change_scores(dataset):
    m = build("CNN_VAE", 4, 4, latent_dim=3, seed=2)
    before = score_windows(m, dataset.windows[:6], 4, 0)
    bench.bench_inference(m, dataset.windows[:6], repetitions=30, warmups=0, n_samples=4)
    assert score_windows(m, dataset.windows[:6], 4, 0).tobytes() == before.tobytes()


def test_environment_fields():
    env = bench.environment()
    assert {"python", "numpy", "machine", "threads", "precision"} <= set(env)
