"""Variational objective, training loop and reconstruction-probability scoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .models import FrozenModel, GraphOps, VaeModel, decoder_forward, encoder_forward

log = logging.getLogger(__name__)

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


class TrainingError(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 2e-4
    epochs: int = 50
    latent_dim: int = 100
    mc_samples_train: int = 1
    mc_samples_score: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.mc_samples_train < 1 or self.mc_samples_score < 1:
            raise ValueError("Monte-Carlo sample counts must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalization)")


@dataclass
class GaussianParams:
    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ad.ShapeError(
                f"mean {self.mean.shape} and log_variance {self.log_variance.shape} differ"
            )


@dataclass
class TrainResult:
    model: VaeModel
    history: list = field(default_factory=list)


def split_gaussian(h: np.ndarray) -> GaussianParams:
    half = h.shape[-1] // 2
    return GaussianParams(h[..., :half], np.clip(h[..., half:], LOGVAR_MIN, LOGVAR_MAX))


def _as_batch(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 2 else x


def encode(model, x: np.ndarray) -> GaussianParams:
    """q(z|x) for one window (tw, features) or a batch (B, tw, features), inference mode."""
    frozen = model if isinstance(model, FrozenModel) else FrozenModel.from_model(model, np.float64)
    single = x.ndim == 2
    q = split_gaussian(frozen.encode(_as_batch(np.asarray(x))))
    if single:
        return GaussianParams(q.mean[0], q.log_variance[0])
    return q


def reparameterize(q: GaussianParams, noise: np.ndarray) -> np.ndarray:
    noise = np.asarray(noise)
    if noise.shape != q.mean.shape:
        raise ad.ShapeError(f"noise shape {noise.shape} != mean shape {q.mean.shape}")
    return q.mean + np.exp(0.5 * q.log_variance) * noise


def gaussian_log_likelihood(x, p: GaussianParams) -> float:
    x = np.asarray(x, dtype=float)
    lv = p.log_variance
    return float(np.sum(-0.5 * ad.LOG_2PI - 0.5 * lv - (x - p.mean) ** 2 / (2.0 * np.exp(lv))))


def kl_divergence(q: GaussianParams) -> float:
    lv = q.log_variance
    return float(np.sum(0.5 * (q.mean**2 + np.maximum(np.expm1(lv) - lv, 0.0))))


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def _elbo_graph(model: VaeModel, x, noise, P, train):
    """Negated ELBO as a graph node, plus per-row KL for diagnostics.

    ``noise`` has shape (S, B, latent_dim); S Monte-Carlo draws per row.
    """
    arch = model.arch
    h = encoder_forward(GraphOps, arch, ad.constant(x), P, model.bn, train)
    zdim = arch.latent_dim
    mean = ad.slice_last(h, 0, zdim)
    logvar = ad.clip(ad.slice_last(h, zdim, 2 * zdim), LOGVAR_MIN, LOGVAR_MAX)
    kl = ad.kl_divergence(mean, logvar)

    flat = x.reshape(x.shape[0], -1)
    d = arch.data_dim
    recon = None
    for s in range(noise.shape[0]):
        z = ad.reparameterize(mean, logvar, noise[s])
        out = decoder_forward(GraphOps, arch, z, P, model.bn, train)
        xm = ad.slice_last(out, 0, d)
        xlv = ad.clip(ad.slice_last(out, d, 2 * d), LOGVAR_MIN, LOGVAR_MAX)
        ll = ad.gaussian_log_likelihood(flat, xm, xlv)
        recon = ll if recon is None else ad.add(recon, ll)
    if noise.shape[0] > 1:
        recon = ad.scale(recon, 1.0 / noise.shape[0])
    per_row = ad.add(recon, ad.scale(kl, -1.0))
    loss = ad.scale(ad.mean(per_row), -1.0)
    return loss, kl


def elbo(model: VaeModel, x_batch, noise=None, rng=None, mc_samples: int = 1, train: bool = False):
    """Minimization loss: -mean over the batch of [E_q log p(x|z) - KL(q || N(0, I))]."""
    x = np.asarray(x_batch, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] == 0:
        raise ad.ShapeError(f"expected a non-empty (B, tw, features) batch, got {x.shape}")
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        noise = rng.standard_normal((mc_samples, x.shape[0], model.latent_dim))
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim == 2:
        noise = noise[None]
    P = {k: ad.constant(v) for k, v in model.params.items()}
    loss, _ = _elbo_graph(model, x, noise, P, train)
    return float(loss.value)


def elbo_and_grads(model: VaeModel, x_batch, noise, train: bool = True):
    """Loss, per-row KL and gradients w.r.t. every trainable parameter."""
    P = {k: ad.leaf(v, k) for k, v in model.params.items()}
    loss, kl = _elbo_graph(model, np.asarray(x_batch, dtype=np.float64), noise, P, train)
    g = ad.backward(loss, list(P.values()))
    return float(loss.value), kl.value, {k: g[node] for k, node in P.items()}


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a trailing singleton would leave batch-norm variance undefined
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train(model: VaeModel, windows, config: TrainConfig, progress=None) -> TrainResult:
    """Mini-batch Adam on the negated ELBO. Deterministic given (model, data, config).

    ``windows`` is an array (N, tw, features). The model is updated in place
    and also returned, with the mean training loss of every epoch.
    """
    x_all = np.asarray(windows, dtype=np.float64)
    if x_all.ndim != 3 or len(x_all) == 0:
        raise ValueError(f"need a non-empty (N, tw, features) array, got shape {x_all.shape}")
    if len(x_all) < 2:
        raise ValueError("training needs at least 2 windows (batch normalization)")
    arch = model.arch
    if x_all.shape[1:] != (arch.tw, arch.num_features):
        raise ad.ShapeError(
            f"windows {x_all.shape[1:]} do not match model ({arch.tw}, {arch.num_features})"
        )

    rng = np.random.default_rng(config.seed)
    state = ad.AdamState(learning_rate=config.learning_rate)
    history = []
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(len(x_all), config.batch_size, rng)):
            xb = x_all[idx]
            noise = rng.standard_normal((config.mc_samples_train, len(idx), arch.latent_dim))
            loss, kl, grads = elbo_and_grads(model, xb, noise, train=True)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b}",
                    {"epoch": epoch, "batch": b, "loss": loss},
                )
            if np.min(kl) < -1e-9:
                raise TrainingError(
                    f"negative KL at epoch {epoch}, batch {b}",
                    {"epoch": epoch, "batch": b, "min_kl": float(np.min(kl))},
                )
            try:
                model.params = ad.adam_step(model.params, grads, state)
            except ad.NonFiniteGradientError as err:
                raise TrainingError(
                    f"non-finite gradient at epoch {epoch}, batch {b}",
                    {"epoch": epoch, "batch": b, **err.diagnostics},
                ) from err
            total += loss * len(idx)
            count += len(idx)
        history.append(total / count)
        log.info("epoch %d loss %.4f", epoch, history[-1])
        if progress is not None:
            progress(epoch, history[-1])
    return TrainResult(model, history)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def window_noise(seed: int, index: int, n_samples: int, latent_dim: int) -> np.ndarray:
    """Standard-normal draws for one window; independent of how windows are batched."""
    return np.random.default_rng((seed, index)).standard_normal((n_samples, latent_dim))


def score_from_loglik(loglik: np.ndarray) -> np.ndarray:
    """-log of the Monte-Carlo mean density; ``loglik`` is (..., L)."""
    n = loglik.shape[-1]
    return -(logsumexp(loglik, axis=-1) - math.log(n))


def score_batch(frozen: FrozenModel, x: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Anomaly scores for windows x (B, tw, f) given noise (B, L, latent_dim)."""
    arch = frozen.arch
    b, n_samples = noise.shape[0], noise.shape[1]
    q = split_gaussian(frozen.encode(x))
    std = np.exp(0.5 * q.log_variance)
    z = q.mean[:, None, :] + std[:, None, :] * noise.astype(frozen.dtype, copy=False)
    out = frozen.decode(z.reshape(b * n_samples, arch.latent_dim))
    d = arch.data_dim
    xm = out[:, :d].reshape(b, n_samples, d)
    xlv = np.clip(out[:, d:], LOGVAR_MIN, LOGVAR_MAX).reshape(b, n_samples, d)
    flat = x.reshape(b, 1, d).astype(frozen.dtype, copy=False)
    diff = flat - xm
    ll = np.sum(-0.5 * ad.LOG_2PI - 0.5 * xlv - 0.5 * diff * diff * np.exp(-xlv), axis=-1)
    return score_from_loglik(ll.astype(np.float64))


def anomaly_score(model, x, n_samples: int = 16, seed: int = 0, index: int = 0, noise=None,
                  dtype=np.float32) -> float:
    """Score of one window: higher means less likely under the decoder, i.e. more anomalous."""
    frozen = model if isinstance(model, FrozenModel) else FrozenModel.from_model(model, dtype)
    if noise is None:
        noise = window_noise(seed, index, n_samples, frozen.arch.latent_dim)
    noise = np.asarray(noise, dtype=np.float64).reshape(1, -1, frozen.arch.latent_dim)
    return float(score_batch(frozen, np.asarray(x)[None], noise)[0])


def score_windows(model, windows, n_samples: int = 16, seed: int = 0, dtype=np.float32,
                  batch_size: int = 256) -> np.ndarray:
    """Scores for every window; window i always uses noise stream (seed, i)."""
    frozen = model if isinstance(model, FrozenModel) else FrozenModel.from_model(model, dtype)
    windows = np.asarray(windows)
    zdim = frozen.arch.latent_dim
    out = np.empty(len(windows))
    for start in range(0, len(windows), batch_size):
        stop = min(start + batch_size, len(windows))
        noise = np.stack([window_noise(seed, i, n_samples, zdim) for i in range(start, stop)])
        out[start:stop] = score_batch(frozen, windows[start:stop], noise)
    return out
