"""Squeezed convolutional VAE for unsupervised time-series anomaly detection.

A numpy-only reverse-mode autodiff core, the CNN-VAE and SCVAE (Fire Module)
architectures, classical detector baselines, PRAUC and Match-General metrics,
a compression/latency benchmark and a reproducible command-line pipeline.
"""

__version__ = "0.1.0"
