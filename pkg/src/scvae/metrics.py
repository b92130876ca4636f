"""PRAUC (average precision), ratio thresholding and the Match-General consensus."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np


class DegenerateLabelsError(ValueError):
    pass


def prauc(scores, labels) -> float:
    """Average precision with tied scores handled as one block.

    Windows are ranked by descending score; every block of equal scores is
    a single operating point, and AP = sum over blocks of
    (recall gained in the block) * (precision after the block).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal 1-D shapes")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    pos = labels.astype(bool)
    n_pos = int(pos.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise DegenerateLabelsError("PRAUC needs at least one positive and one negative label")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = pos[order]
    # last index of every tie block
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    gained = np.diff(np.r_[0, tp])
    return float(np.sum(gained * (tp / seen)) / n_pos)


def flag_count(n: int, ratio: float) -> int:
    # guard against 0.07 * 100 == 7.000000000000001
    return min(n, int(math.ceil(ratio * n - 1e-9)))


def threshold_by_ratio(scores, ratio: float) -> np.ndarray:
    """Flag the ceil(ratio * N) highest scores; ties at the cut favour lower indices."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    scores = np.asarray(scores, dtype=np.float64)
    k = flag_count(len(scores), ratio)
    order = np.lexsort((np.arange(len(scores)), -scores))
    flags = np.zeros(len(scores), dtype=np.uint8)
    flags[order[:k]] = 1
    return flags


@dataclass
class ConsensusResult:
    consensus_labels: np.ndarray
    per_model_match: np.ndarray
    vote_matrix: np.ndarray
    majority: int
    model_names: tuple = ()

    def as_dict(self) -> dict:
        names = self.model_names or tuple(f"model{i}" for i in range(self.vote_matrix.shape[1]))
        return {
            "majority": self.majority,
            "n_windows": int(self.vote_matrix.shape[0]),
            "consensus_anomalies": int(self.consensus_labels.sum()),
            "match_general": {n: float(v) for n, v in zip(names, self.per_model_match)},
        }


def match_general(vote_matrix, majority: int = 3, model_names=()) -> ConsensusResult:
    """Consensus by vote count >= majority; each model scored by agreement with it."""
    try:
        votes = np.asarray(vote_matrix)
        if votes.dtype == object:
            raise ValueError
    except ValueError:
        raise ValueError("vote matrix is ragged")
    if votes.ndim != 2:
        raise ValueError(f"vote matrix must be 2-D (windows x models), got shape {votes.shape}")
    if not np.isin(votes, (0, 1)).all():
        raise ValueError("votes must be 0 or 1")
    m = votes.shape[1]
    if not 1 <= majority <= m:
        raise ValueError(f"majority must lie in [1, {m}], got {majority}")
    votes = votes.astype(np.uint8)
    consensus = (votes.sum(axis=1) >= majority).astype(np.uint8)
    match = (votes == consensus[:, None]).mean(axis=0)
    return ConsensusResult(consensus, match, votes, majority, tuple(model_names))


def agreement(a, b) -> float:
    return float(np.mean(np.asarray(a) == np.asarray(b)))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def config_hash(config) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def metric_record(metric: str, dataset: str, tw: int, model: str, value: float, config) -> dict:
    return {
        "metric": metric,
        "dataset": dataset,
        "tw": tw,
        "model": model,
        "value": float(value),
        "config_hash": config if isinstance(config, str) else config_hash(config),
    }


def to_kv_text(records) -> str:
    lines = []
    for r in records:
        lines.append(" ".join(f"{k}={r[k]}" for k in ("metric", "dataset", "tw", "model", "value", "config_hash")))
    return "\n".join(lines) + "\n"
