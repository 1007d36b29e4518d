"""AUC, accuracy and loss over predicted correctness probabilities."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .featurize import WindowBatch
from .model import Model, bce_loss, forward


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    accuracy: float
    mean_bce: float
    n_predictions: int
    n_positive: int

    def to_json(self) -> str:
        return json.dumps({
            "auc": self.auc,
            "accuracy": self.accuracy,
            "mean_bce": self.mean_bce,
            "n_predictions": self.n_predictions,
            "n_positive": self.n_positive,
        }, indent=2, sort_keys=True)

    def to_text(self) -> str:
        rows = [
            ("auc", f"{self.auc:.6f}"),
            ("accuracy", f"{self.accuracy:.6f}"),
            ("mean_bce", f"{self.mean_bce:.6f}"),
            ("n_predictions", str(self.n_predictions)),
            ("n_positive", str(self.n_positive)),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


def auc(scores: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """Probability that a random positive outscores a random negative, ties
    counted one-half (Mann-Whitney). Computed by sorting and averaging the
    ranks of tied score groups.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined for single-class labels")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    first_rank = np.concatenate(([0], np.cumsum(counts)[:-1])) + 1
    mean_rank = first_rank + (counts - 1) / 2.0
    rank_sum_pos = float(mean_rank[inverse[y == 1]].sum())
    u_stat = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u_stat / (n_pos * n_neg)


def scored_events(model: Model, windows: WindowBatch, batch_size: int = 256
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic inference, one score per original event.

    Where overlapping windows cover the same event, the occurrence from the
    last window (largest start offset) wins. Returns (scores, labels,
    user_ids, event_indices) sorted by (user, event).
    """
    max_seq = windows.max_seq
    scores_parts, labels_parts, key_parts = [], [], []
    for start in range(0, len(windows), batch_size):
        batch = windows.select(np.arange(start, min(start + batch_size, len(windows))))
        probs = forward(model, batch, mode="infer")
        valid = batch.valid
        pad = max_seq - valid.sum(axis=1)
        positions = np.broadcast_to(np.arange(max_seq), valid.shape)
        event_index = batch.start_index[:, None] + positions - pad[:, None]
        user = np.broadcast_to(batch.user_id[:, None], valid.shape)
        scores_parts.append(probs[valid])
        labels_parts.append(batch.target[valid])
        key_parts.append(np.stack([user[valid], event_index[valid]], axis=1))

    scores = np.concatenate(scores_parts)
    labels = np.concatenate(labels_parts)
    keys = np.concatenate(key_parts)
    # np.unique returns the first occurrence; reversing makes that the last
    # window containing each (user, event)
    _, rev_index = np.unique(keys[::-1], axis=0, return_index=True)
    keep = np.sort(len(keys) - 1 - rev_index)
    order = np.lexsort((keys[keep, 1], keys[keep, 0]))
    keep = keep[order]
    return scores[keep], labels[keep], keys[keep, 0], keys[keep, 1]


def evaluate(model: Model, windows: WindowBatch, batch_size: int = 256) -> MetricsReport:
    """Score every original event once and report AUC, accuracy at a 0.5
    threshold, and mean BCE."""
    scores, labels, _, _ = scored_events(model, windows, batch_size)
    n = len(scores)
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == n:
        raise ValueError("evaluation dataset holds a single class; AUC is undefined")
    return MetricsReport(
        auc=auc(scores, labels),
        accuracy=float(((scores >= 0.5).astype(np.int64) == labels).mean()),
        mean_bce=bce_loss(scores, labels, np.ones(n, dtype=bool)),
        n_predictions=n,
        n_positive=n_pos,
    )


def per_user_auc(model: Model, windows: WindowBatch,
                 batch_size: int = 256) -> list[tuple[int, float, int]]:
    """Per-user (user_id, auc, n_events); single-class users are skipped."""
    scores, labels, users, _ = scored_events(model, windows, batch_size)
    out = []
    for uid in np.unique(users):
        sel = users == uid
        user_labels = labels[sel]
        if user_labels.min() == user_labels.max():
            continue
        out.append((int(uid), auc(scores[sel], user_labels), int(sel.sum())))
    return out
