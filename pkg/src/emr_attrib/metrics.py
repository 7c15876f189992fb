"""Rank-based AUC and hour-indexed evaluation of ROM trajectories."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError
from .model import ModelParams, forward

REFERENCE_HOURS = (1, 3, 6, 9, 12, -12, -9, -6, -3, -1)
MIN_STAY_HOURS = 24


def compute_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    ranks = rankdata(scores)  # average ranks handle ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def prediction_index(hour: int, T: int) -> int | None:
    """Column index of the prediction scored at ``hour`` (None if out of range).

    Positive hours count from admission and use columns ``0..hour-1``;
    negative hours count back from discharge.
    """
    if hour == 0:
        raise ValueError("hour 0 is undefined; use positive or negative hours")
    idx = hour - 1 if hour > 0 else T + hour - 1
    return idx if 0 <= idx < T else None


def evaluate_at_hours(params: ModelParams, dataset: Sequence, hours: Sequence[int] = REFERENCE_HOURS,
                      min_hours: int = MIN_STAY_HOURS) -> list[dict]:
    """AUC of the prediction at each requested hour against the final outcome.

    ``dataset`` holds DtPatientMatrix objects with labels.  Encounters shorter
    than ``min_hours`` are excluded.
    """
    eligible = [d for d in dataset if d.length_hours >= min_hours]
    if not eligible:
        raise UndefinedMetricError("no encounters satisfy the minimum stay length")
    trajectories = [forward(params, d.values) for d in eligible]
    labels = np.array([bool(d.label) for d in eligible])
    rows = []
    for h in hours:
        scores, ys = [], []
        for traj, lab in zip(trajectories, labels):
            idx = prediction_index(h, len(traj))
            if idx is not None:
                scores.append(traj[idx])
                ys.append(lab)
        rows.append({"hour": int(h), "auc": compute_auc(scores, ys), "n_encounters": len(scores)})
    return rows
