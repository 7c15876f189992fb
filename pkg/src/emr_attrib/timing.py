"""Per-encounter compute-time records and their median / IQR summary."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimingRecord:
    encounter_id: str
    method: str
    seconds: float
    t_hours: int
    n_features: int
    converged: bool = True

    def __post_init__(self):
        if not self.seconds >= 0:
            raise ConfigurationError(f"negative duration for {self.encounter_id}")


def timing_summary(records: Sequence[TimingRecord], methods: Sequence[str] | None = None) -> dict:
    """method -> {n, median, q1, q3, iqr}; quartiles by linear interpolation."""
    methods = list(methods) if methods else sorted({r.method for r in records})
    out = {}
    for m in methods:
        secs = np.array([r.seconds for r in records if r.method == m])
        if secs.size == 0:
            logger.warning("no timing records for method %s", m)
            continue
        q1, med, q3 = np.percentile(secs, [25, 50, 75], method="linear")
        out[m] = {"n": int(secs.size), "median": float(med), "q1": float(q1), "q3": float(q3),
                  "iqr": float(q3 - q1)}
    return out


def plot_timing(path, records: Sequence[TimingRecord], methods: Sequence[str]) -> None:
    """Box plot of seconds per encounter, one box per method (log scale)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = [[r.seconds for r in records if r.method == m] for m in methods]
    keep = [(m, g) for m, g in zip(methods, groups) if g]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.boxplot([g for _, g in keep], whis=(0, 100))
    ax.set_xticks(range(1, len(keep) + 1))
    ax.set_xticklabels([m for m, _ in keep])
    ax.set_yscale("log")
    ax.set_ylabel("seconds per encounter")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)
