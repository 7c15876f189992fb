"""From attribution matrices to window, cohort and population summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError, UndefinedMetricError


@dataclass
class AggregateVector:
    values: np.ndarray
    provenance: str  # window | cohort | raf | population
    flagged: bool = False  # all-zero input, normalization skipped
    sizes: dict = field(default_factory=dict)


def _matrix(a) -> np.ndarray:
    v = getattr(a, "values", a)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"attribution matrix must be 2-D, got shape {v.shape}")
    return v


def normalize_inf(v: np.ndarray) -> tuple[np.ndarray, bool]:
    """Divide by the largest element; (zeros, True) when there is none."""
    top = np.max(np.abs(v)) if v.size else 0.0
    if top == 0:
        return np.zeros_like(v), True
    return v / top, False


def window_average(a, t_i: int, t_f: int, normalize: bool = True) -> AggregateVector:
    """Sum of |a| over hours t_i..t_f inclusive, divided by (t_f - t_i).

    The divisor is deliberately one fewer than the number of summed hours;
    a window ending at T clips the sum at the last hour.
    """
    v = _matrix(a)
    T = v.shape[1]
    if not 0 <= t_i < t_f <= T:
        raise ShapeError(f"window [{t_i}, {t_f}] outside stay of {T} hours")
    out = np.abs(v[:, t_i:t_f + 1]).sum(axis=1) / (t_f - t_i)
    flagged = False
    if normalize:
        out, flagged = normalize_inf(out)
    return AggregateVector(out, "window", flagged)


def temporal_mean(a) -> np.ndarray:
    return np.abs(_matrix(a)).mean(axis=1)


def cohort_average(attrs: Sequence) -> AggregateVector:
    """Mean over encounters of each encounter's full-stay mean |a|."""
    if len(attrs) == 0:
        raise ConfigurationError("cohort is empty")
    orders = {tuple(a.feature_order) for a in attrs if hasattr(a, "feature_order")}
    if len(orders) > 1:
        raise ConfigurationError("attributions disagree on feature order")
    vecs = np.array([temporal_mean(a) for a in attrs])
    return AggregateVector(vecs.mean(axis=0), "cohort", sizes={"n": len(attrs)})


def relative_attribution(in_s: Sequence, out_s: Sequence) -> AggregateVector:
    """Unit-length cohort average of S minus that of its complement."""
    a = cohort_average(in_s).values
    b = cohort_average(out_s).values
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedMetricError("a cohort has all-zero attributions; RAF undefined")
    return AggregateVector(a / na - b / nb, "raf", sizes={"n_in": len(in_s), "n_out": len(out_s)})


def population_importance(attrs: Sequence) -> AggregateVector:
    avg = cohort_average(attrs)
    v, flagged = normalize_inf(avg.values)
    return AggregateVector(v, "population", flagged, avg.sizes)


def ranking(v) -> np.ndarray:
    """Indices by descending value; ties keep feature order."""
    return np.lexsort((np.arange(len(v)), -np.asarray(v)))


def top_k_report(v, k: int, names: Sequence[str], kinds: Sequence[str] | None = None,
                 method: str = "") -> list[dict]:
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    v = np.asarray(getattr(v, "values", v))
    rows = []
    for rank, j in enumerate(ranking(v)[:k], start=1):
        rows.append({"rank": rank, "feature": names[j], "value": float(v[j]),
                     "kind": kinds[j] if kinds else "", "method": method})
    return rows


def top_k_union(reports: dict[str, list[dict]]) -> list[str]:
    """Features in any method's top-k, in order of first appearance."""
    seen = []
    for rows in reports.values():
        for r in rows:
            if r["feature"] not in seen:
                seen.append(r["feature"])
    return seen


REPORT_COLUMNS = ("rank", "feature", "value", "kind", "method")


def write_report_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": f"{r['value']:.10g}"})


def plot_bars(path, vectors: dict[str, np.ndarray], names: Sequence[str], k: int = 20, title: str = "") -> None:
    """Horizontal bars over the union of each method's top-k features."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    feats = []
    for v in vectors.values():
        for j in ranking(v)[:k]:
            if j not in feats:
                feats.append(int(j))
    height = 0.8 / max(1, len(vectors))
    fig, ax = plt.subplots(figsize=(7, 0.3 * len(feats) + 1.5))
    pos = np.arange(len(feats))
    for m, (method, v) in enumerate(vectors.items()):
        ax.barh(pos + m * height, np.asarray(v)[feats], height=height, label=method)
    ax.set_yticks(pos + height * (len(vectors) - 1) / 2)
    ax.set_yticklabels([names[j] for j in feats])
    ax.invert_yaxis()
    ax.axvline(0, color="black", linewidth=0.5)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)


def load_cohorts(path) -> dict[str, list[str]]:
    import json
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or not all(isinstance(v, list) for v in doc.values()):
        raise ConfigurationError("cohort file must map cohort names to encounter-id lists")
    return {k: [str(e) for e in v] for k, v in doc.items()}
