"""On-disk formats: JSON manifest + raw little-endian binary payload."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ShapeError

F64 = np.dtype("<f8")
F32 = np.dtype("<f4")


def dump_json(path, doc) -> None:
    # sort_keys keeps reruns byte-identical
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def with_ext(stem, ext: str) -> Path:
    """``stem`` plus ``ext`` without replacing an existing dotted part."""
    stem = Path(stem)
    return stem.with_name(stem.name + ext)


def write_matrix(stem, values: np.ndarray, feature_order, label=None, **extra) -> Path:
    """Write ``<stem>.json`` + ``<stem>.bin`` (row-major float64).

    Returns the manifest path.  ``extra`` keys are merged into the manifest.
    """
    stem = Path(stem)
    values = np.ascontiguousarray(values, dtype=F64)
    if values.ndim != 2 or values.shape[0] != len(feature_order):
        raise ShapeError("matrix rows must match feature_order")
    payload = with_ext(stem, ".bin")
    payload.write_bytes(values.tobytes(order="C"))
    manifest = {
        "n_features": int(values.shape[0]),
        "t_hours": int(values.shape[1]),
        "feature_order": list(feature_order),
        "label": None if label is None else bool(label),
        "payload": payload.name,
        "dtype": "float64-le",
    }
    manifest.update(extra)
    path = with_ext(stem, ".json")
    dump_json(path, manifest)
    return path


def read_matrix(manifest_path) -> tuple[np.ndarray, dict]:
    manifest_path = Path(manifest_path)
    meta = load_json(manifest_path)
    raw = (manifest_path.parent / meta["payload"]).read_bytes()
    n, t = meta["n_features"], meta["t_hours"]
    values = np.frombuffer(raw, dtype=F64)
    if values.size != n * t:
        raise ShapeError(f"{manifest_path}: payload has {values.size} values, expected {n * t}")
    return values.reshape(n, t).astype(np.float64), meta


def write_matrix_csv(path, values: np.ndarray, feature_order) -> None:
    """Debug view: one row per feature, one column per hour."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature"] + [str(t) for t in range(values.shape[1])])
        for name, row in zip(feature_order, values):
            w.writerow([name] + [repr(float(v)) for v in row])
