"""Attribution matrices and their on-disk archive."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import dump_json, load_json, read_matrix, with_ext, write_matrix
from .errors import ShapeError

METHODS = ("lbm", "kshap")


@dataclass
class Attribution:
    """N x T contribution matrix for one encounter.

    ``meta`` is written to the manifest and must be deterministic; run
    timings live in ``timing`` and go to a separate sidecar file.
    """

    encounter_id: str
    method: str
    values: np.ndarray
    feature_order: list[str]
    meta: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ShapeError(f"unknown attribution method {self.method!r}")
        if self.values.ndim != 2 or self.values.shape[0] != len(self.feature_order):
            raise ShapeError("attribution rows must match feature order")

    @property
    def shape(self):
        return self.values.shape


def archive_stem(out_dir, encounter_id: str, method: str) -> Path:
    return Path(out_dir) / f"{encounter_id}.{method}"


def save_attribution(attr: Attribution, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = archive_stem(out_dir, attr.encounter_id, attr.method)
    path = write_matrix(stem, attr.values, attr.feature_order, encounter_id=attr.encounter_id,
                        method=attr.method, **attr.meta)
    if attr.timing:
        dump_json(with_ext(stem, ".timing.json"), attr.timing)
    return path


def load_attribution(manifest_path) -> Attribution:
    values, meta = read_matrix(manifest_path)
    core = {"n_features", "t_hours", "feature_order", "label", "payload", "dtype", "encounter_id", "method"}
    mp = Path(manifest_path)
    timing_path = mp.with_name(mp.name[:-len(".json")] + ".timing.json")
    timing = load_json(timing_path) if timing_path.exists() else {}
    return Attribution(meta["encounter_id"], meta["method"], values, meta["feature_order"],
                       {k: v for k, v in meta.items() if k not in core}, timing)


def load_attributions(directory, method: str) -> dict[str, Attribution]:
    """All archives of one method in ``directory``, keyed by encounter id."""
    out = {}
    for path in sorted(Path(directory).glob(f"*.{method}.json")):
        if path.name.endswith(".timing.json"):
            continue
        a = load_attribution(path)
        out[a.encounter_id] = a
    return out
