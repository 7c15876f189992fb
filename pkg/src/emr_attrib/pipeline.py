"""Long-format EMR events -> hourly patient-matrix -> dt-patient-matrix.

Physiologic variables are z-scored with training-set statistics and
forward-filled; exogenous variables (drugs, interventions) are min-max
scaled to [0, 1] with absence meaning zero.  The dt-patient-matrix keeps
column 0 as is and replaces every later column with its change from the
previous hour, so forward-filled stretches become zeros.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

PHYSIOLOGIC = "physiologic"
EXOGENOUS = "exogenous"
EVENT_COLUMNS = ("encounter_id", "timestamp_minutes", "variable", "value")


@dataclass(frozen=True)
class RawEvent:
    encounter_id: str
    timestamp: int
    variable: str
    value: float


@dataclass(frozen=True)
class FeatureDescriptor:
    name: str
    kind: str
    lo: float
    hi: float

    def __post_init__(self):
        if self.kind not in (PHYSIOLOGIC, EXOGENOUS):
            raise ConfigurationError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if not self.lo < self.hi:
            raise ConfigurationError(f"feature {self.name!r}: lo must be < hi")


class FeatureSpec:
    """Ordered feature list shared by matrices, models and attributions."""

    def __init__(self, features: Sequence[FeatureDescriptor]):
        self.features = tuple(features)
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ConfigurationError("feature names must be unique")
        if not names:
            raise ConfigurationError("feature spec is empty")
        self.index = {n: i for i, n in enumerate(names)}

    def __len__(self):
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def kinds(self) -> list[str]:
        return [f.kind for f in self.features]

    def to_json(self) -> list[dict]:
        return [{"name": f.name, "kind": f.kind, "lo": f.lo, "hi": f.hi} for f in self.features]

    @classmethod
    def from_json(cls, doc: list[dict]) -> "FeatureSpec":
        return cls([FeatureDescriptor(d["name"], d["kind"], float(d["lo"]), float(d["hi"])) for d in doc])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature scaling: (mu, sigma) for physiologic, (min, max) for exogenous.

    ``center`` and ``scale`` are aligned with the feature order so that the
    normalized value is always ``(v - center) / scale``.
    """

    names: tuple[str, ...]
    kinds: tuple[str, ...]
    center: np.ndarray
    scale: np.ndarray

    def to_json(self) -> list[dict]:
        out = []
        for name, kind, c, s in zip(self.names, self.kinds, self.center, self.scale):
            if kind == PHYSIOLOGIC:
                out.append({"name": name, "kind": kind, "mu": float(c), "sigma": float(s)})
            else:
                out.append({"name": name, "kind": kind, "min": float(c), "max": float(c + s)})
        return out

    @classmethod
    def from_json(cls, doc: list[dict]) -> "NormalizationStats":
        center, scale = [], []
        for d in doc:
            if d["kind"] == PHYSIOLOGIC:
                center.append(d["mu"])
                scale.append(d["sigma"])
            else:
                center.append(d["min"])
                scale.append(d["max"] - d["min"])
        return cls(tuple(d["name"] for d in doc), tuple(d["kind"] for d in doc),
                   np.array(center, dtype=float), np.array(scale, dtype=float))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class EventTable:
    """Columnar event storage; rows keep their input order."""

    encounter_id: np.ndarray  # object/str
    timestamp: np.ndarray  # int64 minutes
    variable: np.ndarray  # object/str
    value: np.ndarray  # float64

    def __len__(self):
        return len(self.timestamp)

    @classmethod
    def from_events(cls, events: Iterable[RawEvent]) -> "EventTable":
        rows = list(events)
        return cls(
            np.array([e.encounter_id for e in rows], dtype=object),
            np.array([e.timestamp for e in rows], dtype=np.int64),
            np.array([e.variable for e in rows], dtype=object),
            np.array([e.value for e in rows], dtype=np.float64),
        )

    def __iter__(self) -> Iterator[RawEvent]:
        for i in range(len(self)):
            yield RawEvent(self.encounter_id[i], int(self.timestamp[i]), self.variable[i], float(self.value[i]))

    def take(self, idx) -> "EventTable":
        return EventTable(self.encounter_id[idx], self.timestamp[idx], self.variable[idx], self.value[idx])

    def select_encounters(self, ids: Iterable[str]) -> "EventTable":
        keep = np.isin(self.encounter_id, np.array(sorted(set(ids)), dtype=object))
        return self.take(np.flatnonzero(keep))

    def by_encounter(self) -> dict[str, "EventTable"]:
        """Split into per-encounter tables, preserving row order within each."""
        if len(self) == 0:
            return {}
        order = np.argsort(self.encounter_id, kind="stable")
        ids = self.encounter_id[order]
        cuts = np.flatnonzero(ids[1:] != ids[:-1]) + 1
        out = {}
        for chunk in np.split(order, cuts):
            out[str(self.encounter_id[chunk[0]])] = self.take(chunk)
        return out


def as_table(events) -> EventTable:
    return events if isinstance(events, EventTable) else EventTable.from_events(events)


def read_events_csv(path) -> EventTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != EVENT_COLUMNS:
            raise ConfigurationError(f"{path}: expected header {','.join(EVENT_COLUMNS)}")
        enc, ts, var, val = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                enc.append(row[0])
                ts.append(int(row[1]))
                var.append(row[2])
                val.append(float(row[3]))
            except (IndexError, ValueError) as exc:
                raise ConfigurationError(f"{path}:{lineno}: malformed event row") from exc
    table = EventTable(np.array(enc, dtype=object), np.array(ts, dtype=np.int64),
                       np.array(var, dtype=object), np.array(val, dtype=np.float64))
    if np.any(table.timestamp < 0):
        raise ConfigurationError(f"{path}: negative timestamp")
    return table


def write_events_csv(path, events) -> None:
    table = as_table(events)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for e, t, v, x in zip(table.encounter_id, table.timestamp, table.variable, table.value):
            w.writerow((e, int(t), v, repr(float(x))))


def _in_bounds_mask(table: EventTable, spec: FeatureSpec):
    """Return (feature index per row or -1, keep mask)."""
    fidx = np.array([spec.index.get(v, -1) for v in table.variable], dtype=np.int64)
    known = fidx >= 0
    lo = np.array([f.lo for f in spec])
    hi = np.array([f.hi for f in spec])
    safe = np.where(known, fidx, 0)
    inb = known & (table.value >= lo[safe]) & (table.value <= hi[safe])
    return fidx, known, inb


def fit_normalization(events, spec: FeatureSpec) -> NormalizationStats:
    """Fit z-score / min-max statistics on training-split events.

    Out-of-bounds values are discarded first.  Features never observed get
    (mu=0, sigma=1) or (min=0, max=1); a zero spread is replaced by 1.
    """
    table = as_table(events)
    if len(table) == 0:
        raise ConfigurationError("cannot fit normalization on an empty event stream")
    fidx, known, inb = _in_bounds_mask(table, spec)
    if np.any(~known):
        logger.warning("fit_normalization: %d events with unknown variables ignored", int((~known).sum()))
    center = np.zeros(len(spec))
    scale = np.ones(len(spec))
    for j, feat in enumerate(spec):
        vals = table.value[inb & (fidx == j)]
        if vals.size == 0:
            continue
        if feat.kind == PHYSIOLOGIC:
            center[j] = vals.mean()
            sd = vals.std()
            scale[j] = sd if sd > 0 else 1.0
        else:
            lo, hi = vals.min(), vals.max()
            center[j] = lo
            scale[j] = hi - lo if hi > lo else 1.0
    return NormalizationStats(tuple(spec.names), tuple(spec.kinds), center, scale)


@dataclass
class PatientMatrix:
    encounter_id: str
    values: np.ndarray  # N x T
    label: bool | None = None
    rejected: dict = field(default_factory=dict)

    @property
    def length_hours(self) -> int:
        return self.values.shape[1]


@dataclass
class DtPatientMatrix:
    encounter_id: str
    values: np.ndarray  # N x T
    label: bool | None = None

    @property
    def length_hours(self) -> int:
        return self.values.shape[1]


def build_patient_matrix(events, stats: NormalizationStats, spec: FeatureSpec,
                         label: bool | None = None) -> PatientMatrix:
    """Pivot one encounter's events onto an hourly N x T grid.

    The grid starts at the hour containing the first event and ends at the
    hour containing the last one.  Within an hour the last observation wins.
    """
    table = as_table(events)
    if len(table) == 0:
        raise ConfigurationError("encounter has no events")
    ids = set(table.encounter_id.tolist())
    if len(ids) != 1:
        raise ConfigurationError(f"events span {len(ids)} encounters")
    enc_id = str(next(iter(ids)))

    fidx, known, inb = _in_bounds_mask(table, spec)
    rejected = Counter()
    if np.any(~known):
        rejected["unknown_variable"] = int((~known).sum())
        logger.warning("%s: rejected %d events with unknown variables", enc_id, rejected["unknown_variable"])
    n_oob = int((known & ~inb).sum())
    if n_oob:
        rejected["out_of_bounds"] = n_oob

    hours = table.timestamp // 60
    start = int(hours.min())
    T = int(hours.max()) - start + 1
    if T < 1:
        raise ConfigurationError(f"{enc_id}: zero-length hourly grid")
    N = len(spec)

    # last observation per (feature, hour): stable sort by time, later rows overwrite
    keep = np.flatnonzero(inb)
    keep = keep[np.argsort(table.timestamp[keep], kind="stable")]
    grid = np.full((N, T), np.nan)
    grid[fidx[keep], hours[keep] - start] = table.value[keep]

    normed = (grid - stats.center[:, None]) / stats.scale[:, None]
    exo = np.array([k == EXOGENOUS for k in spec.kinds])
    normed[exo] = np.clip(normed[exo], 0.0, 1.0)

    values = _forward_fill(normed)
    values[np.isnan(values)] = 0.0  # z=0 is the training mean; 0 for absent therapy
    return PatientMatrix(enc_id, values, label, dict(rejected))


def _forward_fill(a: np.ndarray) -> np.ndarray:
    N, T = a.shape
    idx = np.where(~np.isnan(a), np.arange(T)[None, :], 0)
    np.maximum.accumulate(idx, axis=1, out=idx)
    out = a[np.arange(N)[:, None], idx]
    return out


def to_dt_matrix(pm: PatientMatrix) -> DtPatientMatrix:
    v = np.asarray(pm.values, dtype=float)
    if v.ndim != 2 or v.shape[1] < 1:
        raise ShapeError("patient matrix must be N x T with T >= 1")
    dt = np.empty_like(v)
    dt[:, 0] = v[:, 0]
    dt[:, 1:] = v[:, 1:] - v[:, :-1]
    return DtPatientMatrix(pm.encounter_id, dt, pm.label)


def from_dt_matrix(dt: DtPatientMatrix) -> PatientMatrix:
    return PatientMatrix(dt.encounter_id, np.cumsum(dt.values, axis=1), dt.label)


def build_dataset(events, stats: NormalizationStats, spec: FeatureSpec,
                  labels: dict | None = None) -> dict[str, DtPatientMatrix]:
    """dt-patient-matrices for every encounter in ``events``, keyed by id."""
    out = {}
    rejected = Counter()
    for enc_id, tab in sorted(as_table(events).by_encounter().items()):
        pm = build_patient_matrix(tab, stats, spec, None if labels is None else labels.get(enc_id))
        rejected.update(pm.rejected)
        out[enc_id] = to_dt_matrix(pm)
    if rejected:
        logger.warning("rejected events: %s", dict(rejected))
    return out
