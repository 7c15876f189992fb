"""Seeded synthetic ICU cohorts with planted mortality drivers.

Every encounter starts from a baseline state whose severity (signed
baseline of the driver variables) raises its chance of an excursion, and
carries autocorrelated noise in each physiologic variable
(in z-space around a patient baseline) plus sparse background therapies.
A fraction of encounters receive a *driver excursion*: the planted driver
variables ramp away from baseline over a few hours and stay there.  Latent
risk is a logistic function of the signed driver excursions, and the
outcome is drawn from the risk at the final hour.  Transient "decoy"
excursions in non-driver variables make large changes alone uninformative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import ConfigurationError
from .pipeline import EXOGENOUS, PHYSIOLOGIC, EventTable, FeatureDescriptor, FeatureSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthFeature:
    name: str
    kind: str
    mean: float  # physiologic: population mean; exogenous: 0
    sd: float  # physiologic: population sd; exogenous: maximum dose
    lo: float
    hi: float
    interval: int = 1  # hours between routine measurements


DEFAULT_FEATURES = (
    SynthFeature("HeartRate", PHYSIOLOGIC, 100, 20, 0, 300),
    SynthFeature("SystolicBP", PHYSIOLOGIC, 100, 15, 20, 250),
    SynthFeature("DiastolicBP", PHYSIOLOGIC, 55, 12, 10, 200),
    SynthFeature("MeanArterialBP", PHYSIOLOGIC, 70, 12, 15, 220),
    SynthFeature("RespiratoryRate", PHYSIOLOGIC, 25, 8, 0, 120),
    SynthFeature("PulseOximetry", PHYSIOLOGIC, 96, 3, 40, 100),
    SynthFeature("Temperature", PHYSIOLOGIC, 37, 0.8, 25, 45),
    SynthFeature("EtCO2", PHYSIOLOGIC, 38, 6, 0, 150),
    SynthFeature("ABG_pH", PHYSIOLOGIC, 7.38, 0.06, 6.5, 8.0, 4),
    SynthFeature("ABG_PCO2", PHYSIOLOGIC, 42, 8, 5, 200, 4),
    SynthFeature("ABG_HCO3", PHYSIOLOGIC, 24, 3, 2, 60, 4),
    SynthFeature("Lactate", PHYSIOLOGIC, 1.8, 1.2, 0, 30, 4),
    SynthFeature("Glucose", PHYSIOLOGIC, 110, 30, 10, 1500, 6),
    SynthFeature("Potassium", PHYSIOLOGIC, 4.0, 0.5, 1, 10, 8),
    SynthFeature("WBC", PHYSIOLOGIC, 10, 4, 0, 200, 12),
    SynthFeature("Creatinine", PHYSIOLOGIC, 0.5, 0.3, 0, 20, 12),
    SynthFeature("Dopamine", EXOGENOUS, 0, 20, 0, 50),
    SynthFeature("Epinephrine", EXOGENOUS, 0, 1, 0, 5),
    SynthFeature("Norepinephrine", EXOGENOUS, 0, 1, 0, 5),
    SynthFeature("Milrinone", EXOGENOUS, 0, 1, 0, 5),
    SynthFeature("Vasopressin", EXOGENOUS, 0, 0.01, 0, 0.1),
    SynthFeature("Insulin", EXOGENOUS, 0, 0.2, 0, 5),
    SynthFeature("Furosemide", EXOGENOUS, 0, 1, 0, 10),
    SynthFeature("Vancomycin", EXOGENOUS, 0, 15, 0, 100),
)

# name -> direction of the harmful excursion
DEFAULT_DRIVERS = {"HeartRate": 1, "MeanArterialBP": -1, "PulseOximetry": -1, "Lactate": 1, "Epinephrine": 1}
DEFAULT_COHORTS = {
    "sepsis": {"fraction": 0.25, "event_multiplier": 2.0, "drivers": {"Temperature": 1, "WBC": 1}},
    "respiratory": {"fraction": 0.2, "event_multiplier": 1.0, "drivers": {"EtCO2": 1, "RespiratoryRate": 1}},
}


@dataclass(frozen=True)
class SynthConfig:
    n_encounters: int = 1000
    features: tuple[SynthFeature, ...] = DEFAULT_FEATURES
    drivers: dict = field(default_factory=lambda: dict(DEFAULT_DRIVERS))
    cohorts: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_COHORTS.items()})
    mortality: float = 0.04
    min_hours: int = 24
    max_hours: int = 72
    risk_bias: float = -7.0
    risk_gain: float = 11.0
    excursion_z: float = 3.0  # physiologic driver excursion, in population sd
    excursion_dose: float = 0.6  # exogenous driver excursion, fraction of max dose
    ramp_hours: int = 6
    noise_sd: float = 0.5
    noise_ar: float = 0.8
    baseline_sd: float = 0.5
    decoy_rate: float = 0.3
    therapy_rate: float = 0.2
    severity_gain: float = 1.5  # log-odds of an excursion per sd of baseline severity
    missing_rate: float = 0.1
    artifact_rate: float = 0.0005
    ablate_drivers: bool = False
    seed: int = 0

    def __post_init__(self):
        names = [f.name for f in self.features]
        if not self.drivers:
            raise ConfigurationError("driver set must be non-empty")
        for d in list(self.drivers) + [n for c in self.cohorts.values() for n in c["drivers"]]:
            if d not in names:
                raise ConfigurationError(f"unknown driver feature {d!r}")
        if not 0 < self.mortality < 1:
            raise ConfigurationError("mortality fraction must lie in (0, 1)")
        if self.min_hours < 1 or self.max_hours < self.min_hours:
            raise ConfigurationError("invalid stay-length bounds")
        if self.min_hours < self.ramp_hours + 10:
            raise ConfigurationError("min_hours too short for an excursion window")
        if sum(c["fraction"] for c in self.cohorts.values()) >= 1:
            raise ConfigurationError("cohort fractions must sum to < 1")

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec([FeatureDescriptor(f.name, f.kind, f.lo, f.hi) for f in self.features])

    def with_overrides(self, **kw) -> "SynthConfig":
        return replace(self, **kw)


@dataclass
class GroundTruth:
    labels: dict[str, bool]
    windows: dict[str, list[int] | None]
    cohorts: dict[str, list[str]]
    drivers: list[str]
    cohort_drivers: dict[str, list[str]]
    risk: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {
            "labels": {k: bool(v) for k, v in self.labels.items()},
            "windows": self.windows,
            "cohorts": self.cohorts,
            "drivers": self.drivers,
            "cohort_drivers": self.cohort_drivers,
        }


def _event_probability(cfg: SynthConfig) -> float:
    """Excursion probability that yields the target mortality on average."""
    r_lo = expit(cfg.risk_bias)
    r_hi = expit(cfg.risk_bias + cfg.risk_gain)
    p = (cfg.mortality - r_lo) / (r_hi - r_lo)
    if not 0 < p < 1:
        raise ConfigurationError(
            f"mortality {cfg.mortality} unreachable with risk range [{r_lo:.4f}, {r_hi:.4f}]")
    return p


def _calibrate_event_probability(mean_p: float, shift: np.ndarray) -> np.ndarray:
    """Per-encounter probabilities sigmoid(c + shift) whose mean is ``mean_p``."""
    c = brentq(lambda c: expit(c + shift).mean() - mean_p, -50.0, 50.0)
    return expit(c + shift)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def encounter_ids(n: int) -> list[str]:
    width = len(str(n - 1))
    return [f"E{i:0{width}d}" for i in range(n)]


def generate_cohort(cfg: SynthConfig = SynthConfig()):
    """Return (EventTable, labels dict, GroundTruth); deterministic in ``cfg.seed``."""
    p_event = _event_probability(cfg)
    feats = cfg.features
    names = [f.name for f in feats]
    fi = {n: i for i, n in enumerate(names)}
    phys = [i for i, f in enumerate(feats) if f.kind == PHYSIOLOGIC]
    exo = [i for i, f in enumerate(feats) if f.kind == EXOGENOUS]
    planted = set(cfg.drivers) | {n for c in cfg.cohorts.values() for n in c["drivers"]}
    decoy_pool = [i for i in phys if names[i] not in planted]
    therapy_pool = [i for i in exo if names[i] not in planted]

    ids = encounter_ids(cfg.n_encounters)
    root = np.random.SeedSequence(cfg.seed)
    assign_rng = np.random.default_rng(root.spawn(1)[0])
    cohort_names = list(cfg.cohorts)
    fracs = [cfg.cohorts[c]["fraction"] for c in cohort_names]
    member = assign_rng.choice(len(cohort_names) + 1, size=cfg.n_encounters, p=fracs + [1 - sum(fracs)])
    mult = np.array([cfg.cohorts[c].get("event_multiplier", 1.0) for c in cohort_names] + [1.0])

    # first draws per encounter: stay length and baseline state
    sub_seeds = root.spawn(cfg.n_encounters + 1)[1:]
    rngs = [np.random.default_rng(s) for s in sub_seeds]
    stays = [int(r.integers(cfg.min_hours, cfg.max_hours + 1)) for r in rngs]
    bases = np.array([r.normal(0, cfg.baseline_sd, len(feats)) for r in rngs])
    phys_drivers = [(fi[n], sgn) for n, sgn in cfg.drivers.items() if feats[fi[n]].kind == PHYSIOLOGIC]
    severity = np.zeros(cfg.n_encounters)
    if phys_drivers:
        severity = sum(sgn * bases[:, j] for j, sgn in phys_drivers) / (cfg.baseline_sd * np.sqrt(len(phys_drivers)))
    if cfg.ablate_drivers:
        severity = np.zeros_like(severity)  # no driver information anywhere in the record
    p_enc = _calibrate_event_probability(p_event, cfg.severity_gain * severity + np.log(mult[member]))

    enc_col, ts_col, var_col, val_col = [], [], [], []
    labels, windows, risks = {}, {}, {}
    cohorts = {c: [] for c in cohort_names}
    for k, eid in enumerate(ids):
        rng = rngs[k]
        cohort = cohort_names[member[k]] if member[k] < len(cohort_names) else None
        if cohort:
            cohorts[cohort].append(eid)
        T = stays[k]
        hours = np.arange(T)

        z = np.empty((len(feats), T))
        base = bases[k]
        eps = rng.normal(0, cfg.noise_sd, (len(feats), T))
        ar = np.zeros(len(feats))
        for t in range(T):
            ar = cfg.noise_ar * ar + np.sqrt(1 - cfg.noise_ar ** 2) * eps[:, t]
            z[:, t] = base + ar
        dose = np.zeros((len(feats), T))

        # background therapy and decoys
        if therapy_pool and rng.random() < cfg.therapy_rate:
            j = therapy_pool[rng.integers(len(therapy_pool))]
            a = int(rng.integers(0, T - 2))
            b = int(rng.integers(a + 1, T))
            dose[j, a:b] = feats[j].sd * rng.uniform(0.1, 0.5)
        if decoy_pool and rng.random() < cfg.decoy_rate:
            j = decoy_pool[rng.integers(len(decoy_pool))]
            c0 = rng.uniform(0, T)
            width = rng.uniform(3, 8)
            z[j] += rng.choice([-1, 1]) * 2.5 * np.exp(-0.5 * ((hours - c0) / width) ** 2)

        active = dict(cfg.drivers)
        if cohort:
            active.update(cfg.cohorts[cohort]["drivers"])
        event = rng.random() < p_enc[k]
        exc = np.zeros(T)
        window = None
        if event:
            t_i = int(rng.integers(max(1, T - cfg.ramp_hours - 14), T - cfg.ramp_hours - 2 + 1))
            t_f = t_i + cfg.ramp_hours
            exc = _smoothstep((hours - t_i) / cfg.ramp_hours)
            window = [t_i, t_f]

        # risk follows the realized (signed, normalized) driver deviations
        drive = np.zeros(T)
        for name, sign in active.items():
            j = fi[name]
            if feats[j].kind == PHYSIOLOGIC:
                drive += sign * (z[j] - base[j] + cfg.excursion_z * exc * sign) / cfg.excursion_z
            else:
                drive += exc
        drive /= len(active)
        risk = expit(cfg.risk_bias + cfg.risk_gain * drive)
        died = bool(rng.random() < risk[-1])

        if event and not cfg.ablate_drivers:
            for name, sign in active.items():
                j = fi[name]
                if feats[j].kind == PHYSIOLOGIC:
                    z[j] += sign * cfg.excursion_z * exc
                else:
                    dose[j] = np.maximum(dose[j], cfg.excursion_dose * feats[j].sd * exc)

        # emit events
        for j, f in enumerate(feats):
            if f.kind == PHYSIOLOGIC:
                phase = int(rng.integers(f.interval)) if f.interval > 1 else 0
                first = 0 if f.interval == 1 else int(rng.integers(0, min(T, 3 * f.interval)))
                due = (hours >= first) & ((hours - phase) % f.interval == 0)
                if f.interval == 1:
                    due &= rng.random(T) >= cfg.missing_rate
                    due[0] = due[-1] = True  # anchor the hourly grid
                raw = f.mean + f.sd * z[j]
                for t in np.flatnonzero(due):
                    v = float(np.clip(raw[t], f.lo, f.hi))
                    if rng.random() < cfg.artifact_rate:
                        v = f.hi + abs(f.hi - f.lo)  # implausible charting artifact
                    enc_col.append(eid)
                    ts_col.append(int(t * 60 + rng.integers(0, 60)))
                    var_col.append(f.name)
                    val_col.append(round(v, 4))
            else:
                d = np.round(dose[j], 6)
                prev = 0.0
                for t in range(T):
                    if d[t] != prev:
                        enc_col.append(eid)
                        ts_col.append(int(t * 60 + rng.integers(0, 60)))
                        var_col.append(f.name)
                        val_col.append(float(d[t]))
                        prev = d[t]

        labels[eid] = died
        windows[eid] = window if died else None
        risks[eid] = risk

    table = EventTable(np.array(enc_col, dtype=object), np.array(ts_col, dtype=np.int64),
                       np.array(var_col, dtype=object), np.array(val_col, dtype=np.float64))
    # chronological within encounter, encounters in id order
    order = np.lexsort((table.timestamp, table.encounter_id))
    table = table.take(order)
    truth = GroundTruth(
        labels=labels,
        windows=windows,
        cohorts=cohorts,
        drivers=list(cfg.drivers),
        cohort_drivers={c: list(cfg.cohorts[c]["drivers"]) for c in cohort_names},
        risk=risks,
    )
    logger.info("generated %d encounters, %d events, mortality %.3f",
                cfg.n_encounters, len(table), np.mean(list(labels.values())))
    return table, labels, truth


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    exact = np.asarray(fractions, dtype=float) * n
    counts = np.floor(exact).astype(int)
    rem = n - counts.sum()
    for i in np.argsort(-(exact - counts), kind="stable")[:rem]:
        counts[i] += 1
    return counts.tolist()


def split_cohort(encounter_ids: Sequence[str], labels: dict, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Label-stratified, encounter-disjoint partition into len(fractions) sets.

    Split sizes follow the largest-remainder rounding of ``fractions``;
    every split receives at least one encounter of each class.
    """
    fractions = tuple(float(f) for f in fractions)
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) <= 0:
        raise ConfigurationError("split fractions must be positive and sum to 1")
    ids = sorted(set(encounter_ids))
    k = len(fractions)
    pos = [e for e in ids if labels[e]]
    neg = [e for e in ids if not labels[e]]
    if len(pos) < k or len(neg) < k:
        raise ConfigurationError("too few encounters of one class to stratify every split")
    totals = _largest_remainder(len(ids), fractions)
    p_alloc = [max(1, c) for c in _largest_remainder(len(pos), fractions)]
    while sum(p_alloc) > len(pos):
        p_alloc[int(np.argmax(p_alloc))] -= 1
    n_alloc = [t - p for t, p in zip(totals, p_alloc)]
    if min(n_alloc) < 1:
        raise ConfigurationError("cannot place a negative encounter in every split")
    rng = np.random.default_rng(seed)
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    out, pi, ni = [], 0, 0
    for p, n in zip(p_alloc, n_alloc):
        out.append(sorted(pos[pi:pi + p] + neg[ni:ni + n]))
        pi += p
        ni += n
    return tuple(out)
