"""Patient cohorts: synthetic generation, CSV + manifest storage, group splits."""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError, IntegrityError
from .sigproc import (
    CHANNEL_ORDER,
    TARGET_RATE,
    EpochSet,
    PatientRecord,
    RawChannel,
    make_epochs,
    merge_annotations,
    preprocess_record,
    resample_5hz,
    resample_annotation,
)

COHORT_SCHEMA = 1
CSV_HEADER = ("t", *CHANNEL_ORDER, "annot")


@dataclass
class SynthConfig:
    patients: int = 35
    duration_s: float = 600.0
    seed: int = 7
    rate_hz: float = TARGET_RATE
    resp_freq_hz: tuple = (0.2, 0.35)
    event_rate_per_hour: float = 20.0
    event_duration_s: tuple = (10.0, 60.0)
    min_event_gap_s: float = 15.0
    attenuation: float = 0.1
    desat_depth: tuple = (5.0, 15.0)
    desat_delay_s: tuple = (10.0, 20.0)
    hr_excursion_bpm: float = 10.0
    resp_noise: float = 0.35
    hr_noise: float = 3.0
    sao2_noise: float = 1.0
    artifact_rate: float = 0.002

    def __post_init__(self):
        for name in ("resp_freq_hz", "event_duration_s", "desat_depth", "desat_delay_s"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if int(self.patients) < 1:
            raise ConfigurationError(f"patients must be >= 1, got {self.patients}")
        if self.duration_s < 120:
            raise ConfigurationError(f"duration must be >= 120 s, got {self.duration_s}")
        if self.rate_hz <= 0:
            raise ConfigurationError("sample rate must be positive")
        for name in ("resp_freq_hz", "event_duration_s", "desat_depth", "desat_delay_s"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigurationError(f"{name} must be a positive ordered range, got {(lo, hi)}")
        if self.event_rate_per_hour < 0 or self.min_event_gap_s < 0:
            raise ConfigurationError("event rate and gap must be non-negative")
        if not 0 < self.attenuation <= 1:
            raise ConfigurationError("attenuation must lie in (0, 1]")
        if min(self.resp_noise, self.hr_noise, self.sao2_noise, self.artifact_rate, self.hr_excursion_bpm) < 0:
            raise ConfigurationError("noise levels, artifact rate and HR excursion must be non-negative")

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


def _rng(seed, name):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


def place_events(rng, cfg):
    """Non-overlapping (start, end) intervals in seconds, separated by at least the minimum gap."""
    expected = cfg.event_rate_per_hour * cfg.duration_s / 3600.0
    n = int(rng.poisson(expected)) if expected > 0 else 0
    if n == 0:
        return []
    durations = rng.uniform(*cfg.event_duration_s, size=n)
    margin = cfg.min_event_gap_s
    slack = cfg.duration_s - durations.sum() - margin * (n + 1)
    if slack < 0:
        raise ConfigurationError(
            f"infeasible event packing: {n} events of {durations.sum():.0f} s in {cfg.duration_s:.0f} s")
    cuts = np.sort(rng.uniform(0, slack, size=n))
    starts = margin + cuts + np.r_[0, np.cumsum(durations + margin)[:-1]]
    return [(float(s), float(s + d)) for s, d in zip(starts, durations)]


def _smooth_noise(rng, n, rate, timescale_s):
    k = max(1, int(timescale_s * rate))
    white = rng.standard_normal(n + k)
    sm = np.convolve(white, np.ones(k) / math.sqrt(k), mode="valid")[:n]
    return sm


def _ramp(t, start, end, rise_s):
    """1 inside [start, end], linear ramps of ``rise_s`` at both edges."""
    up = np.clip((t - start) / rise_s + 1.0, 0.0, 1.0)
    down = np.clip((end - t) / rise_s + 1.0, 0.0, 1.0)
    return np.minimum(up, down)


def synthesize_patient(cfg, index):
    """One synthetic patient in raw units plus its injected event list."""
    rng = _rng(cfg.seed, f"patient{index}")
    rate = cfg.rate_hz
    n = int(round(cfg.duration_s * rate))
    t = np.arange(n) / rate
    events = place_events(rng, cfg)

    # breathing: drifting frequency / amplitude, thoracic belt phase-shifted
    f_lo, f_hi = cfg.resp_freq_hz
    f0 = rng.uniform(f_lo, f_hi)
    drift = _smooth_noise(rng, n, rate, 60.0)
    freq = np.clip(f0 + 0.02 * drift, f_lo, f_hi)
    phase = 2 * np.pi * np.cumsum(freq) / rate
    amp = 1.0 + 0.15 * _smooth_noise(rng, n, rate, 90.0)
    envelope = np.ones(n)
    desat = np.zeros(n)
    hr_shift = np.zeros(n)
    for start, end in events:
        inside = _ramp(t, start, end, 2.0)
        envelope *= 1.0 - (1.0 - cfg.attenuation) * inside
        recovery = _ramp(t, end + 1.0, end + 10.0, 2.0)
        envelope *= 1.0 + 0.5 * recovery
        delay = rng.uniform(*cfg.desat_delay_s)
        depth = rng.uniform(*cfg.desat_depth)
        fall = np.clip((t - start - delay) / max(end - start, 1.0), 0.0, 1.0)
        rise = np.clip((t - end - delay) / 15.0, 0.0, 1.0)
        desat += depth * fall * (1.0 - rise)
        hr_shift += -0.5 * cfg.hr_excursion_bpm * _ramp(t, start + 3.0, end, 3.0)
        hr_shift += cfg.hr_excursion_bpm * _ramp(t, end + 2.0, end + 12.0, 3.0)

    belt_scale = rng.uniform(0.5, 2.0, size=2)
    abd = belt_scale[0] * amp * envelope * np.sin(phase)
    tho = belt_scale[1] * amp * envelope * np.sin(phase + rng.uniform(0.2, 0.8))
    abd += belt_scale[0] * (cfg.resp_noise * rng.standard_normal(n) + 0.1 * _smooth_noise(rng, n, rate, 120.0))
    tho += belt_scale[1] * (cfg.resp_noise * rng.standard_normal(n) + 0.1 * _smooth_noise(rng, n, rate, 120.0))

    hr = (rng.uniform(58, 75) + hr_shift + 2.0 * _smooth_noise(rng, n, rate, 60.0)
          + cfg.hr_noise * rng.standard_normal(n))
    sao2 = np.minimum(rng.uniform(94, 97.5) - desat + cfg.sao2_noise * rng.standard_normal(n), 100.0)

    # sensor dropouts read as zero, detected later as out-of-range artifacts
    for sig in (hr, sao2):
        n_art = rng.binomial(n, cfg.artifact_rate) if cfg.artifact_rate > 0 else 0
        for s in rng.integers(0, n, size=n_art):
            sig[s:s + int(rng.integers(1, 3 * int(rate) + 1))] = 0.0

    osa = np.zeros(n, dtype=np.int8)
    for start, end in events:
        osa[(t >= start) & (t < end)] = 1
    annotation = merge_annotations(osa, np.zeros(n), np.zeros(n))
    signals = {"abdores": abd, "thorres": tho, "hr": hr, "sao2": sao2}
    return PatientRecord(f"p{index:04d}", signals, annotation, rate), events


def generate_synthetic(config=None):
    """Deterministic list of raw-valued synthetic patient records."""
    cfg = config or SynthConfig()
    return [synthesize_patient(cfg, i)[0] for i in range(int(cfg.patients))]


# --------------------------------------------------------------------------
# CSV + manifest storage


def save_records(records, path, seed=None, synth_config=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rates = {r.rate for r in records}
    if len(rates) != 1:
        raise IntegrityError(f"records have mixed sample rates {sorted(rates)}")
    rate = rates.pop()
    entries = []
    for rec in records:
        fname = f"{rec.patient_id}.csv"
        with open(path / fname, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            cols = [rec.signals[c] for c in CHANNEL_ORDER]
            for i in range(len(rec)):
                w.writerow([f"{i / rate:.17g}", *(f"{c[i]:.17g}" for c in cols), int(rec.annotation[i])])
        entries.append({"id": rec.patient_id, "file": fname, "n_samples": len(rec)})
    manifest = {
        "schema_version": COHORT_SCHEMA,
        "sample_rate_hz": rate,
        "patients": entries,
        "seed": seed,
        "synth_config": synth_config.to_dict() if isinstance(synth_config, SynthConfig) else synth_config,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path / "manifest.json"


def read_manifest(path):
    mpath = Path(path) / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise DataFormatError("missing manifest.json", mpath) from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid JSON: {exc.msg}", mpath, exc.lineno) from None
    for key in ("schema_version", "sample_rate_hz", "patients"):
        if key not in manifest:
            raise DataFormatError(f"manifest lacks field {key!r}", mpath)
    if manifest["schema_version"] != COHORT_SCHEMA:
        raise DataFormatError(f"unsupported schema version {manifest['schema_version']}", mpath)
    return manifest


def _read_csv(fpath):
    with open(fpath, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file", fpath, 1) from None
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise DataFormatError(f"missing column {missing[0]!r}", fpath, 1)
        cols = [header.index(c) for c in CSV_HEADER]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise IntegrityError(f"{fpath}:{lineno}: {len(row)} fields, header has {len(header)}")
            try:
                rows.append([float(row[c]) for c in cols])
            except ValueError:
                raise DataFormatError("non-numeric value", fpath, lineno) from None
            if rows[-1][-1] not in (0.0, 1.0):
                raise DataFormatError("annot must be 0 or 1", fpath, lineno)
    return np.array(rows, dtype=np.float64).reshape(-1, len(CSV_HEADER))


def load_records(path):
    """Read a cohort directory; records not at 5 Hz are resampled on load."""
    path = Path(path)
    manifest = read_manifest(path)
    rate = float(manifest["sample_rate_hz"])
    records = []
    for entry in manifest["patients"]:
        data = _read_csv(path / entry["file"])
        if "n_samples" in entry and len(data) != entry["n_samples"]:
            raise IntegrityError(f"{entry['file']}: {len(data)} rows, manifest says {entry['n_samples']}")
        signals = {c: data[:, i + 1] for i, c in enumerate(CHANNEL_ORDER)}
        annot = data[:, -1].astype(np.int8)
        if rate != TARGET_RATE:
            res = {c: resample_5hz(RawChannel(c, s, rate)) for c, s in signals.items()}
            n = min(len(r.samples) for r in res.values())
            signals = {c: r.samples[:n] for c, r in res.items()}
            annot = resample_annotation(annot, rate, n)
        records.append(PatientRecord(entry["id"], signals, annot, TARGET_RATE))
    return records


# --------------------------------------------------------------------------
# groups and splits


@dataclass
class Group:
    group_id: int
    patients: list
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)


def make_groups(records, n_groups, split_fracs=(0.3, 0.2, 0.5), group_size=None, split_sizes=None):
    """Sequential, non-overlapping patient groups with sequential splits.

    Train and validation sizes are ``floor(frac * group_size)``; the
    remainder goes to test.  ``split_sizes`` gives explicit counts instead.
    """
    ids = [r.patient_id if hasattr(r, "patient_id") else str(r) for r in records]
    if n_groups < 1:
        raise ConfigurationError("need at least one group")
    if split_sizes is not None:
        size = sum(split_sizes)
        if group_size is not None and group_size != size:
            raise ConfigurationError(f"split sizes {split_sizes} do not add up to group size {group_size}")
        n_train, n_val = split_sizes[0], split_sizes[1]
    else:
        size = group_size or len(ids) // n_groups
        if abs(sum(split_fracs) - 1.0) > 1e-9 or min(split_fracs) < 0:
            raise ConfigurationError(f"split fractions {split_fracs} must be non-negative and sum to 1")
        n_train = int(math.floor(split_fracs[0] * size + 1e-9))
        n_val = int(math.floor(split_fracs[1] * size + 1e-9))
    if size < 1 or size * n_groups > len(ids):
        raise ConfigurationError(f"{len(ids)} patients cannot fill {n_groups} groups of {size}")
    groups = []
    for g in range(n_groups):
        members = ids[g * size:(g + 1) * size]
        groups.append(Group(g, members, members[:n_train], members[n_train:n_train + n_val],
                            members[n_train + n_val:]))
    return groups


def epoch_sets(records, group, preprocessed=False):
    """Preprocess the group's patients and return (train, val, test) EpochSets."""
    by_id = {r.patient_id: r for r in records}
    cache = {}

    def build(ids):
        sets = []
        for pid in ids:
            if pid not in cache:
                rec = by_id[pid] if preprocessed else preprocess_record(by_id[pid])
                cache[pid] = make_epochs(rec)
            sets.append(cache[pid])
        return EpochSet.concat(sets)

    return build(group.train), build(group.val), build(group.test)
