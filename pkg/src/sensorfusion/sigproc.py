"""Preprocessing of polysomnography channels into labeled 30 s windows.

Pipeline (fixed order)::

    resample to 5 Hz
      -> abdores / thorres: zero-phase Butterworth low-pass, 5-95 percentile scaling
      -> hr / sao2: interpolate artifacts, fixed-range scaling
    merge OSA / CSA / hypopnea tracks
    cut 150-sample windows every 5 samples
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter, lfilter_zi

from .errors import DimensionError, SignalError

TARGET_RATE = 5.0
WINDOW_SECONDS = 30
STRIDE_SECONDS = 1
RESPIRATORY = ("abdores", "thorres")
CHANNEL_ORDER = ("abdores", "thorres", "hr", "sao2")

# physiologically impossible readings are treated as sensor artifacts
ARTIFACT_LIMITS = {"hr": (20.0, 250.0), "sao2": (50.0, 101.0)}


@dataclass
class RawChannel:
    name: str
    samples: np.ndarray
    rate: float
    missing: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.missing is None:
            self.missing = ~np.isfinite(self.samples)
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.missing.shape != self.samples.shape:
            raise DimensionError(f"{self.name}: mask length {self.missing.shape} != samples {self.samples.shape}")
        if not self.rate > 0:
            raise SignalError(f"{self.name}: sample rate must be positive, got {self.rate}")


@dataclass
class PatientRecord:
    patient_id: str
    signals: dict
    annotation: np.ndarray
    rate: float = TARGET_RATE
    history: tuple = field(default=())

    def __post_init__(self):
        self.annotation = np.asarray(self.annotation).astype(np.int8)
        n = len(self.annotation)
        for name, sig in self.signals.items():
            sig = np.asarray(sig, dtype=np.float64)
            if len(sig) != n:
                raise DimensionError(f"patient {self.patient_id}: {name} has {len(sig)} samples, annotation {n}")
            self.signals[name] = sig
        if np.any((self.annotation != 0) & (self.annotation != 1)):
            raise SignalError(f"patient {self.patient_id}: annotation must be binary")

    def __len__(self):
        return len(self.annotation)

    @property
    def duration(self):
        return len(self) / self.rate

    def matrix(self, channels=CHANNEL_ORDER):
        return np.stack([self.signals[c] for c in channels], axis=1)


@dataclass
class EpochSet:
    windows: np.ndarray          # (N, 150, C)
    labels: np.ndarray           # (N,)
    patient_ids: np.ndarray      # (N,)
    starts: np.ndarray           # (N,) start sample within the patient record
    channels: tuple = CHANNEL_ORDER

    def __len__(self):
        return len(self.labels)

    @property
    def prevalence(self):
        return float(np.mean(self.labels)) if len(self) else float("nan")

    def select(self, channels):
        idx = [self.channels.index(c) for c in channels]
        if idx == list(range(len(self.channels))):
            return self.windows
        return self.windows[..., idx]

    def subset(self, index):
        return EpochSet(self.windows[index], self.labels[index], self.patient_ids[index],
                        self.starts[index], self.channels)

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        if not sets:
            raise SignalError("no epoch sets to concatenate")
        chans = sets[0].channels
        if any(s.channels != chans for s in sets):
            raise DimensionError("epoch sets disagree on channel order")
        return cls(np.concatenate([s.windows for s in sets]),
                   np.concatenate([s.labels for s in sets]),
                   np.concatenate([s.patient_ids for s in sets]),
                   np.concatenate([s.starts for s in sets]), chans)


def _fill_for_interp(x, missing):
    good = ~missing & np.isfinite(x)
    if good.all():
        return x
    if not good.any():
        raise SignalError("channel has no valid samples")
    pos = np.arange(len(x))
    return np.interp(pos, pos[good], x[good])


def resample_5hz(channel, target_rate=TARGET_RATE):
    """Linear interpolation onto a uniform grid over the original duration.

    The missing mask follows the nearest original sample.  Missing samples
    are bridged before interpolating so artifacts do not leak into valid
    neighbours.
    """
    x = channel.samples
    if len(x) < 2:
        raise SignalError(f"{channel.name}: need at least 2 samples to resample")
    if channel.rate == target_rate:
        return RawChannel(channel.name, x.copy(), target_rate, channel.missing.copy())
    duration = (len(x) - 1) / channel.rate
    n_out = int(math.floor(duration * target_rate + 1e-9)) + 1
    t_new = np.arange(n_out) / target_rate
    t_old = np.arange(len(x)) / channel.rate
    src = _fill_for_interp(x, channel.missing) if channel.missing.any() else x
    y = np.interp(t_new, t_old, src)
    nearest = np.clip(np.floor(t_new * channel.rate + 0.5).astype(int), 0, len(x) - 1)
    return RawChannel(channel.name, y, target_rate, channel.missing[nearest])


def resample_annotation(track, rate, n_out, target_rate=TARGET_RATE):
    track = np.asarray(track)
    if rate == target_rate and len(track) == n_out:
        return track.astype(np.int8)
    nearest = np.clip(np.floor(np.arange(n_out) / target_rate * rate + 0.5).astype(int), 0, len(track) - 1)
    return (track[nearest] != 0).astype(np.int8)


def butter_lowpass_design(order=4, cutoff=0.7, fs=TARGET_RATE):
    """Digital Butterworth low-pass ``(b, a)`` via the bilinear transform.

    The analog cutoff is pre-warped so the digital response is -3 dB at
    exactly ``cutoff`` Hz.  All zeros sit at z = -1; gain is set for unit DC.
    """
    if order < 1:
        raise SignalError(f"filter order must be >= 1, got {order}")
    if not 0 < cutoff < fs / 2:
        raise SignalError(f"cutoff {cutoff} Hz must lie strictly between 0 and Nyquist {fs / 2} Hz")
    warped = 2.0 * fs * math.tan(math.pi * cutoff / fs)
    k = np.arange(1, order + 1)
    analog_poles = warped * np.exp(1j * math.pi * (2 * k + order - 1) / (2 * order))
    poles = (2.0 * fs + analog_poles) / (2.0 * fs - analog_poles)
    a = np.real(np.poly(poles))
    b = np.real(np.poly(-np.ones(order)))
    b = b * (a.sum() / b.sum())
    return b, a


def freq_response(b, a, freqs, fs=TARGET_RATE):
    """Complex H(e^{jw}) at the given frequencies in Hz."""
    z = np.exp(-2j * np.pi * np.asarray(freqs, dtype=np.float64) / fs)
    num = sum(c * z ** i for i, c in enumerate(b))
    den = sum(c * z ** i for i, c in enumerate(a))
    return num / den


def filtfilt(coeffs, signal):
    """Forward-backward IIR filtering with odd-reflection edge padding.

    Padding length is ``3 * (2 * order + 1)``; each pass starts from the
    steady state of the edge value.
    """
    b, a = (np.asarray(c, dtype=np.float64) for c in coeffs)
    x = np.asarray(signal, dtype=np.float64)
    order = max(len(a), len(b)) - 1
    pad = 3 * (2 * order + 1)
    if x.ndim != 1 or len(x) <= pad:
        raise SignalError(f"filtfilt needs a 1-D signal longer than {pad} samples, got {x.shape}")
    ext = np.concatenate([2 * x[0] - x[pad:0:-1], x, 2 * x[-1] - x[-2:-pad - 2:-1]])
    zi = lfilter_zi(b, a)
    y, _ = lfilter(b, a, ext, zi=zi * ext[0])
    y = y[::-1]
    y, _ = lfilter(b, a, y, zi=zi * y[0])
    return y[::-1][pad:-pad]


def percentile_normalize(signal):
    """Map the 5th percentile to 0 and the 95th to 1 (no clipping)."""
    x = np.asarray(signal, dtype=np.float64)
    if len(x) < 20:
        raise SignalError(f"percentile normalization needs >= 20 samples, got {len(x)}")
    p5, p95 = np.percentile(x, [5, 95])
    if p95 == p5:
        raise SignalError("degenerate signal: 5th and 95th percentiles coincide")
    return (x - p5) / (p95 - p5)


def detect_artifacts(name, samples, limits=ARTIFACT_LIMITS):
    x = np.asarray(samples, dtype=np.float64)
    bad = ~np.isfinite(x)
    if name in limits:
        lo, hi = limits[name]
        with np.errstate(invalid="ignore"):
            bad |= (x < lo) | (x > hi)
    return bad


def interpolate_missing(channel):
    """Linear interpolation across gaps, nearest valid value at the edges."""
    missing = channel.missing | ~np.isfinite(channel.samples)
    if missing.all():
        raise SignalError(f"{channel.name}: every sample is missing")
    filled = _fill_for_interp(channel.samples, missing)
    return RawChannel(channel.name, filled, channel.rate, np.zeros(len(filled), dtype=bool))


def hr_normalize(signal):
    return (np.asarray(signal, dtype=np.float64) - 50.0) / 55.0


def sao2_normalize(signal):
    return (np.asarray(signal, dtype=np.float64) - 80.0) / 20.0


def merge_annotations(*tracks):
    """Element-wise OR of OSA / CSA / hypopnea indicator tracks."""
    if not tracks:
        raise SignalError("no annotation tracks given")
    arrs = [np.asarray(t) != 0 for t in tracks]
    n = len(arrs[0])
    for a in arrs[1:]:
        if len(a) != n:
            raise DimensionError(f"annotation tracks differ in length: {[len(x) for x in arrs]}")
    return np.logical_or.reduce(arrs).astype(np.int8)


def preprocess(patient_id, channels, annotations, annotation_rate=TARGET_RATE, limits=ARTIFACT_LIMITS):
    """Run the full pipeline on raw channels and return a 5 Hz normalized record.

    ``channels`` maps names to :class:`RawChannel`; ``annotations`` is one
    binary track or a sequence of tracks (OSA, CSA, hypopnea) sampled at
    ``annotation_rate``.
    """
    history = []
    res = {}
    for name in CHANNEL_ORDER:
        ch = channels[name]
        if name in limits:
            ch = RawChannel(ch.name, ch.samples, ch.rate, ch.missing | detect_artifacts(name, ch.samples, limits))
        res[name] = resample_5hz(ch)
    history.append("resample")
    n = min(len(c.samples) for c in res.values())
    out = {}
    coeffs = butter_lowpass_design()
    for name in RESPIRATORY:
        x = _fill_for_interp(res[name].samples[:n], res[name].missing[:n])
        out[name] = percentile_normalize(filtfilt(coeffs, x))
    history += ["filtfilt", "percentile_normalize"]
    out["hr"] = hr_normalize(interpolate_missing(_trim(res["hr"], n)).samples)
    out["sao2"] = sao2_normalize(interpolate_missing(_trim(res["sao2"], n)).samples)
    history += ["interpolate_missing", "range_normalize"]
    if isinstance(annotations, (list, tuple)) and annotations and np.ndim(annotations[0]) == 1:
        tracks = list(annotations)
    else:
        tracks = [annotations]
    merged = merge_annotations(*[resample_annotation(t, annotation_rate, n) for t in tracks])
    history.append("merge_annotations")
    return PatientRecord(patient_id, out, merged, TARGET_RATE, tuple(history))


def _trim(ch, n):
    return RawChannel(ch.name, ch.samples[:n], ch.rate, ch.missing[:n])


def preprocess_record(record, limits=ARTIFACT_LIMITS):
    """Preprocess a raw-valued :class:`PatientRecord` (any rate)."""
    channels = {name: RawChannel(name, record.signals[name], record.rate) for name in CHANNEL_ORDER}
    return preprocess(record.patient_id, channels, record.annotation, record.rate, limits)


def make_epochs(record, window_seconds=WINDOW_SECONDS, stride_seconds=STRIDE_SECONDS, channels=CHANNEL_ORDER):
    """Cut 30 s windows at a 1 s stride; a window is positive if any of its
    annotation samples is positive.  Trailing partial windows are dropped."""
    win = int(round(window_seconds * record.rate))
    stride = int(round(stride_seconds * record.rate))
    n = len(record)
    if n < win:
        raise SignalError(f"patient {record.patient_id}: {n} samples is shorter than one {win}-sample window")
    mat = record.matrix(channels)
    windows = sliding_window_view(mat, win, axis=0)[::stride].transpose(0, 2, 1).copy()
    labels = sliding_window_view(record.annotation, win)[::stride].any(axis=1).astype(np.int8)
    starts = np.arange(len(labels)) * stride
    pids = np.full(len(labels), record.patient_id, dtype=object)
    return EpochSet(windows, labels, pids, starts, tuple(channels))
