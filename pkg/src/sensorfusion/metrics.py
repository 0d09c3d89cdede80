"""Precision-recall evaluation and the t-tests used to compare configurations."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateTestError, LabelError, MetricError
from .netgraph import TopologyKind


@dataclass
class PRCurve:
    thresholds: np.ndarray   # unique scores, descending
    precision: np.ndarray
    recall: np.ndarray
    n_pos: int
    n_total: int

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for row in zip(self.thresholds, self.precision, self.recall):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def _check_inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"{len(s)} scores for {len(y)} labels")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    if np.any((y != 0) & (y != 1)):
        raise LabelError("labels must be 0 or 1")
    y = y.astype(np.int64)
    if y.sum() == 0:
        raise MetricError("precision-recall is undefined without positive labels")
    return s, y


def pr_curve(scores, labels):
    """Precision / recall at every distinct score, tied scores forming one threshold."""
    s, y = _check_inputs(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    pp = last + 1
    n_pos = int(y.sum())
    return PRCurve(s[last], tp / pp, tp / n_pos, n_pos, len(s))


def aupr(scores, labels):
    """Step-wise average precision: sum over thresholds of (R_n - R_{n-1}) * P_n."""
    s, y = _check_inputs(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    pp = last + 1
    gained = np.diff(np.r_[0, tp])
    keep = gained > 0
    return math.fsum((gained[keep] * tp[keep] / pp[keep]).tolist()) / int(y.sum())


def baseline_aupr(labels):
    """Expected AUPR of predictions that ignore the input: the positive prevalence."""
    y = np.asarray(labels).ravel()
    if y.size == 0:
        raise MetricError("baseline AUPR of an empty label set")
    if np.any((y != 0) & (y != 1)):
        raise LabelError("labels must be 0 or 1")
    return float(y.mean())


# --------------------------------------------------------------------------
# Student t distribution


def _betacf(a, b, x, max_iter=20000, tol=1e-16):
    # modified Lentz evaluation of the incomplete beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise MetricError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def _stirling_tail(x):
    # lgamma(x) - [(x - 1/2) ln x - x + ln(2 pi) / 2], accurate for x >= 10
    x2 = x * x
    return (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0 - 1.0 / (1680.0 * x2)) / x2) / x2) / x


def _lbeta(a, b):
    """log B(a, b) without the cancellation of three large lgamma terms."""
    small, big = min(a, b), max(a, b)
    if big < 10.0:
        return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    # lgamma(big) - lgamma(big + small) via Stirling differences
    diff = (-(big + small - 0.5) * math.log1p(small / big) - small * math.log(big) + small
            + _stirling_tail(big) - _stirling_tail(big + small))
    if small >= 10.0:
        # both large: expand lgamma(small) too
        lg_small = (small - 0.5) * math.log(small) - small + 0.5 * math.log(2 * math.pi) + _stirling_tail(small)
    else:
        lg_small = math.lgamma(small)
    return lg_small + diff


def betainc(a, b, x, xc=None):
    """Regularized incomplete beta I_x(a, b).

    ``xc`` may carry ``1 - x`` computed without rounding loss.
    """
    if xc is None:
        xc = 1.0 - x
    if x <= 0.0:
        return 0.0
    if xc <= 0.0:
        return 1.0
    log_x = math.log1p(-xc) if xc < 0.5 else math.log(x)
    log_xc = math.log1p(-x) if x < 0.5 else math.log(xc)
    front = math.exp(a * log_x + b * log_xc - _lbeta(a, b))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, xc) / b


def student_t_sf(t, df):
    """Upper-tail probability P(T > t) for Student's t with ``df`` degrees of freedom."""
    if not df > 0:
        raise MetricError(f"degrees of freedom must be positive, got {df}")
    t = float(t)
    if t == 0.0:
        return 0.5
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t), t * t / (df + t * t))
    return tail if t > 0 else 1.0 - tail


@dataclass
class TTestResult:
    t: float
    df: float
    p_one_sided: float   # P(T >= t): evidence that the first sample is larger
    p_two_sided: float
    kind: str

    def to_dict(self):
        return asdict(self)


def _result(t, df, kind):
    one = float(student_t_sf(t, df))
    return TTestResult(float(t), float(df), one, min(1.0, 2.0 * min(one, 1.0 - one)), kind)


def _is_zero_spread(sd, values):
    scale = np.max(np.abs(values)) if len(values) else 0.0
    return sd <= 1e-12 * scale


def paired_ttest(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError(f"paired test needs equal-length 1-D samples, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise MetricError("paired test needs at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if _is_zero_spread(sd, d):
        raise DegenerateTestError("paired differences have zero variance")
    n = len(d)
    return _result(d.mean() / (sd / math.sqrt(n)), n - 1, "paired")


def welch_ttest(a, b):
    """Unequal-variance two-sample t-test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise MetricError("each sample needs at least two values")
    sa, sb = a.std(ddof=1), b.std(ddof=1)
    if _is_zero_spread(sa, a) and _is_zero_spread(sb, b):
        raise DegenerateTestError("both samples have zero variance")
    va, vb = sa * sa / len(a), sb * sb / len(b)
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va * va / (len(a) - 1) + vb * vb / (len(b) - 1))
    return _result(t, df, "welch")


# --------------------------------------------------------------------------
# model evaluation


@dataclass
class EvalReport:
    config_id: str
    kind: str
    n_windows: int
    n_pos: int
    prevalence: float
    aupr: float
    baseline_aupr: float
    branch_aupr: dict = field(default_factory=dict)
    curve: PRCurve | None = field(default=None, repr=False)

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k != "curve"}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def evaluate(model, test_set, batch_size=512):
    """Score every test window with the fusion head (and shortcut heads, if any)."""
    missing = [c for c in model.channels if c not in test_set.channels]
    if missing:
        raise ConfigurationError(f"test set lacks channels {missing}")
    x = test_set.select(model.channels)
    fusion, shortcuts = model.predict(x, batch_size=batch_size, heads=True)
    labels = test_set.labels
    branch = {}
    if model.topology.kind is TopologyKind.BFM_SC:
        branch = {ch: aupr(shortcuts[:, i], labels) for i, ch in enumerate(model.channels)}
    return EvalReport(
        config_id=model.topology.config_id,
        kind=model.kind.value,
        n_windows=len(labels),
        n_pos=int(np.sum(labels)),
        prevalence=float(np.mean(labels)),
        aupr=aupr(fusion, labels),
        baseline_aupr=baseline_aupr(labels),
        branch_aupr=branch,
        curve=pr_curve(fusion, labels),
    )
