import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as ss

from sensorfusion import sigproc as sp
from sensorfusion.errors import DimensionError, SignalError
from sensorfusion.sigproc import PatientRecord, RawChannel


# ---------------------------------------------------------------- resampling

def test_resample_constant():
    out = sp.resample_5hz(RawChannel("hr", np.full(37, 61.0), 8.0))
    assert np.all(out.samples == 61.0) and out.rate == 5.0


def test_resample_ramp():
    out = sp.resample_5hz(RawChannel("hr", [0.0, 1.0, 2.0], 1.0))
    np.testing.assert_allclose(out.samples, np.arange(11) * 0.2, atol=1e-15)


def test_resample_sinusoid():
    t = np.arange(25 * 60) / 25.0
    out = sp.resample_5hz(RawChannel("abdores", np.sin(2 * np.pi * 0.2 * t), 25.0))
    ref = np.sin(2 * np.pi * 0.2 * np.arange(len(out.samples)) / 5.0)
    assert np.max(np.abs(out.samples - ref)) < 1e-3


def test_resample_mask_nearest_rule():
    x = np.arange(10.0)
    miss = np.zeros(10, bool)
    miss[4] = True
    out = sp.resample_5hz(RawChannel("hr", x, 10.0, miss))
    # 5 Hz grid hits original samples 0, 2, 4, 6, 8
    assert out.missing.tolist() == [False, False, True, False, False]


def test_resample_too_short():
    with pytest.raises(SignalError):
        sp.resample_5hz(RawChannel("hr", [1.0], 1.0))


def test_rawchannel_validation():
    with pytest.raises(DimensionError):
        RawChannel("hr", [1.0, 2.0], 5.0, [False])
    with pytest.raises(SignalError):
        RawChannel("hr", [1.0, 2.0], 0.0)


# ---------------------------------------------------------------- filter design

def test_design_matches_scipy():
    b, a = sp.butter_lowpass_design()
    rb, ra = ss.butter(4, 0.7, fs=5.0)
    np.testing.assert_allclose(b, rb, rtol=1e-12, atol=1e-16)
    np.testing.assert_allclose(a, ra, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("order,cutoff", [(1, 0.3), (2, 1.1), (3, 2.0), (6, 0.5)])
def test_design_other_orders_match_scipy(order, cutoff):
    b, a = sp.butter_lowpass_design(order, cutoff, 5.0)
    rb, ra = ss.butter(order, cutoff, fs=5.0)
    np.testing.assert_allclose(b, rb, rtol=1e-10, atol=1e-15)
    np.testing.assert_allclose(a, ra, rtol=1e-10, atol=1e-13)


def test_design_response_points():
    b, a = sp.butter_lowpass_design()
    h0, hc, hs = np.abs(sp.freq_response(b, a, [0.0, 0.7, 2.4]))
    assert abs(h0 - 1) < 1e-9
    assert abs(hc - 2 ** -0.5) < 1e-3
    assert hs < 0.01


def test_design_errors():
    with pytest.raises(SignalError):
        sp.butter_lowpass_design(cutoff=2.5)
    with pytest.raises(SignalError):
        sp.butter_lowpass_design(order=0)


# ---------------------------------------------------------------- filtfilt

COEFFS = sp.butter_lowpass_design()


def test_filtfilt_matches_scipy():
    x = np.random.default_rng(0).normal(size=500)
    np.testing.assert_allclose(sp.filtfilt(COEFFS, x), ss.filtfilt(*COEFFS, x, padlen=27), rtol=0, atol=1e-12)


def test_filtfilt_constant():
    assert np.max(np.abs(sp.filtfilt(COEFFS, np.full(200, 3.7)) - 3.7)) < 1e-9


def test_filtfilt_zero_lag():
    t = np.arange(3000) / 5.0
    x = np.sin(2 * np.pi * 0.2 * t)
    y = sp.filtfilt(COEFFS, x)
    lags = np.arange(-20, 21)
    corr = [np.dot(x[50 + k:-50 + k], y[50:-50]) for k in lags]
    assert lags[int(np.argmax(corr))] == 0


def test_filtfilt_stopband():
    t = np.arange(3000) / 5.0
    y = sp.filtfilt(COEFFS, np.sin(2 * np.pi * 2.0 * t))
    assert np.max(np.abs(y[100:-100])) < 0.01


def test_filtfilt_too_short():
    with pytest.raises(SignalError):
        sp.filtfilt(COEFFS, np.ones(27))
    assert len(sp.filtfilt(COEFFS, np.ones(28))) == 28


# ---------------------------------------------------------------- normalizations

def test_percentile_ramp():
    out = sp.percentile_normalize(np.arange(101.0))
    assert out[50] == pytest.approx(0.5, abs=1e-15)
    assert out[5] == pytest.approx(0.0, abs=1e-15) and out[95] == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100), st.floats(-100, 100))
def test_percentile_affine_invariance(seed, a, b):
    x = np.random.default_rng(seed).normal(size=200)
    np.testing.assert_allclose(sp.percentile_normalize(a * x + b), sp.percentile_normalize(x), atol=1e-9)


def test_percentile_of_result():
    y = sp.percentile_normalize(np.random.default_rng(4).normal(size=1000))
    p5, p95 = np.percentile(y, [5, 95])
    assert abs(p5) < 1e-12 and abs(p95 - 1) < 1e-12


def test_percentile_errors():
    with pytest.raises(SignalError):
        sp.percentile_normalize(np.ones(50))
    with pytest.raises(SignalError):
        sp.percentile_normalize(np.arange(10.0))


def test_range_normalizations():
    assert sp.hr_normalize([105.0, 50.0]).tolist() == [1.0, 0.0]
    assert sp.sao2_normalize([90.0])[0] == 0.5
    assert sp.hr_normalize([40.0])[0] == pytest.approx(-10 / 55)


def test_interpolate_missing():
    ch = lambda v: RawChannel("hr", np.array(v, dtype=float), 5.0)
    assert sp.interpolate_missing(ch([1, np.nan, 3])).samples.tolist() == [1, 2, 3]
    assert sp.interpolate_missing(ch([np.nan, 5, np.nan])).samples.tolist() == [5, 5, 5]
    gap = [2] + [np.nan] * 6 + [9]
    assert sp.interpolate_missing(ch(gap)).samples.tolist() == list(range(2, 10))
    out = sp.interpolate_missing(ch([1, np.nan, 3]))
    assert not out.missing.any()
    with pytest.raises(SignalError):
        sp.interpolate_missing(ch([np.nan, np.nan]))


def test_artifact_limits():
    bad = sp.detect_artifacts("hr", [10.0, 60.0, 300.0, np.nan])
    assert bad.tolist() == [True, False, True, True]
    assert sp.detect_artifacts("sao2", [49.0, 50.0, 101.0, 102.0]).tolist() == [True, False, False, True]
    assert not sp.detect_artifacts("abdores", [1e9]).any()


def test_merge_annotations():
    z = np.zeros(6, int)
    assert sp.merge_annotations(z, z, z).tolist() == [0] * 6
    osa = z.copy()
    osa[2] = 1
    assert sp.merge_annotations(osa, z, z).tolist() == [0, 0, 1, 0, 0, 0]
    hyp = osa.copy()
    hyp[3] = 1
    assert sp.merge_annotations(osa, z, hyp).tolist() == [0, 0, 1, 1, 0, 0]
    with pytest.raises(DimensionError):
        sp.merge_annotations(z, np.zeros(5))


# ---------------------------------------------------------------- pipeline and epochs

def _raw(seconds=120, rate=10.0, seed=0):
    rng = np.random.default_rng(seed)
    n = int(seconds * rate)
    t = np.arange(n) / rate
    return {
        "abdores": RawChannel("abdores", np.sin(2 * np.pi * 0.25 * t) + 0.1 * rng.normal(size=n), rate),
        "thorres": RawChannel("thorres", np.cos(2 * np.pi * 0.25 * t) + 0.1 * rng.normal(size=n), rate),
        "hr": RawChannel("hr", 60 + rng.normal(size=n), rate),
        "sao2": RawChannel("sao2", 95 + rng.normal(size=n), rate),
    }


def test_preprocess_history_and_shapes():
    raw = _raw()
    raw["hr"].samples[30:40] = 0.0  # artifact
    ann = np.zeros(1200, int)
    ann[500:600] = 1
    rec = sp.preprocess("p1", raw, [ann, np.zeros(1200, int), np.zeros(1200, int)], 10.0)
    assert rec.history == ("resample", "filtfilt", "percentile_normalize", "interpolate_missing",
                           "range_normalize", "merge_annotations")
    assert len(rec) == 600 and rec.rate == 5.0
    assert rec.annotation[250:300].all() and rec.annotation.sum() == 50
    hr = rec.signals["hr"] * 55 + 50
    assert hr[15:20].min() > 50  # bridged, not zero


def test_make_epochs_count():
    rec = PatientRecord("p", {c: np.zeros(3000) for c in sp.CHANNEL_ORDER}, np.zeros(3000))
    ep = sp.make_epochs(rec)
    assert len(ep) == 571 and ep.windows.shape == (571, 150, 4)
    assert not ep.labels.any()


def test_make_epochs_any_overlap_rule():
    ann = np.zeros(3000, int)
    ann[1000] = 1
    rec = PatientRecord("p", {c: np.zeros(3000) for c in sp.CHANNEL_ORDER}, ann)
    ep = sp.make_epochs(rec)
    pos = np.flatnonzero(ep.labels)
    assert len(pos) == 30
    assert all(s <= 1000 < s + 150 for s in ep.starts[pos])


def test_make_epochs_provenance_exact():
    rng = np.random.default_rng(1)
    rec = PatientRecord("p7", {c: rng.normal(size=900) for c in sp.CHANNEL_ORDER}, rng.integers(0, 2, 900))
    ep = sp.make_epochs(rec)
    for k in (0, 17, len(ep) - 1):
        s = ep.starts[k]
        for j, c in enumerate(sp.CHANNEL_ORDER):
            assert np.array_equal(ep.windows[k, :, j], rec.signals[c][s:s + 150])
        assert ep.patient_ids[k] == "p7"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_label_monotonicity(seed):
    rng = np.random.default_rng(seed)
    ann = (rng.random(600) < 0.01).astype(int)
    more = ann | (rng.random(600) < 0.01)
    sig = {c: np.zeros(600) for c in sp.CHANNEL_ORDER}
    a = sp.make_epochs(PatientRecord("p", dict(sig), ann)).labels
    b = sp.make_epochs(PatientRecord("p", dict(sig), more)).labels
    assert np.all(b >= a)


def test_make_epochs_too_short():
    rec = PatientRecord("p", {c: np.zeros(149) for c in sp.CHANNEL_ORDER}, np.zeros(149))
    with pytest.raises(SignalError):
        sp.make_epochs(rec)


def test_record_validation():
    with pytest.raises(DimensionError):
        PatientRecord("p", {"hr": np.zeros(5)}, np.zeros(6))
    with pytest.raises(SignalError):
        PatientRecord("p", {"hr": np.zeros(2)}, [0, 2])
