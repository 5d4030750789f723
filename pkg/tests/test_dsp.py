import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal as sps

from dropcaps import dsp
from dropcaps.dsp import (DeadChannelWarning, PreprocessConfig, RecordingSession,
                          design_butterworth_bandpass, samples_for, window_count)
from dropcaps.errors import ConfigurationError, InputError

FS = 2048.0


def analog_magnitude(f, low, high, fs, order):
    """Closed-form |H| of the prewarped bilinear Butterworth band-pass."""
    warp = lambda x: 2 * fs * np.tan(np.pi * x / fs)
    w, lo, hi = warp(np.asarray(f, float)), warp(low), warp(high)
    ratio = (w ** 2 - lo * hi) / (w * (hi - lo))
    return 1.0 / np.sqrt(1.0 + ratio ** (2 * order))


def db(x):
    return 20 * np.log10(np.abs(x))


@pytest.fixture(scope="module")
def cascade():
    return design_butterworth_bandpass(4, 10, 500, FS)


def session(grids, stage="raw", fs=FS, rep=1):
    return RecordingSession("s01", 3, rep, grids, fs, stage=stage)


# -- design ---------------------------------------------------------------------

def test_band_edges_are_minus_3db(cascade):
    for f in (10.0, 500.0):
        assert abs(db(cascade.response([f])[0]) + 3.0) < 0.5


def test_passband_vs_low_stopband(cascade):
    assert db(cascade.response([100.0])[0]) - db(cascade.response([1.0])[0]) >= 20


def test_dc_gain_is_exactly_zero(cascade):
    assert cascade.response([0.0])[0] == 0
    assert all(b0 + b1 + b2 == 0 for b0, b1, b2, _, _ in cascade.sections)


def test_magnitude_matches_closed_form(cascade):
    f = np.linspace(0.5, 1020, 400)
    np.testing.assert_allclose(np.abs(cascade.response(f)), analog_magnitude(f, 10, 500, FS, 4),
                               rtol=1e-6, atol=1e-9)


def test_matches_scipy_design(cascade):
    ref = sps.butter(4, [10, 500], "bandpass", fs=FS, output="sos")
    f = np.linspace(1, 1000, 50)
    _, h = sps.sosfreqz(ref, worN=f, fs=FS)
    np.testing.assert_allclose(cascade.response(f), h, rtol=1e-6, atol=1e-10)


def test_sections_are_stable(cascade):
    assert len(cascade.sections) == 4
    assert cascade.is_stable()


@pytest.mark.parametrize("low,high", [(0, 500), (500, 10), (10, 1024), (10, 2000)])
def test_invalid_band_edges(low, high):
    with pytest.raises(ConfigurationError):
        design_butterworth_bandpass(4, low, high, FS)


@pytest.mark.parametrize("order", [1, 2, 3, 5])
def test_other_orders_match_closed_form(order):
    c = design_butterworth_bandpass(order, 20, 300, 1000)
    f = np.linspace(1, 499, 100)
    np.testing.assert_allclose(np.abs(c.response(f)), analog_magnitude(f, 20, 300, 1000, order),
                               rtol=1e-6, atol=1e-9)


# -- filtfilt ----------------------------------------------------------------------

def test_filtfilt_zero_signal(cascade):
    assert np.all(dsp.filtfilt(np.zeros(500), cascade) == 0)


def _amplitude(y, f, fs):
    t = np.arange(len(y)) / fs
    return 2 * np.abs(np.mean(y * np.exp(-2j * np.pi * f * t)))


def test_filtfilt_in_band_sinusoid_preserved(cascade):
    t = np.arange(int(2 * FS)) / FS
    y = dsp.filtfilt(np.sin(2 * np.pi * 50 * t), cascade)
    trim = slice(int(0.25 * FS), -int(0.25 * FS))
    assert abs(np.max(np.abs(y[trim])) - 1.0) < 0.05


def test_filtfilt_out_of_band_sinusoid_attenuated(cascade):
    t = np.arange(int(4 * FS)) / FS
    y = dsp.filtfilt(np.sin(2 * np.pi * 1 * t), cascade)
    trim = slice(int(1 * FS), -int(1 * FS))
    assert np.max(np.abs(y[trim])) <= 0.1


def test_filtfilt_length_and_zero_phase(cascade):
    rng = np.random.default_rng(0)
    x = rng.normal(size=2458)
    y = dsp.filtfilt(x, cascade)
    assert y.shape == x.shape
    np.testing.assert_allclose(dsp.filtfilt(x[::-1], cascade)[::-1], y, atol=1e-9)


def test_filtfilt_too_short(cascade):
    with pytest.raises(InputError):
        dsp.filtfilt(np.ones(12), cascade)


# -- session steps -------------------------------------------------------------------

def test_transient_length_rounding():
    assert samples_for(1.2, FS) == 2458
    raw = session(np.zeros((2, 8, 8, 3000)))
    assert dsp.extract_transient(raw, 1.2, 100).n_samples == 2458


def test_transient_identity_and_errors():
    g = np.random.default_rng(1).normal(size=(2, 8, 8, 2458))
    out = dsp.extract_transient(session(g), 1.2, 0)
    assert np.array_equal(out.grids, g)
    with pytest.raises(InputError):
        dsp.extract_transient(session(g), 1.2, 1)


def test_zscore_hand_values():
    out, dead = dsp.zscore_channels(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(out[0], [-1.2247, 0, 1.2247], atol=1e-4)
    assert not dead.any()


def test_zscore_idempotent_and_per_channel():
    rng = np.random.default_rng(2)
    g = rng.normal(2.0, 5.0, size=(2, 8, 8, 500))
    s = dsp.zscore(session(g, stage="filtered"))
    np.testing.assert_allclose(s.grids.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(s.grids.std(axis=-1), 1, atol=1e-12)
    again, _ = dsp.zscore_channels(s.grids)
    np.testing.assert_allclose(again, s.grids, atol=1e-6)


def test_zscore_constant_channel_warns_and_zeros():
    g = np.random.default_rng(3).normal(size=(2, 8, 8, 500))
    g[1, 4, 5] = 7.0
    with pytest.warns(DeadChannelWarning):
        s = dsp.zscore(session(g, stage="filtered"))
    assert np.all(s.grids[1, 4, 5] == 0)
    assert s.dead_channels == ((1, 4, 5),)


def test_rectify():
    rng = np.random.default_rng(4)
    g = rng.normal(size=(2, 8, 8, 500))
    g[0, 0, 0, :2] = [-3.0, 0.0]
    out = dsp.rectify(session(g, stage="normalized")).grids
    assert out[0, 0, 0, 0] == 3.0 and out[0, 0, 0, 1] == 0.0
    assert np.array_equal(out, np.abs(g))


def test_stage_order_is_enforced():
    g = np.zeros((2, 8, 8, 500))
    with pytest.raises(InputError):
        dsp.rectify(session(g, stage="filtered"))
    with pytest.raises(InputError):
        dsp.zscore(session(g, stage="raw"))
    with pytest.raises(InputError):
        dsp.slide_windows(session(g, stage="normalized"))


def test_session_invariants():
    with pytest.raises(InputError):
        RecordingSession("s", 0, 1, np.zeros((2, 8, 7, 500)))
    with pytest.raises(InputError):
        RecordingSession("s", 0, 6, np.zeros((2, 8, 8, 500)))
    with pytest.raises(InputError):
        RecordingSession("s", 0, 1, np.zeros((2, 8, 8, 100)))


# -- windows --------------------------------------------------------------------------

def test_window_count_at_2048():
    assert samples_for(0.2, FS) == 410
    assert samples_for(0.01, FS) == 20
    assert window_count(2458, FS) == 103


def test_overlap_fraction_at_2000hz():
    length, step = samples_for(0.2, 2000), samples_for(0.01, 2000)
    assert (length - step) / length == pytest.approx(0.95)


def test_single_window_when_segment_equals_window():
    g = np.abs(np.random.default_rng(5).normal(size=(2, 8, 8, 410)))
    wins = dsp.slide_windows(session(g, stage="rectified"))
    assert len(wins) == 1
    assert wins[0].tensor.shape == (2, 410, 6, 6)


def test_windows_are_patch_views():
    rng = np.random.default_rng(6)
    g = np.abs(rng.normal(size=(2, 8, 8, 460)))
    s = session(g, stage="rectified")
    wins = dsp.slide_windows(s, offset=(2, 0))
    assert len(wins) == window_count(460, FS) == 3
    w = wins[2]
    np.testing.assert_array_equal(w.tensor, g[:, 2:8, 0:6, 40:450].transpose(0, 3, 1, 2))
    assert np.shares_memory(w.tensor, s.grids)
    assert w.shift == (2, 0)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(10, 5000), fs=st.floats(100, 4096))
def test_window_count_formula_property(n, fs):
    length, step = samples_for(0.2, fs), samples_for(0.01, fs)
    if step < 1:
        return
    expected = 0 if n < length else (n - length) // step + 1
    brute = sum(1 for start in range(0, n, step) if start + length <= n)
    assert window_count(n, fs) == expected == brute


def test_full_pipeline_nonnegative_and_shape():
    rng = np.random.default_rng(7)
    raw = session(rng.normal(size=(2, 8, 8, 2600)))
    wins = dsp.preprocess_session(raw, PreprocessConfig(offsets=((0, 0), (2, 2))), onset_index=50)
    assert len(wins) == 2 * 103
    assert all(w.tensor.shape == (2, 410, 6, 6) and w.tensor.min() >= 0 for w in wins)
    assert wins[0].tensor.dtype == np.float32
