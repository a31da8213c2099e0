"""Feature extraction checked against a straight-line oracle.

The oracle below recomputes everything with deliberately different machinery:
explicit DFT sums instead of an FFT, numerical quadrature instead of the
closed-form mel-triangle integral, and spelled-out cosine sums instead of a
DCT routine. Slow, but an independent witness.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcgkit import features, tensorio
from pcgkit.errors import ConfigError, ShapeError

FS = 2000.0
NYQ = 1000.0


def oracle_mel(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)


def oracle_hamming(n):
    return np.array([0.54 - 0.46 * math.cos(2.0 * math.pi * k / (n - 1))
                     for k in range(n)])


def oracle_frames(x):
    out = []
    lo = 0
    w = oracle_hamming(40)
    while lo + 40 <= len(x):
        out.append(np.asarray(x[lo:lo + 40], dtype=np.float64) * w)
        lo += 20
    return np.array(out)


def oracle_power_spectrum(frame):
    """33-bin magnitude-squared 64-point DFT by explicit summation."""
    padded = np.zeros(64)
    padded[:len(frame)] = frame
    power = np.zeros(33)
    for k in range(33):
        re = sum(padded[t] * math.cos(2.0 * math.pi * k * t / 64.0)
                 for t in range(64))
        im = sum(-padded[t] * math.sin(2.0 * math.pi * k * t / 64.0)
                 for t in range(64))
        power[k] = re * re + im * im
    return power


def oracle_filterbank(n_filters, f_lo, f_hi, n_quad=2000):
    """Bin-averaged triangular mel filters by midpoint quadrature."""
    edges_mel = np.linspace(oracle_mel(f_lo), oracle_mel(f_hi), n_filters + 2)
    weights = np.zeros((n_filters, 33))
    bin_hz = FS / 64.0
    for j in range(n_filters):
        m0, m1, m2 = edges_mel[j], edges_mel[j + 1], edges_mel[j + 2]

        def tri(f):
            m = oracle_mel(f)
            if m <= m0 or m >= m2:
                return 0.0
            if m <= m1:
                return (m - m0) / (m1 - m0)
            return (m2 - m) / (m2 - m1)

        for k in range(33):
            a = max(k * bin_hz - bin_hz / 2.0, 0.0)
            b = min(k * bin_hz + bin_hz / 2.0, NYQ)
            if b <= a:
                continue
            step = (b - a) / n_quad
            total = sum(tri(a + (i + 0.5) * step) for i in range(n_quad))
            weights[j, k] = total * step / bin_hz
    return weights


def oracle_dct2_ortho(v):
    n = len(v)
    out = np.zeros(n)
    for k in range(n):
        scale = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        out[k] = scale * sum(v[t] * math.cos(math.pi * k * (2 * t + 1) / (2 * n))
                             for t in range(n))
    return out


def oracle_mfcc(x, weights):
    frames = oracle_frames(x)
    coeffs = []
    for frame in frames:
        energies = weights @ oracle_power_spectrum(frame)
        log_e = np.log(np.maximum(energies, 1e-10))
        coeffs.append(oracle_dct2_ortho(log_e))
    return np.array(coeffs).T


def oracle_delta(c, n=2):
    rows, t = c.shape
    out = np.zeros_like(c)
    denom = 2.0 * sum(k * k for k in range(1, n + 1))
    for r in range(rows):
        for i in range(t):
            acc = 0.0
            for k in range(1, n + 1):
                acc += k * (c[r, min(i + k, t - 1)] - c[r, max(i - k, 0)])
            out[r, i] = acc / denom
    return out


class TestMelScale:
    def test_known_point(self):
        assert features.hz_to_mel(700.0) == pytest.approx(2595.0 * math.log10(2.0),
                                                          rel=1e-12)
        assert features.hz_to_mel(0.0) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(f=st.floats(0.0, 1000.0))
    def test_inverse(self, f):
        assert features.mel_to_hz(features.hz_to_mel(f)) == pytest.approx(
            f, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(0.0, 999.0), d=st.floats(0.001, 500.0))
    def test_monotone(self, a, d):
        assert features.hz_to_mel(a + d) > features.hz_to_mel(a)


class TestFilterbank:
    @pytest.mark.parametrize("n,lo,hi", [(6, 30.0, 300.0), (26, 0.0, 500.0)])
    def test_matches_quadrature(self, n, lo, hi):
        fb = features.mel_filterbank(n, lo, hi)
        expect = oracle_filterbank(n, lo, hi)
        assert fb.weights.shape == (n, 33)
        assert np.max(np.abs(fb.weights - expect)) < 5e-7

    @pytest.mark.parametrize("n,lo,hi", [(6, 30.0, 300.0), (26, 0.0, 500.0),
                                         (40, 0.0, 1000.0)])
    def test_every_filter_has_weight(self, n, lo, hi):
        # narrow filters straddling few bins must still respond
        fb = features.mel_filterbank(n, lo, hi)
        assert np.all(fb.weights.sum(axis=1) > 0)
        assert np.all(fb.weights >= 0)

    def test_centers_between_limits(self):
        fb = features.mel_filterbank(6, 30.0, 300.0)
        assert len(fb.centers_hz) == 6
        assert np.all(np.diff(fb.centers_hz) > 0)
        assert 30.0 < fb.centers_hz[0] < fb.centers_hz[-1] < 300.0

    def test_band_validation(self):
        with pytest.raises(ConfigError, match="invalid"):
            features.mel_filterbank(6, 300.0, 30.0)
        with pytest.raises(ConfigError, match="invalid"):
            features.mel_filterbank(6, 0.0, 1200.0)
        with pytest.raises(ConfigError, match="at least one"):
            features.mel_filterbank(0, 0.0, 500.0)


class TestFraming:
    def test_matches_oracle(self, rng):
        x = rng.normal(size=2000)
        got = features.frame_signal(x)
        expect = oracle_frames(x)
        assert got.shape == (99, 40)
        assert np.allclose(got, expect, atol=1e-12)

    def test_short_signal_rejected(self):
        with pytest.raises(ShapeError, match="at least 40"):
            features.frame_signal(np.zeros(39))


class TestMfcc:
    @pytest.mark.parametrize("n,lo,hi", [(6, 30.0, 300.0), (26, 0.0, 500.0)])
    def test_matches_oracle(self, rng, n, lo, hi):
        x = rng.normal(size=400) * 0.4  # 19 frames keeps the oracle quick
        fb = features.mel_filterbank(n, lo, hi)
        got = features.mfcc(x, fb)
        expect = oracle_mfcc(x, fb.weights)
        assert got.shape == (n, 19)
        assert np.max(np.abs(got - expect)) < 1e-9

    def test_zero_signal(self):
        fb = features.mel_filterbank(6, 30.0, 300.0)
        got = features.mfcc(np.zeros(2000), fb)
        # floored constant log energy: only the DC coefficient survives
        assert np.allclose(got[0], math.sqrt(6.0) * math.log(1e-10), atol=1e-9)
        assert np.allclose(got[1:], 0.0, atol=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(scale=st.floats(0.5, 2.0))
    def test_gain_moves_only_c0(self, scale):
        # power scales by s^2, log energies shift by 2 ln s, and a constant
        # shift lands entirely on the DC cepstral coefficient
        rng = np.random.default_rng(77)
        x = rng.normal(size=400)
        fb = features.mel_filterbank(26, 0.0, 500.0)
        base = features.mfcc(x, fb)
        scaled = features.mfcc(scale * x, fb)
        shift = math.sqrt(26.0) * 2.0 * math.log(scale)
        assert np.allclose(scaled[0], base[0] + shift, atol=1e-8)
        assert np.allclose(scaled[1:], base[1:], atol=1e-8)


class TestDelta:
    def test_matches_oracle(self, rng):
        c = rng.normal(size=(6, 30))
        assert np.allclose(features.delta(c), oracle_delta(c), atol=1e-12)

    def test_linear_ramp_slope(self):
        # away from the replicated edges the regression recovers the slope
        t = np.arange(20, dtype=np.float64)
        c = np.stack([3.0 * t, -1.5 * t])
        d = features.delta(c)
        assert np.allclose(d[0, 2:-2], 3.0, atol=1e-12)
        assert np.allclose(d[1, 2:-2], -1.5, atol=1e-12)

    def test_constant_is_zero(self):
        d = features.delta(np.full((4, 12), 7.25))
        assert np.allclose(d, 0.0, atol=1e-12)

    def test_too_few_frames(self):
        with pytest.raises(ShapeError, match="at least 5"):
            features.delta(np.zeros((3, 4)))


class TestFeatureMaps:
    @pytest.mark.parametrize("variant,shape", [
        ("exp1_6band_3ch", (6, 99, 3)),
        ("exp1_6band_1ch", (6, 99, 1)),
        ("exp2_26band_1ch", (26, 99, 1)),
    ])
    def test_shapes(self, rng, variant, shape):
        fm = features.build_feature_map(rng.normal(size=2000), variant)
        assert fm.values.shape == shape

    def test_channel_semantics(self, rng):
        x = rng.normal(size=2000)
        fm = features.build_feature_map(x, "exp1_6band_3ch")
        fb = features.mel_filterbank(6, 30.0, 300.0)
        base = features.mfcc(x, fb)
        assert np.allclose(fm.values[:, :, 0], base, atol=1e-12)
        assert np.allclose(fm.values[:, :, 1], features.delta(base), atol=1e-12)
        assert np.allclose(fm.values[:, :, 2],
                           features.delta(features.delta(base)), atol=1e-12)

    def test_single_channel_matches_first(self, rng):
        x = rng.normal(size=2000)
        three = features.build_feature_map(x, "exp1_6band_3ch")
        one = features.build_feature_map(x, "exp1_6band_1ch")
        assert np.allclose(one.values[:, :, 0], three.values[:, :, 0],
                           atol=1e-12)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="unknown feature variant"):
            features.build_feature_map(np.zeros(2000), "exp3")

    def test_save_load_round_trip(self, tmp_path, rng):
        fm = features.build_feature_map(rng.normal(size=2000), "exp2_26band_1ch")
        path = tmp_path / "map.pcgt"
        features.save_feature_map(fm, path)
        back = features.load_feature_map(path)
        assert back.variant == fm.variant
        assert back.band_hz == fm.band_hz
        # stored as float32
        assert np.allclose(back.values, fm.values, rtol=1e-6, atol=1e-6)


class TestTensorIO:
    def test_round_trip(self, tmp_path, rng):
        arr = rng.normal(size=(3, 5, 2)).astype(np.float32)
        path = tmp_path / "t.pcgt"
        tensorio.save_tensor(path, arr)
        back = tensorio.load_tensor(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_scalar_and_1d(self, tmp_path):
        path = tmp_path / "v.pcgt"
        tensorio.save_tensor(path, np.arange(7, dtype=np.float32))
        assert np.array_equal(tensorio.load_tensor(path),
                              np.arange(7, dtype=np.float32))

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "t.pcgt"
        tensorio.save_tensor(path, np.zeros((2, 2), dtype=np.float32))
        with open(path, "ab") as fh:
            fh.write(b"x")
        with pytest.raises(Exception, match="trailing"):
            tensorio.load_tensor(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "t.pcgt"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(Exception, match="magic|not a"):
            tensorio.load_tensor(path)

    def test_sidecar_round_trip(self, tmp_path):
        path = tmp_path / "t.pcgt"
        fields = {"variant": "exp1_6band_3ch", "band": "30-300", "hop": "0.01"}
        tensorio.write_sidecar(path, fields)
        assert tensorio.read_sidecar(path) == fields
