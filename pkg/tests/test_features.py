import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phonocard.errors import DomainError, ResolutionError, SignalTooShort
from phonocard.features import (MfccConfig, MfccExtractor, dct_matrix, hz_to_mel,
                                mel_centers, mel_filterbank, mel_to_hz, mfcc,
                                power_spectrum)

CFG = MfccConfig()


class TestMelScale:
    def test_anchors(self):
        assert hz_to_mel(0) == 0
        # 2595 * log10(2), evaluated independently of the implementation
        assert hz_to_mel(700) == pytest.approx(2595 * np.log(2) / np.log(10), abs=1e-9)
        assert hz_to_mel(700) == pytest.approx(781.173, abs=1e-3)
        assert hz_to_mel(1000) == pytest.approx(999.99, abs=0.01)

    def test_inverse_anchors(self):
        assert mel_to_hz(0) == 0
        assert mel_to_hz(hz_to_mel(237.0)) == pytest.approx(237.0, abs=1e-6)
        assert mel_to_hz(999.99) == pytest.approx(1000, abs=0.1)

    @given(st.floats(1e-3, 2e4))
    def test_round_trip(self, f):
        assert mel_to_hz(hz_to_mel(f)) == pytest.approx(f, rel=1e-9)

    def test_monotone(self):
        f = np.linspace(0, 500, 501)
        assert np.all(np.diff(hz_to_mel(f)) > 0)

    @pytest.mark.parametrize("fn", [hz_to_mel, mel_to_hz])
    def test_negative(self, fn):
        with pytest.raises(DomainError):
            fn(-1.0)


class TestFilterbank:
    def test_shape_and_peaks(self):
        fb = mel_filterbank(CFG, 1000)
        assert fb.shape == (26, 129)
        assert np.all(fb >= 0)
        np.testing.assert_allclose(fb.max(axis=1), 1.0)

    def test_centers_equally_spaced_in_mel(self):
        m = hz_to_mel(mel_centers(CFG))
        np.testing.assert_allclose(np.diff(m), np.diff(m)[0], atol=1e-6)

    def test_three_filters(self):
        cfg = MfccConfig(n_mels=3, n_coeffs=3)
        delta = hz_to_mel(500) / 4
        np.testing.assert_allclose(hz_to_mel(mel_centers(cfg)), delta * np.arange(1, 4), atol=1e-9)
        fb = mel_filterbank(cfg, 1000)
        freqs = np.fft.rfftfreq(256, 1e-3)
        # each filter's peak sits on the bin nearest its center
        for row, c in zip(fb, mel_centers(cfg)):
            assert abs(freqs[np.argmax(row)] - c) <= freqs[1] / 2 + 1e-9

    def test_too_dense(self):
        with pytest.raises(ResolutionError):
            mel_filterbank(MfccConfig(n_mels=200, n_coeffs=13), 1000)

    def test_invalid_band(self):
        with pytest.raises(ValueError):
            mel_filterbank(MfccConfig(f_max=800), 1000)


class TestDct:
    def test_orthonormal(self, rng):
        d = dct_matrix(26)
        v = rng.standard_normal(26)
        np.testing.assert_allclose(d.T @ (d @ v), v, atol=1e-9)
        np.testing.assert_allclose(d @ d.T, np.eye(26), atol=1e-12)

    def test_matches_scipy(self, rng):
        from scipy.fft import dct
        v = rng.standard_normal(26)
        np.testing.assert_allclose(dct_matrix(26) @ v, dct(v, type=2, norm="ortho"), atol=1e-12)


def test_hamming_leakage():
    k = 20
    frame = np.cos(2 * np.pi * k * np.arange(256) / 256)
    p = power_spectrum(frame, CFG)
    assert p[k - 1:k + 2].sum() / p.sum() > 0.95


class TestMfcc:
    def test_shape(self, rng):
        m = mfcc(rng.standard_normal(2500))
        assert m.values.shape == (18, 13)
        assert np.all(np.isfinite(m.values))
        assert m.frame_times.size == 18
        assert m.frame_times[0] == pytest.approx(0.128)

    def test_zeros(self):
        v = mfcc(np.zeros(2500)).values
        np.testing.assert_array_equal(v, np.broadcast_to(v[0], v.shape))
        assert v[0, 0] == pytest.approx(np.sqrt(26) * np.log(1e-10))
        np.testing.assert_allclose(v[:, 1:], 0, atol=1e-9)

    def test_energy_doubling(self, rng):
        x = rng.standard_normal(2500)
        a, b = mfcc(x).values, mfcc(2 * x).values
        np.testing.assert_allclose(b[:, 1:], a[:, 1:], atol=1e-6)
        np.testing.assert_allclose(b[:, 0] - a[:, 0], np.sqrt(26) * np.log(4), atol=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 59))
    def test_trailing_zero_invariance(self, seed, extra):
        # a 19th frame would need 2560 samples, so up to 59 appended zeros
        # never complete another frame
        x = np.random.default_rng(seed).standard_normal(2500)
        np.testing.assert_array_equal(mfcc(np.concatenate([x, np.zeros(extra)])).values,
                                      mfcc(x).values)

    def test_batch_matches_single(self, rng):
        x = rng.standard_normal((3, 2500))
        ext = MfccExtractor()
        batch = ext(x)
        for i in range(3):
            np.testing.assert_allclose(batch[i], ext(x[i]), atol=1e-12)

    def test_too_short(self):
        with pytest.raises(SignalTooShort):
            mfcc(np.zeros(100))

    def test_digest_stable(self):
        assert MfccConfig().digest() == MfccConfig().digest()
        assert MfccConfig(hop=64).digest() != MfccConfig().digest()
