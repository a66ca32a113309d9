import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tsdiar.features import (
    FbankConfig,
    FeatureError,
    MultiChannelFeatures,
    Waveform,
    fbank,
    filter_centers_hz,
    frame_count,
    hz_to_mel,
    mel_matrix,
    read_wav,
    stft_power,
    write_wav,
)

CFG = FbankConfig(sample_rate=16000, n_mels=80)


def naive_dft_power(frame, nfft):
    """O(N^2) direct DFT of one windowed frame (independent of numpy.fft)."""
    n = np.arange(nfft)
    padded = np.zeros(nfft)
    padded[: frame.size] = frame
    out = []
    for k in range(nfft // 2 + 1):
        re = np.sum(padded * np.cos(-2 * np.pi * k * n / nfft))
        im = np.sum(padded * np.sin(-2 * np.pi * k * n / nfft))
        out.append(re * re + im * im)
    return np.array(out)


class TestConfig:
    def test_defaults(self):
        assert CFG.frame_length == 400
        assert CFG.frame_shift == 160
        assert CFG.effective_fft_size() == 512
        assert CFG.effective_f_max() == pytest.approx(7600.0)

    def test_invalid_shift(self):
        with pytest.raises(FeatureError):
            FbankConfig(frame_length_ms=10.0, frame_shift_ms=25.0)

    def test_f_max_above_nyquist(self):
        with pytest.raises(FeatureError):
            FbankConfig(sample_rate=8000, f_max=7600.0)


class TestStftPower:
    def test_zero_signal(self):
        power = stft_power(np.zeros(1600), CFG)
        assert power.shape == (frame_count(1600, CFG), 257)
        assert np.all(power == 0.0)

    def test_too_short_signal_names_minimum(self):
        with pytest.raises(FeatureError, match="400"):
            stft_power(np.zeros(100), CFG)

    def test_impulse_at_frame_center_is_flat(self):
        sig = np.zeros(400)
        sig[200] = 1.0
        power = stft_power(sig, CFG)
        assert power.shape[0] == 1
        row = power[0]
        assert np.max(row) - np.min(row) < 1e-9

    def test_sine_peaks_at_expected_bin(self):
        t = np.arange(8000) / 16000.0
        sig = np.sin(2 * np.pi * 1000.0 * t)
        power = stft_power(sig, CFG)
        expected_bin = round(1000 * 512 / 16000)
        assert np.all(np.argmax(power, axis=1) == expected_bin)

    def test_matches_naive_dft(self, rng):
        sig = rng.normal(size=700)
        power = stft_power(sig, CFG)
        hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(400) / 400)
        for t in range(power.shape[0]):
            frame = sig[t * 160 : t * 160 + 400] * hann
            assert np.allclose(power[t], naive_dft_power(frame, 512), atol=1e-8)

    @given(st.integers(400, 20000))
    def test_frame_count_formula(self, n):
        assert stft_power(np.zeros(n), CFG).shape[0] == (n - 400) // 160 + 1


class TestMelMatrix:
    def test_mel_scale_value(self):
        assert hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)

    def test_nonnegative_with_peaks_capped_at_one(self):
        mat = mel_matrix(CFG)
        assert mat.shape == (80, 257)
        assert np.all(mat >= 0)
        peaks = mat.max(axis=1)
        # Triangles have a unit apex on the continuous axis; sampled peaks
        # sit at or below it, and wide (high-frequency) filters reach it.
        assert np.all(peaks > 0)
        assert np.all(peaks <= 1.0)
        assert peaks.max() > 0.98

    def test_unit_apex_when_center_hits_a_bin(self):
        # 31.25 Hz bins; any filter whose center lands on a bin samples to 1.
        mat = mel_matrix(CFG)
        centers = filter_centers_hz(CFG)
        bin_hz = np.arange(257) * 16000 / 512
        for j, c in enumerate(centers):
            k = int(round(c / (16000 / 512)))
            if abs(bin_hz[k] - c) < 1e-9:
                assert mat[j, k] == pytest.approx(1.0)

    def test_column_sums_at_most_one(self):
        mat = mel_matrix(CFG)
        assert np.all(mat.sum(axis=0) <= 1.0 + 1e-12)

    def test_adjacent_filters_overlap(self):
        # At full bin resolution every consecutive pair shares support; at the
        # default 512-point FFT the two narrowest low-frequency pairs fall
        # between bins, so assert the bulk property there.
        fine = mel_matrix(FbankConfig(sample_rate=16000, n_mels=80, fft_size=1024))
        for j in range(79):
            assert np.any(np.minimum(fine[j], fine[j + 1]) > 0)
        mat = mel_matrix(CFG)
        shared = sum(np.any(np.minimum(mat[j], mat[j + 1]) > 0) for j in range(79))
        assert shared >= 75

    def test_centers_strictly_increasing(self):
        centers = filter_centers_hz(CFG)
        assert np.all(np.diff(centers) > 0)

    def test_too_many_filters_rejected(self):
        with pytest.raises(FeatureError):
            mel_matrix(FbankConfig(sample_rate=16000, n_mels=300))


class TestFbank:
    def test_zero_signal_hits_log_floor(self):
        w = Waveform(np.zeros((1, 1600)), 16000)
        feats = fbank(w, CFG)
        assert feats.data.shape == (1, frame_count(1600, CFG), 80)
        assert np.allclose(feats.data, np.log(1e-10))

    def test_amplitude_doubling_shifts_by_log4(self, rng):
        sig = rng.normal(size=3200) * 0.1
        base = fbank(Waveform(sig, 16000), CFG).data
        loud = fbank(Waveform(2.0 * sig, 16000), CFG).data
        above_floor = base > np.log(1e-10) + 1.5  # keep away from the clamp
        assert np.allclose((loud - base)[above_floor], np.log(4.0), atol=1e-9)

    def test_matches_loop_oracle(self, rng):
        sig = rng.normal(size=1200)
        feats = fbank(Waveform(sig, 16000), CFG).data[0]
        power = stft_power(sig, CFG)
        mel = mel_matrix(CFG)
        t_frames, n_mels = feats.shape
        for t in range(t_frames):
            for m in range(0, n_mels, 13):
                acc = 0.0
                for k in range(power.shape[1]):
                    acc += mel[m, k] * power[t, k]
                assert feats[t, m] == pytest.approx(np.log(max(acc, 1e-10)), abs=1e-6)

    def test_channel_permutation_equivariance(self, rng):
        samples = rng.normal(size=(3, 1600)) * 0.1
        base = fbank(Waveform(samples, 16000), CFG).data
        perm = [2, 0, 1]
        permuted = fbank(Waveform(samples[perm], 16000), CFG).data
        assert np.array_equal(permuted, base[perm])


class TestWavIO:
    def test_round_trip_mono(self, tmp_path, rng):
        sig = (rng.uniform(-0.5, 0.5, size=2000) * 32768).round() / 32768
        w = Waveform(sig, 16000)
        p = tmp_path / "m.wav"
        write_wav(p, w)
        back = read_wav(p)
        assert back.sample_rate == 16000
        assert back.n_channels == 1
        assert np.allclose(back.samples, w.samples, atol=1e-9)

    def test_round_trip_stereo(self, tmp_path, rng):
        sig = (rng.uniform(-0.9, 0.9, size=(2, 500)) * 32768).round() / 32768
        p = tmp_path / "s.wav"
        write_wav(p, Waveform(sig, 8000))
        back = read_wav(p)
        assert back.n_channels == 2
        assert np.allclose(back.samples, sig, atol=1e-9)

    def test_range_is_scaled(self, tmp_path):
        p = tmp_path / "full.wav"
        write_wav(p, Waveform(np.array([1.0, -1.0, 0.0]), 16000))
        back = read_wav(p)
        assert np.all(back.samples < 1.0)
        assert np.all(back.samples >= -1.0)


class TestTypes:
    def test_features_must_be_3d(self):
        with pytest.raises(FeatureError):
            MultiChannelFeatures(np.zeros((4, 5)))

    def test_waveform_slice(self):
        w = Waveform(np.arange(16000, dtype=float)[None, :] / 16000, 16000)
        cut = w.slice(0.25, 0.5)
        assert cut.n_samples == 4000
        assert cut.samples[0, 0] == pytest.approx(0.25)
