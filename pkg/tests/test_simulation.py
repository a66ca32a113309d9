import numpy as np
import pytest

from oracles import rasterize_intervals
from tsdiar.features import Waveform
from tsdiar.segments import DiarizationHypothesis, Segment
from tsdiar.simulation import (
    LabelLibrary,
    SimulationError,
    SpeakerPool,
    SynthConfig,
    augment_pool,
    build_speaker_pool,
    make_synthetic_corpus,
    measure_overlap_ratio,
    render_mixture,
    sample_label_window,
    voice_params,
)


def hyp(rec, *triples):
    return DiarizationHypothesis(rec, tuple(Segment(a, d, s) for a, d, s in triples))


def make_wave(duration=10.0, sr=8000, seed=0):
    rng = np.random.default_rng(seed)
    return Waveform(rng.normal(size=int(duration * sr)) * 0.05, sr)


class TestSpeakerPool:
    def test_fully_overlapped_recording_gives_empty_pool(self):
        h = hyp("r", (0.0, 5.0, "A"), (0.0, 5.0, "B"))
        with pytest.warns(UserWarning):
            pool = build_speaker_pool([h], {"r": make_wave(6.0)})
        assert pool.speakers() == []

    def test_non_overlapping_pool_duration_equals_speech(self):
        h = hyp("r", (0.0, 2.0, "A"), (3.0, 1.5, "B"), (5.0, 2.5, "A"))
        pool = build_speaker_pool([h], {"r": make_wave(10.0)})
        assert pool.duration("A") == pytest.approx(4.5, abs=1e-3)
        assert pool.duration("B") == pytest.approx(1.5, abs=1e-3)

    def test_mixed_case_matches_grid_oracle(self, rng):
        for _ in range(10):
            segs = []
            for _ in range(6):
                spk = ("A", "B", "C")[rng.integers(3)]
                onset = round(float(rng.uniform(0, 8)), 2)
                dur = round(float(rng.uniform(0.3, 2.0)), 2)
                segs.append((onset, dur, spk))
            h = hyp("r", *segs)
            pool = build_speaker_pool([h], {"r": make_wave(12.0)})
            n = 1200
            masks = {}
            for spk in h.speakers():
                masks[spk] = rasterize_intervals(h.speaker_intervals(spk), n)
            counts = np.sum(list(masks.values()), axis=0)
            for spk in h.speakers():
                expected = np.sum(masks[spk] & (counts == 1)) * 0.01
                assert pool.duration(spk) == pytest.approx(expected, abs=0.02 * 6)

    def test_pool_carries_actual_samples(self):
        wave = make_wave(4.0)
        h = hyp("r", (1.0, 2.0, "A"))
        pool = build_speaker_pool([h], {"r": wave})
        seg = pool.segments["A"][0]
        assert np.array_equal(seg, wave.channel(0)[8000:24000])

    def test_augment_pool_changes_gain_and_length(self, rng):
        pool = SpeakerPool({"A": [np.ones(1000)]}, 8000)
        out = augment_pool(pool, rng, gain_db=3.0, tempos=(0.9, 1.1))
        seg = out.segments["A"][0]
        assert seg.size in (int(round(1000 / 0.9)), int(round(1000 / 1.1)))
        assert 10 ** (-3.01 / 20) <= np.abs(seg).max() <= 10 ** (3.01 / 20)


class TestLabelLibrary:
    def test_silence_removed(self):
        h = hyp("r", (2.0, 1.0, "A"), (5.0, 2.0, "B"))
        lib = LabelLibrary.from_hypotheses([h])
        track = lib.tracks[0]
        assert track.duration == pytest.approx(3.0)
        # Slots are ordered by descending speech time: B (2 s) then A (1 s).
        assert track.slots[0] == ((1.0, 3.0),)
        assert track.slots[1] == ((0.0, 1.0),)

    def test_exact_length_window(self, rng):
        h = hyp("r", (0.0, 16.0, "A"))
        lib = LabelLibrary.from_hypotheses([h])
        win = sample_label_window(lib, 16.0, rng)
        assert win.length == 16.0
        assert win.slots[0] == ((0.0, 16.0),)

    def test_seeded_rng_reproducible(self):
        h1 = hyp("a", (0.0, 30.0, "A"))
        h2 = hyp("b", (0.0, 30.0, "B"))
        lib = LabelLibrary.from_hypotheses([h1, h2])
        w1 = sample_label_window(lib, 10.0, np.random.default_rng(77))
        w2 = sample_label_window(lib, 10.0, np.random.default_rng(77))
        assert w1 == w2

    def test_no_long_enough_track_raises(self, rng):
        lib = LabelLibrary.from_hypotheses([hyp("r", (0.0, 3.0, "A"))])
        with pytest.raises(SimulationError):
            sample_label_window(lib, 16.0, rng)

    def test_track_choice_is_uniform(self):
        # Track "a" has one occupied slot, track "b" has two: a discriminator.
        h1 = hyp("a", (0.0, 20.0, "A"))
        h2 = hyp("b", (0.0, 20.0, "B"), (0.0, 19.0, "C"))
        lib = LabelLibrary.from_hypotheses([h1, h2])
        rng = np.random.default_rng(5)
        counts = [0, 0]
        for _ in range(10_000):
            win = sample_label_window(lib, 19.0, rng)
            counts[0 if not win.slots[1] else 1] += 1
        assert abs(counts[0] / 10_000 - 0.5) < 0.02


class TestRenderMixture:
    def _pool(self, sr=8000):
        t = np.arange(sr * 4) / sr
        return SpeakerPool(
            {
                "A": [0.3 * np.sin(2 * np.pi * 220 * t)],
                "B": [0.3 * np.sin(2 * np.pi * 330 * t)],
            },
            sr,
        )

    def test_single_active_slot_is_that_speakers_audio(self, rng):
        from tsdiar.simulation import LabelWindow

        pool = self._pool()
        win = LabelWindow(2.0, (((0.0, 2.0),),))
        chunk = render_mixture(win, pool, 1, rng, out_frames=25, out_frame_shift=0.08,
                               speakers=("A",))
        expected = pool.segments["A"][0][: 2 * 8000]
        assert np.allclose(chunk.mixture.channel(0), expected)
        assert np.all(chunk.targets[:, 0] == 1.0)

    def test_silent_window_is_zero(self, rng):
        from tsdiar.simulation import LabelWindow

        win = LabelWindow(1.0, ((), ()))
        chunk = render_mixture(win, self._pool(), 1, rng, 12, 0.08, speakers=("A", "B"))
        assert np.allclose(chunk.mixture.samples, 0.0)
        assert np.all(chunk.targets == 0.0)

    def test_overlap_is_samplewise_sum(self, rng):
        from tsdiar.simulation import LabelWindow

        pool = self._pool()
        win_both = LabelWindow(2.0, (((0.0, 2.0),), ((0.5, 1.5),)))
        chunk = render_mixture(win_both, pool, 1, rng, 25, 0.08, speakers=("A", "B"))
        # Oracle: render each slot alone with the same seeded fills and add.
        a = render_mixture(
            LabelWindow(2.0, (((0.0, 2.0),), ())), pool, 1,
            np.random.default_rng(1), 25, 0.08, speakers=("A", "B"),
        )
        b = render_mixture(
            LabelWindow(2.0, ((), ((0.5, 1.5),))), pool, 1,
            np.random.default_rng(1), 25, 0.08, speakers=("A", "B"),
        )
        total = a.mixture.channel(0) + b.mixture.channel(0)
        assert np.allclose(chunk.mixture.channel(0), total)

    def test_multichannel_gain_delay(self, rng):
        from tsdiar.simulation import LabelWindow

        pool = self._pool()
        win = LabelWindow(1.0, (((0.0, 1.0),),))
        chunk = render_mixture(win, pool, 3, rng, 12, 0.08, speakers=("A",))
        assert chunk.mixture.n_channels == 3
        # Channels are gain/delay variants of one mono track: norms differ.
        norms = [np.linalg.norm(chunk.mixture.channel(c)) for c in range(3)]
        assert len({round(n, 6) for n in norms}) > 1

    def test_targets_match_labels_within_one_frame(self, rng):
        from tsdiar.simulation import LabelWindow

        win = LabelWindow(2.0, (((0.33, 1.27),), ()))
        chunk = render_mixture(win, self._pool(), 1, rng, 25, 0.08, speakers=("A", "B"))
        for t in range(25):
            mid = (t + 0.5) * 0.08
            inside = 0.33 <= mid < 1.27
            if abs(mid - 0.33) > 0.08 and abs(mid - 1.27) > 0.08:
                assert chunk.targets[t, 0] == float(inside)

    def test_distinct_speakers_enforced(self, rng):
        from tsdiar.simulation import LabelWindow

        win = LabelWindow(1.0, ((), (), ()))
        with pytest.raises(SimulationError):
            render_mixture(win, self._pool(), 1, rng, 12, 0.08)  # 3 slots, 2 speakers

    def test_seeded_rendering_reproducible(self):
        from tsdiar.simulation import LabelWindow

        pool = self._pool()
        win = LabelWindow(2.0, (((0.0, 1.0),), ((0.4, 1.8),)))
        c1 = render_mixture(win, pool, 2, np.random.default_rng(9), 25, 0.08)
        c2 = render_mixture(win, pool, 2, np.random.default_rng(9), 25, 0.08)
        assert np.array_equal(c1.mixture.samples, c2.mixture.samples)
        assert c1.bank_speakers == c2.bank_speakers


class TestSyntheticCorpus:
    def test_zero_overlap_config(self, rng):
        cfg = SynthConfig(sample_rate=8000, n_channels=1, n_recordings=2, duration=30.0,
                          overlap_ratio=0.0)
        _, refs = make_synthetic_corpus(4, cfg, rng)
        for ref in refs:
            assert measure_overlap_ratio(ref) == 0.0

    def test_overlap_ratio_near_configured(self, rng):
        cfg = SynthConfig(sample_rate=8000, n_channels=1, n_recordings=6, duration=60.0,
                          overlap_ratio=0.3)
        _, refs = make_synthetic_corpus(6, cfg, rng)
        ratios = [measure_overlap_ratio(r) for r in refs]
        assert abs(float(np.mean(ratios)) - 0.3) < 0.05

    def test_distinct_f0_gives_distinct_fbank_profiles(self, rng):
        from tsdiar.features import FbankConfig, fbank
        from tsdiar.simulation import synth_speech

        cfg = SynthConfig(sample_rate=8000)
        v1 = voice_params(0, 2, cfg, seed=0)
        v2 = voice_params(1, 2, cfg, seed=0)
        assert v2.f0 == pytest.approx(v1.f0 * 4.0, rel=1e-6)  # 105 -> 420 span
        fb_cfg = FbankConfig(sample_rate=8000, n_mels=24, f_min=40.0)
        s1 = synth_speech(v1, 2.0, 8000, rng)
        s2 = synth_speech(v2, 2.0, 8000, rng)
        p1 = fbank(Waveform(s1, 8000), fb_cfg).data[0].mean(axis=0)
        p2 = fbank(Waveform(s2, 8000), fb_cfg).data[0].mean(axis=0)
        assert np.linalg.norm(p1 - p2) > 1.0

    def test_corpus_is_reproducible(self):
        cfg = SynthConfig(sample_rate=8000, n_channels=2, n_recordings=2, duration=20.0)
        w1, r1 = make_synthetic_corpus(4, cfg, np.random.default_rng(3), seed=3)
        w2, r2 = make_synthetic_corpus(4, cfg, np.random.default_rng(3), seed=3)
        assert r1 == r2
        for k in w1:
            assert np.array_equal(w1[k].samples, w2[k].samples)

    def test_references_align_with_audio_energy(self, rng):
        cfg = SynthConfig(sample_rate=8000, n_channels=1, n_recordings=1, duration=30.0,
                          overlap_ratio=0.2, noise_level=0.005)
        waves, refs = make_synthetic_corpus(4, cfg, rng)
        wave, ref = waves["rec000"], refs[0]
        x = wave.channel(0)
        speech_mask = rasterize_intervals(
            [(s.onset, s.offset) for s in ref.segments], int(30.0 / 0.01)
        )
        frame_energy = np.array([
            np.mean(x[int(i * 0.01 * 8000) : int((i + 1) * 0.01 * 8000)] ** 2)
            for i in range(speech_mask.size)
        ])
        speech_e = frame_energy[speech_mask].mean()
        silence_e = frame_energy[~speech_mask].mean() if np.any(~speech_mask) else 0.0
        assert speech_e > 50 * max(silence_e, 1e-12)

    def test_needs_two_speakers(self, rng):
        with pytest.raises(SimulationError):
            make_synthetic_corpus(1, SynthConfig(), rng)
