"""Online simulated-meeting generation from diarization labels and speech pools,
plus a synthetic-speaker corpus generator for desk-scale experiments.

Simulated chunks follow the label-driven recipe: sample a silence-stripped
label window, fill each slot's active intervals by concatenating that
speaker's non-overlapped pool segments (hard cuts, cropped at interval
ends), and sum the slots. Multi-channel chunks differ by per-channel random
gain in [0.5, 1.0] and an integer delay in [0, 8] samples.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .features import Waveform
from .segments import (
    DiarizationHypothesis,
    Segment,
    Timeline,
    merge_intervals,
    non_overlapped_regions,
)


class SimulationError(ValueError):
    pass


@dataclass
class SpeakerPool:
    """Single-speaker waveform segments per speaker (channel 0, shared rate)."""

    segments: dict[str, list[np.ndarray]]
    sample_rate: int

    def speakers(self) -> list[str]:
        return sorted(self.segments)

    def duration(self, speaker: str) -> float:
        return sum(len(s) for s in self.segments.get(speaker, ())) / self.sample_rate

    def total_duration(self) -> float:
        return sum(self.duration(s) for s in self.segments)


def build_speaker_pool(
    hyps: list[DiarizationHypothesis],
    waves: dict[str, Waveform],
    min_duration: float = 0.0,
) -> SpeakerPool:
    """Pool of non-overlapped speech per speaker across recordings."""
    rates = {waves[h.recording_id].sample_rate for h in hyps if h.recording_id in waves}
    if len(rates) > 1:
        raise SimulationError(f"mixed sample rates in pool sources: {sorted(rates)}")
    segments: dict[str, list[np.ndarray]] = {}
    seen: set[str] = set()
    for hyp in hyps:
        wave = waves.get(hyp.recording_id)
        if wave is None:
            raise SimulationError(f"no waveform for recording {hyp.recording_id!r}")
        sr = wave.sample_rate
        regions = non_overlapped_regions(hyp, min_duration=min_duration)
        seen.update(hyp.speakers())
        for spk, segs in regions.items():
            for seg in segs:
                a = int(round(seg.onset * sr))
                b = int(round(seg.offset * sr))
                piece = wave.channel(0)[a:b]
                if piece.size:
                    segments.setdefault(spk, []).append(piece)
    for spk in sorted(seen - set(segments)):
        warnings.warn(f"speaker {spk!r} has no non-overlapped speech; excluded from pool")
    return SpeakerPool(segments, sample_rate=next(iter(rates)) if rates else 16000)


def augment_pool(
    pool: SpeakerPool,
    rng: np.random.Generator,
    gain_db: float = 3.0,
    tempos: tuple[float, ...] = (0.9, 1.0, 1.1),
) -> SpeakerPool:
    """Optional amplification / tempo perturbation of pool segments."""
    out: dict[str, list[np.ndarray]] = {}
    for spk in pool.speakers():
        pieces = []
        for seg in pool.segments[spk]:
            gain = 10.0 ** (rng.uniform(-gain_db, gain_db) / 20.0)
            tempo = float(rng.choice(tempos))
            if tempo != 1.0:
                n_out = max(2, int(round(len(seg) / tempo)))
                pos = np.linspace(0.0, len(seg) - 1.0, n_out)
                base = np.floor(pos).astype(int)
                frac = pos - base
                nxt = np.minimum(base + 1, len(seg) - 1)
                seg = seg[base] * (1.0 - frac) + seg[nxt] * frac
            pieces.append(gain * seg)
        out[spk] = pieces
    return SpeakerPool(out, pool.sample_rate)


# -- label library -------------------------------------------------------------------


@dataclass(frozen=True)
class LabelTrack:
    """One recording's labels on the silence-stripped timeline, slotted per speaker."""

    duration: float
    slots: tuple[tuple[tuple[float, float], ...], ...]


@dataclass(frozen=True)
class LabelWindow:
    length: float
    slots: tuple[tuple[tuple[float, float], ...], ...]


@dataclass
class LabelLibrary:
    tracks: list[LabelTrack] = field(default_factory=list)

    @staticmethod
    def from_hypotheses(hyps: list[DiarizationHypothesis], n_slots: int = 4) -> "LabelLibrary":
        tracks = []
        for hyp in hyps:
            if not hyp.segments:
                continue
            timeline = Timeline.from_hypothesis(hyp)
            speakers = sorted(hyp.speakers(), key=lambda s: -hyp.speech_time(s))[:n_slots]
            slots = []
            for spk in speakers:
                ivs = merge_intervals(hyp.speaker_intervals(spk))
                compacted = tuple(
                    (timeline.to_compact(a), timeline.to_compact(b)) for a, b in ivs
                )
                slots.append(tuple(iv for iv in compacted if iv[1] > iv[0]))
            while len(slots) < n_slots:
                slots.append(())
            tracks.append(LabelTrack(timeline.total_duration(), tuple(slots)))
        return LabelLibrary(tracks)


def sample_label_window(lib: LabelLibrary, length: float, rng: np.random.Generator) -> LabelWindow:
    """Uniformly random eligible track and offset; intervals clipped to the window."""
    eligible = [t for t in lib.tracks if t.duration >= length]
    if not eligible:
        raise SimulationError(f"no label track is at least {length:.2f}s long")
    track = eligible[int(rng.integers(len(eligible)))]
    offset = float(rng.uniform(0.0, track.duration - length))
    slots = []
    for ivs in track.slots:
        clipped = tuple(
            (max(a, offset) - offset, min(b, offset + length) - offset)
            for a, b in ivs
            if min(b, offset + length) > max(a, offset)
        )
        slots.append(clipped)
    return LabelWindow(length, tuple(slots))


# -- mixture rendering ------------------------------------------------------------------


@dataclass(frozen=True)
class SimChunk:
    mixture: Waveform
    targets: np.ndarray  # (T', N) binary
    bank_speakers: tuple[str, ...]


def rasterize_targets(
    slots: tuple[tuple[tuple[float, float], ...], ...],
    n_frames: int,
    frame_dur: float,
) -> np.ndarray:
    """Frame-midpoint rasterization of per-slot active intervals."""
    targets = np.zeros((n_frames, len(slots)), dtype=np.float64)
    mids = (np.arange(n_frames) + 0.5) * frame_dur
    for n, ivs in enumerate(slots):
        for a, b in ivs:
            targets[(mids >= a) & (mids < b), n] = 1.0
    return targets


def _fill_intervals(
    intervals, n_samples: int, pieces: list[np.ndarray], sr: int, rng: np.random.Generator
) -> np.ndarray:
    """Fill active intervals with concatenated pool pieces, cropped at interval ends."""
    track = np.zeros(n_samples)
    order = rng.permutation(len(pieces))
    cursor = 0
    for a, b in intervals:
        lo, hi = int(round(a * sr)), min(int(round(b * sr)), n_samples)
        need = hi - lo
        filled = 0
        while filled < need:
            piece = pieces[order[cursor % len(order)]]
            cursor += 1
            take = min(len(piece), need - filled)
            track[lo + filled : lo + filled + take] = piece[:take]
            filled += take
    return track


def render_mixture(
    window: LabelWindow,
    pool: SpeakerPool,
    n_channels: int,
    rng: np.random.Generator,
    out_frames: int,
    out_frame_shift: float,
    speakers: tuple[str, ...] | None = None,
) -> SimChunk:
    """Render one training chunk; slots are assigned distinct pool speakers."""
    n_slots = len(window.slots)
    available = pool.speakers()
    if speakers is None:
        if len(available) < n_slots:
            raise SimulationError(
                f"pool has {len(available)} speakers but the window needs {n_slots}"
            )
        idx = rng.choice(len(available), size=n_slots, replace=False)
        speakers = tuple(available[i] for i in idx)
    elif len(speakers) != n_slots:
        raise SimulationError("explicit speaker list must match the slot count")

    sr = pool.sample_rate
    n_samples = int(round(window.length * sr))
    slot_tracks = []
    for ivs, spk in zip(window.slots, speakers):
        pieces = pool.segments.get(spk, [])
        if ivs and not pieces:
            raise SimulationError(f"speaker {spk!r} has an empty pool")
        slot_tracks.append(
            _fill_intervals(ivs, n_samples, pieces, sr, rng) if ivs else np.zeros(n_samples)
        )
    mono = np.sum(slot_tracks, axis=0)

    if n_channels == 1:
        mixture = Waveform(mono[None, :], sr)
    else:
        chans = []
        for _ in range(n_channels):
            gain = float(rng.uniform(0.5, 1.0))
            delay = int(rng.integers(0, 9))
            shifted = np.concatenate([np.zeros(delay), mono])[:n_samples]
            chans.append(gain * shifted)
        mixture = Waveform(np.stack(chans), sr)

    targets = rasterize_targets(window.slots, out_frames, out_frame_shift)
    return SimChunk(mixture, targets, tuple(speakers))


# -- synthetic speaker corpus ---------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = 16000
    n_channels: int = 2
    n_recordings: int = 8
    duration: float = 75.0
    speakers_per_recording: int = 4
    overlap_ratio: float = 0.3
    turn_min: float = 1.0
    turn_max: float = 3.0
    gap_min: float = 0.1
    gap_max: float = 0.5
    gap_probability: float = 0.3
    noise_level: float = 0.01
    f0_min: float = 105.0
    f0_max: float = 420.0


@dataclass(frozen=True)
class VoiceParams:
    f0: float
    harmonic_amps: np.ndarray
    am_rate: float


def voice_params(speaker_index: int, n_speakers: int, cfg: SynthConfig, seed: int) -> VoiceParams:
    """Deterministic per-speaker voice: unique f0 plus a distinctive envelope.

    Besides the log-spaced f0, each voice gets a random spectral tilt and two
    formant-like harmonic emphases, so voices with related f0s still differ
    in timbre.
    """
    rng = np.random.default_rng([seed, 7_000_003, speaker_index])
    if n_speakers > 1:
        ratio = (cfg.f0_max / cfg.f0_min) ** (speaker_index / (n_speakers - 1))
    else:
        ratio = 1.0
    f0 = cfg.f0_min * ratio
    n_harm = max(3, min(12, int(0.45 * cfg.sample_rate / f0)))
    tilt = rng.uniform(0.5, 1.5)
    amps = np.array([1.0 / (k**tilt) for k in range(1, n_harm + 1)])
    amps *= rng.uniform(0.4, 1.0, size=n_harm)  # speaker-specific envelope bumps
    for peak in rng.choice(n_harm, size=min(2, n_harm), replace=False):
        amps[peak] *= rng.uniform(2.5, 4.0)  # formant-like emphasis
    amps /= amps.sum()
    return VoiceParams(f0=f0, harmonic_amps=amps, am_rate=float(rng.uniform(2.5, 5.0)))


def synth_speech(params: VoiceParams, duration: float, sr: int, rng: np.random.Generator,
                 noise_level: float = 0.01) -> np.ndarray:
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    sig = np.zeros(n)
    vibrato = 1.0 + 0.005 * np.sin(2 * np.pi * 4.7 * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(params.f0 * vibrato) / sr
    for k, amp in enumerate(params.harmonic_amps, start=1):
        sig += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    am = 0.75 + 0.25 * np.sin(2 * np.pi * params.am_rate * t + rng.uniform(0, 2 * np.pi))
    sig = sig * am + noise_level * rng.normal(size=n)
    peak = np.max(np.abs(sig))
    return 0.3 * sig / peak if peak > 0 else sig


def _meeting_turns(
    speakers: tuple[str, ...],
    duration: float,
    cfg: SynthConfig,
    rng: np.random.Generator,
) -> list[tuple[float, float, str]]:
    """Chain of talk spurts whose pairwise overlaps hit the configured ratio."""
    rho = cfg.overlap_ratio
    beta = rho / (1.0 + rho)
    overlap_prob = 1.0 - cfg.gap_probability if rho > 0 else 0.0
    beta_eff = beta / overlap_prob if overlap_prob > 0 else 0.0

    turns: list[tuple[float, float, str]] = []
    prev_spk = None
    prev_start, prev_end = 0.0, 0.0
    while True:
        choices = [s for s in speakers if s != prev_spk] or list(speakers)
        spk = choices[int(rng.integers(len(choices)))]
        length = float(rng.uniform(cfg.turn_min, cfg.turn_max))
        if not turns:
            start = float(rng.uniform(0.0, cfg.gap_max))
        elif rho > 0 and rng.uniform() < overlap_prob:
            ov = beta_eff * length * float(rng.uniform(0.5, 1.5))
            ov = min(ov, 0.8 * (prev_end - prev_start), 0.8 * length)
            start = max(0.0, prev_end - ov)
        else:
            start = prev_end + float(rng.uniform(cfg.gap_min, cfg.gap_max))
        end = start + length
        if end > duration:
            break
        turns.append((start, end, spk))
        prev_spk, prev_start, prev_end = spk, start, end
    return turns


def make_synthetic_corpus(
    n_speakers: int,
    cfg: SynthConfig,
    rng: np.random.Generator,
    seed: int = 0,
) -> tuple[dict[str, Waveform], list[DiarizationHypothesis]]:
    """Meeting-style recordings of distinct harmonic voices plus reference labels."""
    if n_speakers < 2:
        raise SimulationError("need at least 2 synthetic speakers")
    names = [f"spk{i}" for i in range(n_speakers)]
    voices = {
        name: voice_params(i, n_speakers, cfg, seed) for i, name in enumerate(names)
    }
    waves: dict[str, Waveform] = {}
    refs: list[DiarizationHypothesis] = []
    for r in range(cfg.n_recordings):
        rec_id = f"rec{r:03d}"
        cast_idx = rng.choice(n_speakers, size=min(cfg.speakers_per_recording, n_speakers), replace=False)
        cast = tuple(names[i] for i in sorted(cast_idx))
        turns = _meeting_turns(cast, cfg.duration, cfg, rng)
        n_samples = int(round(cfg.duration * cfg.sample_rate))
        mono = np.zeros(n_samples)
        segs = []
        for start, end, spk in turns:
            piece = synth_speech(
                voices[spk], end - start, cfg.sample_rate, rng, cfg.noise_level
            )
            a = int(round(start * cfg.sample_rate))
            mono[a : a + piece.size] += piece[: max(0, n_samples - a)]
            segs.append(Segment(round(start, 4), round(end - start, 4), spk))
        if cfg.n_channels == 1:
            samples = mono[None, :]
        else:
            chans = []
            for _ in range(cfg.n_channels):
                gain = float(rng.uniform(0.6, 1.0))
                delay = int(rng.integers(0, 9))
                shifted = np.concatenate([np.zeros(delay), mono])[:n_samples]
                chans.append(gain * shifted + 1e-4 * rng.normal(size=n_samples))
            samples = np.stack(chans)
        peak = np.max(np.abs(samples))
        if peak >= 1.0:
            samples = 0.95 * samples / peak
        waves[rec_id] = Waveform(samples, cfg.sample_rate)
        refs.append(DiarizationHypothesis(rec_id, tuple(segs)))
    return waves, refs


def measure_overlap_ratio(hyp: DiarizationHypothesis, step: float = 0.01) -> float:
    """Overlapped speech time / total speech time on a uniform grid."""
    extent = hyp.extent()
    n = int(np.ceil(extent / step)) + 1
    counts = np.zeros(n)
    mids = (np.arange(n) + 0.5) * step
    for spk in hyp.speakers():
        active = np.zeros(n, dtype=bool)
        for a, b in hyp.speaker_intervals(spk):
            active |= (mids >= a) & (mids < b)
        counts += active
    speech = np.sum(counts >= 1)
    if speech == 0:
        return 0.0
    return float(np.sum(counts >= 2) / speech)
