"""Training schedule and multi-round chunked inference for the TS-VAD models.

Training runs three stages: back-end only on simulated chunks with the
copied front end frozen, then joint training, then a low-LR fine-tune on
real-format chunks; the checkpoints with the lowest validation BCE from the
final stage are averaged. Inference chunks the silence-stripped recording,
averages overlapped chunk probabilities, median-filters, thresholds, and
feeds each round's output back as the next round's initialization.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Adam
from .features import FbankConfig, Waveform, fbank
from .layers import bce_loss
from .models import DecisionSequence, TargetSpeakerBank
from .segments import (
    DiarizationHypothesis,
    Segment,
    Timeline,
    merge_same_speaker,
    non_overlapped_regions,
)


class TrainingDivergedError(RuntimeError):
    pass


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class StageSpec:
    name: str
    epochs: int
    lr: float
    freeze_front_end: bool = False
    source: str = "sim"  # "sim" | "real"

    def __post_init__(self):
        if self.lr <= 0:
            raise PipelineError("learning rate must be positive")
        if self.epochs < 0:
            raise PipelineError("epoch count must be non-negative")


@dataclass(frozen=True)
class TrainSchedule:
    """Three-stage schedule; the paper-scale counts are 10 / 10 / 200 epochs."""

    stages: tuple[StageSpec, ...] = (
        StageSpec("frozen-front-end", 10, 1e-4, freeze_front_end=True, source="sim"),
        StageSpec("joint", 10, 1e-4, source="sim"),
        StageSpec("fine-tune", 20, 1e-5, source="real"),
    )
    chunk_length: float = 16.0
    steps_per_epoch: int = 10
    batch: int = 1  # chunks averaged per optimizer step
    keep_best: int = 5

    def without_stage1(self) -> "TrainSchedule":
        """Ablation: fold stage 1's budget into joint training from the start."""
        if len(self.stages) < 2 or not self.stages[0].freeze_front_end:
            return self
        merged = replace(
            self.stages[1], epochs=self.stages[0].epochs + self.stages[1].epochs
        )
        return replace(self, stages=(merged,) + self.stages[2:])

    def scaled(self, epoch_scale: float) -> "TrainSchedule":
        stages = tuple(
            replace(s, epochs=max(1, int(round(s.epochs * epoch_scale)))) for s in self.stages
        )
        return replace(self, stages=stages)


@dataclass(frozen=True)
class InferenceConfig:
    chunk: float = 16.0
    shift: float = 4.0
    median_window: int = 7
    rounds: int = 3
    threshold: float = 0.5
    min_duration: float = 0.2
    gap_bridge: float = 0.3

    def __post_init__(self):
        if self.shift > self.chunk:
            raise PipelineError("shift must not exceed the chunk length")
        if self.median_window % 2 != 1:
            raise PipelineError("median window must be odd")
        if self.rounds < 1:
            raise PipelineError("need at least one inference round")
        if not 0.0 < self.threshold < 1.0:
            raise PipelineError("decision threshold must lie in (0, 1)")


@dataclass(frozen=True)
class TrainChunk:
    """One ready-to-train example: features, frame targets, and its bank."""

    features: np.ndarray  # (C, T, F)
    targets: np.ndarray  # (T', N)
    bank: TargetSpeakerBank

    @property
    def mask(self) -> np.ndarray:
        return self.bank.valid_mask.astype(np.float64)


# -- smoothing and decoding ---------------------------------------------------------


def median_filter(seq, window: int = 7):
    """Per-column sliding median with edge replication."""
    if window % 2 != 1:
        raise PipelineError("median window must be odd")
    probs = seq.probs if isinstance(seq, DecisionSequence) else np.asarray(seq)
    if window == 1 or probs.shape[0] == 0:
        out = probs.copy()
    else:
        half = window // 2
        padded = np.pad(probs, ((half, half), (0, 0)), mode="edge")
        stacked = np.stack([padded[i : i + probs.shape[0]] for i in range(window)])
        out = np.median(stacked, axis=0)
    if isinstance(seq, DecisionSequence):
        return DecisionSequence(out, seq.frame_shift_out)
    return out


def decode(
    seq: DecisionSequence,
    bank: TargetSpeakerBank,
    threshold: float = 0.5,
    min_duration: float = 0.2,
    gap_bridge: float = 0.3,
    recording_id: str = "rec",
) -> DiarizationHypothesis:
    """Threshold probabilities into segments: drop short ones, then bridge gaps."""
    if not 0.0 < threshold < 1.0:
        raise PipelineError("threshold must lie in (0, 1)")
    dt = seq.frame_shift_out
    segs: list[Segment] = []
    for slot in range(seq.probs.shape[1]):
        if not bank.valid_mask[slot]:
            continue
        speaker = bank.speakers[slot]
        active = seq.probs[:, slot] >= threshold
        runs = []
        start = None
        for t, on in enumerate(active):
            if on and start is None:
                start = t
            elif not on and start is not None:
                runs.append((start * dt, t * dt))
                start = None
        if start is not None:
            runs.append((start * dt, active.size * dt))
        runs = [(a, b) for a, b in runs if b - a >= min_duration]
        bridged: list[tuple[float, float]] = []
        for a, b in runs:
            if bridged and a - bridged[-1][1] < gap_bridge:
                bridged[-1] = (bridged[-1][0], b)
            else:
                bridged.append((a, b))
        segs.extend(Segment(a, b - a, speaker) for a, b in bridged)
    return DiarizationHypothesis(recording_id, tuple(segs))


# -- chunked inference -----------------------------------------------------------------


def chunk_and_infer(
    wave: Waveform,
    bank: TargetSpeakerBank,
    model,
    cfg: InferenceConfig,
    fbank_cfg: FbankConfig,
) -> DecisionSequence:
    """Stitch per-chunk probabilities over a silence-free recording.

    Overlapped chunk regions are combined by the per-frame arithmetic mean;
    a recording shorter than one chunk is zero-padded and the padding frames
    dropped. The shift must land on the output frame grid.
    """
    sr = wave.sample_rate
    stride = model.cfg.time_stride
    samples_per_out = stride * fbank_cfg.frame_shift
    chunk_n = int(round(cfg.chunk * sr))
    shift_n = int(round(cfg.shift * sr))
    if shift_n % samples_per_out != 0:
        raise PipelineError(
            f"shift of {shift_n} samples is off the {samples_per_out}-sample output grid"
        )
    n = wave.n_samples
    if n < fbank_cfg.frame_length:
        raise PipelineError("recording is shorter than one feature frame")

    total_frames = (max(n, chunk_n) - fbank_cfg.frame_length) // fbank_cfg.frame_shift + 1
    real_frames = (
        (n - fbank_cfg.frame_length) // fbank_cfg.frame_shift + 1 if n >= fbank_cfg.frame_length else 0
    )
    total_out = -(-total_frames // stride)
    real_out = max(1, -(-real_frames // stride))

    starts = [0]
    while starts[-1] + chunk_n < n:
        starts.append(starts[-1] + shift_n)

    acc = np.zeros((total_out, bank.n_slots))
    cnt = np.zeros(total_out)
    for start in starts:
        seg = wave.samples[:, start : start + chunk_n]
        pad = chunk_n - seg.shape[1]
        if pad > 0:
            seg = np.concatenate([seg, np.zeros((seg.shape[0], pad))], axis=1)
        feats = fbank(Waveform(seg, sr), fbank_cfg)
        probs = model.forward(feats.data, bank, fbank_cfg.frame_shift_ms / 1000.0).probs
        offset = start // samples_per_out
        for t in range(probs.shape[0]):
            g = offset + t
            if g >= real_out:  # padding frames are dropped
                break
            acc[g] += probs[t]
            cnt[g] += 1
    covered = cnt > 0
    out = np.zeros((real_out, bank.n_slots))
    out[covered[:real_out]] = (
        acc[:real_out][covered[:real_out]] / cnt[:real_out][covered[:real_out], None]
    )
    return DecisionSequence(out, samples_per_out / sr)


# -- target bank extraction -----------------------------------------------------------


def extract_target_bank(
    wave: Waveform,
    init_hyp: DiarizationHypothesis,
    embedder,
    fbank_cfg: FbankConfig,
    n_slots: int = 4,
    cap_seconds: float = 60.0,
    min_speech: float = 0.5,
) -> TargetSpeakerBank:
    """Embeddings over each speaker's concatenated non-overlapped regions.

    At most ``n_slots`` speakers are kept by descending speech time; the
    rest of the bank is zero-padded and masked out.
    """
    if not init_hyp.speakers():
        raise PipelineError("initialization hypothesis names no speakers")
    merged = merge_same_speaker(init_hyp)
    regions = non_overlapped_regions(merged, min_duration=0.0)
    sr = wave.sample_rate
    durations = {spk: sum(s.duration for s in segs) for spk, segs in regions.items()}
    for spk in sorted(set(init_hyp.speakers()) - set(regions)):
        warnings.warn(f"speaker {spk!r} has no non-overlapped speech; dropped from the bank")
    usable = {}
    for spk, total in durations.items():
        if total < min_speech:
            warnings.warn(
                f"speaker {spk!r} has only {total:.2f}s of clean speech; dropped from the bank"
            )
            continue
        usable[spk] = total
    kept = sorted(usable, key=lambda s: (-usable[s], s))[:n_slots]
    embeddings = {}
    for spk in kept:
        pieces = []
        budget = int(round(cap_seconds * sr))
        for seg in regions[spk]:
            a, b = int(round(seg.onset * sr)), int(round(seg.offset * sr))
            piece = wave.channel(0)[a:b]
            pieces.append(piece[:budget])
            budget -= min(len(piece), budget)
            if budget <= 0:
                break
        audio = np.concatenate(pieces)
        embeddings[spk] = embedder.embed_waveform(
            Waveform(audio, sr), fbank_cfg, min_duration=0.0
        )
    if not embeddings:
        raise PipelineError("no speaker has enough non-overlapped speech for a bank")
    return TargetSpeakerBank.from_embeddings(
        embeddings, n_slots=n_slots, dim=embedder.cfg.embed_dim
    )


# -- multi-round inference ----------------------------------------------------------------


def _carry_over_bank(bank: TargetSpeakerBank, prev: TargetSpeakerBank) -> TargetSpeakerBank:
    """Keep previous-round embeddings for speakers the new round lost.

    A noisy round can leave a genuine speaker without clean speech; dropping
    that slot makes the next round unable to detect the speaker at all, which
    spirals. Re-estimated embeddings win when available.
    """
    merged: dict[str, np.ndarray] = {}
    for slot, spk in enumerate(prev.speakers):
        if spk and prev.valid_mask[slot]:
            merged[spk] = prev.embeddings[slot]
    for slot, spk in enumerate(bank.speakers):
        if spk and bank.valid_mask[slot]:
            merged[spk] = bank.embeddings[slot]
    if len(merged) > bank.n_slots:
        # Keep the most recent estimates first, then previous-round leftovers.
        fresh = [s for s in bank.speakers if s]
        carried = [s for s in merged if s not in fresh]
        keep = (fresh + carried)[: bank.n_slots]
        merged = {s: merged[s] for s in keep}
    return TargetSpeakerBank.from_embeddings(
        merged, n_slots=bank.n_slots, dim=bank.embeddings.shape[1]
    )


def _map_back(
    hyp_compact: DiarizationHypothesis, timeline: Timeline
) -> DiarizationHypothesis:
    segs = []
    for seg in hyp_compact.segments:
        for a, b in timeline.compact_intervals(seg.onset, seg.offset):
            if b - a > 1e-6:
                segs.append(Segment(a, b - a, seg.speaker))
    return DiarizationHypothesis(timeline.recording_id, tuple(segs))


def multi_round(
    wave: Waveform,
    init_hyp: DiarizationHypothesis,
    model,
    embedder,
    cfg: InferenceConfig,
    fbank_cfg: FbankConfig,
    timeline: Timeline | None = None,
) -> list[DiarizationHypothesis]:
    """Iterated TS-VAD: each round rebuilds the bank from the previous output.

    Returns one hypothesis per round (round r uses round r-1's output; round
    0 is the provided initialization). A round that decodes zero speakers
    stops early and the previous round's result stands.
    """
    if timeline is None:
        timeline = Timeline.from_hypothesis(init_hyp)
    pieces = [
        wave.samples[:, int(round(a * wave.sample_rate)) : int(round(b * wave.sample_rate))]
        for a, b in timeline.regions
    ]
    if not pieces:
        raise PipelineError("empty speech timeline")
    compact_wave = Waveform(np.concatenate(pieces, axis=1), wave.sample_rate)

    rounds: list[DiarizationHypothesis] = []
    current = init_hyp
    prev_bank: TargetSpeakerBank | None = None
    for round_idx in range(cfg.rounds):
        try:
            bank = extract_target_bank(wave, current, embedder, fbank_cfg)
        except PipelineError:
            if round_idx == 0:
                raise  # the provided initialization itself is unusable
            warnings.warn("previous round left no usable target speech; stopping early")
            break
        if prev_bank is not None:
            bank = _carry_over_bank(bank, prev_bank)
        prev_bank = bank
        seq = chunk_and_infer(compact_wave, bank, model, cfg, fbank_cfg)
        seq = median_filter(seq, cfg.median_window)
        decoded = decode(
            seq,
            bank,
            threshold=cfg.threshold,
            min_duration=cfg.min_duration,
            gap_bridge=cfg.gap_bridge,
            recording_id=timeline.recording_id,
        )
        if not decoded.segments:
            break
        current = _map_back(decoded, timeline)
        rounds.append(current)
    if not rounds:
        rounds.append(init_hyp)
    return rounds


# -- training ----------------------------------------------------------------------------


def _front_end_digest(model) -> str:
    h = hashlib.sha256()
    for name in sorted(model.front_end_parameters()):
        h.update(model.front_end_parameters()[name].data.tobytes())
    return h.hexdigest()


def evaluate_bce(model, chunks: list[TrainChunk]) -> float:
    total = 0.0
    for chunk in chunks:
        probs = model.forward_tensor(chunk.features, chunk.bank)
        total += float(bce_loss(probs, chunk.targets, mask=chunk.mask).data)
    return total / max(1, len(chunks))


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    front_end_frozen_ok: bool = True
    best_val: float = float("inf")

    def stage_val_losses(self, stage: str) -> list[float]:
        return [h["val"] for h in self.history if h["stage"] == stage]


def train(
    model,
    schedule: TrainSchedule,
    sources: dict,
    val_chunks: list[TrainChunk],
    rng: np.random.Generator,
) -> TrainResult:
    """Run the staged schedule and load the averaged best checkpoints into ``model``.

    ``sources`` maps source names ("sim", "real") to callables rng -> TrainChunk.
    Validation BCE is tracked per epoch; the ``keep_best`` lowest snapshots of
    the final stage are averaged element-wise into the returned model.
    """
    result = TrainResult()
    snapshots: list[tuple[float, dict[str, np.ndarray]]] = []
    final_stage = schedule.stages[-1].name
    for stage in schedule.stages:
        if stage.epochs == 0:
            continue
        source = sources[stage.source]
        params = model.parameters()
        if stage.freeze_front_end:
            trainable = {k: v for k, v in params.items() if not k.startswith("fe.")}
            digest_before = _front_end_digest(model)
        else:
            trainable = dict(params)
            digest_before = None
        opt = Adam(list(trainable.values()), lr=stage.lr)
        for epoch in range(stage.epochs):
            epoch_losses = []
            for _ in range(schedule.steps_per_epoch):
                for p in params.values():
                    p.grad = None
                step_loss = 0.0
                for _ in range(schedule.batch):
                    chunk = source(rng)
                    probs = model.forward_tensor(chunk.features, chunk.bank)
                    loss = bce_loss(probs, chunk.targets, mask=chunk.mask) * (
                        1.0 / schedule.batch
                    )
                    if not np.isfinite(loss.data):
                        raise TrainingDivergedError(
                            f"non-finite loss in stage {stage.name!r}, epoch {epoch}"
                        )
                    loss.backward()
                    step_loss += float(loss.data)
                opt.step()
                epoch_losses.append(step_loss)
            val = evaluate_bce(model, val_chunks)
            if not np.isfinite(val):
                raise TrainingDivergedError(
                    f"non-finite validation loss in stage {stage.name!r}, epoch {epoch}"
                )
            result.history.append(
                {
                    "stage": stage.name,
                    "epoch": epoch,
                    "train": float(np.mean(epoch_losses)),
                    "val": val,
                }
            )
            if stage.name == final_stage:
                snapshots.append((val, model.state_dict()))
        if stage.freeze_front_end:
            result.front_end_frozen_ok = _front_end_digest(model) == digest_before
            if not result.front_end_frozen_ok:
                raise TrainingDivergedError("frozen front end changed during stage 1")
    if snapshots:
        snapshots.sort(key=lambda pair: pair[0])
        best = snapshots[: schedule.keep_best]
        result.best_val = best[0][0]
        averaged = {
            name: np.mean([state[name] for _, state in best], axis=0)
            for name in best[0][1]
        }
        model.load_state_dict(averaged)
    return result


# -- chunk sources ---------------------------------------------------------------------------


class SimulatedChunkSource:
    """rng -> TrainChunk from the online label-window simulator."""

    def __init__(
        self,
        library,
        pool,
        bank_embeddings: dict[str, np.ndarray],
        model_stride: int,
        fbank_cfg: FbankConfig,
        chunk_length: float,
        n_channels: int = 1,
        n_slots: int = 4,
    ):
        from .simulation import sample_label_window  # local import to avoid a cycle

        self._sample_window = sample_label_window
        self.library = library
        self.pool = pool
        self.bank_embeddings = bank_embeddings
        self.stride = model_stride
        self.fbank_cfg = fbank_cfg
        self.chunk_length = chunk_length
        self.n_channels = n_channels
        self.n_slots = n_slots

    def __call__(self, rng: np.random.Generator) -> TrainChunk:
        from .simulation import render_mixture

        window = self._sample_window(self.library, self.chunk_length, rng)
        n_samples = int(round(self.chunk_length * self.fbank_cfg.sample_rate))
        frames = (n_samples - self.fbank_cfg.frame_length) // self.fbank_cfg.frame_shift + 1
        out_frames = -(-frames // self.stride)
        out_shift = self.stride * self.fbank_cfg.frame_shift / self.fbank_cfg.sample_rate
        chunk = render_mixture(
            window, self.pool, self.n_channels, rng, out_frames, out_shift
        )
        feats = fbank(chunk.mixture, self.fbank_cfg)
        # Bank rows must follow the window's slot order (targets are per slot).
        emb = np.stack([self.bank_embeddings[s] for s in chunk.bank_speakers])
        bank = TargetSpeakerBank(emb, np.ones(len(chunk.bank_speakers), bool), chunk.bank_speakers)
        return TrainChunk(feats.data, chunk.targets, bank)


class RecordingChunkSource:
    """rng -> TrainChunk cropped from real-format recordings with reference labels."""

    def __init__(
        self,
        recordings: list[tuple[Waveform, DiarizationHypothesis]],
        bank_embeddings: dict[str, np.ndarray],
        model_stride: int,
        fbank_cfg: FbankConfig,
        chunk_length: float,
        n_slots: int = 4,
    ):
        self.entries = []
        self.stride = model_stride
        self.fbank_cfg = fbank_cfg
        self.chunk_length = chunk_length
        self.n_slots = n_slots
        for wave, ref in recordings:
            timeline = Timeline.from_hypothesis(ref)
            pieces = [
                wave.samples[:, int(round(a * wave.sample_rate)) : int(round(b * wave.sample_rate))]
                for a, b in timeline.regions
            ]
            compact = Waveform(np.concatenate(pieces, axis=1), wave.sample_rate)
            speakers = sorted(ref.speakers(), key=lambda s: -ref.speech_time(s))[:n_slots]
            slots = []
            for spk in speakers:
                ivs = [
                    (timeline.to_compact(a), timeline.to_compact(b))
                    for a, b in merge_same_speaker(ref).speaker_intervals(spk)
                ]
                slots.append(tuple(iv for iv in ivs if iv[1] > iv[0]))
            bank = TargetSpeakerBank.from_embeddings(
                {s: bank_embeddings[s] for s in speakers},
                n_slots=n_slots,
                dim=len(next(iter(bank_embeddings.values()))),
            )
            self.entries.append((compact, tuple(slots), bank))

    def chunk_at(self, entry_idx: int, start: float) -> TrainChunk:
        from .simulation import rasterize_targets

        compact, slots, bank = self.entries[entry_idx]
        sr = self.fbank_cfg.sample_rate
        n_samples = int(round(self.chunk_length * sr))
        a = int(round(start * sr))
        seg = compact.samples[:, a : a + n_samples]
        if seg.shape[1] < n_samples:
            seg = np.concatenate([seg, np.zeros((seg.shape[0], n_samples - seg.shape[1]))], axis=1)
        frames = (n_samples - self.fbank_cfg.frame_length) // self.fbank_cfg.frame_shift + 1
        out_frames = -(-frames // self.stride)
        out_shift = self.stride * self.fbank_cfg.frame_shift / sr
        shifted = tuple(
            tuple((iv[0] - start, iv[1] - start) for iv in ivs if iv[1] > start and iv[0] < start + self.chunk_length)
            for ivs in slots
        )
        clipped = tuple(
            tuple((max(0.0, a0), min(self.chunk_length, b0)) for a0, b0 in ivs) for ivs in shifted
        )
        targets = rasterize_targets(clipped, out_frames, out_shift)
        if len(slots) < self.n_slots:
            pad = np.zeros((out_frames, self.n_slots - len(slots)))
            targets = np.concatenate([targets, pad], axis=1)
        feats = fbank(Waveform(seg, sr), self.fbank_cfg)
        return TrainChunk(feats.data, targets, bank)

    def __call__(self, rng: np.random.Generator) -> TrainChunk:
        idx = int(rng.integers(len(self.entries)))
        compact, _, _ = self.entries[idx]
        max_start = max(0.0, compact.duration - self.chunk_length)
        return self.chunk_at(idx, float(rng.uniform(0.0, max_start)))

    def fixed_chunks(self, spacing: float | None = None) -> list[TrainChunk]:
        """Deterministic evenly-spaced chunks (validation set)."""
        spacing = spacing or self.chunk_length
        out = []
        for idx, (compact, _, _) in enumerate(self.entries):
            start = 0.0
            while start < max(compact.duration - 0.5, 0.1):
                out.append(self.chunk_at(idx, start))
                start += spacing
        return out
