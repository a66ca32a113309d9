"""End-to-end drivers for the synthetic-corpus experiments.

These functions glue the stages together for the CLI and the experiment
scripts: corpus synthesis, speaker-embedding training, staged TS-VAD
training, clustering initialization, multi-round inference, and scoring.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam
from .clustering import diarize_clustering
from .config import RunConfig, substream
from .features import FbankConfig, Waveform, fbank, read_wav, write_wav
from .metrics import DerReport, TrialScore, aggregate_der, compute_der, compute_eer, compute_jer
from .models import ArcFaceHead, ModelConfig, SpeakerEmbedder, build_model
from .pipeline import (
    InferenceConfig,
    RecordingChunkSource,
    SimulatedChunkSource,
    TrainSchedule,
    multi_round,
    train,
)
from .segments import DiarizationHypothesis, Timeline, parse_rttm, write_rttm
from .simulation import LabelLibrary, SpeakerPool, build_speaker_pool, make_synthetic_corpus


class DataError(IOError):
    pass


# -- manifests --------------------------------------------------------------------


def write_manifest(entries: list[tuple[str, str, str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec_id, wav, rttm in entries:
            fh.write(f"{rec_id} {wav} {rttm}\n")


def load_manifest(path) -> list[tuple[str, str, str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 3:
            raise DataError(f"{path}:{lineno}: expected '<rec_id> <wav> <rttm>'")
        entries.append((fields[0], fields[1], fields[2]))
    return entries


def load_split(entries: list[tuple[str, str, str]]):
    waves: dict[str, Waveform] = {}
    refs: list[DiarizationHypothesis] = []
    for rec_id, wav_path, rttm_path in entries:
        if not Path(wav_path).exists():
            raise DataError(f"missing waveform {wav_path}")
        if not Path(rttm_path).exists():
            raise DataError(f"missing rttm {rttm_path}")
        waves[rec_id] = read_wav(wav_path)
        hyps = [h for h in parse_rttm(rttm_path) if h.recording_id == rec_id]
        if not hyps:
            raise DataError(f"{rttm_path} has no lines for recording {rec_id}")
        refs.append(hyps[0])
    return waves, refs


def synthesize_corpus(cfg: RunConfig, out_dir: Path) -> dict[str, list[tuple[str, str, str]]]:
    """Generate the corpus and write wav/rttm/manifest artifacts per split."""
    corpus_dir = out_dir / "corpus"
    corpus_dir.mkdir(parents=True, exist_ok=True)
    rng = substream(cfg["seed"], "synth")
    waves, refs = make_synthetic_corpus(
        cfg["synth.n_speakers"], cfg.synth_config(), rng, seed=cfg["seed"]
    )
    entries = []
    for ref in refs:
        wav_path = corpus_dir / f"{ref.recording_id}.wav"
        rttm_path = corpus_dir / f"{ref.recording_id}.rttm"
        write_wav(wav_path, waves[ref.recording_id])
        write_rttm(ref, rttm_path)
        entries.append((ref.recording_id, str(wav_path), str(rttm_path)))
    n_train, n_val = cfg["synth.n_train"], cfg["synth.n_val"]
    if n_train + n_val >= len(entries):
        raise DataError("train+val splits leave no evaluation recordings")
    splits = {
        "train": entries[:n_train],
        "val": entries[n_train : n_train + n_val],
        "eval": entries[n_train + n_val :],
    }
    for name, split_entries in splits.items():
        write_manifest(split_entries, corpus_dir / f"{name}.manifest")
    return splits


# -- speaker-embedding training ----------------------------------------------------------


@dataclass
class EmbedderAssets:
    embedder: SpeakerEmbedder
    history: list[float] = field(default_factory=list)
    eer: float = float("nan")


def _speaker_audio(pool: SpeakerPool, max_seconds: float | None = None) -> dict[str, np.ndarray]:
    out = {}
    for spk in pool.speakers():
        audio = np.concatenate(pool.segments[spk])
        if max_seconds is not None:
            audio = audio[: int(max_seconds * pool.sample_rate)]
        out[spk] = audio
    return out


def train_embedder(
    model_cfg: ModelConfig,
    fbank_cfg: FbankConfig,
    pool: SpeakerPool,
    rng: np.random.Generator,
    steps: int = 300,
    batch: int = 16,
    crop: float = 2.0,
    lr: float = 1e-3,
) -> EmbedderAssets:
    """ArcFace training on fixed-length crops of per-speaker pool audio."""
    speakers = pool.speakers()
    if len(speakers) < 2:
        raise DataError("embedding training needs at least 2 pooled speakers")
    audio = _speaker_audio(pool)
    sr = pool.sample_rate
    crop_n = int(crop * sr)
    for spk, samples in audio.items():
        if samples.size < crop_n:
            raise DataError(f"speaker {spk!r} has under {crop:.1f}s of pooled speech")
    embedder = SpeakerEmbedder(model_cfg, substream(int(rng.integers(2**31)), "embedder-init"))
    head = ArcFaceHead(
        len(speakers), model_cfg.embed_dim, substream(int(rng.integers(2**31)), "arcface-init"),
        dtype=model_cfg.np_dtype,
    )
    params = {**embedder.parameters(), **head.parameters()}
    opt = Adam(list(params.values()), lr=lr)
    history = []
    for _ in range(steps):
        crops = []
        labels = []
        for _ in range(batch):
            k = int(rng.integers(len(speakers)))
            samples = audio[speakers[k]]
            start = int(rng.integers(0, samples.size - crop_n + 1))
            crops.append(samples[start : start + crop_n])
            labels.append(k)
        feats = fbank(Waveform(np.stack(crops), sr), fbank_cfg)
        loss = head.loss(embedder.embed(feats.data), np.array(labels))
        for p in params.values():
            p.grad = None
        loss.backward()
        opt.step()
        history.append(float(loss.data))
    return EmbedderAssets(embedder, history)


def make_trials(
    embedder: SpeakerEmbedder,
    pool: SpeakerPool,
    fbank_cfg: FbankConfig,
    rng: np.random.Generator,
    n_trials: int = 200,
    crop: float = 2.0,
) -> list[TrialScore]:
    """Same/different-speaker cosine trials on held-out pool crops."""
    audio = _speaker_audio(pool)
    speakers = [s for s in pool.speakers() if audio[s].size >= int(2 * crop * pool.sample_rate)]
    if len(speakers) < 2:
        raise DataError("trial construction needs 2 speakers with enough speech")
    sr = pool.sample_rate
    crop_n = int(crop * sr)

    def embed_crop(spk):
        samples = audio[spk]
        start = int(rng.integers(0, samples.size - crop_n + 1))
        return embedder.embed_waveform(
            Waveform(samples[start : start + crop_n], sr), fbank_cfg, min_duration=0.0
        )

    trials = []
    for i in range(n_trials):
        is_target = i % 2 == 0
        if is_target:
            spk = speakers[int(rng.integers(len(speakers)))]
            e1, e2 = embed_crop(spk), embed_crop(spk)
        else:
            a, b = rng.choice(len(speakers), size=2, replace=False)
            e1, e2 = embed_crop(speakers[a]), embed_crop(speakers[b])
        trials.append(TrialScore(float(e1 @ e2), is_target))
    return trials


# -- TS-VAD training -----------------------------------------------------------------------


def bank_embeddings_from_pool(
    embedder: SpeakerEmbedder,
    pool: SpeakerPool,
    fbank_cfg: FbankConfig,
    max_seconds: float = 10.0,
) -> dict[str, np.ndarray]:
    audio = _speaker_audio(pool, max_seconds=max_seconds)
    return {
        spk: embedder.embed_waveform(Waveform(samples, pool.sample_rate), fbank_cfg, min_duration=0.0)
        for spk, samples in audio.items()
    }


def build_tsvad_sources(
    cfg: RunConfig,
    model,
    embedder: SpeakerEmbedder,
    train_waves: dict[str, Waveform],
    train_refs: list[DiarizationHypothesis],
    val_waves: dict[str, Waveform],
    val_refs: list[DiarizationHypothesis],
    n_channels: int,
):
    """Simulated + real chunk sources and the fixed validation chunk list."""
    fbank_cfg = cfg.fbank_config()
    pool = build_speaker_pool(train_refs, train_waves)
    library = LabelLibrary.from_hypotheses(train_refs, n_slots=cfg["model.n_speakers"])
    bank_embs = bank_embeddings_from_pool(embedder, pool, fbank_cfg)
    sim = SimulatedChunkSource(
        library,
        pool,
        bank_embs,
        model.cfg.time_stride,
        fbank_cfg,
        cfg["schedule.chunk"],
        n_channels=n_channels,
        n_slots=cfg["model.n_speakers"],
    )
    real = RecordingChunkSource(
        [(train_waves[r.recording_id], r) for r in train_refs],
        bank_embs,
        model.cfg.time_stride,
        fbank_cfg,
        cfg["schedule.chunk"],
        n_slots=cfg["model.n_speakers"],
    )
    val_pool = build_speaker_pool(val_refs, val_waves)
    val_bank_embs = bank_embeddings_from_pool(embedder, val_pool, fbank_cfg)
    val_source = RecordingChunkSource(
        [(val_waves[r.recording_id], r) for r in val_refs],
        val_bank_embs,
        model.cfg.time_stride,
        fbank_cfg,
        cfg["schedule.chunk"],
        n_slots=cfg["model.n_speakers"],
    )
    val_chunks = val_source.fixed_chunks(spacing=2.0 * cfg["schedule.chunk"])
    return sim, real, val_chunks


def train_tsvad(
    arch: str,
    cfg: RunConfig,
    embedder: SpeakerEmbedder,
    train_waves,
    train_refs,
    val_waves,
    val_refs,
    schedule: TrainSchedule | None = None,
):
    """Build a model with the copied front end and run the staged schedule."""
    model_cfg = cfg.model_config()
    rng = substream(cfg["seed"], f"tsvad.{arch}")
    model = build_model(arch, model_cfg, rng)
    # Copy the pretrained speaker-embedding front end (stage-0 of the recipe).
    front = model.front_end_parameters()
    source_params = embedder.resnet.parameters("fe")
    for name, tensor in front.items():
        tensor.data[:] = source_params[name].data
    n_channels = cfg["synth.n_channels"] if arch == "mc" else 1
    if arch == "sc":  # single-channel models consume channel 0 of the recordings
        train_waves = {r: Waveform(w.samples[:1], w.sample_rate) for r, w in train_waves.items()}
        val_waves = {r: Waveform(w.samples[:1], w.sample_rate) for r, w in val_waves.items()}
    sim, real, val_chunks = build_tsvad_sources(
        cfg, model, embedder, train_waves, train_refs, val_waves, val_refs, n_channels
    )
    schedule = schedule or cfg.train_schedule()
    result = train(model, schedule, {"sim": sim, "real": real}, val_chunks, rng)
    return model, result


# -- inference and scoring ---------------------------------------------------------------


def _n_workers(cfg: RunConfig) -> int:
    import os

    workers = cfg["workers"]
    return workers if workers > 0 else (os.cpu_count() or 1)


def cluster_recordings(
    cfg: RunConfig,
    embedder: SpeakerEmbedder,
    waves: dict[str, Waveform],
    refs: list[DiarizationHypothesis],
) -> dict[str, DiarizationHypothesis]:
    """First-pass clustering diarization; speech regions come from the references."""
    fbank_cfg = cfg.fbank_config()

    def one(ref):
        timeline = Timeline.from_hypothesis(ref)
        rng = substream(cfg["seed"], f"cluster.{ref.recording_id}")
        return diarize_clustering(
            waves[ref.recording_id],
            embedder,
            timeline,
            fbank_cfg,
            rng,
            max_speakers=cfg["cluster.max_speakers"],
            window_length=cfg["cluster.window"],
            window_shift=cfg["cluster.shift"],
            jitter_sigma=cfg["cluster.jitter_sigma"],
            prune_percentile=cfg["cluster.prune_percentile"],
        )

    workers = _n_workers(cfg)
    if workers > 1 and len(refs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, refs))
    else:
        results = [one(r) for r in refs]
    return {r.recording_id: h for r, h in zip(refs, results)}


def infer_recordings(
    cfg: RunConfig,
    model,
    embedder: SpeakerEmbedder,
    waves: dict[str, Waveform],
    refs: list[DiarizationHypothesis],
    inits: dict[str, DiarizationHypothesis],
    inference: InferenceConfig | None = None,
) -> dict[str, list[DiarizationHypothesis]]:
    """Multi-round TS-VAD per recording; returns the per-round hypotheses."""
    fbank_cfg = cfg.fbank_config()
    inference = inference or cfg.inference_config()

    def one(ref):
        timeline = Timeline.from_hypothesis(ref)
        return multi_round(
            waves[ref.recording_id],
            inits[ref.recording_id],
            model,
            embedder,
            inference,
            fbank_cfg,
            timeline,
        )

    workers = _n_workers(cfg)
    if workers > 1 and len(refs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, refs))
    else:
        results = [one(r) for r in refs]
    return {r.recording_id: rounds for r, rounds in zip(refs, results)}


def score_hypotheses(
    refs: list[DiarizationHypothesis],
    hyps: dict[str, DiarizationHypothesis],
    collar: float = 0.25,
    score_overlap: bool = True,
) -> dict:
    """Per-recording and pooled MISS/FA/SpkErr/DER/JER."""
    per_rec = {}
    reports: list[DerReport] = []
    jers = []
    for ref in refs:
        hyp = hyps[ref.recording_id]
        report = compute_der(ref, hyp, collar=collar, score_overlap=score_overlap)
        jer = compute_jer(ref, hyp)
        reports.append(report)
        jers.append(jer)
        per_rec[ref.recording_id] = {
            "miss": report.miss,
            "fa": report.fa,
            "spkerr": report.spkerr,
            "der": report.der,
            "jer": jer,
        }
    pooled = aggregate_der(reports)
    overall = {
        "miss": pooled.miss,
        "fa": pooled.fa,
        "spkerr": pooled.spkerr,
        "der": pooled.der,
        "jer": float(np.mean(jers)),
    }
    return {"overall": overall, "per_recording": per_rec}


def save_metrics(metrics: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- the full synthetic experiment ----------------------------------------------------------


def run_synthetic_experiment(cfg: RunConfig, out_dir) -> dict:
    """Corpus -> embedder -> SC/MC TS-VAD -> clustering/TS-VAD inference -> scores.

    Returns a dict with the embedder EER, per-system metrics, and the
    ground-truth-initialized MC result used by the trend checks.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = synthesize_corpus(cfg, out_dir)
    train_waves, train_refs = load_split(splits["train"])
    val_waves, val_refs = load_split(splits["val"])
    eval_waves, eval_refs = load_split(splits["eval"])
    fbank_cfg = cfg.fbank_config()

    # Speaker embedding model on the training pool, scored on the val pool.
    train_pool = build_speaker_pool(train_refs, train_waves, cfg["embed.min_segment"])
    assets = train_embedder(
        cfg.model_config(),
        fbank_cfg,
        train_pool,
        substream(cfg["seed"], "embed"),
        steps=cfg["embed.steps"],
        batch=cfg["embed.batch"],
        crop=cfg["embed.crop"],
        lr=cfg["embed.lr"],
    )
    val_pool = build_speaker_pool(val_refs, val_waves, 0.0)
    trials = make_trials(
        assets.embedder, val_pool, fbank_cfg, substream(cfg["seed"], "trials"),
        crop=cfg["embed.crop"],
    )
    assets.eer = compute_eer(trials)

    results: dict = {"embedder_eer": assets.eer, "embed_history": assets.history}

    # Clustering initialization on the eval split.
    cluster_hyps = cluster_recordings(cfg, assets.embedder, eval_waves, eval_refs)
    results["clustering"] = score_hypotheses(
        eval_refs, cluster_hyps, cfg["scoring.collar"], cfg["scoring.score_overlap"]
    )

    # Staged TS-VAD training and multi-round inference, SC and MC.
    scores = {}
    rounds_per_system = {}
    models = {}
    for arch in ("sc", "mc"):
        model, train_result = train_tsvad(
            arch, cfg, assets.embedder, train_waves, train_refs, val_waves, val_refs
        )
        models[arch] = model
        arch_waves = eval_waves
        if arch == "sc":
            arch_waves = {
                rec: Waveform(w.samples[:1], w.sample_rate) for rec, w in eval_waves.items()
            }
        rounds = infer_recordings(
            cfg, model, assets.embedder, arch_waves, eval_refs, cluster_hyps
        )
        rounds_per_system[arch] = rounds
        finals = {rec: rs[-1] for rec, rs in rounds.items()}
        scores[arch] = score_hypotheses(
            eval_refs, finals, cfg["scoring.collar"], cfg["scoring.score_overlap"]
        )
        scores[arch]["train_history"] = train_result.history
        per_round = []
        max_rounds = max(len(rs) for rs in rounds.values())
        for k in range(max_rounds):
            snapshot = {rec: rs[min(k, len(rs) - 1)] for rec, rs in rounds.items()}
            per_round.append(
                score_hypotheses(
                    eval_refs, snapshot, cfg["scoring.collar"], cfg["scoring.score_overlap"]
                )["overall"]
            )
        scores[arch]["per_round"] = per_round
    results["sc"] = scores["sc"]
    results["mc"] = scores["mc"]
    results["rounds"] = {
        arch: {rec: len(rs) for rec, rs in rounds.items()}
        for arch, rounds in rounds_per_system.items()
    }

    # Ground-truth-initialized MC run (oracle init comparison).
    gt_inits = {ref.recording_id: ref for ref in eval_refs}
    gt_rounds = infer_recordings(
        cfg, models["mc"], assets.embedder, eval_waves, eval_refs, gt_inits
    )
    results["mc_gt_init"] = score_hypotheses(
        eval_refs,
        {rec: rs[-1] for rec, rs in gt_rounds.items()},
        cfg["scoring.collar"],
        cfg["scoring.score_overlap"],
    )
    save_metrics(
        {
            k: v
            for k, v in results.items()
            if k in ("embedder_eer", "clustering", "sc", "mc", "mc_gt_init")
        },
        out_dir / "experiment_metrics.json",
    )
    return results
