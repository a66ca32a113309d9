"""Command-line entry point: the full pipeline as subcommands over one config.

Exit codes: 1 config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import GradCheckError
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, describe_keys, substream
from .experiment import (
    DataError,
    bank_embeddings_from_pool,
    cluster_recordings,
    infer_recordings,
    load_manifest,
    load_split,
    make_trials,
    save_metrics,
    score_hypotheses,
    synthesize_corpus,
    train_embedder,
    train_tsvad,
    write_manifest,
)
from .features import FeatureError, write_wav
from .fusion import FusionError, dover_lap_fuse
from .metrics import ScoringError, aggregate_der, compute_der, compute_eer, compute_jer, write_trials
from .models import load_model, save_model
from .pipeline import PipelineError, TrainingDivergedError
from .segments import DiarizationHypothesis, RttmParseError, parse_rttm, write_rttm
from .simulation import LabelLibrary, SimulationError, build_speaker_pool, sample_label_window, render_mixture


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.set:
        cfg.apply_overrides(args.set)
    if args.seed is not None:
        cfg.apply_overrides([f"seed={args.seed}"])
    if args.out is not None:
        cfg.apply_overrides([f"out_dir={args.out}"])
    env_out = os.environ.get("TSDIAR_OUT")
    if env_out:
        cfg.apply_overrides([f"out_dir={env_out}"])
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_all_rttms(paths) -> dict[str, list[DiarizationHypothesis]]:
    by_rec: dict[str, list[DiarizationHypothesis]] = {}
    for path in paths:
        for hyp in parse_rttm(path):
            by_rec.setdefault(hyp.recording_id, []).append(hyp)
    return by_rec


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    splits = synthesize_corpus(cfg, out)
    for name, entries in splits.items():
        print(f"{name}: {len(entries)} recordings -> {out / 'corpus' / (name + '.manifest')}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg) / "sim"
    out.mkdir(parents=True, exist_ok=True)
    entries = load_manifest(args.manifest)
    waves, refs = load_split(entries)
    pool = build_speaker_pool(refs, waves)
    library = LabelLibrary.from_hypotheses(refs, n_slots=cfg["model.n_speakers"])
    fbank_cfg = cfg.fbank_config()
    rng = substream(cfg["seed"], "simulate")
    chunk_len = cfg["schedule.chunk"]
    n_samples = int(round(chunk_len * fbank_cfg.sample_rate))
    frames = (n_samples - fbank_cfg.frame_length) // fbank_cfg.frame_shift + 1
    stride = int(np.prod(cfg["model.conv_strides"]))
    out_frames = -(-frames // stride)
    out_shift = stride * fbank_cfg.frame_shift / fbank_cfg.sample_rate
    manifest_lines = []
    for k in range(args.count):
        window = sample_label_window(library, chunk_len, rng)
        chunk = render_mixture(
            window, pool, cfg["synth.n_channels"], rng, out_frames, out_shift
        )
        wav_path = out / f"chunk{k:03d}.wav"
        write_wav(wav_path, chunk.mixture)
        np.save(out / f"chunk{k:03d}.targets.npy", chunk.targets)
        manifest_lines.append((f"chunk{k:03d}", str(wav_path), ",".join(chunk.bank_speakers)))
    with open(out / "sim.manifest", "w", encoding="utf-8") as fh:
        for rec, wav, spks in manifest_lines:
            fh.write(f"{rec} {wav} {spks}\n")
    print(f"wrote {args.count} simulated chunks to {out}")
    return 0


def cmd_train_embed(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    waves, refs = load_split(load_manifest(args.manifest))
    pool = build_speaker_pool(refs, waves, cfg["embed.min_segment"])
    fbank_cfg = cfg.fbank_config()
    assets = train_embedder(
        cfg.model_config(),
        fbank_cfg,
        pool,
        substream(cfg["seed"], "embed"),
        steps=cfg["embed.steps"],
        batch=cfg["embed.batch"],
        crop=cfg["embed.crop"],
        lr=cfg["embed.lr"],
    )
    trial_pool = pool
    if args.trial_manifest:
        t_waves, t_refs = load_split(load_manifest(args.trial_manifest))
        trial_pool = build_speaker_pool(t_refs, t_waves)
    trials = make_trials(
        assets.embedder, trial_pool, fbank_cfg, substream(cfg["seed"], "trials"),
        crop=cfg["embed.crop"],
    )
    eer = compute_eer(trials)
    ckpt = out / "embedder.ckpt"
    save_model(ckpt, assets.embedder)
    write_trials(trials, out / "embedder_trials.txt")
    save_metrics({"eer": eer, "final_loss": assets.history[-1]}, out / "embedder_metrics.json")
    print(f"embedder -> {ckpt}  (trial EER {eer:.2f}%)")
    return 0


def cmd_train_tsvad(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    train_waves, train_refs = load_split(load_manifest(args.manifest))
    val_waves, val_refs = load_split(load_manifest(args.val_manifest))
    embedder = load_model(args.embedder)
    model, result = train_tsvad(
        args.arch, cfg, embedder, train_waves, train_refs, val_waves, val_refs
    )
    ckpt = out / f"tsvad_{args.arch}.ckpt"
    save_model(ckpt, model)
    save_metrics(
        {"history": result.history, "best_val": result.best_val},
        out / f"tsvad_{args.arch}_history.json",
    )
    print(f"{args.arch} model -> {ckpt}  (best val BCE {result.best_val:.4f})")
    return 0


def cmd_cluster(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg) / "cluster"
    out.mkdir(parents=True, exist_ok=True)
    waves, refs = load_split(load_manifest(args.manifest))
    embedder = load_model(args.embedder)
    hyps = cluster_recordings(cfg, embedder, waves, refs)
    for rec_id, hyp in hyps.items():
        write_rttm(hyp, out / f"{rec_id}.rttm")
    write_rttm(list(hyps.values()), out / "init.rttm")
    metrics = score_hypotheses(refs, hyps, cfg["scoring.collar"], cfg["scoring.score_overlap"])
    save_metrics(metrics, out / "cluster_metrics.json")
    o = metrics["overall"]
    print(
        f"clustering: MISS {o['miss']:.2f}  FA {o['fa']:.2f}  SpkErr {o['spkerr']:.2f}  "
        f"DER {o['der']:.2f}  JER {o['jer']:.2f}  -> {out / 'init.rttm'}"
    )
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    model = load_model(args.model)
    embedder = load_model(args.embedder)
    arch = getattr(model, "arch", "sc")
    out = _out_dir(cfg) / f"infer_{arch}"
    out.mkdir(parents=True, exist_ok=True)
    waves, refs = load_split(load_manifest(args.manifest))
    if arch == "sc":
        from .features import Waveform

        waves = {rec: Waveform(w.samples[:1], w.sample_rate) for rec, w in waves.items()}
    inits = {}
    for hyp in parse_rttm(args.init):
        inits[hyp.recording_id] = hyp
    missing = [r.recording_id for r in refs if r.recording_id not in inits]
    if missing:
        raise DataError(f"init RTTM lacks recordings: {missing}")
    rounds = infer_recordings(cfg, model, embedder, waves, refs, inits)
    n_rounds = cfg["inference.rounds"]
    for rec_id, rs in rounds.items():
        for k, hyp in enumerate(rs, start=1):
            write_rttm(hyp, out / f"{rec_id}.round{k}.rttm")
    finals = {rec: rs[-1] for rec, rs in rounds.items()}
    write_rttm([finals[r.recording_id] for r in refs], out / "final.rttm")
    for k in range(n_rounds):
        snapshot = {rec: rs[min(k, len(rs) - 1)] for rec, rs in rounds.items()}
        metrics = score_hypotheses(refs, snapshot, cfg["scoring.collar"], cfg["scoring.score_overlap"])
        save_metrics(metrics, out / f"round{k + 1}_metrics.json")
    o = score_hypotheses(refs, finals, cfg["scoring.collar"], cfg["scoring.score_overlap"])["overall"]
    print(
        f"{arch} final: MISS {o['miss']:.2f}  FA {o['fa']:.2f}  SpkErr {o['spkerr']:.2f}  "
        f"DER {o['der']:.2f}  JER {o['jer']:.2f}  -> {out / 'final.rttm'}"
    )
    return 0


def cmd_fuse(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    by_rec = _parse_all_rttms(args.inputs)
    ders = args.ders
    if ders is not None and len(ders) != len(args.inputs):
        raise DataError("need one DER per input RTTM")
    fused = []
    for rec_id in sorted(by_rec):
        hyps = by_rec[rec_id]
        if len(hyps) != len(args.inputs):
            raise DataError(f"recording {rec_id} is missing from some inputs")
        fused.append(
            dover_lap_fuse(
                hyps,
                ders=ders,
                weighting=cfg["fusion.weighting"],
                rank_power=cfg["fusion.rank_power"],
                overlap_cap=cfg["fusion.overlap_cap"],
            )
        )
    path = out / "fused.rttm"
    write_rttm(fused, path)
    print(f"fused {len(args.inputs)} systems over {len(fused)} recordings -> {path}")
    return 0


def cmd_score(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    refs = {h.recording_id: h for h in parse_rttm(args.ref)}
    hyps = {h.recording_id: h for h in parse_rttm(args.hyp)}
    collar = args.collar if args.collar is not None else cfg["scoring.collar"]
    score_overlap = not args.no_overlap if args.no_overlap is not None else cfg["scoring.score_overlap"]
    missing = sorted(set(refs) - set(hyps))
    reports = []
    jers = []
    for rec_id, ref in sorted(refs.items()):
        hyp = hyps.get(rec_id, DiarizationHypothesis(rec_id, ()))
        if not hyp.segments:
            if rec_id in missing or not hyp.segments:
                hyp = DiarizationHypothesis(rec_id, ())
        if hyp.segments:
            reports.append(compute_der(ref, hyp, collar=collar, score_overlap=score_overlap))
            jers.append(compute_jer(ref, hyp))
        else:
            # Empty hypothesis: everything scored is missed.
            from .metrics import DerReport

            base = compute_der(ref, ref, collar=collar, score_overlap=score_overlap)
            reports.append(
                DerReport(miss=100.0, fa=0.0, spkerr=0.0, der=100.0, scored_speech=base.scored_speech)
            )
            jers.append(100.0)
    pooled = aggregate_der(reports)
    jer = float(np.mean(jers))
    print("MISS[%] FA[%] SpkErr[%] DER[%] JER[%]")
    print(f"{pooled.miss:.2f} {pooled.fa:.2f} {pooled.spkerr:.2f} {pooled.der:.2f} {jer:.2f}")
    payload = {
        "miss": pooled.miss,
        "fa": pooled.fa,
        "spkerr": pooled.spkerr,
        "der": pooled.der,
        "jer": jer,
    }
    with open(out / "score.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsdiar",
        description="Multi-channel target-speaker VAD diarization pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, prefixes):
        p.add_argument("--config", help="path to a section.key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="override the output directory")
        p.epilog = describe_keys(prefixes)
        p.formatter_class = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("synth", help="generate the synthetic corpus and manifests")
    common(p, ("seed", "out_dir", "synth"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("simulate", help="materialize simulated training chunks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--count", type=int, default=4)
    common(p, ("seed", "out_dir", "synth", "feature", "model", "schedule"))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-embed", help="train the speaker embedding model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--trial-manifest", help="held-out manifest for EER trials")
    common(p, ("seed", "out_dir", "feature", "model", "embed"))
    p.set_defaults(func=cmd_train_embed)

    p = sub.add_parser("train-tsvad", help="staged TS-VAD training")
    p.add_argument("--arch", choices=("sc", "mc"), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--embedder", required=True)
    common(p, ("seed", "out_dir", "synth", "feature", "model", "schedule"))
    p.set_defaults(func=cmd_train_tsvad)

    p = sub.add_parser("cluster", help="clustering-based first-pass diarization")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embedder", required=True)
    common(p, ("seed", "out_dir", "feature", "cluster", "scoring", "workers"))
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("infer", help="multi-round TS-VAD inference")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--embedder", required=True)
    p.add_argument("--init", required=True, help="initialization RTTM")
    common(p, ("seed", "out_dir", "feature", "inference", "scoring", "workers"))
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("fuse", help="DOVER-Lap-style hypothesis fusion")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--ders", nargs="+", type=float, help="per-input DERs for ranking")
    common(p, ("out_dir", "fusion"))
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("score", help="DER/JER scoring of an RTTM pair")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float)
    p.add_argument("--no-overlap", action="store_true", default=None,
                   help="exclude overlapped reference regions from scoring")
    common(p, ("out_dir", "scoring"))
    p.set_defaults(func=cmd_score)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, RttmParseError, FeatureError, SimulationError, FileNotFoundError,
            CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, GradCheckError, ScoringError, PipelineError,
            FusionError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
