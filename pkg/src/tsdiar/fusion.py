"""Rank-weighted, overlap-aware fusion of diarization hypotheses.

A simplified DOVER-Lap: speaker labels are mapped into a shared namespace
by incremental Hungarian matching on pairwise overlap duration, then a
boundary-split weighted vote emits, per region, the weighted-mean speaker
count's top-voted speakers (capped). Label mapping is greedy-incremental
rather than the cited global formulation.
"""

from __future__ import annotations

import numpy as np

from .metrics import linear_assignment
from .segments import (
    DiarizationHypothesis,
    Segment,
    interval_overlap,
    merge_intervals,
    merge_same_speaker,
)


class FusionError(ValueError):
    pass


def map_labels(hyps: list[DiarizationHypothesis]) -> list[DiarizationHypothesis]:
    """Relabel all hypotheses into one namespace by co-occurrence matching.

    The first hypothesis seeds the namespace; each later one is matched to
    the accumulated activity of every namespace label, and its speakers with
    zero co-occurrence get fresh labels.
    """
    if len(hyps) < 2:
        return list(hyps)
    rec_ids = {h.recording_id for h in hyps}
    if len(rec_ids) != 1:
        raise FusionError(f"cannot fuse across recordings: {sorted(rec_ids)}")

    namespace: dict[str, list[tuple[float, float]]] = {}
    fresh_counter = 0
    out = []
    for idx, hyp in enumerate(hyps):
        merged = merge_same_speaker(hyp)
        speakers = merged.speakers()
        mapping: dict[str, str] = {}
        if idx == 0:
            # The first hypothesis seeds the namespace with its own labels.
            mapping = {spk: spk for spk in speakers}
        elif namespace and speakers:
            labels = sorted(namespace)
            overlap = np.zeros((len(speakers), len(labels)))
            for i, spk in enumerate(speakers):
                ivs = merged.speaker_intervals(spk)
                for j, lab in enumerate(labels):
                    overlap[i, j] = interval_overlap(ivs, namespace[lab])
            for i, j in linear_assignment(-overlap):
                if overlap[i, j] > 0:
                    mapping[speakers[i]] = labels[j]
        for spk in speakers:
            if spk not in mapping:
                while f"S{fresh_counter}" in namespace:
                    fresh_counter += 1
                mapping[spk] = f"S{fresh_counter}"
                fresh_counter += 1
        relabeled = hyp.relabeled(mapping)
        for spk in relabeled.speakers():
            ivs = namespace.setdefault(spk, [])
            namespace[spk] = merge_intervals(
                ivs + relabeled.speaker_intervals(spk), gap=0.0
            )
        out.append(relabeled)
    return out


def weighted_vote(
    hyps: list[DiarizationHypothesis],
    weights: list[float],
    overlap_cap: int = 4,
) -> DiarizationHypothesis:
    """Boundary-split voting over label-mapped hypotheses.

    Per elementary region the speaker count is the weighted mean of the
    per-hypothesis counts, rounded half-up and capped; the top-count
    speakers by accumulated weight win, ties broken lexicographically.
    """
    if not hyps:
        raise FusionError("nothing to fuse")
    if len(weights) != len(hyps):
        raise FusionError("one weight per hypothesis required")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise FusionError("weights must be positive")
    w = w / w.sum()

    tracks = [
        {spk: merge_same_speaker(h).speaker_intervals(spk) for spk in h.speakers()}
        for h in hyps
    ]
    bounds = sorted(
        {t for track in tracks for ivs in track.values() for iv in ivs for t in iv}
    )
    raw: list[tuple[float, float, str]] = []
    for a, b in zip(bounds, bounds[1:]):
        if b - a <= 0:
            continue
        mid = 0.5 * (a + b)
        votes: dict[str, float] = {}
        count_est = 0.0
        for track, wh in zip(tracks, w):
            active = [
                spk for spk, ivs in track.items() if any(x <= mid < y for x, y in ivs)
            ]
            count_est += wh * len(active)
            for spk in active:
                votes[spk] = votes.get(spk, 0.0) + wh
        n_speak = min(int(np.floor(count_est + 0.5)), overlap_cap)
        if n_speak <= 0 or not votes:
            continue
        ranked = sorted(votes, key=lambda s: (-votes[s], s))
        for spk in ranked[:n_speak]:
            raw.append((a, b, spk))

    per_speaker: dict[str, list[tuple[float, float]]] = {}
    for a, b, spk in raw:
        per_speaker.setdefault(spk, []).append((a, b))
    segs = []
    for spk, ivs in per_speaker.items():
        for a, b in merge_intervals(ivs, gap=1e-9):
            segs.append(Segment(a, b - a, spk))
    return DiarizationHypothesis(hyps[0].recording_id, tuple(segs))


def dover_lap_fuse(
    hyps: list[DiarizationHypothesis],
    ders: list[float] | None = None,
    weighting: str = "rank",
    rank_power: float = 0.1,
    overlap_cap: int = 4,
) -> DiarizationHypothesis:
    """Map labels then vote; weights are uniform or rank^(-p) with rank 1 best.

    Ranks come from the supplied per-hypothesis DERs (ascending) or, absent
    those, from the input order.
    """
    if not hyps:
        raise FusionError("nothing to fuse")
    if len(hyps) == 1:
        return hyps[0]
    if weighting == "uniform":
        weights = [1.0] * len(hyps)
    elif weighting == "rank":
        if ders is not None:
            if len(ders) != len(hyps):
                raise FusionError("one DER per hypothesis required for ranking")
            order = np.argsort(np.asarray(ders), kind="stable")
            ranks = np.empty(len(hyps), dtype=int)
            ranks[order] = np.arange(1, len(hyps) + 1)
        else:
            ranks = np.arange(1, len(hyps) + 1)
        weights = [float(r) ** (-rank_power) for r in ranks]
    else:
        raise FusionError(f"unknown weighting {weighting!r}")
    mapped = map_labels(list(hyps))
    return weighted_vote(mapped, weights, overlap_cap=overlap_cap)
