"""Diarization and verification scoring: optimal mapping, DER, JER, EER, minDCF."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .segments import (
    DiarizationHypothesis,
    interval_overlap,
    intersect_intervals,
    merge_intervals,
    merge_same_speaker,
    subtract_intervals,
)


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerMapping:
    """One-to-one pairing between reference and hypothesis labels."""

    pairs: tuple[tuple[object, object], ...]
    unmatched_ref: tuple[object, ...] = ()
    unmatched_hyp: tuple[object, ...] = ()

    def __post_init__(self):
        refs = [r for r, _ in self.pairs]
        hyps = [h for _, h in self.pairs]
        if len(set(refs)) != len(refs) or len(set(hyps)) != len(hyps):
            raise ValueError("speaker mapping must be one-to-one")

    def as_dict(self) -> dict:
        return dict(self.pairs)


@dataclass(frozen=True)
class DerReport:
    miss: float
    fa: float
    spkerr: float
    der: float
    scored_speech: float

    def __post_init__(self):
        if abs(self.der - (self.miss + self.fa + self.spkerr)) > 1e-9:
            raise ValueError("DER must decompose exactly into miss + fa + spkerr")

    def to_json(self, jer: float | None = None) -> str:
        payload = {
            "miss": self.miss,
            "fa": self.fa,
            "spkerr": self.spkerr,
            "der": self.der,
        }
        if jer is not None:
            payload["jer"] = jer
        return json.dumps(payload)


@dataclass(frozen=True)
class TrialScore:
    score: float
    is_target: bool

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("trial score must be finite")


# -- minimum-cost assignment ----------------------------------------------------


def linear_assignment(costs: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost one-to-one assignment over min(R, H) pairs.

    O(n^3) shortest augmenting path with potentials; rectangular inputs are
    padded square with zero-cost dummies that absorb the surplus side.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size == 0:
        return []
    if not np.isfinite(costs).all():
        raise ValueError("assignment costs must be finite")
    r, h = costs.shape
    n = max(r, h)
    padded = np.zeros((n, n), dtype=np.float64)
    padded[:r, :h] = costs

    inf = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j] = row assigned to column j; column 0 is virtual
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = padded[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    pairs = []
    for j in range(1, n + 1):
        i = p[j]
        if 1 <= i <= r and 1 <= j <= h:
            pairs.append((i - 1, j - 1))
    return sorted(pairs)


def hungarian(costs: np.ndarray) -> SpeakerMapping:
    """Optimal assignment as a :class:`SpeakerMapping` over row/column indices."""
    costs = np.asarray(costs, dtype=np.float64)
    pairs = linear_assignment(costs)
    if costs.size == 0:
        return SpeakerMapping(())
    matched_r = {i for i, _ in pairs}
    matched_h = {j for _, j in pairs}
    return SpeakerMapping(
        tuple(pairs),
        tuple(i for i in range(costs.shape[0]) if i not in matched_r),
        tuple(j for j in range(costs.shape[1]) if j not in matched_h),
    )


# -- DER / JER --------------------------------------------------------------------


def _speaker_tracks(hyp: DiarizationHypothesis) -> dict[str, list[tuple[float, float]]]:
    merged = merge_same_speaker(hyp, gap=0.0)
    return {spk: merged.speaker_intervals(spk) for spk in merged.speakers()}


def _scored_regions(
    ref_tracks: dict[str, list[tuple[float, float]]],
    extent: float,
    collar: float,
    score_overlap: bool,
) -> list[tuple[float, float]]:
    """Full extent minus collars around reference boundaries (and overlaps if excluded)."""
    regions = [(0.0, extent)] if extent > 0 else []
    if collar > 0:
        zones = []
        for ivs in ref_tracks.values():
            for a, b in ivs:
                zones.append((max(0.0, a - collar), a + collar))
                zones.append((max(0.0, b - collar), b + collar))
        regions = subtract_intervals(regions, zones)
    if not score_overlap:
        overlaps = _multi_speaker_regions(ref_tracks)
        regions = subtract_intervals(regions, overlaps)
    return regions


def _multi_speaker_regions(tracks: dict[str, list[tuple[float, float]]]) -> list[tuple[float, float]]:
    bounds = sorted({t for ivs in tracks.values() for iv in ivs for t in iv})
    out = []
    for a, b in zip(bounds, bounds[1:]):
        mid = 0.5 * (a + b)
        active = sum(1 for ivs in tracks.values() if any(x <= mid < y for x, y in ivs))
        if active >= 2:
            out.append((a, b))
    return merge_intervals(out)


def optimal_speaker_mapping(
    ref: DiarizationHypothesis,
    hyp: DiarizationHypothesis,
    scored: list[tuple[float, float]] | None = None,
) -> SpeakerMapping:
    """Hungarian mapping maximizing total ref/hyp co-occurrence duration."""
    ref_tracks = _speaker_tracks(ref)
    hyp_tracks = _speaker_tracks(hyp)
    ref_spk = sorted(ref_tracks)
    hyp_spk = sorted(hyp_tracks)
    if not ref_spk or not hyp_spk:
        return SpeakerMapping((), tuple(ref_spk), tuple(hyp_spk))
    co = np.zeros((len(ref_spk), len(hyp_spk)))
    for i, r in enumerate(ref_spk):
        rivs = ref_tracks[r] if scored is None else intersect_intervals(ref_tracks[r], scored)
        for j, h in enumerate(hyp_spk):
            co[i, j] = interval_overlap(rivs, hyp_tracks[h])
    pairs = [(ref_spk[i], hyp_spk[j]) for i, j in linear_assignment(-co)]
    mapped_r = {r for r, _ in pairs}
    mapped_h = {h for _, h in pairs}
    return SpeakerMapping(
        tuple(pairs),
        tuple(r for r in ref_spk if r not in mapped_r),
        tuple(h for h in hyp_spk if h not in mapped_h),
    )


def compute_der(
    ref: DiarizationHypothesis,
    hyp: DiarizationHypothesis,
    collar: float = 0.25,
    score_overlap: bool = True,
) -> DerReport:
    """Interval-exact DER with one optimal mapping per recording.

    Error times are accumulated over elementary regions cut at every
    ref/hyp/collar boundary, then normalized by scored reference speech time.
    """
    if ref.recording_id != hyp.recording_id:
        raise ScoringError(
            f"recording ids differ: {ref.recording_id!r} vs {hyp.recording_id!r}"
        )
    if collar < 0:
        raise ScoringError("collar must be non-negative")
    if not ref.segments:
        raise ScoringError("DER is undefined for an empty reference")

    ref_tracks = _speaker_tracks(ref)
    hyp_tracks = _speaker_tracks(hyp)
    extent = max(ref.extent(), hyp.extent())
    scored = _scored_regions(ref_tracks, extent, collar, score_overlap)
    mapping = optimal_speaker_mapping(ref, hyp, scored).as_dict()

    bounds = set()
    for ivs in list(ref_tracks.values()) + list(hyp_tracks.values()):
        for a, b in ivs:
            bounds.update((a, b))
    for a, b in scored:
        bounds.update((a, b))
    cut = sorted(bounds)

    miss = fa = err = speech = 0.0
    for a, b in zip(cut, cut[1:]):
        dur = b - a
        if dur <= 0:
            continue
        mid = 0.5 * (a + b)
        if not any(x <= mid < y for x, y in scored):
            continue
        r_act = {s for s, ivs in ref_tracks.items() if any(x <= mid < y for x, y in ivs)}
        h_act = {s for s, ivs in hyp_tracks.items() if any(x <= mid < y for x, y in ivs)}
        n_ref, n_hyp = len(r_act), len(h_act)
        n_correct = sum(1 for r in r_act if mapping.get(r) in h_act)
        miss += dur * max(0, n_ref - n_hyp)
        fa += dur * max(0, n_hyp - n_ref)
        err += dur * (min(n_ref, n_hyp) - n_correct)
        speech += dur * n_ref

    if speech <= 0:
        raise ScoringError("no scored reference speech (collar removed everything)")
    miss_pct = 100.0 * miss / speech
    fa_pct = 100.0 * fa / speech
    err_pct = 100.0 * err / speech
    # Summing the rounded components keeps the decomposition identity bit-exact.
    return DerReport(
        miss=miss_pct,
        fa=fa_pct,
        spkerr=err_pct,
        der=miss_pct + fa_pct + err_pct,
        scored_speech=speech,
    )


def compute_jer(
    ref: DiarizationHypothesis,
    hyp: DiarizationHypothesis,
    collar: float = 0.0,
) -> float:
    """Mean per-reference-speaker Jaccard error (percent) under the DER mapping."""
    if ref.recording_id != hyp.recording_id:
        raise ScoringError(
            f"recording ids differ: {ref.recording_id!r} vs {hyp.recording_id!r}"
        )
    if not ref.segments:
        raise ScoringError("JER is undefined for an empty reference")
    ref_tracks = _speaker_tracks(ref)
    hyp_tracks = _speaker_tracks(hyp)
    extent = max(ref.extent(), hyp.extent())
    scored = _scored_regions(ref_tracks, extent, collar, score_overlap=True)
    mapping = optimal_speaker_mapping(ref, hyp, scored).as_dict()

    errors = []
    for spk, rivs in ref_tracks.items():
        rivs = intersect_intervals(rivs, scored)
        partner = mapping.get(spk)
        if partner is None:
            errors.append(100.0)
            continue
        hivs = intersect_intervals(hyp_tracks[partner], scored)
        inter = interval_overlap(rivs, hivs)
        union = sum(b - a for a, b in merge_intervals(list(rivs) + list(hivs)))
        errors.append(100.0 * (1.0 - inter / union) if union > 0 else 0.0)
    return float(np.mean(errors))


def aggregate_der(reports: Sequence[DerReport]) -> DerReport:
    """Time-weighted pooling of per-recording reports."""
    if not reports:
        raise ScoringError("nothing to aggregate")
    total = sum(r.scored_speech for r in reports)
    miss = sum(r.miss * r.scored_speech for r in reports) / total
    fa = sum(r.fa * r.scored_speech for r in reports) / total
    err = sum(r.spkerr * r.scored_speech for r in reports) / total
    return DerReport(miss=miss, fa=fa, spkerr=err, der=miss + fa + err, scored_speech=total)


# -- verification metrics -----------------------------------------------------------


def _rates(trials: Sequence[TrialScore]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FR/FA rates at thresholds just below each sorted unique score, plus +inf end.

    Decision rule: accept when score >= threshold. Rates are returned for the
    sweep from accept-everything to reject-everything.
    """
    scores = np.array([t.score for t in trials])
    labels = np.array([t.is_target for t in trials])
    n_tar = int(labels.sum())
    n_non = int((~labels).sum())
    if n_tar == 0 or n_non == 0:
        raise ScoringError("need at least one target and one non-target trial")
    order = np.argsort(scores, kind="stable")
    scores, labels = scores[order], labels[order]
    uniq = np.unique(scores)
    # Threshold candidates: each unique score (accept >= s) and one above the max.
    thresholds = np.concatenate([uniq, [uniq[-1] + 1.0]])
    fr = np.empty(thresholds.size)
    fa = np.empty(thresholds.size)
    for k, th in enumerate(thresholds):
        fr[k] = np.sum(labels & (scores < th)) / n_tar
        fa[k] = np.sum(~labels & (scores >= th)) / n_non
    return thresholds, fr, fa


def compute_eer(trials: Sequence[TrialScore]) -> float:
    """Equal error rate (percent), linearly interpolated at the FR/FA crossing."""
    _, fr, fa = _rates(trials)
    diff = fr - fa
    idx = int(np.argmax(diff >= 0))
    if idx == 0:
        return 100.0 * 0.5 * (fr[0] + fa[0])
    # Interpolate between the adjacent operating points where the sign flips.
    fr0, fr1 = fr[idx - 1], fr[idx]
    fa0, fa1 = fa[idx - 1], fa[idx]
    denom = (fr1 - fr0) - (fa1 - fa0)
    t = 0.0 if denom == 0 else (fa0 - fr0) / denom
    eer = fr0 + t * (fr1 - fr0)
    return 100.0 * float(eer)


def compute_min_dcf(
    trials: Sequence[TrialScore],
    p_target: float = 0.01,
    c_miss: float = 1.0,
    c_fa: float = 1.0,
) -> float:
    """Minimum normalized detection cost over all observed thresholds."""
    _, fr, fa = _rates(trials)
    cost = c_miss * p_target * fr + c_fa * (1.0 - p_target) * fa
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return float(cost.min() / norm)


# -- trial list file -----------------------------------------------------------------


def read_trials(path) -> list[TrialScore]:
    trials = []
    with open(Path(path), "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 2 or fields[0] not in ("0", "1"):
                raise ScoringError(f"{path}:{lineno}: expected '<label 0|1> <score>'")
            trials.append(TrialScore(float(fields[1]), fields[0] == "1"))
    return trials


def write_trials(trials: Sequence[TrialScore], path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(f"{1 if t.is_target else 0} {t.score:.6f}\n")
