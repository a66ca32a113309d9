"""Time-interval data model shared by the whole pipeline, plus RTTM file I/O.

All times are seconds stored as doubles. RTTM is the only hypothesis
interchange format; scoring and grid oracles quantize at 10 ms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping


class RttmParseError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    """One speaker-activity interval."""

    onset: float
    duration: float
    speaker: str

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"segment duration must be positive, got {self.duration}")
        if self.onset < 0:
            raise ValueError(f"segment onset must be non-negative, got {self.onset}")
        if not self.speaker:
            raise ValueError("speaker label must be non-empty")

    @property
    def offset(self) -> float:
        return self.onset + self.duration


@dataclass(frozen=True)
class DiarizationHypothesis:
    """Per-recording speaker activity; segments kept sorted by onset."""

    recording_id: str
    segments: tuple[Segment, ...]
    channel_id: int | None = None

    def __post_init__(self):
        ordered = tuple(sorted(self.segments, key=lambda s: (s.onset, s.offset, s.speaker)))
        object.__setattr__(self, "segments", ordered)

    def speakers(self) -> list[str]:
        return sorted({s.speaker for s in self.segments})

    def speaker_intervals(self, speaker: str) -> list[tuple[float, float]]:
        return [(s.onset, s.offset) for s in self.segments if s.speaker == speaker]

    def speech_time(self, speaker: str | None = None) -> float:
        """Total segment time; per-speaker when ``speaker`` is given."""
        return sum(s.duration for s in self.segments if speaker is None or s.speaker == speaker)

    def extent(self) -> float:
        return max((s.offset for s in self.segments), default=0.0)

    def relabeled(self, mapping: Mapping[str, str]) -> "DiarizationHypothesis":
        segs = tuple(
            Segment(s.onset, s.duration, mapping.get(s.speaker, s.speaker)) for s in self.segments
        )
        return DiarizationHypothesis(self.recording_id, segs, self.channel_id)


@dataclass(frozen=True)
class Timeline:
    """Disjoint sorted speech regions of one recording."""

    recording_id: str
    regions: tuple[tuple[float, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        regs = tuple(sorted((float(a), float(b)) for a, b in self.regions))
        for (a0, b0), (a1, _b1) in zip(regs, regs[1:]):
            if a1 < b0:
                raise ValueError("timeline regions must be disjoint")
        for a, b in regs:
            if b <= a:
                raise ValueError("timeline regions must have positive length")
        object.__setattr__(self, "regions", regs)

    def total_duration(self) -> float:
        return sum(b - a for a, b in self.regions)

    @staticmethod
    def from_hypothesis(hyp: DiarizationHypothesis) -> "Timeline":
        union = merge_intervals([(s.onset, s.offset) for s in hyp.segments], gap=0.0)
        return Timeline(hyp.recording_id, tuple(union))

    # -- compacted-time mapping (silence removal) ---------------------------------

    def to_compact(self, t: float) -> float:
        """Map original time to the silence-stripped timeline (clamped into regions)."""
        acc = 0.0
        for a, b in self.regions:
            if t <= a:
                return acc
            if t < b:
                return acc + (t - a)
            acc += b - a
        return acc

    def to_original(self, tc: float) -> float:
        acc = 0.0
        for a, b in self.regions:
            span = b - a
            if tc <= acc + span:
                return a + (tc - acc)
            acc += span
        return self.regions[-1][1] if self.regions else 0.0

    def compact_intervals(self, start_c: float, end_c: float) -> list[tuple[float, float]]:
        """Expand one compacted-time interval into original-time pieces."""
        out = []
        acc = 0.0
        for a, b in self.regions:
            span = b - a
            lo = max(start_c, acc)
            hi = min(end_c, acc + span)
            if hi > lo:
                out.append((a + (lo - acc), a + (hi - acc)))
            acc += span
        return out


# -- interval helpers ------------------------------------------------------------


def merge_intervals(
    intervals: Iterable[tuple[float, float]], gap: float = 0.0
) -> list[tuple[float, float]]:
    """Union intervals, also bridging gaps of at most ``gap`` seconds."""
    ivs = sorted((float(a), float(b)) for a, b in intervals)
    out: list[tuple[float, float]] = []
    for a, b in ivs:
        if out and a - out[-1][1] <= gap:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


def intersect_intervals(
    xs: Iterable[tuple[float, float]], ys: Iterable[tuple[float, float]]
) -> list[tuple[float, float]]:
    xs = sorted(xs)
    ys = sorted(ys)
    out = []
    i = j = 0
    while i < len(xs) and j < len(ys):
        lo = max(xs[i][0], ys[j][0])
        hi = min(xs[i][1], ys[j][1])
        if hi > lo:
            out.append((lo, hi))
        if xs[i][1] <= ys[j][1]:
            i += 1
        else:
            j += 1
    return out


def subtract_intervals(
    xs: Iterable[tuple[float, float]], ys: Iterable[tuple[float, float]]
) -> list[tuple[float, float]]:
    """Set difference xs \\ ys, both interpreted as interval unions."""
    out = []
    ys = merge_intervals(ys)
    for a, b in merge_intervals(xs):
        cur = a
        for ya, yb in ys:
            if yb <= cur or ya >= b:
                continue
            if ya > cur:
                out.append((cur, min(ya, b)))
            cur = max(cur, yb)
            if cur >= b:
                break
        if cur < b:
            out.append((cur, b))
    return out


def interval_overlap(xs: Iterable[tuple[float, float]], ys: Iterable[tuple[float, float]]) -> float:
    return sum(b - a for a, b in intersect_intervals(xs, ys))


# -- hypothesis-level operations -------------------------------------------------


def merge_same_speaker(hyp: DiarizationHypothesis, gap: float = 0.0) -> DiarizationHypothesis:
    """Union each speaker's intervals, bridging gaps of at most ``gap`` seconds."""
    if gap < 0:
        raise ValueError("gap must be non-negative")
    segs = []
    for spk in hyp.speakers():
        for a, b in merge_intervals(hyp.speaker_intervals(spk), gap=gap):
            segs.append(Segment(a, b - a, spk))
    return DiarizationHypothesis(hyp.recording_id, tuple(segs), hyp.channel_id)


def non_overlapped_regions(
    hyp: DiarizationHypothesis, min_duration: float = 0.0
) -> dict[str, list[Segment]]:
    """Intervals where exactly one speaker is active, per speaker.

    ``min_duration`` drops shorter pieces (2 s is the embedding-training
    setting; 0 keeps everything).
    """
    merged = merge_same_speaker(hyp, gap=0.0)
    per_speaker = {spk: merged.speaker_intervals(spk) for spk in merged.speakers()}
    out: dict[str, list[Segment]] = {}
    for spk, ivs in per_speaker.items():
        others = [iv for o, oivs in per_speaker.items() if o != spk for iv in oivs]
        alone = subtract_intervals(ivs, others)
        kept = [Segment(a, b - a, spk) for a, b in alone if (b - a) >= min_duration and b > a]
        if kept:
            out[spk] = kept
    return out


# -- RTTM I/O ---------------------------------------------------------------------

_RTTM_LINE = "SPEAKER {rec} {chan} {onset} {dur} <NA> <NA> {spk} <NA> <NA>\n"


def _fmt_seconds(x: float) -> str:
    # Half-up rounding at 2 decimals, immune to binary representation of .xx5.
    return f"{int(x * 100 + 0.5) / 100.0:.2f}"


def parse_rttm(path) -> list[DiarizationHypothesis]:
    """Read SPEAKER lines grouped per recording, in first-seen recording order."""
    path = Path(path)
    per_rec: dict[str, list[Segment]] = {}
    channels: dict[str, int | None] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) < 9:
                raise RttmParseError(f"{path}:{lineno}: expected >= 9 fields, got {len(fields)}")
            if fields[0] != "SPEAKER":
                raise RttmParseError(f"{path}:{lineno}: unsupported RTTM type {fields[0]!r}")
            rec = fields[1]
            try:
                onset = float(fields[3])
                dur = float(fields[4])
            except ValueError as exc:
                raise RttmParseError(f"{path}:{lineno}: bad onset/duration") from exc
            if dur <= 0:
                raise RttmParseError(f"{path}:{lineno}: non-positive duration {dur}")
            if onset < 0:
                raise RttmParseError(f"{path}:{lineno}: negative onset {onset}")
            spk = fields[7]
            per_rec.setdefault(rec, []).append(Segment(onset, dur, spk))
            if rec not in channels:
                try:
                    channels[rec] = int(fields[2])
                except ValueError:
                    channels[rec] = None
    return [
        DiarizationHypothesis(rec, tuple(segs), channels.get(rec)) for rec, segs in per_rec.items()
    ]


def write_rttm(hyps: Iterable[DiarizationHypothesis] | DiarizationHypothesis, path) -> None:
    if isinstance(hyps, DiarizationHypothesis):
        hyps = [hyps]
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for hyp in hyps:
            chan = hyp.channel_id if hyp.channel_id is not None else 1
            for seg in hyp.segments:
                fh.write(
                    _RTTM_LINE.format(
                        rec=hyp.recording_id,
                        chan=chan,
                        onset=_fmt_seconds(seg.onset),
                        dur=_fmt_seconds(seg.duration),
                        spk=seg.speaker,
                    )
                )
