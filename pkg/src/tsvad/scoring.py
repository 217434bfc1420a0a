"""RTTM segment I/O and collar-aware diarization error rate.

DER is computed twice by design: an exact interval-arithmetic implementation
(`der`) and a brute-force 1 ms frame-counting oracle (`der_frame_oracle`)
that exists purely to cross-check the former. Both share the same
convention: a collar of +/-collar seconds around every reference segment
boundary is excluded from all counting, including the label-mapping
overlap statistics.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assignment import hungarian

Segment = tuple[float, float]  # (start seconds, duration seconds)


class ScoringError(Exception):
    pass


class RttmParseError(ScoringError):
    pass


def _normalize_segments(segs) -> list[Segment]:
    """Sort, drop non-positive durations, merge overlapping/touching runs."""
    cleaned = sorted((float(s), float(d)) for s, d in segs if d > 0)
    merged: list[list[float]] = []
    for start, dur in cleaned:
        end = start + dur
        if merged and start <= merged[-1][1] + 1e-9:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [(s, e - s) for s, e in merged]


@dataclass
class DiarizationResult:
    """Per-label speech segments; normalized so segments per label are
    sorted, non-overlapping and strictly positive in duration."""

    segments: dict[str, list[Segment]] = field(default_factory=dict)

    @classmethod
    def from_segments(cls, mapping) -> "DiarizationResult":
        out = {}
        for label, segs in mapping.items():
            norm = _normalize_segments(segs)
            if norm:
                out[str(label)] = norm
        return cls(out)

    @classmethod
    def from_activity(cls, activity: np.ndarray, speaker_ids, frame_seconds: float) -> "DiarizationResult":
        mapping: dict[str, list[Segment]] = {}
        for col, label in enumerate(speaker_ids):
            mapping[str(label)] = binary_to_segments(activity[:, col], frame_seconds)
        return cls.from_segments(mapping)

    def labels(self) -> list[str]:
        return sorted(self.segments)

    def total_speech(self) -> float:
        return sum(d for segs in self.segments.values() for _, d in segs)

    def renamed(self, rename: dict) -> "DiarizationResult":
        return DiarizationResult.from_segments(
            {rename.get(k, k): v for k, v in self.segments.items()})

    def validate(self) -> None:
        for label, segs in self.segments.items():
            last_end = -np.inf
            for start, dur in segs:
                if dur <= 0:
                    raise ScoringError(f"{label}: non-positive duration {dur}")
                if start < last_end - 1e-9:
                    raise ScoringError(f"{label}: overlapping segments")
                last_end = start + dur


def binary_to_segments(mask: np.ndarray, frame_seconds: float) -> list[Segment]:
    """Contiguous runs of a binary frame mask as (start, duration) seconds."""
    mask = np.asarray(mask).astype(bool)
    if mask.size == 0 or not mask.any():
        return []
    padded = np.concatenate([[False], mask, [False]])
    flips = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = flips[0::2], flips[1::2]
    return [(s * frame_seconds, (e - s) * frame_seconds) for s, e in zip(starts, ends)]


# ---------------------------------------------------------------------------
# RTTM

@dataclass
class RttmDocument:
    entries: list  # (file_id, channel, onset, duration, label)

    def file_ids(self) -> list[str]:
        seen = []
        for file_id, *_ in self.entries:
            if file_id not in seen:
                seen.append(file_id)
        return seen

    def to_result(self, file_id: str | None = None) -> DiarizationResult:
        mapping: dict[str, list[Segment]] = {}
        for fid, _chan, onset, dur, label in self.entries:
            if file_id is not None and fid != file_id:
                continue
            mapping.setdefault(label, []).append((onset, dur))
        return DiarizationResult.from_segments(mapping)

    @classmethod
    def from_result(cls, result: DiarizationResult, file_id: str, channel: int = 1) -> "RttmDocument":
        entries = []
        for label in result.labels():
            for start, dur in result.segments[label]:
                entries.append((file_id, channel, start, dur, label))
        entries.sort(key=lambda e: (e[2], e[4]))
        return cls(entries)


def parse_rttm(text: str) -> RttmDocument:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        fields = line.split()
        if fields[0] != "SPEAKER":
            raise RttmParseError(f"line {lineno}: expected SPEAKER record, got {fields[0]!r}")
        if len(fields) < 9:
            raise RttmParseError(f"line {lineno}: expected >=9 fields, got {len(fields)}")
        try:
            onset = float(fields[3])
            dur = float(fields[4])
            channel = int(fields[2])
        except ValueError as exc:
            raise RttmParseError(f"line {lineno}: {exc}") from None
        entries.append((fields[1], channel, onset, dur, fields[7]))
    return RttmDocument(entries)


def write_rttm(doc: RttmDocument) -> str:
    lines = []
    for file_id, channel, onset, dur, label in doc.entries:
        lines.append(f"SPEAKER {file_id} {channel} {onset:.3f} {dur:.3f} <NA> <NA> {label} <NA> <NA>")
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# DER

@dataclass
class CollarSpec:
    collar: float = 0.25
    score_overlap: bool = True


@dataclass
class DerBreakdown:
    """DER and its decomposition, as percentages of scored reference time.

    The raw second counts are kept so per-file breakdowns can be pooled
    into a corpus-level figure.
    """
    der: float
    miss: float
    fa: float
    sc: float
    mapping: dict
    scored_ref_seconds: float
    miss_seconds: float
    fa_seconds: float
    sc_seconds: float


def _merge_intervals(intervals) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for s, e in sorted(intervals):
        if e <= s:
            continue
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


def _mark(points: np.ndarray, intervals) -> np.ndarray:
    hit = np.zeros(points.size, dtype=bool)
    for s, e in intervals:
        i0 = np.searchsorted(points, s)
        i1 = np.searchsorted(points, e)
        hit[i0:i1] = True
    return hit


def _ref_overlap_zones(ref: DiarizationResult) -> list[tuple[float, float]]:
    bounds = sorted({b for segs in ref.segments.values() for s, d in segs for b in (s, s + d)})
    if len(bounds) < 2:
        return []
    mids = (np.asarray(bounds[:-1]) + np.asarray(bounds[1:])) / 2.0
    zones = []
    for k, mid in enumerate(mids):
        n = sum(1 for segs in ref.segments.values()
                for s, d in segs if s <= mid < s + d)
        if n >= 2:
            zones.append((bounds[k], bounds[k + 1]))
    return _merge_intervals(zones)


def _score_on_points(ref: DiarizationResult, hyp: DiarizationResult,
                     mids: np.ndarray, widths: np.ndarray,
                     zones) -> DerBreakdown:
    ref_labels = ref.labels()
    hyp_labels = hyp.labels()
    scored = ~_mark(mids, zones)

    act_r = np.zeros((mids.size, len(ref_labels)), dtype=bool)
    for k, label in enumerate(ref_labels):
        act_r[:, k] = _mark(mids, [(s, s + d) for s, d in ref.segments[label]])
    act_h = np.zeros((mids.size, len(hyp_labels)), dtype=bool)
    for k, label in enumerate(hyp_labels):
        act_h[:, k] = _mark(mids, [(s, s + d) for s, d in hyp.segments[label]])

    w = np.where(scored, widths, 0.0)
    nref = act_r.sum(axis=1)
    scored_ref = float((w * nref).sum())
    if scored_ref <= 0.0:
        raise ScoringError("no scored reference speech: DER undefined")

    # optimal label mapping on scored overlap time
    n = max(len(ref_labels), len(hyp_labels))
    overlap = np.zeros((n, n))
    for i in range(len(ref_labels)):
        for j in range(len(hyp_labels)):
            overlap[i, j] = float((w * (act_r[:, i] & act_h[:, j])).sum())
    if n:
        assign = hungarian(-overlap)
    else:
        assign = []
    pairs = [(i, assign[i]) for i in range(len(ref_labels))
             if assign[i] < len(hyp_labels) and overlap[i, assign[i]] > 0.0]
    mapping = {ref_labels[i]: hyp_labels[j] for i, j in pairs}

    nhyp = act_h.sum(axis=1)
    if pairs:
        ncor = np.zeros(mids.size, dtype=np.int64)
        for i, j in pairs:
            ncor += (act_r[:, i] & act_h[:, j])
    else:
        ncor = np.zeros(mids.size, dtype=np.int64)

    miss_t = float((w * np.maximum(0, nref - nhyp)).sum())
    fa_t = float((w * np.maximum(0, nhyp - nref)).sum())
    sc_t = float((w * (np.minimum(nref, nhyp) - ncor)).sum())

    miss = 100.0 * miss_t / scored_ref
    fa = 100.0 * fa_t / scored_ref
    sc = 100.0 * sc_t / scored_ref
    return DerBreakdown(der=miss + fa + sc, miss=miss, fa=fa, sc=sc,
                        mapping=mapping, scored_ref_seconds=scored_ref,
                        miss_seconds=miss_t, fa_seconds=fa_t, sc_seconds=sc_t)


def _collar_zones(ref: DiarizationResult, collar: CollarSpec) -> list[tuple[float, float]]:
    zones = []
    if collar.collar > 0:
        for segs in ref.segments.values():
            for start, dur in segs:
                zones.append((start - collar.collar, start + collar.collar))
                zones.append((start + dur - collar.collar, start + dur + collar.collar))
    if not collar.score_overlap:
        zones.extend(_ref_overlap_zones(ref))
    return _merge_intervals(zones)


def der(ref: DiarizationResult, hyp: DiarizationResult,
        collar: CollarSpec = CollarSpec()) -> DerBreakdown:
    """Exact interval-arithmetic DER with miss/fa/confusion decomposition.

    Builds the elementary intervals induced by all segment boundaries and
    collar-exclusion zones; within each interval the active speaker sets are
    constant, so per-speaker time accumulates exactly.
    """
    zones = _collar_zones(ref, collar)
    points = {0.0}
    for result in (ref, hyp):
        for segs in result.segments.values():
            for s, d in segs:
                points.add(s)
                points.add(s + d)
    for s, e in zones:
        points.add(max(0.0, s))
        points.add(e)
    bounds = np.asarray(sorted(p for p in points if p >= 0.0))
    if bounds.size < 2:
        raise ScoringError("no scored reference speech: DER undefined")
    mids = (bounds[:-1] + bounds[1:]) / 2.0
    widths = np.diff(bounds)
    return _score_on_points(ref, hyp, mids, widths, zones)


def der_frame_oracle(ref: DiarizationResult, hyp: DiarizationResult,
                     collar: CollarSpec = CollarSpec(),
                     frame: float = 0.001) -> DerBreakdown:
    """Same definition as `der`, by brute-force counting of tiny frames.

    A frame is attributed by its midpoint. Independent of the interval
    implementation; intended for cross-checks on inputs up to ~an hour.
    """
    ends = [s + d for result in (ref, hyp)
            for segs in result.segments.values() for s, d in segs]
    tmax = max(ends, default=0.0) + collar.collar
    n = int(np.ceil(tmax / frame)) + 1
    if n > 4_000_000:
        raise ScoringError("frame oracle limited to ~1 hour of audio")
    mids = (np.arange(n) + 0.5) * frame
    widths = np.full(n, frame)
    zones = _collar_zones(ref, collar)
    return _score_on_points(ref, hyp, mids, widths, zones)


def pooled_der(parts: list[DerBreakdown]) -> DerBreakdown:
    """Pool per-file breakdowns into a corpus-level DER (time-weighted)."""
    if not parts:
        raise ScoringError("nothing to pool")
    ref_t = sum(p.scored_ref_seconds for p in parts)
    miss_t = sum(p.miss_seconds for p in parts)
    fa_t = sum(p.fa_seconds for p in parts)
    sc_t = sum(p.sc_seconds for p in parts)
    miss = 100.0 * miss_t / ref_t
    fa = 100.0 * fa_t / ref_t
    sc = 100.0 * sc_t / ref_t
    return DerBreakdown(der=miss + fa + sc, miss=miss, fa=fa, sc=sc, mapping={},
                        scored_ref_seconds=ref_t, miss_seconds=miss_t,
                        fa_seconds=fa_t, sc_seconds=sc_t)
