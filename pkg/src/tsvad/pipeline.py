"""End-to-end inference: first pass, chunked detection, stitching.

Long inputs are chopped into fixed-length chunks and detected independently.
Target columns stitch trivially (the profile order is shared across chunks);
pseudo columns stitch positionally by default, since a recurring missed
speaker tends to stick to one slot, or optionally by clustering per-chunk
pseudo-speaker embeddings (mean feature of the column's active frames).
First-pass speakers that fell below the profile duration floor bypass the
network: their first-pass segments are copied into the result unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustering import (MIN_PROFILE_SECONDS, VAD_THRESHOLD_DEFAULT,
                         ProfileSet, ProfileSource, ahc_cluster,
                         clustered_profiles, cosine_affinity)
from .model import TsVadModel
from .scoring import DiarizationResult, Segment, binary_to_segments
from .simulate import FrameFeatures


class PipelineError(Exception):
    pass


@dataclass
class ChunkPlan:
    chunk_frames: int

    def __post_init__(self):
        if self.chunk_frames < 1:
            raise PipelineError("chunk_frames must be >= 1")

    @classmethod
    def from_seconds(cls, seconds: float, frame_seconds: float) -> "ChunkPlan":
        return cls(chunk_frames=max(1, int(round(seconds / frame_seconds))))

    def ranges(self, total_frames: int) -> list:
        return [(s, min(s + self.chunk_frames, total_frames))
                for s in range(0, total_frames, self.chunk_frames)]


DEFAULT_CHUNK_SECONDS = 120.0


@dataclass
class StitchPolicy:
    clust_psd_spk: bool = False
    clustering_threshold: float = 0.8
    binarize_threshold: float = 0.5
    min_gap_seconds: float = 0.1
    min_dur_seconds: float = 0.1


def posteriors_to_segments(column: np.ndarray, frame_seconds: float,
                           threshold: float = 0.5, min_gap: float = 0.1,
                           min_dur: float = 0.1) -> list:
    """Binarize one posterior column, close short gaps, drop short blips."""
    mask = np.asarray(column) > threshold
    segments = binary_to_segments(mask, frame_seconds)
    merged: list[list[float]] = []
    for start, dur in segments:
        if merged and start - (merged[-1][0] + merged[-1][1]) < min_gap:
            merged[-1][1] = start + dur - merged[-1][0]
        else:
            merged.append([start, dur])
    return [(s, d) for s, d in merged if d >= min_dur]


@dataclass
class PseudoChunkRecord:
    """Per (chunk, pseudo column) debugging row emitted alongside results."""
    chunk_index: int
    pseudo_index: int
    active_seconds: float
    label: str


@dataclass
class InferenceOutput:
    result: DiarizationResult
    pseudo_records: list
    posterior: np.ndarray  # (T, S+Z) stacked over chunks
    column_roles: list


def infer(features: FrameFeatures, model: TsVadModel, profiles: ProfileSet,
          chunk_plan: ChunkPlan | None = None,
          stitch: StitchPolicy | None = None) -> InferenceOutput:
    """Chunked forward pass plus stitching and passthrough."""
    stitch = stitch or StitchPolicy()
    if chunk_plan is None:
        chunk_plan = ChunkPlan.from_seconds(DEFAULT_CHUNK_SECONDS, features.frame_seconds)
    T = features.frames.shape[0]
    ranges = chunk_plan.ranges(T)

    pieces = []
    roles = None
    for start, stop in ranges:
        out = model.forward(features.frames[start:stop], profiles)
        pieces.append(out.data)
        roles = out.column_roles
    posterior = np.concatenate(pieces, axis=0) if pieces else np.zeros((0, 0))

    fs = features.frame_seconds
    segments: dict[str, list[Segment]] = {}

    target_cols = [(i, role.split(":", 1)[1]) for i, role in enumerate(roles or [])
                   if role.startswith("target:")]
    pseudo_cols = [i for i, role in enumerate(roles or []) if role.startswith("pseudo:")]

    for col, label in target_cols:
        segs = posteriors_to_segments(posterior[:, col], fs,
                                      threshold=stitch.binarize_threshold,
                                      min_gap=stitch.min_gap_seconds,
                                      min_dur=stitch.min_dur_seconds)
        if segs:
            segments.setdefault(label, []).extend(segs)

    records: list[PseudoChunkRecord] = []
    if pseudo_cols:
        if stitch.clust_psd_spk:
            segments, records = _stitch_pseudo_clustered(
                features, posterior, pseudo_cols, ranges, stitch, segments)
        else:
            for j, col in enumerate(pseudo_cols):
                label = f"pseudo-{j}"
                segs = posteriors_to_segments(posterior[:, col], fs,
                                              threshold=stitch.binarize_threshold,
                                              min_gap=stitch.min_gap_seconds,
                                              min_dur=stitch.min_dur_seconds)
                if segs:
                    segments.setdefault(label, []).extend(segs)
                for ci, (start, stop) in enumerate(ranges):
                    active = float((posterior[start:stop, col] > stitch.binarize_threshold).sum() * fs)
                    if active > 0:
                        records.append(PseudoChunkRecord(ci, j, active, label))

    # activity passthrough for first-pass speakers below the profile floor
    for label in profiles.passthrough_labels():
        segs = profiles.first_pass_segments.get(label, [])
        if segs:
            segments.setdefault(label, []).extend(segs)

    result = DiarizationResult.from_segments(segments)
    result.validate()
    return InferenceOutput(result=result, pseudo_records=records,
                           posterior=posterior, column_roles=roles or [])


def _stitch_pseudo_clustered(features, posterior, pseudo_cols, ranges, stitch,
                             segments):
    """Group per-chunk pseudo activity by clustering mean active-frame
    features; chunks of the same speaker merge under one label."""
    fs = features.frame_seconds
    entries = []  # (chunk_idx, pseudo_idx, embedding, frame_mask_global)
    for ci, (start, stop) in enumerate(ranges):
        for j, col in enumerate(pseudo_cols):
            mask = posterior[start:stop, col] > stitch.binarize_threshold
            if not mask.any():
                continue
            frames = features.frames[start:stop][mask]
            entries.append((ci, j, frames.mean(axis=0), (start, stop, mask)))

    records: list[PseudoChunkRecord] = []
    if not entries:
        return segments, records

    if len(entries) == 1:
        groups = [0]
    else:
        emb = np.stack([e[2] for e in entries])
        affinity = cosine_affinity(emb, np.arange(emb.shape[0]))
        groups = ahc_cluster(affinity, stitch.clustering_threshold).labels.tolist()

    for (ci, j, _emb, (start, stop, mask)), g in zip(entries, groups):
        label = f"pseudo-g{g}"
        full = np.zeros(posterior.shape[0], dtype=bool)
        full[start:stop] = mask
        segs = posteriors_to_segments(full.astype(float), fs, threshold=0.5,
                                      min_gap=stitch.min_gap_seconds,
                                      min_dur=stitch.min_dur_seconds)
        if segs:
            segments.setdefault(label, []).extend(segs)
        records.append(PseudoChunkRecord(ci, j, float(mask.sum() * fs), label))
    return segments, records


# ---------------------------------------------------------------------------
# whole-system driver

@dataclass
class FirstPassConfig:
    method: str = "ahc"  # "ahc" | "nmesc"
    threshold: float = 0.9  # AHC stopping threshold
    use_vad: bool = True
    vad_threshold: float = VAD_THRESHOLD_DEFAULT
    max_speakers: int = 10
    min_profile_seconds: float = MIN_PROFILE_SECONDS
    seed: int = 0

    def source(self) -> ProfileSource:
        if self.method == "ahc":
            return ProfileSource("ahc", threshold=self.threshold, vad=self.use_vad)
        if self.method == "nmesc":
            return ProfileSource("nmesc", vad=self.use_vad)
        raise PipelineError(f"unknown first-pass method {self.method!r}")


@dataclass
class SystemOutput:
    profiles: ProfileSet
    first_pass: DiarizationResult
    final: DiarizationResult
    inference: InferenceOutput


def first_pass_result(profiles: ProfileSet) -> DiarizationResult:
    return DiarizationResult.from_segments(profiles.first_pass_segments)


def run_system(features: FrameFeatures, first_pass: FirstPassConfig,
               model: TsVadModel, stitch: StitchPolicy | None = None,
               chunk_plan: ChunkPlan | None = None) -> SystemOutput:
    """Clustering first pass, profile extraction, then chunked detection."""
    profiles = clustered_profiles(
        features, first_pass.source(), vad_threshold=first_pass.vad_threshold,
        max_speakers=first_pass.max_speakers,
        min_seconds=first_pass.min_profile_seconds, seed=first_pass.seed)
    inference = infer(features, model, profiles, chunk_plan=chunk_plan, stitch=stitch)
    return SystemOutput(profiles=profiles, first_pass=first_pass_result(profiles),
                        final=inference.result, inference=inference)
