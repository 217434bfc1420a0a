"""Synthetic multi-talker conversations as noisy speaker-embedding streams.

Stands in for an audio front-end: each frame is the sum of the active
speakers' unit centroid vectors plus isotropic gaussian noise, with ground
truth activity kept alongside. Everything is a pure function of its seed,
so corpora regenerate bit-identically.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .scoring import DiarizationResult, RttmDocument, write_rttm

DEFAULT_FRAME_SECONDS = 0.01
DEFAULT_UTT_RANGE = (50, 300)  # frames; 0.5-3 s at the default frame rate
SIMILARITY_CEILING = 0.6
OVERLAP_SLACK = 0.02


class GenerationError(Exception):
    pass


@dataclass
class SpeakerIdentity:
    id: str
    centroid: np.ndarray  # unit vector


@dataclass
class ConversationSpec:
    num_speakers: int
    duration_frames: int
    overlap_ratio_max: float = 0.3
    noise_sigma: float = 0.1
    silence_ratio: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_speakers <= 10:
            raise GenerationError(f"num_speakers must be in 1..10, got {self.num_speakers}")
        if self.duration_frames < 1:
            raise GenerationError("duration_frames must be positive")
        if not 0.0 <= self.overlap_ratio_max <= 0.3:
            raise GenerationError(
                f"overlap_ratio_max must be within [0, 0.3], got {self.overlap_ratio_max}")
        if not 0.0 <= self.silence_ratio < 1.0:
            raise GenerationError("silence_ratio must be in [0, 1)")
        if self.noise_sigma < 0:
            raise GenerationError("noise_sigma must be >= 0")


@dataclass
class FrameFeatures:
    frames: np.ndarray  # (T, D)
    frame_seconds: float = DEFAULT_FRAME_SECONDS


@dataclass
class ActivityMatrix:
    activity: np.ndarray  # (T, S) binary
    speaker_ids: list


@dataclass
class Conversation:
    conv_id: str
    spec: ConversationSpec
    speakers: list
    features: FrameFeatures
    activity: ActivityMatrix


def sample_speakers(n: int, dim: int, seed: int,
                    ceiling: float = SIMILARITY_CEILING,
                    max_attempts: int = 10_000) -> list[SpeakerIdentity]:
    """Draw n unit vectors whose pairwise cosine similarity stays below
    ``ceiling``, rejection-sampling one vector at a time."""
    if n < 1:
        raise GenerationError("need at least one speaker")
    rng = np.random.default_rng(seed)
    picked: list[np.ndarray] = []
    attempts = 0
    while len(picked) < n:
        if attempts >= max_attempts:
            raise GenerationError(
                f"could not place {n} speakers below cosine {ceiling} in {max_attempts} attempts")
        attempts += 1
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ u)) < ceiling for u in picked):
            picked.append(v)
    return [SpeakerIdentity(id=f"spk{i}", centroid=v) for i, v in enumerate(picked)]


def simulate_conversation(spec: ConversationSpec, speakers: list,
                          utt_range: tuple[int, int] = DEFAULT_UTT_RANGE) -> ActivityMatrix:
    """Place alternating utterances on a frame timeline.

    The first round visits every speaker once (in shuffled order) so each
    gets at least one utterance; afterwards the speaker is drawn at random,
    avoiding immediate self-succession. Candidate overlaps are trimmed back
    whenever committing them would push the realized overlap ratio past the
    cap, so the cap holds exactly on the emitted matrix.
    """
    if len(speakers) != spec.num_speakers:
        raise GenerationError("speaker list does not match spec.num_speakers")
    utt_min, utt_max = utt_range
    if not 1 <= utt_min <= utt_max:
        raise GenerationError(f"bad utterance range {utt_range}")
    rng = np.random.default_rng(spec.seed)
    T, S = spec.duration_frames, spec.num_speakers
    activity = np.zeros((T, S), dtype=np.uint8)
    row_count = np.zeros(T, dtype=np.int64)
    overlap_frames = 0
    active_frames = 0

    schedule = list(rng.permutation(S))
    prev_spk = -1
    mean_len = (utt_min + utt_max) / 2.0
    gap_mean = mean_len * spec.silence_ratio / max(1e-9, 1.0 - spec.silence_ratio)
    frontier = 0

    while frontier < T:
        if schedule:
            spk = int(schedule.pop(0))
        else:
            spk = int(rng.integers(S))
            while S > 1 and spk == prev_spk:
                spk = int(rng.integers(S))
        length = int(rng.integers(utt_min, utt_max + 1))

        want_overlap = (spec.overlap_ratio_max > 0 and frontier > 0
                        and rng.uniform() < min(0.6, 2.5 * spec.overlap_ratio_max))
        if want_overlap:
            max_back = min(length - 1, frontier)
            start = frontier - int(rng.integers(1, max_back + 1)) if max_back >= 1 else frontier
        else:
            gap = int(rng.uniform(0.0, 2.0 * gap_mean)) if gap_mean > 0 else 0
            start = frontier + gap
        if start >= T:
            break
        end = min(start + length, T)

        # never self-overlap; if the window touches the speaker's own speech,
        # fall back to starting at the frontier
        if activity[start:end, spk].any():
            start = frontier
            end = min(start + length, T)
            if start >= T or activity[start:end, spk].any():
                continue

        counts = row_count[start:end]
        new_overlap = int((counts == 1).sum())
        new_active = int((counts == 0).sum())
        if new_overlap:
            projected = (overlap_frames + new_overlap) / max(1, active_frames + new_active)
            if projected > spec.overlap_ratio_max:
                start = frontier
                end = min(start + length, T)
                if start >= T:
                    break
                counts = row_count[start:end]
                new_overlap = int((counts == 1).sum())
                new_active = int((counts == 0).sum())

        activity[start:end, spk] = 1
        row_count[start:end] += 1
        overlap_frames += new_overlap
        active_frames += new_active
        prev_spk = spk
        frontier = max(frontier, end)

    if not (activity.sum(axis=0) > 0).all():
        raise GenerationError(
            "conversation too short for every speaker to get an utterance; "
            "increase duration_frames or lower silence_ratio")
    realized = overlap_frames / max(1, active_frames)
    if realized > spec.overlap_ratio_max + OVERLAP_SLACK:
        raise GenerationError(f"overlap constraint violated: {realized:.3f}")
    return ActivityMatrix(activity=activity,
                          speaker_ids=[s.id for s in speakers])


def realized_overlap_ratio(activity: np.ndarray) -> float:
    counts = activity.sum(axis=1)
    active = int((counts >= 1).sum())
    return float((counts >= 2).sum()) / max(1, active)


def emit_features(activity: ActivityMatrix, speakers: list, noise_sigma: float,
                  seed: int, frame_seconds: float = DEFAULT_FRAME_SECONDS) -> FrameFeatures:
    """Frame t = sum of active speakers' centroids + isotropic gaussian noise.

    ``noise_sigma`` is the expected L2 norm of the noise vector (per-coordinate
    std is noise_sigma/sqrt(D)), so its scale is comparable to the unit
    centroids regardless of the embedding dimension.
    """
    if activity.activity.shape[1] != len(speakers):
        raise GenerationError("activity columns do not align with speakers")
    centroids = np.stack([s.centroid for s in speakers])
    frames = activity.activity.astype(np.float64) @ centroids
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        scale = noise_sigma / np.sqrt(centroids.shape[1])
        frames = frames + rng.normal(scale=scale, size=frames.shape)
    return FrameFeatures(frames=frames, frame_seconds=frame_seconds)


def chunk(features: FrameFeatures, activity: ActivityMatrix,
          chunk_frames: int) -> list[tuple[FrameFeatures, ActivityMatrix]]:
    """Split into contiguous non-overlapping chunks; the last may be short."""
    if chunk_frames < 1:
        raise GenerationError("chunk_frames must be >= 1")
    T = features.frames.shape[0]
    out = []
    for start in range(0, T, chunk_frames):
        stop = min(start + chunk_frames, T)
        out.append((
            FrameFeatures(frames=features.frames[start:stop].copy(),
                          frame_seconds=features.frame_seconds),
            ActivityMatrix(activity=activity.activity[start:stop].copy(),
                           speaker_ids=list(activity.speaker_ids)),
        ))
    return out


# ---------------------------------------------------------------------------
# corpus generation and on-disk layout

@dataclass
class CorpusConfig:
    num_conversations: int = 20
    speakers_min: int = 3
    speakers_max: int = 5
    duration_frames: int = 3000
    embed_dim: int = 32
    frame_seconds: float = DEFAULT_FRAME_SECONDS
    overlap_ratio_max: float = 0.2
    noise_sigma: float = 0.3
    silence_ratio: float = 0.15
    similarity_ceiling: float = SIMILARITY_CEILING
    utt_min: int = 50
    utt_max: int = 300
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.overlap_ratio_max <= 0.3:
            raise GenerationError(
                f"overlap_ratio_max must be within [0, 0.3], got {self.overlap_ratio_max}")
        if not 1 <= self.speakers_min <= self.speakers_max <= 10:
            raise GenerationError("speaker range must satisfy 1 <= min <= max <= 10")
        if not 0.0 <= self.silence_ratio < 1.0:
            raise GenerationError("silence_ratio must be in [0, 1)")
        if self.num_conversations < 1:
            raise GenerationError("num_conversations must be >= 1")


def generate_conversation(cfg: CorpusConfig, index: int) -> Conversation:
    rng = np.random.default_rng((cfg.seed, index))
    n_spk = int(rng.integers(cfg.speakers_min, cfg.speakers_max + 1))
    speakers = sample_speakers(n_spk, cfg.embed_dim, seed=int(rng.integers(2 ** 62)),
                               ceiling=cfg.similarity_ceiling)
    activity = None
    spec = None
    # an unlucky placement draw can strand a speaker; retry with fresh
    # (still seeded) placement seeds before giving up
    for _ in range(10):
        spec = ConversationSpec(
            num_speakers=n_spk,
            duration_frames=cfg.duration_frames,
            overlap_ratio_max=cfg.overlap_ratio_max,
            noise_sigma=cfg.noise_sigma,
            silence_ratio=cfg.silence_ratio,
            seed=int(rng.integers(2 ** 62)),
        )
        try:
            activity = simulate_conversation(spec, speakers,
                                             utt_range=(cfg.utt_min, cfg.utt_max))
            break
        except GenerationError:
            continue
    if activity is None:
        raise GenerationError(
            f"conversation {index}: no feasible placement for {n_spk} speakers "
            f"in {cfg.duration_frames} frames")
    features = emit_features(activity, speakers, spec.noise_sigma,
                             seed=int(rng.integers(2 ** 62)),
                             frame_seconds=cfg.frame_seconds)
    return Conversation(conv_id=f"conv{index:04d}", spec=spec, speakers=speakers,
                        features=features, activity=activity)


def generate_corpus(cfg: CorpusConfig) -> list[Conversation]:
    return [generate_conversation(cfg, i) for i in range(cfg.num_conversations)]


def reference_result(conv: Conversation) -> DiarizationResult:
    return DiarizationResult.from_activity(
        conv.activity.activity, conv.activity.speaker_ids, conv.features.frame_seconds)


MANIFEST_COLUMNS = ["conv_id", "features", "rttm", "num_speakers", "duration_frames",
                    "overlap_ratio_max", "noise_sigma", "silence_ratio", "seed",
                    "frame_seconds"]


def write_corpus(corpus: list[Conversation], out_dir: str) -> str:
    """Write features (binary tensor container), reference RTTMs and a
    tab-separated manifest; returns the manifest path."""
    feat_dir = os.path.join(out_dir, "features")
    rttm_dir = os.path.join(out_dir, "rttm")
    os.makedirs(feat_dir, exist_ok=True)
    os.makedirs(rttm_dir, exist_ok=True)
    rows = []
    for conv in corpus:
        feat_path = os.path.join(feat_dir, f"{conv.conv_id}.petw")
        named = {"frames": conv.features.frames,
                 "activity": conv.activity.activity.astype(np.float64),
                 "centroids": np.stack([s.centroid for s in conv.speakers])}
        ad.save_tensors(feat_path, named)
        rttm_path = os.path.join(rttm_dir, f"{conv.conv_id}.rttm")
        doc = RttmDocument.from_result(reference_result(conv), conv.conv_id)
        with open(rttm_path, "w") as fh:
            fh.write(write_rttm(doc))
        s = conv.spec
        rows.append([conv.conv_id, os.path.relpath(feat_path, out_dir),
                     os.path.relpath(rttm_path, out_dir), s.num_speakers,
                     s.duration_frames, s.overlap_ratio_max, s.noise_sigma,
                     s.silence_ratio, s.seed, conv.features.frame_seconds])
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")
    return manifest


def read_corpus(manifest_path: str) -> list[Conversation]:
    base = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0].split("\t") != MANIFEST_COLUMNS:
        raise GenerationError(f"{manifest_path}: not a corpus manifest")
    out = []
    for line in lines[1:]:
        vals = dict(zip(MANIFEST_COLUMNS, line.split("\t")))
        named = ad.load_tensors(os.path.join(base, vals["features"]))
        frame_seconds = float(vals["frame_seconds"])
        spec = ConversationSpec(
            num_speakers=int(vals["num_speakers"]),
            duration_frames=int(vals["duration_frames"]),
            overlap_ratio_max=float(vals["overlap_ratio_max"]),
            noise_sigma=float(vals["noise_sigma"]),
            silence_ratio=float(vals["silence_ratio"]),
            seed=int(vals["seed"]),
        )
        centroids = named["centroids"]
        speakers = [SpeakerIdentity(id=f"spk{i}", centroid=centroids[i])
                    for i in range(centroids.shape[0])]
        activity = ActivityMatrix(activity=named["activity"].astype(np.uint8),
                                  speaker_ids=[s.id for s in speakers])
        features = FrameFeatures(frames=named["frames"], frame_seconds=frame_seconds)
        out.append(Conversation(conv_id=vals["conv_id"], spec=spec, speakers=speakers,
                                features=features, activity=activity))
    return out
