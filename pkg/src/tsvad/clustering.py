"""Clustering-based first-pass diarization and speaker profile extraction.

Produces the target speaker profiles consumed by the detection network,
including the deliberately error-bearing training profiles: agglomerative
clustering at several stopping thresholds and eigengap-based spectral
clustering, each with the energy VAD on or off, mixed with ground-truth
(oracle) profiles at configured ratios.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scoring import Segment, binary_to_segments
from .simulate import Conversation, FrameFeatures

VAD_THRESHOLD_DEFAULT = 0.7
SUBSAMPLE_SECONDS = 0.1  # cluster one frame per 0.1 s to keep N manageable
MIN_PROFILE_SECONDS = 2.0


class ClusteringError(Exception):
    pass


@dataclass
class AffinityMatrix:
    values: np.ndarray  # (N, N) cosine similarities, exactly symmetric
    item_frame_index: np.ndarray  # (N,) frame index of each clustered item


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # (N,) ids in 0..K-1, each appearing at least once
    K: int


@dataclass(frozen=True)
class ProfileSource:
    kind: str  # "oracle" | "ahc" | "nmesc"
    threshold: float | None = None
    vad: bool | None = None

    def describe(self) -> str:
        if self.kind == "oracle":
            return "oracle"
        vad = "on" if self.vad else "off"
        if self.kind == "ahc":
            return f"ahc(threshold={self.threshold},vad={vad})"
        return f"nmesc(vad={vad})"


@dataclass
class ProfileSet:
    profiles: np.ndarray  # (S, P); S may be 0
    speaker_labels: list
    source: ProfileSource
    first_pass_segments: dict = field(default_factory=dict)  # label -> [Segment]

    @property
    def num_speakers(self) -> int:
        return int(self.profiles.shape[0])

    def passthrough_labels(self) -> list:
        """First-pass labels that fell below the profile duration floor."""
        return [lab for lab in self.first_pass_segments if lab not in self.speaker_labels]


@dataclass
class ProfileSourceMix:
    entries: list  # [(ProfileSource, probability)]

    def __post_init__(self):
        total = sum(p for _, p in self.entries)
        if abs(total - 1.0) > 1e-9:
            raise ClusteringError(f"mix probabilities sum to {total}, expected 1")

    def draw(self, rng: np.random.Generator) -> ProfileSource:
        u = rng.uniform()
        acc = 0.0
        for source, prob in self.entries:
            acc += prob
            if u < acc:
                return source
        return self.entries[-1][0]


def vad(features: FrameFeatures, threshold: float | None) -> np.ndarray:
    """Energy VAD: a frame is active iff its L2 norm exceeds the threshold.

    threshold=None skips the VAD step entirely (all frames active).
    """
    T = features.frames.shape[0]
    if threshold is None:
        return np.ones(T, dtype=bool)
    return np.linalg.norm(features.frames, axis=1) > threshold


def subsample_items(mask: np.ndarray, frame_seconds: float) -> np.ndarray:
    """Indices of VAD-active frames taken every ~0.1 s."""
    stride = max(1, int(round(SUBSAMPLE_SECONDS / frame_seconds)))
    idx = np.arange(0, mask.size, stride)
    return idx[mask[idx]]


def cosine_affinity(frames: np.ndarray, item_frame_index: np.ndarray) -> AffinityMatrix:
    """Pairwise cosine similarity of the selected frames.

    The upper triangle is computed once and mirrored so the matrix is
    exactly symmetric; the diagonal is exactly 1.
    """
    items = frames[item_frame_index]
    norms = np.linalg.norm(items, axis=1)
    norms = np.maximum(norms, 1e-12)
    unit = items / norms[:, None]
    sims = unit @ unit.T
    upper = np.triu(sims, 1)
    sims = upper + upper.T
    np.fill_diagonal(sims, 1.0)
    return AffinityMatrix(values=sims, item_frame_index=np.asarray(item_frame_index))


def _relabel_first_occurrence(raw: np.ndarray) -> tuple[np.ndarray, int]:
    mapping: dict[int, int] = {}
    out = np.empty(raw.size, dtype=np.int64)
    for i, r in enumerate(raw.tolist()):
        if r not in mapping:
            mapping[r] = len(mapping)
        out[i] = mapping[r]
    return out, len(mapping)


def ahc_cluster(affinity: AffinityMatrix, stop_threshold: float) -> ClusterAssignment:
    """Average-linkage agglomeration on cosine similarity.

    Merging continues while the most similar pair of clusters exceeds the
    stopping threshold; ties break on the lowest (i, j) index pair. Linkage
    between clusters is the mean pairwise similarity of their members,
    maintained incrementally through pair-sum bookkeeping.
    """
    A = affinity.values
    N = A.shape[0]
    if N == 0:
        raise ClusteringError("cannot cluster an empty affinity matrix")
    if not -1.0 < stop_threshold < 1.0:
        raise ClusteringError(f"stop_threshold must lie in (-1, 1), got {stop_threshold}")

    sums = A.astype(np.float64).copy()
    np.fill_diagonal(sums, 0.0)
    sizes = np.ones(N)
    rep = np.arange(N)  # item -> representative index
    active = np.ones(N, dtype=bool)
    link = sums.copy()  # average linkage; sizes start at 1

    neg = -np.inf
    for col in range(N):
        link[col:, col] = neg  # keep only i < j

    while active.sum() > 1:
        masked = link
        flat = int(np.argmax(masked))
        i, j = divmod(flat, N)
        best = masked[i, j]
        if not best > stop_threshold:
            break
        # merge cluster j into cluster i (i < j)
        rep[rep == j] = i
        active[j] = False
        sums[i, :] += sums[j, :]
        sums[:, i] += sums[:, j]
        sizes[i] += sizes[j]
        denom = sizes[i] * sizes
        with np.errstate(invalid="ignore"):
            row = sums[i, :] / denom
        row[~active] = neg
        row[i] = neg
        link[i, i + 1:] = row[i + 1:]
        link[:i, i] = row[:i]
        link[j, :] = neg
        link[:, j] = neg

    labels, K = _relabel_first_occurrence(rep)
    return ClusterAssignment(labels=labels, K=K)


def _keep_top_p(A: np.ndarray, p: int) -> np.ndarray:
    """Zero all but the p largest off-diagonal affinities per row, then
    symmetrize with the elementwise max. Self-loops are dropped."""
    N = A.shape[0]
    work = A.copy()
    np.fill_diagonal(work, -np.inf)
    if p >= N - 1:
        kept = np.where(np.isfinite(work), work, 0.0)
    else:
        kept = np.zeros_like(A)
        part = np.argpartition(work, N - p, axis=1)[:, N - p:]
        rows = np.repeat(np.arange(N), part.shape[1])
        kept[rows, part.ravel()] = A[rows, part.ravel()]
    out = np.maximum(kept, kept.T)
    np.fill_diagonal(out, 0.0)
    return out


def nmesc_cluster(affinity: AffinityMatrix, max_speakers: int = 10,
                  seed: int = 0) -> ClusterAssignment:
    """Spectral clustering with eigengap speaker counting and auto-tuned
    row-wise binarization.

    For each candidate p in a grid (1..N/2, at most 25 values): keep the
    top-p affinities per row, symmetrize with max, form the unnormalized
    Laplacian, and read the speaker count k(p) off the largest gap among
    the leading eigenvalues. p is scored by eigengap/p (bigger is better,
    ties to the smaller p); the winning graph's k smallest eigenvectors are
    clustered with seeded k-means++.
    """
    A = affinity.values
    N = A.shape[0]
    if N < 2:
        raise ClusteringError("spectral clustering needs at least 2 items")
    if max_speakers < 1:
        raise ClusteringError("max_speakers must be >= 1")

    pmax = max(1, N // 2)
    grid = np.unique(np.linspace(1, pmax, num=min(25, pmax)).round().astype(int))

    best = None  # (score, -p, k, p)
    for p in grid.tolist():
        adj = _keep_top_p(A, p)
        lap = np.diag(adj.sum(axis=1)) - adj
        lam = np.linalg.eigvalsh(lap)
        upper = min(max_speakers, N - 1)
        gaps = lam[1:upper + 1] - lam[:upper]
        k = int(np.argmax(gaps)) + 1
        score = float(gaps[k - 1]) / p
        cand = (score, -p, k, p)
        if best is None or cand[:2] > best[:2]:
            best = cand
    _, _, k, p = best

    adj = _keep_top_p(A, p)
    lap = np.diag(adj.sum(axis=1)) - adj
    _, vecs = np.linalg.eigh(lap)
    embedding = vecs[:, :k]
    raw = kmeans(embedding, k, seed=seed)
    labels, K = _relabel_first_occurrence(raw)
    return ClusterAssignment(labels=labels, K=K)


def kmeans(X: np.ndarray, k: int, seed: int = 0, restarts: int = 10,
           max_iter: int = 100) -> np.ndarray:
    """Plain Lloyd k-means with k-means++ seeding; deterministic per seed."""
    N = X.shape[0]
    if k <= 1:
        return np.zeros(N, dtype=np.int64)
    k = min(k, N)
    rng = np.random.default_rng(seed)
    best_labels = None
    best_inertia = np.inf
    for _ in range(restarts):
        centers = _kmeanspp(X, k, rng)
        labels = np.zeros(N, dtype=np.int64)
        for _ in range(max_iter):
            d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            for c in range(k):
                members = new_labels == c
                if members.any():
                    centers[c] = X[members].mean(axis=0)
                else:
                    centers[c] = X[d2.min(axis=1).argmax()]
            if (new_labels == labels).all():
                labels = new_labels
                break
            labels = new_labels
        inertia = float(((X - centers[labels]) ** 2).sum())
        if inertia < best_inertia - 1e-12:
            best_inertia = inertia
            best_labels = labels
    return best_labels


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    N = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[int(rng.integers(N))]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c] = X[int(rng.integers(N))]
            continue
        probs = d2 / total
        centers[c] = X[int(rng.choice(N, p=probs))]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(axis=1))
    return centers


# ---------------------------------------------------------------------------
# profile extraction

def extract_profiles(features: FrameFeatures, item_frame_index: np.ndarray,
                     assignment: ClusterAssignment,
                     min_seconds: float = MIN_PROFILE_SECONDS,
                     source: ProfileSource | None = None) -> ProfileSet:
    """Average the frames of each cluster into an L2-normalized profile.

    Clusters whose accumulated duration falls below ``min_seconds`` get no
    profile, but their segments are retained in first_pass_segments so their
    activity can be passed through to the final output unchanged.
    """
    stride = max(1, int(round(SUBSAMPLE_SECONDS / features.frame_seconds)))
    dwell = stride * features.frame_seconds
    T = features.frames.shape[0]

    profiles = []
    labels = []
    segments: dict[str, list[Segment]] = {}
    for cluster in range(assignment.K):
        items = np.asarray(item_frame_index)[assignment.labels == cluster]
        label = f"c{cluster}"
        mask = np.zeros(T, dtype=bool)
        for f in items:
            mask[f:min(T, f + stride)] = True
        segments[label] = binary_to_segments(mask, features.frame_seconds)
        duration = items.size * dwell
        if duration < min_seconds:
            continue
        mean = features.frames[items].mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < 1e-12:
            continue
        profiles.append(mean / norm)
        labels.append(label)

    mat = np.stack(profiles) if profiles else np.zeros((0, features.frames.shape[1]))
    return ProfileSet(profiles=mat, speaker_labels=labels,
                      source=source or ProfileSource("ahc"),
                      first_pass_segments=segments)


def oracle_profiles(conv: Conversation) -> ProfileSet:
    """Ground-truth profiles: per speaker, the normalized mean over frames
    where only that speaker is active (falling back to all their active
    frames when they never speak alone)."""
    act = conv.activity.activity
    counts = act.sum(axis=1)
    profiles = []
    labels = []
    segments = {}
    for k, label in enumerate(conv.activity.speaker_ids):
        solo = (act[:, k] == 1) & (counts == 1)
        chosen = solo if solo.any() else act[:, k] == 1
        mean = conv.features.frames[chosen].mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < 1e-12:
            raise ClusteringError(f"{label}: degenerate oracle profile")
        profiles.append(mean / norm)
        labels.append(label)
        segments[label] = binary_to_segments(act[:, k], conv.features.frame_seconds)
    return ProfileSet(profiles=np.stack(profiles), speaker_labels=labels,
                      source=ProfileSource("oracle"), first_pass_segments=segments)


def clustered_profiles(features: FrameFeatures, source: ProfileSource,
                       vad_threshold: float = VAD_THRESHOLD_DEFAULT,
                       max_speakers: int = 10,
                       min_seconds: float = MIN_PROFILE_SECONDS,
                       seed: int = 0) -> ProfileSet:
    """Full first-pass chain: VAD -> subsample -> affinity -> cluster -> extract."""
    mask = vad(features, vad_threshold if source.vad else None)
    items = subsample_items(mask, features.frame_seconds)
    if items.size < 2:
        return ProfileSet(profiles=np.zeros((0, features.frames.shape[1])),
                          speaker_labels=[], source=source, first_pass_segments={})
    affinity = cosine_affinity(features.frames, items)
    if source.kind == "ahc":
        assignment = ahc_cluster(affinity, source.threshold)
    elif source.kind == "nmesc":
        assignment = nmesc_cluster(affinity, max_speakers=max_speakers, seed=seed)
    else:
        raise ClusteringError(f"unknown clustering source {source.kind!r}")
    return extract_profiles(features, items, assignment,
                            min_seconds=min_seconds, source=source)


def training_profiles(conv: Conversation, mix: ProfileSourceMix, seed: int,
                      vad_threshold: float = VAD_THRESHOLD_DEFAULT,
                      max_speakers: int = 10,
                      min_seconds: float = MIN_PROFILE_SECONDS) -> ProfileSet:
    """Draw one profile source per conversation from the mix and run it."""
    rng = np.random.default_rng((seed, 0x70F11E))
    source = mix.draw(rng)
    if source.kind == "oracle":
        return oracle_profiles(conv)
    return clustered_profiles(conv.features, source, vad_threshold=vad_threshold,
                              max_speakers=max_speakers, min_seconds=min_seconds,
                              seed=int(rng.integers(2 ** 62)))


# ---------------------------------------------------------------------------
# training mixes

# ---------------------------------------------------------------------------
# profile files: text header (source, labels) + binary tensor payload

PROFILE_HEADER_END = b"---\n"


def write_profiles(path, pset: ProfileSet) -> None:
    from . import autodiff as ad
    header = f"source\t{pset.source.describe()}\n"
    header += "labels" + "".join(f"\t{lab}" for lab in pset.speaker_labels) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(PROFILE_HEADER_END)
        fh.write(ad.pack_tensors({"profiles": pset.profiles}))


def parse_source(text: str) -> ProfileSource:
    if text == "oracle":
        return ProfileSource("oracle")
    if text.startswith("ahc(") and text.endswith(")"):
        fields = dict(part.split("=") for part in text[4:-1].split(","))
        return ProfileSource("ahc", threshold=float(fields["threshold"]),
                             vad=fields["vad"] == "on")
    if text.startswith("nmesc(") and text.endswith(")"):
        fields = dict(part.split("=") for part in text[6:-1].split(","))
        return ProfileSource("nmesc", vad=fields["vad"] == "on")
    raise ClusteringError(f"unparseable profile source {text!r}")


def read_profiles(path) -> ProfileSet:
    """Inverse of write_profiles. First-pass segments are not stored here;
    callers reattach them from the first-pass RTTM when needed."""
    from . import autodiff as ad
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(PROFILE_HEADER_END)
    if end < 0:
        raise ClusteringError(f"{path}: missing profile header terminator")
    lines = blob[:end].decode("utf-8").splitlines()
    fields = {ln.split("\t", 1)[0]: ln.split("\t")[1:] for ln in lines if ln}
    source = parse_source(fields["source"][0])
    labels = fields.get("labels", [])
    profiles = ad.unpack_tensors(blob[end + len(PROFILE_HEADER_END):],
                                 origin=str(path))["profiles"]
    return ProfileSet(profiles=profiles, speaker_labels=list(labels),
                      source=source, first_pass_segments={})


# ---------------------------------------------------------------------------
# training mixes

def _ahc(threshold: float, with_vad: bool) -> ProfileSource:
    return ProfileSource("ahc", threshold=threshold, vad=with_vad)


ORACLE_SOURCE = ProfileSource("oracle")

CONFIG1 = ProfileSourceMix([
    (_ahc(0.96, False), 0.25),
    (_ahc(0.97, False), 0.25),
    (_ahc(0.98, False), 0.25),
    (ORACLE_SOURCE, 0.25),
])

CONFIG2 = ProfileSourceMix(
    [(_ahc(t, False), 0.06) for t in (0.89, 0.90, 0.91, 0.92, 0.93)]
    + [(_ahc(t, False), 0.02) for t in (0.96, 0.97, 0.98)]
    + [(_ahc(t, True), 0.06) for t in (0.89, 0.90, 0.91, 0.92, 0.93)]
    + [(_ahc(t, True), 0.02) for t in (0.96, 0.97, 0.98)]
    + [(ProfileSource("nmesc", vad=False), 0.06),
       (ProfileSource("nmesc", vad=True), 0.06),
       (ORACLE_SOURCE, 0.16)]
)

ORACLE_MIX = ProfileSourceMix([(ORACLE_SOURCE, 1.0)])

MIXES = {"config1": CONFIG1, "config2": CONFIG2, "oracle": ORACLE_MIX}
