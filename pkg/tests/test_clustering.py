import numpy as np
import pytest

from tsvad import clustering
from tsvad.clustering import (CONFIG1, CONFIG2, MIXES, ORACLE_MIX,
                              AffinityMatrix, ClusteringError, ProfileSource,
                              ProfileSourceMix, ahc_cluster, clustered_profiles,
                              cosine_affinity, extract_profiles, kmeans,
                              nmesc_cluster, oracle_profiles, subsample_items,
                              training_profiles, vad)
from tsvad.simulate import (ConversationSpec, CorpusConfig, FrameFeatures,
                            emit_features, generate_conversation,
                            sample_speakers, simulate_conversation)


def block_affinity(sizes, noise=0.0, within=0.0, seed=0):
    """Constructed oracle instance: block-diagonal affinity with known k.

    ``within`` jitters same-block similarities into [1-within, 1] (real
    same-speaker frames are never exactly identical); ``noise`` bounds the
    uniform off-block similarities.
    """
    rng = np.random.default_rng(seed)
    N = sum(sizes)
    A = np.zeros((N, N))
    start = 0
    truth = np.zeros(N, dtype=int)
    for b, size in enumerate(sizes):
        block = rng.uniform(1.0 - within, 1.0, size=(size, size)) if within > 0 else np.ones((size, size))
        A[start:start + size, start:start + size] = block
        truth[start:start + size] = b
        start += size
    off = truth[:, None] != truth[None, :]
    jitter = rng.uniform(0, noise, size=(N, N)) if noise > 0 else np.zeros((N, N))
    A = np.where(off, jitter, A)
    A = np.triu(A, 1) + np.triu(A, 1).T
    np.fill_diagonal(A, 1.0)
    return AffinityMatrix(values=A, item_frame_index=np.arange(N))


def same_partition(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        return False
    pairs = {}
    for x, y in zip(a.tolist(), b.tolist()):
        if x in pairs and pairs[x] != y:
            return False
        pairs[x] = y
    return len(set(pairs.values())) == len(pairs)


class TestVad:
    def test_noise_free_silence_inactive(self):
        spec = ConversationSpec(num_speakers=2, duration_frames=1000,
                                noise_sigma=0.0, silence_ratio=0.3, seed=2)
        speakers = sample_speakers(2, 16, seed=2)
        act = simulate_conversation(spec, speakers)
        feats = emit_features(act, speakers, noise_sigma=0.0, seed=2)
        mask = vad(feats, 0.5)
        silent = act.activity.sum(axis=1) == 0
        assert not mask[silent].any()
        assert mask[~silent].all()

    def test_skipped_vad_all_active(self):
        feats = FrameFeatures(frames=np.zeros((7, 4)))
        assert vad(feats, None).all()

    def test_accuracy_on_noisy_corpus(self):
        hits = total = 0
        for seed in range(5):
            spec = ConversationSpec(num_speakers=3, duration_frames=2000,
                                    noise_sigma=0.1, silence_ratio=0.2, seed=seed)
            speakers = sample_speakers(3, 32, seed=seed)
            act = simulate_conversation(spec, speakers)
            feats = emit_features(act, speakers, noise_sigma=0.1, seed=seed)
            mask = vad(feats, 0.7)
            truth = act.activity.sum(axis=1) > 0
            hits += int((mask == truth).sum())
            total += truth.size
        assert hits / total > 0.95


class TestAffinity:
    def test_exactly_symmetric_unit_diagonal(self):
        rng = np.random.default_rng(4)
        frames = rng.normal(size=(50, 16))
        aff = cosine_affinity(frames, np.arange(0, 50, 2))
        assert np.array_equal(aff.values, aff.values.T)
        np.testing.assert_array_equal(np.diag(aff.values), np.ones(25))

    def test_subsample_stride(self):
        mask = np.ones(100, dtype=bool)
        items = subsample_items(mask, 0.01)
        np.testing.assert_array_equal(items, np.arange(0, 100, 10))
        mask[50:] = False
        assert subsample_items(mask, 0.01).max() < 50


class TestAhc:
    def test_two_orthogonal_clusters(self):
        # brute-force nearest-centroid oracle on a constructed instance
        rng = np.random.default_rng(6)
        c1 = np.array([1.0, 0.0, 0.0, 0.0])
        c2 = np.array([0.0, 1.0, 0.0, 0.0])
        pts = np.stack([c + rng.normal(scale=0.05, size=4) for c in [c1] * 10 + [c2] * 10])
        truth = np.array([0] * 10 + [1] * 10)
        oracle = np.array([0 if p @ c1 > p @ c2 else 1 for p in pts])
        np.testing.assert_array_equal(oracle, truth)  # sanity of the oracle itself
        aff = cosine_affinity(pts, np.arange(20))
        got = ahc_cluster(aff, 0.5)
        assert got.K == 2
        assert same_partition(got.labels, oracle)

    def test_threshold_near_minus_one_merges_all(self):
        aff = block_affinity([5, 5, 5], noise=0.02, seed=1)
        got = ahc_cluster(aff, -0.99)
        assert got.K == 1

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(8)
        for trial in range(20):
            pts = rng.normal(size=(18, 8))
            aff = cosine_affinity(pts, np.arange(18))
            ks = [ahc_cluster(aff, t).K for t in np.linspace(-0.9, 0.9, 13)]
            assert all(a <= b for a, b in zip(ks, ks[1:]))

    def test_empty_rejected(self):
        aff = AffinityMatrix(values=np.zeros((0, 0)), item_frame_index=np.arange(0))
        with pytest.raises(ClusteringError):
            ahc_cluster(aff, 0.5)

    def test_deterministic(self):
        aff = block_affinity([7, 6, 5], noise=0.05, seed=3)
        a = ahc_cluster(aff, 0.5)
        b = ahc_cluster(aff, 0.5)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_every_label_appears(self):
        aff = block_affinity([4, 4, 4], noise=0.04, seed=5)
        got = ahc_cluster(aff, 0.5)
        assert set(got.labels.tolist()) == set(range(got.K))


class TestNmesc:
    def test_three_ideal_blocks(self):
        aff = block_affinity([15, 12, 14])
        got = nmesc_cluster(aff, max_speakers=10)
        assert got.K == 3
        truth = [0] * 15 + [1] * 12 + [2] * 14
        assert same_partition(got.labels, truth)

    def test_single_tight_cluster(self):
        aff = block_affinity([30], within=0.1, seed=1)
        got = nmesc_cluster(aff, max_speakers=10)
        assert got.K == 1

    def test_too_small_rejected(self):
        aff = AffinityMatrix(values=np.ones((1, 1)), item_frame_index=np.arange(1))
        with pytest.raises(ClusteringError):
            nmesc_cluster(aff)

    def test_speaker_count_recovery_monte_carlo(self):
        rng = np.random.default_rng(10)
        correct = 0
        for trial in range(100):
            k = int(rng.integers(1, 9))
            sizes = rng.integers(20, 41, size=k).tolist()
            aff = block_affinity(sizes, noise=0.05, within=0.1,
                                 seed=int(rng.integers(2 ** 31)))
            got = nmesc_cluster(aff, max_speakers=10, seed=trial)
            correct += int(got.K == k)
        assert correct >= 95

    def test_deterministic(self):
        aff = block_affinity([22, 25, 20], noise=0.05, within=0.1, seed=12)
        a = nmesc_cluster(aff, seed=7)
        b = nmesc_cluster(aff, seed=7)
        np.testing.assert_array_equal(a.labels, b.labels)


class TestKmeans:
    def test_separated_blobs(self):
        rng = np.random.default_rng(14)
        blobs = np.concatenate([
            rng.normal(loc=0.0, scale=0.1, size=(20, 3)),
            rng.normal(loc=5.0, scale=0.1, size=(20, 3)),
            rng.normal(loc=-5.0, scale=0.1, size=(15, 3)),
        ])
        labels = kmeans(blobs, 3, seed=1)
        truth = [0] * 20 + [1] * 20 + [2] * 15
        assert same_partition(labels, truth)

    def test_k_one(self):
        assert (kmeans(np.random.default_rng(0).normal(size=(9, 2)), 1) == 0).all()


class TestExtractProfiles:
    def _conv(self, seed=0, noise=0.0, n=3, T=3000):
        cfg = CorpusConfig(num_conversations=1, speakers_min=n, speakers_max=n,
                           duration_frames=T, noise_sigma=noise, seed=seed)
        return generate_conversation(cfg, 0)

    def test_noise_free_cluster_recovers_centroid(self):
        conv = self._conv(noise=0.0)
        feats = conv.features
        mask = vad(feats, 0.5)
        items = subsample_items(mask, feats.frame_seconds)
        aff = cosine_affinity(feats.frames, items)
        assignment = ahc_cluster(aff, 0.8)
        pset = extract_profiles(feats, items, assignment)
        # non-overlapped, noise-free clusters average to a speaker centroid
        cents = np.stack([s.centroid for s in conv.speakers])
        for profile in pset.profiles:
            sims = cents @ profile
            assert sims.max() > 0.95

    def test_short_cluster_excluded_but_segments_kept(self):
        # 150 frames at 0.01 s = 1.5 s of speech, below the 2 s floor
        frames = np.zeros((400, 8))
        frames[:150, 0] = 1.0
        frames[150:, 1] = 1.0
        feats = FrameFeatures(frames=frames, frame_seconds=0.01)
        items = np.arange(0, 400, 10)
        labels = (items >= 150).astype(np.int64)
        assignment = clustering.ClusterAssignment(labels=labels, K=2)
        pset = extract_profiles(feats, items, assignment, min_seconds=2.0)
        assert pset.speaker_labels == ["c1"]
        assert "c0" in pset.first_pass_segments
        assert pset.passthrough_labels() == ["c0"]
        # the retained segments cover the short cluster's span
        (start, dur) = pset.first_pass_segments["c0"][0]
        assert start == 0.0 and dur == pytest.approx(1.5, abs=0.011)

    def test_merged_cluster_is_normalized_midpoint(self):
        a = np.array([1.0, 0.0, 0.0, 0.0])
        b = np.array([0.0, 1.0, 0.0, 0.0])
        frames = np.concatenate([np.tile(a, (150, 1)), np.tile(b, (150, 1))])
        feats = FrameFeatures(frames=frames, frame_seconds=0.01)
        items = np.arange(0, 300, 10)
        assignment = clustering.ClusterAssignment(
            labels=np.zeros(items.size, dtype=np.int64), K=1)
        pset = extract_profiles(feats, items, assignment)
        expected = (a + b) / np.linalg.norm(a + b)
        np.testing.assert_allclose(pset.profiles[0], expected, atol=1e-12)

    def test_no_profile_row_all_zero(self):
        conv = self._conv(noise=0.3, seed=5)
        pset = clustered_profiles(conv.features, ProfileSource("ahc", 0.9, vad=True))
        if pset.num_speakers:
            assert (np.abs(pset.profiles).sum(axis=1) > 0).all()


class TestOracleAndMixes:
    def test_table_mix_contents(self):
        def probs(mix, kind, vad_flag=None, threshold=None):
            return [p for s, p in mix.entries
                    if s.kind == kind and (vad_flag is None or s.vad == vad_flag)
                    and (threshold is None or s.threshold == threshold)]

        # config 1: three AHC-without-VAD thresholds at 0.25 plus oracle 0.25
        assert sorted(s.threshold for s, _ in CONFIG1.entries if s.kind == "ahc") == [0.96, 0.97, 0.98]
        assert all(not s.vad for s, _ in CONFIG1.entries if s.kind == "ahc")
        assert probs(CONFIG1, "ahc") == [0.25, 0.25, 0.25]
        assert probs(CONFIG1, "oracle") == [0.25]

        # config 2: NME-SC without VAD at 0.06, oracle at 0.16
        assert probs(CONFIG2, "nmesc", vad_flag=False) == [0.06]
        assert probs(CONFIG2, "nmesc", vad_flag=True) == [0.06]
        assert probs(CONFIG2, "oracle") == [pytest.approx(0.16)]
        assert sum(p for _, p in CONFIG2.entries) == pytest.approx(1.0, abs=1e-12)
        assert probs(CONFIG2, "ahc", vad_flag=False, threshold=0.89) == [0.06]
        assert probs(CONFIG2, "ahc", vad_flag=True, threshold=0.97) == [0.02]

    def test_bad_mix_rejected(self):
        with pytest.raises(ClusteringError):
            ProfileSourceMix([(ProfileSource("oracle"), 0.5)])

    def test_oracle_mix_recovers_centroids_noise_free(self):
        cfg = CorpusConfig(num_conversations=1, duration_frames=2500,
                           noise_sigma=0.0, seed=9)
        conv = generate_conversation(cfg, 0)
        pset = training_profiles(conv, ORACLE_MIX, seed=3)
        assert pset.source.kind == "oracle"
        assert pset.speaker_labels == conv.activity.speaker_ids
        cents = np.stack([s.centroid for s in conv.speakers])
        np.testing.assert_allclose(pset.profiles, cents, atol=1e-12)

    def test_training_profiles_deterministic(self):
        cfg = CorpusConfig(num_conversations=1, duration_frames=2500, seed=11)
        conv = generate_conversation(cfg, 0)
        a = training_profiles(conv, CONFIG2, seed=21)
        b = training_profiles(conv, CONFIG2, seed=21)
        assert a.source == b.source
        np.testing.assert_array_equal(a.profiles, b.profiles)

    def test_mix_draw_distribution(self):
        rng = np.random.default_rng(0)
        draws = [CONFIG1.draw(rng).kind for _ in range(4000)]
        frac_oracle = draws.count("oracle") / len(draws)
        assert 0.2 < frac_oracle < 0.3

    def test_registry_names(self):
        assert set(MIXES) == {"config1", "config2", "oracle"}
