import numpy as np
import pytest

from tsvad import scoring
from tsvad.scoring import (CollarSpec, DiarizationResult, RttmParseError,
                           ScoringError, binary_to_segments, der,
                           der_frame_oracle, parse_rttm, pooled_der, write_rttm)


def result(**labels):
    return DiarizationResult.from_segments(labels)


class TestRttm:
    def test_single_line(self):
        doc = parse_rttm("SPEAKER f 1 0.000 2.500 <NA> <NA> spkA <NA> <NA>\n")
        assert doc.entries == [("f", 1, 0.0, 2.5, "spkA")]

    def test_empty_input(self):
        assert parse_rttm("").entries == []

    def test_malformed_line_reports_number(self):
        text = "SPEAKER f 1 0.0 1.0 <NA> <NA> a <NA> <NA>\nSPEAKER f 1 oops\n"
        with pytest.raises(RttmParseError, match="line 2"):
            parse_rttm(text)

    def test_non_speaker_record_rejected(self):
        with pytest.raises(RttmParseError):
            parse_rttm("SEGMENT f 1 0.0 1.0 <NA> <NA> a <NA> <NA>")

    def test_write_parse_round_trip_on_fixture(self):
        rng = np.random.default_rng(42)
        lines = []
        for i in range(50):
            onset = round(float(rng.uniform(0, 100)), 3)
            dur = round(float(rng.uniform(0.1, 5)), 3)
            lines.append(f"SPEAKER conv{i % 3} 1 {onset:.3f} {dur:.3f} <NA> <NA> spk{i % 5} <NA> <NA>")
        text = "\n".join(lines) + "\n"
        assert write_rttm(parse_rttm(text)) == text
        # idempotent after one normalization pass even for ragged input
        ragged = "SPEAKER f 1 0.5 2 <NA> <NA> a <NA> <NA>\n"
        once = write_rttm(parse_rttm(ragged))
        assert once == "SPEAKER f 1 0.500 2.000 <NA> <NA> a <NA> <NA>\n"
        assert write_rttm(parse_rttm(once)) == once

    def test_result_round_trip(self):
        res = result(a=[(0.0, 2.0), (5.0, 1.0)], b=[(1.0, 3.0)])
        doc = scoring.RttmDocument.from_result(res, "f")
        back = parse_rttm(write_rttm(doc)).to_result("f")
        assert back.segments == res.segments


class TestDiarizationResult:
    def test_normalization_merges_and_sorts(self):
        res = result(a=[(5.0, 1.0), (0.0, 2.0), (1.5, 1.0)])
        assert res.segments["a"] == [(0.0, 2.5), (5.0, 1.0)]
        res.validate()

    def test_zero_duration_dropped(self):
        res = result(a=[(0.0, 0.0)], b=[(1.0, 1.0)])
        assert res.labels() == ["b"]

    def test_binary_to_segments(self):
        mask = np.array([0, 1, 1, 0, 0, 1], dtype=np.uint8)
        assert binary_to_segments(mask, 0.5) == [(0.5, 1.0), (2.5, 0.5)]
        assert binary_to_segments(np.zeros(4), 0.5) == []


class TestDerHandCases:
    def test_identical_is_zero(self):
        res = result(a=[(0.0, 3.0), (5.0, 2.0)], b=[(2.0, 4.0)])
        for collar in (0.0, 0.25):
            got = der(res, res, CollarSpec(collar))
            assert got.der == 0.0
            assert got.miss == 0.0 and got.fa == 0.0 and got.sc == 0.0

    def test_total_miss(self):
        got = der(result(a=[(0.0, 10.0)]), result(), CollarSpec(0.0))
        assert got.der == pytest.approx(100.0, abs=1e-12)
        assert got.miss == pytest.approx(100.0, abs=1e-12)
        assert got.fa == 0.0 and got.sc == 0.0

    def test_spurious_speaker_is_false_alarm(self):
        ref = result(spkA=[(0.0, 10.0)])
        hyp = result(spkX=[(0.0, 10.0)], spkY=[(0.0, 5.0)])
        got = der(ref, hyp, CollarSpec(0.0))
        assert got.mapping == {"spkA": "spkX"}
        assert got.sc == 0.0
        assert got.miss == 0.0
        assert got.fa == pytest.approx(50.0, abs=1e-12)
        assert got.der == pytest.approx(50.0, abs=1e-12)

    def test_collar_forgives_boundary_error(self):
        ref = result(a=[(0.0, 10.0)])
        hyp = result(x=[(0.2, 9.6)])
        strict = der(ref, hyp, CollarSpec(0.0))
        assert strict.der == pytest.approx(4.0, abs=1e-9)  # 0.2 + 0.2 missed
        relaxed = der(ref, hyp, CollarSpec(0.25))
        assert relaxed.der == 0.0

    def test_speaker_confusion(self):
        ref = result(a=[(0.0, 10.0)], b=[(10.0, 10.0)])
        hyp = result(x=[(0.0, 20.0)])
        got = der(ref, hyp, CollarSpec(0.0))
        assert got.mapping == {"a": "x"}
        assert got.sc == pytest.approx(50.0, abs=1e-12)
        assert got.miss == 0.0 and got.fa == 0.0
        assert got.der == pytest.approx(50.0, abs=1e-12)

    def test_overlap_counts_per_speaker(self):
        # 10 s of A plus 5 s of B on top: 15 s of reference speaker time.
        ref = result(a=[(0.0, 10.0)], b=[(5.0, 5.0)])
        hyp = result(x=[(0.0, 10.0)])
        got = der(ref, hyp, CollarSpec(0.0))
        assert got.scored_ref_seconds == pytest.approx(15.0)
        assert got.miss == pytest.approx(100.0 * 5.0 / 15.0, abs=1e-9)
        assert got.der == pytest.approx(100.0 * 5.0 / 15.0, abs=1e-9)

    def test_collar_swallows_short_segment(self):
        ref = result(a=[(0.0, 10.0), (20.0, 0.3)])
        hyp = result(x=[(0.0, 10.0)])
        # the 0.3 s segment sits entirely inside its own +/-0.25 s collars
        got = der(ref, hyp, CollarSpec(0.25))
        assert got.der == 0.0
        strict = der(ref, hyp, CollarSpec(0.0))
        assert strict.miss == pytest.approx(100.0 * 0.3 / 10.3, abs=1e-9)

    def test_single_frame_error_exact(self):
        ref = result(a=[(0.0, 1.0)])
        hyp = result(a=[(0.0, 1.001)])
        got = der(ref, hyp, CollarSpec(0.0))
        assert got.fa_seconds == pytest.approx(0.001, abs=1e-12)
        assert got.der == pytest.approx(0.1, abs=1e-9)

    def test_zero_reference_errors(self):
        with pytest.raises(ScoringError):
            der(result(), result(a=[(0.0, 1.0)]), CollarSpec(0.0))

    def test_skip_overlap_flag(self):
        ref = result(a=[(0.0, 10.0)], b=[(5.0, 5.0)])
        hyp = result(x=[(0.0, 10.0)])
        got = der(ref, hyp, CollarSpec(0.0, score_overlap=False))
        # the overlapped 5 s region is excluded entirely
        assert got.scored_ref_seconds == pytest.approx(5.0)
        assert got.der == 0.0


class TestDerProperties:
    @staticmethod
    def _random_pair(rng):
        ref_map, hyp_map = {}, {}
        for k in range(int(rng.integers(2, 5))):
            segs = []
            t = float(rng.uniform(0, 5))
            for _ in range(int(rng.integers(4, 9))):
                dur = float(rng.uniform(1.0, 5.0))
                segs.append((t, dur))
                t += dur + float(rng.uniform(0.3, 3.0))
            ref_map[f"r{k}"] = segs
            # hypothesis: jittered boundaries, occasional dropped/extra segment
            hsegs = []
            for s, d in segs:
                if rng.uniform() < 0.15:
                    continue
                js = s + float(rng.normal(0, 0.15))
                jd = max(0.05, d + float(rng.normal(0, 0.2)))
                hsegs.append((max(0.0, js), jd))
            if rng.uniform() < 0.3:
                hsegs.append((float(rng.uniform(0, 20)), float(rng.uniform(0.2, 2.0))))
            if hsegs:
                hyp_map[f"h{k}"] = hsegs
        return (DiarizationResult.from_segments(ref_map),
                DiarizationResult.from_segments(hyp_map))

    def test_interval_matches_frame_oracle(self):
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(200):
            ref, hyp = self._random_pair(rng)
            collar = CollarSpec(float(rng.choice([0.0, 0.25])))
            try:
                exact = der(ref, hyp, collar)
            except ScoringError:
                continue
            approx = der_frame_oracle(ref, hyp, collar)
            assert abs(exact.der - approx.der) < 0.05
            assert abs(exact.miss - approx.miss) < 0.05
            assert abs(exact.fa - approx.fa) < 0.05
            assert abs(exact.sc - approx.sc) < 0.05
            checked += 1
        assert checked >= 190

    def test_rename_invariance(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            ref, hyp = self._random_pair(rng)
            if not hyp.segments:
                continue
            try:
                base = der(ref, hyp, CollarSpec(0.0))
            except ScoringError:
                continue
            renamed = hyp.renamed({k: f"zz_{i}" for i, k in enumerate(sorted(hyp.segments, reverse=True))})
            got = der(ref, renamed, CollarSpec(0.0))
            assert got.der == pytest.approx(base.der, abs=1e-9)

    def test_decomposition_adds_up(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            ref, hyp = self._random_pair(rng)
            try:
                got = der(ref, hyp, CollarSpec(0.25))
            except ScoringError:
                continue
            assert got.der == pytest.approx(got.miss + got.fa + got.sc, abs=1e-9)
            assert got.miss >= 0 and got.fa >= 0 and got.sc >= 0

    def test_collar_growth_on_boundary_jitter(self):
        # hypothesis errors concentrated at reference boundaries: growing the
        # collar excludes them, so DER must not increase
        rng = np.random.default_rng(17)
        for _ in range(25):
            ref_map, hyp_map = {}, {}
            t = 0.0
            for k in range(3):
                dur = float(rng.uniform(2.0, 6.0))
                ref_map[f"r{k}"] = [(t, dur)]
                jit = float(rng.uniform(0.0, 0.2))
                hyp_map[f"h{k}"] = [(t + jit, max(0.1, dur - 2 * jit))]
                t += dur + float(rng.uniform(0.5, 2.0))
            ref = DiarizationResult.from_segments(ref_map)
            hyp = DiarizationResult.from_segments(hyp_map)
            ders = [der(ref, hyp, CollarSpec(c)).der for c in (0.0, 0.1, 0.25)]
            assert ders[0] >= ders[1] >= ders[2]

    def test_frame_oracle_unit_cases(self):
        ref = result(a=[(0.0, 0.3)])
        hyp = result(a=[(0.0, 0.3)])
        # collar covering the whole segment leaves nothing to score
        with pytest.raises(ScoringError):
            der_frame_oracle(ref, hyp, CollarSpec(0.25))
        got = der_frame_oracle(result(a=[(0.0, 1.0)]), result(a=[(0.0, 1.001)]), CollarSpec(0.0))
        assert got.fa_seconds == pytest.approx(0.001, abs=1e-9)


class TestPooling:
    def test_pooled_matches_manual(self):
        a = der(result(a=[(0.0, 10.0)]), result(x=[(0.0, 8.0)]), CollarSpec(0.0))
        b = der(result(a=[(0.0, 5.0)]), result(), CollarSpec(0.0))
        pooled = pooled_der([a, b])
        assert pooled.scored_ref_seconds == pytest.approx(15.0)
        assert pooled.miss_seconds == pytest.approx(2.0 + 5.0)
        assert pooled.der == pytest.approx(100.0 * 7.0 / 15.0)
