from collections import Counter

import numpy as np
import pytest

from ecglang.delineate import (BeatFiducials, Wave, WaveSegment, delineate_beats, delineate_record,
                               detect_r_peaks, dwt_transform, extract_segments, match_fiducials,
                               modulus_maxima, read_fiducials, write_fiducials)
from ecglang.ingest import generate_synthetic
from ecglang.preprocess import preprocess_record

FS = 500
R_TOL = 5     # 10 ms
FID_TOL = 10  # 20 ms


def _clean(rec):
    return preprocess_record(rec).samples.astype(np.float64)


@pytest.fixture(scope="module")
def regular():
    recs, truths = generate_synthetic(20, FS, 10.0, "regular", seed=3)
    return [_clean(r) for r in recs], truths


class TestDwt:
    def test_constant_gives_zero_details(self):
        for d in dwt_transform(np.full(300, 2.5), 4):
            assert np.abs(d).max() < 1e-6

    def test_lengths_match_input(self):
        assert [d.size for d in dwt_transform(np.arange(77.0), 5)] == [77] * 5

    def test_ramp_scale1_constant_interior(self):
        d1 = dwt_transform(0.3 * np.arange(200.0), 3)[0]
        interior = d1[10:-10]
        assert np.allclose(interior, interior[0], atol=1e-12)
        assert interior[0] == pytest.approx(2 * 0.3)

    @pytest.mark.parametrize("scale", range(4))
    def test_step_has_one_maximum_near_step(self, scale):
        x = np.r_[np.zeros(256), np.ones(256)]
        d = dwt_transform(x, 4)[scale]
        maxima = modulus_maxima(d)
        assert maxima.size == 1
        assert abs(maxima[0] - 256) <= 2 ** (scale + 1)
        assert d[maxima[0]] > 0

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            dwt_transform(np.zeros(10), 0)
        with pytest.raises(ValueError):
            dwt_transform(np.zeros((3, 3)), 2)


class TestRPeaks:
    def test_zero_signal(self):
        assert detect_r_peaks(np.zeros(5 * FS), FS) == []

    def test_too_short(self):
        with pytest.raises(ValueError):
            detect_r_peaks(np.zeros(10), FS)

    def test_regular_rhythm_exact_count(self, regular):
        signals, truths = regular
        for x, gt in zip(signals, truths):
            peaks = detect_r_peaks(x, FS)
            true_r = np.array([b.r_peak for b in gt.beats])
            assert len(peaks) == true_r.size
            assert np.abs(np.array(peaks) - true_r).max() <= R_TOL
            assert np.all(np.diff(peaks) >= 0.2 * FS)

    def test_snr_10db(self):
        recs, truths = generate_synthetic(10, FS, 10.0, "regular", seed=8, noise_std=0.0)
        rng = np.random.default_rng(0)
        st = Counter()
        for rec, gt in zip(recs, truths):
            x = rec.samples.astype(np.float64)
            noisy = x + rng.normal(0, np.sqrt(np.mean(x ** 2) / 10), x.size)
            peaks = detect_r_peaks(_clean(rec.replace_samples(noisy.astype(np.float32))), FS)
            beats = [BeatFiducials(p) for p in peaks]
            st.update(match_fiducials(beats, gt.beats, R_TOL, FID_TOL))
        assert st["matched_beats"] / st["true_beats"] >= 0.95
        assert st["matched_beats"] / st["detected_beats"] >= 0.95


class TestDelineation:
    def test_fiducials_within_20ms(self, regular):
        signals, truths = regular
        st = Counter()
        for x, gt in zip(signals, truths):
            st.update(match_fiducials(delineate_record(x, FS), gt.beats, R_TOL, FID_TOL))
        for w in ("P", "QRS", "T"):
            for f in ("onset", "peak", "offset"):
                assert st[f"{w}_{f}_hit"] / st[f"{w}_{f}_total"] >= 0.9, (w, f)

    def test_absent_p_flagged(self):
        recs, truths = generate_synthetic(10, FS, 10.0, "absent_p", seed=4)
        st = Counter()
        for rec, gt in zip(recs, truths):
            st.update(match_fiducials(delineate_record(_clean(rec), FS), gt.beats, R_TOL, FID_TOL))
        assert st["P_flagged_absent"] / st["P_truth_absent"] >= 0.9

    def test_invariants_hold(self, regular):
        signals, _ = regular
        for x in signals:
            beats = delineate_record(x, FS)
            assert [b.r_peak for b in beats] == sorted(b.r_peak for b in beats)
            for b in beats:
                b.check(x.size)

    def test_edge_beats_in_bounds(self, regular):
        x = regular[0][0]
        r = detect_r_peaks(x, FS)
        # cut the record right after the first R and right before the last
        cut = x[r[0] - 20: r[-1] + 20]
        beats = delineate_record(cut, FS)
        for b in beats:
            b.check(cut.size)
        assert beats[0].p is None
        assert beats[-1].t is None

    def test_r_peak_at_sample_zero(self):
        x = np.zeros(3 * FS)
        beats = delineate_beats(x, FS, [0, FS, 2 * FS])
        assert len(beats) == 3
        for b in beats:
            b.check(x.size)

    def test_deterministic(self, regular):
        x = regular[0][1]
        assert delineate_record(x, FS) == delineate_record(x.copy(), FS)

    @pytest.mark.parametrize("shift", [1, 7, 64])
    def test_translation_equivariance(self, regular, shift):
        x = regular[0][2]
        base = delineate_record(x, FS)
        moved = delineate_record(np.r_[np.full(shift, x[0]), x], FS)
        assert moved == [b.shifted(shift) for b in base]

    def test_empty_r_peaks(self):
        assert delineate_beats(np.zeros(FS), FS, []) == []


class TestSegments:
    def _beat(self):
        return BeatFiducials(250, Wave(160, 175, 190), Wave(235, 250, 265), Wave(340, 380, 420))

    def test_three_segments(self):
        x = np.sin(np.arange(600) / 9.0)
        segs = extract_segments(x, [self._beat()], "r1")
        assert [s.wave_type for s in segs] == ["P", "QRS", "T"]
        assert [len(s) for s in segs] == [31, 31, 81]
        assert segs[1].peak_offset == 15
        for s in segs:
            assert abs(s.samples.mean()) < 1e-5 and abs(s.samples.std() - 1) < 1e-4

    def test_absent_p_two_segments(self):
        b = self._beat()
        b.p = None
        assert [s.wave_type for s in extract_segments(np.random.default_rng(0).normal(size=600), [b])] == ["QRS", "T"]

    def test_raw_samples_inclusive(self):
        x = np.arange(600.0)
        seg = extract_segments(x, [self._beat()], normalize=False)[0]
        assert seg.samples[0] == 160 and seg.samples[-1] == 190

    def test_degenerate_dropped_and_counted(self):
        b = BeatFiducials(250, Wave(160, 160, 161), Wave(235, 250, 265), None)
        counter = Counter()
        segs = extract_segments(np.random.default_rng(0).normal(size=600), [b], counter=counter)
        assert [s.wave_type for s in segs] == ["QRS"]
        assert counter["degenerate"] == 1

    def test_flat_segment_is_centred_not_divided(self):
        seg = extract_segments(np.full(600, 4.0), [self._beat()])[0]
        assert np.all(seg.samples == 0)

    def test_count_matches_present_waves(self, regular):
        signals, _ = regular
        for x in signals[:5]:
            beats = delineate_record(x, FS)
            assert len(extract_segments(x, beats)) == sum(len(b.present()) for b in beats)

    def test_qrs_length_matches_support(self, regular):
        signals, truths = regular
        x, gt = signals[0], truths[0]
        beats = delineate_record(x, FS)
        segs = {s.beat_idx: s for s in extract_segments(x, beats) if s.wave_type == "QRS"}
        true_r = np.array([b.r_peak for b in gt.beats])
        for i, b in enumerate(beats):
            tb = gt.beats[int(np.argmin(np.abs(true_r - b.r_peak)))]
            true_len = tb.qrs.offset - tb.qrs.onset + 1
            assert abs(len(segs[i]) - true_len) <= FID_TOL

    def test_wave_segment_validation(self):
        with pytest.raises(ValueError):
            WaveSegment("U", np.zeros(5))
        with pytest.raises(ValueError):
            WaveSegment("P", np.array([1.0, np.nan, 2.0]))


class TestFiducialIo:
    def test_round_trip(self, tmp_path, regular):
        signals, _ = regular
        data = {f"r{i}": delineate_record(x, FS) for i, x in enumerate(signals[:3])}
        data["empty"] = []
        write_fiducials(tmp_path / "f.jsonl", data)
        back = read_fiducials(tmp_path / "f.jsonl")
        assert back == {k: v for k, v in data.items() if v}

    def test_check_rejects_disorder(self):
        with pytest.raises(ValueError):
            BeatFiducials(10, None, Wave(5, 10, 4), None).check()
        with pytest.raises(ValueError):
            BeatFiducials(10, Wave(1, 3, 8), Wave(6, 10, 12), None).check()
