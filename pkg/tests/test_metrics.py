import numpy as np
import pytest

from streamstart import metrics
from streamstart.errors import ConfigError, IdMismatchError
from streamstart.metrics import ScoreSeries, ToleranceWindow

import oracles


def series(scores, uid="v", qid="q", fps=1.0):
    return ScoreSeries(video_uid=uid, query_id=qid, fps=fps, scores=np.asarray(scores, float))


class FakeAnn:
    def __init__(self, video_uid, query_id, start_sec):
        self.video_uid = video_uid
        self.annotator_uid = query_id
        self.ann_idx = 0
        self.start_sec = start_sec


def qid(a):
    return metrics.default_query_id(a)


class TestExtractPredictions:
    def test_rising_edge(self):
        s = series([0.1, 0.6, 0.7, 0.2, 0.8])
        assert list(metrics.extract_predictions(s, 0.5, "rising_edge")) == [1.0, 4.0]

    def test_every_frame(self):
        s = series([0.1, 0.6, 0.7, 0.2, 0.8])
        assert list(metrics.extract_predictions(s, 0.5, "every_frame")) == [1.0, 2.0, 4.0]

    def test_all_below(self):
        s = series([0.1, 0.2, 0.3])
        assert metrics.extract_predictions(s, 0.5).size == 0

    def test_edge_is_subsequence_of_frame(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            s = series(rng.random(30))
            tau = float(rng.random())
            edge = set(metrics.extract_predictions(s, tau, "rising_edge"))
            every = set(metrics.extract_predictions(s, tau, "every_frame"))
            assert edge <= every

    def test_strictly_increasing(self):
        rng = np.random.default_rng(6)
        s = series(rng.random(50))
        for mode in metrics.MODES:
            t = metrics.extract_predictions(s, 0.4, mode)
            assert (np.diff(t) > 0).all()


class TestIsHit:
    def test_late_within_latency(self):
        assert metrics.is_hit(36, 30, ToleranceWindow(5, 10))

    def test_early_beyond_anticipation(self):
        assert not metrics.is_hit(24, 30, ToleranceWindow(5, 10))

    def test_exact(self):
        assert metrics.is_hit(30, 30, ToleranceWindow(0, 0))

    def test_boundaries_inclusive(self):
        w = ToleranceWindow(5, 10)
        assert metrics.is_hit(25, 30, w)
        assert metrics.is_hit(40, 30, w)
        assert not metrics.is_hit(24.999, 30, w)
        assert not metrics.is_hit(40.001, 30, w)


class TestStreamingRecall:
    def test_first_k_definition(self):
        w = ToleranceWindow(5, 10)
        preds = [2, 8, 30]
        assert not metrics.streaming_recall_at_k(preds, 30, 2, w)
        assert metrics.streaming_recall_at_k(preds, 30, 3, w)

    def test_empty(self):
        assert not metrics.streaming_recall_at_k([], 30, 5, ToleranceWindow(5, 10))

    def test_early_hit(self):
        assert metrics.streaming_recall_at_k([26, 100], 30, 1, ToleranceWindow(5, 10))

    def test_monotone_in_k(self):
        rng = np.random.default_rng(7)
        w = ToleranceWindow(2, 4)
        for _ in range(300):
            preds = np.sort(rng.uniform(0, 100, rng.integers(0, 8)))
            t_s = float(rng.uniform(0, 100))
            values = [metrics.streaming_recall_at_k(preds, t_s, k, w) for k in range(1, 9)]
            assert all(a <= b for a, b in zip(values, values[1:]))

    def test_window_monotone(self):
        rng = np.random.default_rng(8)
        small, big = ToleranceWindow(2, 5), ToleranceWindow(5, 10)
        for _ in range(300):
            preds = np.sort(rng.uniform(0, 100, rng.integers(0, 8)))
            t_s = float(rng.uniform(0, 100))
            assert metrics.streaming_recall_at_k(preds, t_s, 1, small) <= metrics.streaming_recall_at_k(
                preds, t_s, 1, big
            )

    def test_prepended_nonhit_never_helps(self):
        rng = np.random.default_rng(9)
        w = ToleranceWindow(5, 10)
        for _ in range(300):
            t_s = float(rng.uniform(20, 80))
            preds = list(np.sort(rng.uniform(t_s - 4, t_s + 9, rng.integers(1, 5))))
            bad = t_s - 15.0  # outside the window, earlier than any hit
            k = int(rng.integers(1, 6))
            before = metrics.streaming_recall_at_k(preds, t_s, k, w)
            after = metrics.streaming_recall_at_k([bad] + preds, t_s, k, w)
            assert after <= before


class TestSmd:
    def test_closest_of_first_k(self):
        assert metrics.smd_at_k([10, 50], 40, 2, 100) == 10
        assert metrics.smd_at_k([10, 50], 40, 1, 100) == 30

    def test_empty_fallback(self):
        assert metrics.smd_at_k([], 40, 3, 60) == 60

    def test_monotone_in_k(self):
        rng = np.random.default_rng(10)
        for _ in range(300):
            preds = np.sort(rng.uniform(0, 100, rng.integers(0, 8)))
            t_s = float(rng.uniform(0, 100))
            values = [metrics.smd_at_k(preds, t_s, k, 120.0) for k in range(1, 9)]
            assert all(a >= b for a, b in zip(values, values[1:]))


def random_case(rng, n=60):
    """A score series with deliberate empty/early/late/boundary structure."""
    scores = np.zeros(n)
    t_s = float(rng.integers(10, n - 10))
    kind = rng.integers(0, 5)
    if kind == 0:
        pass  # empty: never crosses
    elif kind == 1:
        scores[max(0, int(t_s) - rng.integers(6, 10))] = 1.0  # early miss
    elif kind == 2:
        scores[min(n - 1, int(t_s) + rng.integers(11, 15))] = 1.0  # late miss
    elif kind == 3:
        scores[int(t_s) - 5] = 1.0  # boundary hit (exactly -anticipation)
        if int(t_s) + 10 < n:
            scores[int(t_s) + 10] = 1.0  # boundary hit (exactly +latency)
    else:
        spikes = rng.integers(0, n, size=rng.integers(1, 6))
        scores[spikes] = rng.uniform(0.5, 1.0, size=len(spikes))
    return scores, t_s


class TestEvaluateDataset:
    def test_mean_of_two(self):
        w = ToleranceWindow(5, 10)
        ser = [
            series([0, 0, 1, 0], uid="v1", qid="a-0"),
            series([1, 0, 0, 0], uid="v2", qid="a-0"),
        ]
        anns = [FakeAnn("v1", "a", 2.0), FakeAnn("v2", "a", 3.9)]
        # v1 fires at t=2 == t_s (hit); v2 fires at t=0, early by 3.9 (hit at k=1 window 5)
        rep = metrics.evaluate_dataset(ser, anns, [1], w, "rising_edge", 0.5)
        assert rep.sr[1] == 100.0
        anns[1].start_sec = 30.0  # far from the only firing: miss
        rep = metrics.evaluate_dataset(ser, anns, [1], w, "rising_edge", 0.5)
        assert rep.sr[1] == 50.0

    def test_oracle_scores_are_perfect(self):
        w = ToleranceWindow(5, 10)
        rng = np.random.default_rng(0)
        ser, anns = [], []
        for i in range(20):
            t_s = int(rng.integers(5, 50))
            scores = np.zeros(60)
            scores[t_s : t_s + 3] = 1.0
            ser.append(series(scores, uid=f"v{i}", qid="a-0"))
            anns.append(FakeAnn(f"v{i}", "a", float(t_s)))
        rep = metrics.evaluate_dataset(ser, anns, [1, 2], w, "rising_edge", 0.5)
        assert rep.sr[1] == 100.0
        assert rep.smd[1] == 0.0

    def test_missing_series_lists_pairs(self):
        with pytest.raises(IdMismatchError, match="v2"):
            metrics.evaluate_dataset(
                [series([0.1], uid="v1", qid="a-0")],
                [FakeAnn("v1", "a", 0), FakeAnn("v2", "a", 0)],
                [1],
                ToleranceWindow(5, 10),
            )

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        w = ToleranceWindow(5, 10)
        ser, anns = [], []
        for i in range(200):
            scores, t_s = random_case(rng)
            ser.append(series(scores, uid=f"v{i}", qid="a-0"))
            anns.append(FakeAnn(f"v{i}", "a", t_s))
        for mode in metrics.MODES:
            rep = metrics.evaluate_dataset(ser, anns, [1, 2, 3], w, mode, 0.5)
            sr, smd = oracles.brute_evaluate(ser, anns, [1, 2, 3], 5, 10, mode, 0.5, qid)
            assert rep.sr == sr
            assert rep.smd == smd

    def test_sharding_invariance(self, monkeypatch):
        rng = np.random.default_rng(1)
        ser, anns = [], []
        for i in range(40):
            scores, t_s = random_case(rng)
            ser.append(series(scores, uid=f"v{i}", qid="a-0"))
            anns.append(FakeAnn(f"v{i}", "a", t_s))
        w = ToleranceWindow(5, 10)
        monkeypatch.setenv("STREAMSTART_THREADS", "1")
        rep1 = metrics.evaluate_dataset(ser, anns, [1, 2], w, "rising_edge", 0.5)
        monkeypatch.setenv("STREAMSTART_THREADS", "4")
        rep4 = metrics.evaluate_dataset(ser, anns, [1, 2], w, "rising_edge", 0.5)
        assert rep1 == rep4


class TestSweep:
    def test_candidates_span_min_max(self):
        ser = [series(np.linspace(0, 1, 20), qid="a-0")]
        anns = [FakeAnn("v", "a", 10.0)]
        tau, rep = metrics.sweep_thresholds(ser, anns, ToleranceWindow(5, 10), n=20)
        assert 0.0 <= tau <= 1.0

    def test_constant_scores_single_candidate(self):
        ser = [series([0.3, 0.3, 0.3], qid="a-0")]
        anns = [FakeAnn("v", "a", 1.0)]
        tau, rep = metrics.sweep_thresholds(ser, anns, ToleranceWindow(5, 10), n=20)
        assert tau == 0.3
        assert rep.sr[1] == 100.0

    def test_oracle_scorer_reaches_full_recall(self):
        rng = np.random.default_rng(3)
        ser, anns = [], []
        for i in range(10):
            t_s = int(rng.integers(5, 40))
            scores = np.full(60, 0.2)
            scores[t_s] = 0.9
            ser.append(series(scores, uid=f"v{i}", qid="a-0"))
            anns.append(FakeAnn(f"v{i}", "a", float(t_s)))
        tau, rep = metrics.sweep_thresholds(ser, anns, ToleranceWindow(5, 10), n=20)
        assert rep.sr[1] == 100.0

    def test_equals_exhaustive_evaluation(self):
        rng = np.random.default_rng(4)
        ser, anns = [], []
        for i in range(30):
            scores, t_s = random_case(rng)
            ser.append(series(np.clip(scores + rng.uniform(0, 0.3, 60), 0, 1), uid=f"v{i}", qid="a-0"))
            anns.append(FakeAnn(f"v{i}", "a", t_s))
        w = ToleranceWindow(5, 10)
        tau, rep = metrics.sweep_thresholds(ser, anns, w, n=20, objective_k=1)
        lo = min(s.scores.min() for s in ser)
        hi = max(s.scores.max() for s in ser)
        best = None
        for cand in np.linspace(lo, hi, 20):
            r = metrics.evaluate_dataset(ser, anns, [1, 2, 3], w, "rising_edge", cand)
            if best is None or r.sr[1] >= best[1].sr[1]:
                best = (cand, r)
        assert tau == best[0]
        assert rep == best[1]

    def test_ties_break_to_larger_threshold(self):
        # monotone scores: every candidate gives the same recall
        ser = [series([0.0, 1.0, 0.0], qid="a-0")]
        anns = [FakeAnn("v", "a", 1.0)]
        tau, _ = metrics.sweep_thresholds(ser, anns, ToleranceWindow(5, 10), n=20)
        assert tau == 1.0


class TestScoreSeriesFiles:
    def test_round_trip(self, tmp_path):
        s = series(np.linspace(0, 1, 13), uid="vid", qid="a-3", fps=2.0)
        metrics.save_score_series(tmp_path, s)
        loaded = metrics.load_score_series_dir(tmp_path)
        assert len(loaded) == 1
        got = loaded[0]
        assert got.video_uid == "vid" and got.query_id == "a-3"
        assert got.fps == pytest.approx(2.0)
        assert np.array_equal(got.scores, s.scores)

    def test_report_json_round_trip(self):
        rep = metrics.MetricReport(
            threshold=0.4, window=ToleranceWindow(5, 10),
            sr={1: 50.0, 2: 75.0}, smd={1: 3.0, 2: 2.0}, n_queries=4,
        )
        again = metrics.MetricReport.from_json(rep.to_json())
        assert again == rep


class TestValidation:
    def test_scores_outside_unit_interval(self):
        with pytest.raises(ConfigError):
            series([1.2, 0.3])

    def test_negative_window(self):
        with pytest.raises(ConfigError):
            ToleranceWindow(-1, 5)

    def test_bad_threshold(self):
        with pytest.raises(ConfigError):
            metrics.extract_predictions(series([0.5]), 1.5)
