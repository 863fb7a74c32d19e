"""Streaming event-start metrics.

Implements Streaming Recall@k and Streaming Minimum Distance@k over
per-frame detection probabilities, plus prediction extraction, dataset
aggregation and the validation threshold sweep.

A prediction at time ``t_out`` counts as a hit for a ground-truth start
``t_s`` when ``t_s - anticipation <= t_out <= t_s + latency``: early by at
most ``anticipation`` seconds, late by at most ``latency`` seconds.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IdMismatchError, SchemaError

MODES = ("rising_edge", "every_frame")


@dataclass(frozen=True)
class ToleranceWindow:
    """Asymmetric acceptance interval around an event start, in seconds."""

    anticipation: float
    latency: float

    def __post_init__(self) -> None:
        a, l = float(self.anticipation), float(self.latency)
        if not (math.isfinite(a) and math.isfinite(l)) or a < 0 or l < 0:
            raise ConfigError(f"tolerance window must be nonnegative and finite, got ({a}, {l})")


@dataclass(frozen=True)
class ScoreSeries:
    """Per-frame detection probabilities for one (video, query) pair.

    ``scores[i]`` is the probability assigned to the frame at time ``i / fps``.
    """

    video_uid: str
    query_id: str
    fps: float
    scores: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=float)
        object.__setattr__(self, "scores", scores)
        if self.fps <= 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")
        if scores.ndim != 1:
            raise ConfigError(f"scores must be 1-D, got shape {scores.shape}")
        if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
            raise ConfigError("scores must lie in [0, 1]")

    @property
    def span(self) -> float:
        """Length of the covered evaluation span in seconds."""
        return len(self.scores) / self.fps


@dataclass(frozen=True)
class MetricReport:
    """Dataset-level metric summary (SR as percentages, SMD in seconds)."""

    threshold: float
    window: ToleranceWindow
    sr: dict[int, float]
    smd: dict[int, float]
    n_queries: int

    def to_json(self) -> str:
        payload = {
            "threshold": self.threshold,
            "window": {"anticipation": self.window.anticipation, "latency": self.window.latency},
            "sr": {str(k): v for k, v in sorted(self.sr.items())},
            "smd": {str(k): v for k, v in sorted(self.smd.items())},
            "n_queries": self.n_queries,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        raw = json.loads(text)
        return MetricReport(
            threshold=float(raw["threshold"]),
            window=ToleranceWindow(raw["window"]["anticipation"], raw["window"]["latency"]),
            sr={int(k): float(v) for k, v in raw["sr"].items()},
            smd={int(k): float(v) for k, v in raw["smd"].items()},
            n_queries=int(raw["n_queries"]),
        )


def default_query_id(annotation) -> str:
    """Join key pairing an annotation with its score series.

    Annotations carry no explicit query id; ``annotator_uid-ann_idx`` is
    unique within a video for both the released CSV schema and synthetic
    corpora.
    """
    return f"{annotation.annotator_uid}-{annotation.ann_idx}"


def extract_predictions(series: ScoreSeries, threshold: float, mode: str = "rising_edge") -> np.ndarray:
    """Turn a score series into an increasing array of prediction times.

    ``rising_edge`` emits ``i / fps`` whenever the score crosses the
    threshold from below; ``every_frame`` emits every frame at or above it.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must be in [0, 1], got {threshold}")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    s = series.scores
    above = s >= threshold
    if mode == "every_frame":
        idx = np.flatnonzero(above)
    else:
        prev = np.concatenate(([False], above[:-1]))
        idx = np.flatnonzero(above & ~prev)
    return idx.astype(float) / series.fps


def is_hit(t_out: float, t_s: float, w: ToleranceWindow) -> bool:
    """True iff ``t_out`` falls inside ``[t_s - anticipation, t_s + latency]``."""
    return t_s - w.anticipation <= t_out <= t_s + w.latency


def streaming_recall_at_k(preds, t_s: float, k: int, w: ToleranceWindow) -> bool:
    """True iff any of the first ``min(k, len(preds))`` predictions is a hit."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    preds = np.asarray(preds, dtype=float)
    return any(is_hit(t, t_s, w) for t in preds[:k])


def smd_at_k(preds, t_s: float, k: int, horizon: float) -> float:
    """Smallest ``|t_s - t_out|`` among the first k predictions.

    An empty prediction list falls back to ``horizon``, the worst error
    realizable over the evaluation span.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if horizon <= 0:
        raise ConfigError(f"horizon must be positive, got {horizon}")
    preds = np.asarray(preds, dtype=float)[:k]
    if preds.size == 0:
        return float(horizon)
    return float(np.min(np.abs(preds - t_s)))


def _n_workers() -> int:
    raw = os.environ.get("STREAMSTART_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate_dataset(
    series: list[ScoreSeries],
    annotations: list,
    ks: list[int],
    w: ToleranceWindow,
    mode: str = "rising_edge",
    threshold: float = 0.5,
    query_id=default_query_id,
) -> MetricReport:
    """Aggregate SR@k (percent) and SMD@k (seconds) over all queries.

    Every annotation must have a matching series keyed by
    ``(video_uid, query_id)``. The SMD horizon is each series' span.
    Queries may be sharded across threads (``STREAMSTART_THREADS``); shards
    are reduced in a fixed order so results do not depend on the worker count.
    """
    by_key = {(s.video_uid, s.query_id): s for s in series}
    missing = [
        (a.video_uid, query_id(a)) for a in annotations if (a.video_uid, query_id(a)) not in by_key
    ]
    if missing:
        raise IdMismatchError(missing)
    if not annotations:
        raise ConfigError("no annotations to evaluate")

    def one_query(a) -> tuple[list[bool], list[float]]:
        ser = by_key[(a.video_uid, query_id(a))]
        preds = extract_predictions(ser, threshold, mode)
        hits = [streaming_recall_at_k(preds, a.start_sec, k, w) for k in ks]
        dists = [smd_at_k(preds, a.start_sec, k, ser.span) for k in ks]
        return hits, dists

    n_workers = _n_workers()
    if n_workers == 1:
        rows = [one_query(a) for a in annotations]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(one_query, annotations))

    hit_matrix = np.array([r[0] for r in rows], dtype=bool)
    dist_matrix = np.array([r[1] for r in rows], dtype=float)
    sr = {k: float(np.mean(hit_matrix[:, j]) * 100.0) for j, k in enumerate(ks)}
    smd = {k: float(np.mean(dist_matrix[:, j])) for j, k in enumerate(ks)}
    return MetricReport(threshold=float(threshold), window=w, sr=sr, smd=smd, n_queries=len(annotations))


def sweep_thresholds(
    series: list[ScoreSeries],
    annotations: list,
    w: ToleranceWindow,
    n: int = 20,
    objective_k: int = 1,
    ks: list[int] | None = None,
    mode: str = "rising_edge",
    query_id=default_query_id,
) -> tuple[float, MetricReport]:
    """Pick the threshold maximizing SR@objective_k from a uniform grid.

    Candidates are ``n`` uniformly spaced values between the minimum and
    maximum observed scores; ties break toward the larger threshold. When
    all scores are constant there is a single candidate.
    """
    if n < 2:
        raise ConfigError(f"sweep needs n >= 2 candidates, got {n}")
    ks = sorted(set((ks or [1, 2, 3]) + [objective_k]))
    nonempty = [s for s in series if s.scores.size]
    if not nonempty:
        raise ConfigError("cannot sweep thresholds over empty score series")
    lo = min(float(s.scores.min()) for s in nonempty)
    hi = max(float(s.scores.max()) for s in nonempty)
    candidates = [lo] if lo == hi else list(np.linspace(lo, hi, n))

    best: tuple[float, MetricReport] | None = None
    for tau in candidates:
        report = evaluate_dataset(series, annotations, ks, w, mode, tau, query_id)
        if best is None or report.sr[objective_k] >= best[1].sr[objective_k]:
            best = (tau, report)
    assert best is not None
    return best


# -- score-series files -------------------------------------------------------
#
# One CSV per (video_uid, query_id), header `frame_idx,t_sec,score`, stored
# in a directory as `<video_uid>__<query_id>.csv`.

_SCORE_HEADER = ["frame_idx", "t_sec", "score"]


def score_series_to_csv(series: ScoreSeries) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_SCORE_HEADER)
    for i, p in enumerate(series.scores):
        writer.writerow([i, repr(i / series.fps), repr(float(p))])
    return buf.getvalue()


def score_series_from_csv(text: str, video_uid: str, query_id: str) -> ScoreSeries:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != _SCORE_HEADER:
        raise SchemaError(f"score series header must be {_SCORE_HEADER}, got {header}")
    times, scores = [], []
    for row in reader:
        if not row:
            continue
        times.append(float(row[1]))
        scores.append(float(row[2]))
    if len(times) > 1:
        fps = 1.0 / (times[1] - times[0])
    else:
        fps = 1.0
    return ScoreSeries(video_uid=video_uid, query_id=query_id, fps=fps, scores=np.array(scores))


def save_score_series(directory: str | Path, series: ScoreSeries) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{series.video_uid}__{series.query_id}.csv"
    path.write_text(score_series_to_csv(series), encoding="utf-8")
    return path


def load_score_series_dir(directory: str | Path) -> list[ScoreSeries]:
    directory = Path(directory)
    out = []
    for path in sorted(directory.glob("*.csv")):
        stem = path.stem
        if "__" not in stem:
            raise SchemaError(f"score file {path.name} is not named <video_uid>__<query_id>.csv")
        video_uid, query_id = stem.split("__", 1)
        out.append(score_series_from_csv(path.read_text(encoding="utf-8"), video_uid, query_id))
    return out
