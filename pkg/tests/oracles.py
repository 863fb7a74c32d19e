"""Independent reference implementations used to cross-check the engine.

Everything here is deliberately written as plain loops against the
definitions, sharing no prediction/hit/recall logic with the package.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np


def brute_predictions(scores, fps, threshold, mode):
    """Prediction times by direct scan over the score array."""
    times = []
    prev_above = False
    for i, s in enumerate(scores):
        above = s >= threshold
        if mode == "every_frame":
            if above:
                times.append(i / fps)
        else:
            if above and not prev_above:
                times.append(i / fps)
        prev_above = above
    return times


def brute_hit(t_out, t_s, anticipation, latency):
    """Direct check of the asymmetric window condition."""
    return (t_s - anticipation) <= t_out <= (t_s + latency)


def brute_recall_at_k(pred_times, t_s, k, anticipation, latency):
    for t in pred_times[:k]:
        if brute_hit(t, t_s, anticipation, latency):
            return True
    return False


def brute_smd_at_k(pred_times, t_s, k, horizon):
    best = None
    for t in pred_times[:k]:
        d = abs(t_s - t)
        if best is None or d < best:
            best = d
    return horizon if best is None else best


def brute_evaluate(series_list, annotations, ks, anticipation, latency, mode, threshold, query_id):
    """Dataset-level SR/SMD computed fully independently of metrics.py."""
    lookup = {(s.video_uid, s.query_id): s for s in series_list}
    hits = {k: [] for k in ks}
    dists = {k: [] for k in ks}
    for ann in annotations:
        ser = lookup[(ann.video_uid, query_id(ann))]
        preds = brute_predictions(list(ser.scores), ser.fps, threshold, mode)
        horizon = len(ser.scores) / ser.fps
        for k in ks:
            hits[k].append(brute_recall_at_k(preds, ann.start_sec, k, anticipation, latency))
            dists[k].append(brute_smd_at_k(preds, ann.start_sec, k, horizon))
    sr = {k: float(np.mean(np.array(hits[k], dtype=bool)) * 100.0) for k in ks}
    smd = {k: float(np.mean(np.array(dists[k], dtype=float))) for k in ks}
    return sr, smd


def finite_difference_grads(model, batch, cap, eps=1e-5):
    """Central-difference gradient of the batch loss for every trainable array."""
    from streamstart import detector

    def loss_at(m):
        _, lb = detector.backward(m, batch, cap)
        return lb.total

    grads = {}
    for i, (adapter, _) in enumerate(model.blocks):
        for name, arr in adapter.arrays().items():
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                plus = arr.copy()
                plus[idx] += eps
                minus = arr.copy()
                minus[idx] -= eps
                g[idx] = (
                    loss_at(_swap(model, i, name, plus)) - loss_at(_swap(model, i, name, minus))
                ) / (2 * eps)
            grads[f"blocks.{i}.{name}"] = g
    return grads


def _swap(model, block_idx, name, array):
    blocks = []
    for j, (adapter, frozen) in enumerate(model.blocks):
        if j == block_idx:
            adapter = replace(adapter, **{name: array})
        blocks.append((adapter, frozen))
    return replace(model, blocks=blocks)


def randomize_adapters(model, seed, scale=0.4):
    """Random trainable parameters so gradients and cores are informative."""
    rng = np.random.default_rng(seed)
    blocks = []
    for adapter, frozen in model.blocks:
        updates = {
            name: rng.normal(size=arr.shape) * scale for name, arr in adapter.arrays().items()
        }
        blocks.append((replace(adapter, **updates), frozen))
    return replace(model, blocks=blocks)
