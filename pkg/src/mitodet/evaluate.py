"""Test-time mirroring, detection merging and point-based F1 scoring.

Predictions for a region come from the four mirror variants of each
model-sized tile; unmapped detections are fused by single-linkage
clustering of nearby centers.  Scoring matches detections to annotation
points one-to-one within a distance tolerance, greedily by ascending
distance, and aggregates counts over regions before forming F1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .detector import Detection, decode
from .tensor import Tensor


@dataclass(frozen=True)
class MatchResult:
    true_positives: int
    false_positives: int
    false_negatives: int
    match_radius: float


@dataclass(frozen=True)
class Score:
    precision: float
    recall: float
    f1: float
    matches: MatchResult


# ---------------------------------------------------------------------------
# mirror TTA
# ---------------------------------------------------------------------------

_VARIANTS = ((False, False), (True, False), (False, True), (True, True))


def tta_predict(detector, img: np.ndarray, base_threshold: float = 0.05) -> list:
    """Decode all four mirror variants of ``img``, unmapped to its frame.

    ``img`` is H x W x 3 in [0, 1] with H = W = the detector input
    size.  Returns four detection lists (identity, hflip, vflip, both).
    """
    h, w = img.shape[:2]
    out = []
    with T.no_grad():
        for hf, vf in _VARIANTS:
            view = img
            if hf:
                view = np.flip(view, axis=1)
            if vf:
                view = np.flip(view, axis=0)
            chw = np.ascontiguousarray(view.transpose(2, 0, 1))
            pred, _ = detector.forward(Tensor(chw))
            dets = decode(pred, base_threshold, detector.cfg.box_size)
            out.append([Detection(x=w - d.x if hf else d.x,
                                  y=h - d.y if vf else d.y,
                                  size=d.size, score=d.score)
                        for d in dets])
    return out


def merge_detections(variants: list, merge_radius: float = 25.0) -> list:
    """Fuse close detections across variants by single-linkage clustering.

    Any two detections with center distance <= merge_radius share a
    cluster; each cluster yields one detection at the mean center,
    score and size of its original members.  Cluster centroids can
    themselves fall within the radius even when every cross-cluster
    member pair is farther apart, so the linkage-and-average round is
    repeated, weighting by member count, until the output is stable.
    The merge is then idempotent by construction.
    """
    if merge_radius <= 0:
        raise ValueError(f"merge_radius must be positive, got {merge_radius}")
    dets = [d for variant in variants for d in variant]
    weights = [1] * len(dets)
    r2 = merge_radius * merge_radius
    while len(dets) > 1:
        parent = list(range(len(dets)))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in range(len(dets)):
            for j in range(i + 1, len(dets)):
                dx = dets[i].x - dets[j].x
                dy = dets[i].y - dets[j].y
                if dx * dx + dy * dy <= r2:
                    parent[find(i)] = find(j)

        clusters: dict = {}
        for i in range(len(dets)):
            clusters.setdefault(find(i), []).append(i)
        if len(clusters) == len(dets):
            break
        merged, counts = [], []
        for root in sorted(clusters):
            idxs = clusters[root]
            total = sum(weights[i] for i in idxs)
            merged.append(Detection(
                x=sum(weights[i] * dets[i].x for i in idxs) / total,
                y=sum(weights[i] * dets[i].y for i in idxs) / total,
                size=sum(weights[i] * dets[i].size for i in idxs) / total,
                score=sum(weights[i] * dets[i].score for i in idxs) / total))
            counts.append(total)
        dets, weights = merged, counts
    return list(dets)


# ---------------------------------------------------------------------------
# matching and F1
# ---------------------------------------------------------------------------

def match_points(preds: list, truths: list, match_radius: float) -> int:
    """Optimal one-to-one matching count within ``match_radius``.

    Solved as an assignment problem where any out-of-radius pair costs
    more than every in-radius pair combined, so the solver first
    maximizes the number of valid pairs and then minimizes their total
    distance.  Nearest-first greedy matching is not used because it can
    drop a pair on chained configurations.
    """
    if len(preds) == 0 or len(truths) == 0:
        return 0
    dist = np.array([[np.hypot(d.x - tx, d.y - ty) for tx, ty in truths]
                     for d in preds])
    valid = dist <= match_radius
    penalty = (min(len(preds), len(truths)) + 1.0) * (match_radius + 1.0)
    cost = np.where(valid, dist, penalty)
    rows, cols = linear_sum_assignment(cost)
    return int(valid[rows, cols].sum())


def f1_from_counts(tp: int, fp: int, fn: int,
                   match_radius: float = 30.0) -> Score:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return Score(precision, recall, f1,
                 MatchResult(tp, fp, fn, match_radius))


def f1_score(preds: list, truths: list, threshold: float = 0.403,
             match_radius: float = 30.0) -> Score:
    """Filter by score, match one-to-one, report precision/recall/F1."""
    if match_radius <= 0:
        raise ValueError(f"match_radius must be positive, got {match_radius}")
    kept = [d for d in preds if d.score >= threshold]
    tp = match_points(kept, truths, match_radius)
    return f1_from_counts(tp, len(kept) - tp, len(truths) - tp, match_radius)


def default_grid() -> list:
    return [i / 1000.0 for i in range(50, 951)]


def threshold_sweep(pairs: list, grid: list = None,
                    match_radius: float = 30.0) -> tuple:
    """Best (threshold, F1) over aggregated counts; ties take the lower
    threshold.  ``pairs`` is a list of (detections, truth points)."""
    if not any(len(truths) for _, truths in pairs):
        raise ValueError("threshold sweep needs a non-empty truth set")
    if grid is None:
        grid = default_grid()
    best_t, best_f1 = None, -1.0
    for t in grid:
        tp = fp = fn = 0
        for preds, truths in pairs:
            s = f1_score(preds, truths, threshold=t, match_radius=match_radius)
            tp += s.matches.true_positives
            fp += s.matches.false_positives
            fn += s.matches.false_negatives
        f1 = f1_from_counts(tp, fp, fn, match_radius).f1
        if f1 > best_f1:
            best_t, best_f1 = t, f1
    return best_t, best_f1


# ---------------------------------------------------------------------------
# region-level driver
# ---------------------------------------------------------------------------

def _tile_origins(extent: int, tile: int) -> list:
    if extent <= tile:
        return [0]
    starts = list(range(0, extent - tile, tile))
    starts.append(extent - tile)
    return starts


def predict_region(detector, region, base_threshold: float = 0.05,
                   merge_radius: float = 25.0) -> list:
    """All merged detections for one region, in region coordinates."""
    size = detector.cfg.input_size
    img = region.image
    h, w = img.shape[:2]
    if h < size or w < size:
        canvas = np.ones((max(h, size), max(w, size), 3))
        canvas[:h, :w] = img
        img = canvas
        h, w = img.shape[:2]
    out = []
    for oy in _tile_origins(h, size):
        for ox in _tile_origins(w, size):
            tile = img[oy:oy + size, ox:ox + size]
            variants = tta_predict(detector, tile, base_threshold)
            for d in merge_detections(variants, merge_radius):
                x, y = d.x + ox, d.y + oy
                if x < region.image.shape[1] and y < region.image.shape[0]:
                    out.append(Detection(x=x, y=y, size=d.size, score=d.score))
    return out


def evaluate_regions(detector, regions: list, threshold: float = 0.403,
                     match_radius: float = 30.0, base_threshold: float = 0.05,
                     merge_radius: float = 25.0) -> dict:
    """Aggregate F1 report over regions with a per-scanner breakdown."""
    counts: dict = {}
    for region in regions:
        preds = predict_region(detector, region, base_threshold, merge_radius)
        s = f1_score(preds, region.points, threshold, match_radius)
        key = region.label.scanner
        tp, fp, fn = counts.get(key, (0, 0, 0))
        counts[key] = (tp + s.matches.true_positives,
                       fp + s.matches.false_positives,
                       fn + s.matches.false_negatives)
    tp = sum(c[0] for c in counts.values())
    fp = sum(c[1] for c in counts.values())
    fn = sum(c[2] for c in counts.values())
    total = f1_from_counts(tp, fp, fn, match_radius)
    per_domain = {}
    for key in sorted(counts):
        s = f1_from_counts(*counts[key], match_radius)
        per_domain[str(key)] = {
            "precision": s.precision, "recall": s.recall, "f1": s.f1,
            "tp": counts[key][0], "fp": counts[key][1], "fn": counts[key][2]}
    return {"precision": total.precision, "recall": total.recall,
            "f1": total.f1, "tp": tp, "fp": fp, "fn": fn,
            "threshold": threshold, "per_domain": per_domain}


def collect_pairs(detector, regions: list, base_threshold: float = 0.05,
                  merge_radius: float = 25.0) -> list:
    """(detections, truths) per region, for threshold sweeps."""
    return [(predict_region(detector, r, base_threshold, merge_radius),
             r.points) for r in regions]
