"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (nested loops, exhaustive enumeration)
and written without reusing the library's own code paths, so agreement is
meaningful.
"""

from __future__ import annotations

import itertools

import numpy as np


def central_difference(f, arrays: list[np.ndarray], which: int, index, h: float = 1e-5) -> float:
    """d f(arrays) / d arrays[which][index] by central differences."""
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[which][index] += h
    minus[which][index] -= h
    return (f(plus) - f(minus)) / (2.0 * h)


def grad_close(analytic: float, numeric: float, tol: float = 1e-6) -> bool:
    """Mixed relative/absolute agreement: |a-n| <= tol * max(1, |a|, |n|)."""
    return abs(analytic - numeric) <= tol * max(1.0, abs(analytic), abs(numeric))


def naive_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                 stride: int, pad: int) -> np.ndarray:
    """Six nested loops, no vectorization."""
    cin, h, wid = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, h + 2 * pad, wid + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wid] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wid + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[co]
                for ci in range(cin):
                    for u in range(k):
                        for v in range(k):
                            acc += w[co, ci, u, v] * xp[ci, i * stride + u, j * stride + v]
                out[co, i, j] = acc
    return out


def naive_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def naive_nms(boxes: np.ndarray, scores: np.ndarray, thresh: float) -> list[int]:
    """Quadratic reference NMS with (score desc, index asc) ordering."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(naive_iou(boxes[i], boxes[j]) <= thresh for j in kept):
            kept.append(i)
    return kept


def naive_match(gt_boxes: np.ndarray, anchors_corner: np.ndarray,
                pos_iou: float) -> np.ndarray:
    """Loop-based anchor assignment mirroring the documented rule:
    threshold matches to each anchor's best ground truth, then each ground
    truth (in order) claims its best anchor. Returns gt index per anchor,
    -1 for background."""
    g, q = len(gt_boxes), len(anchors_corner)
    assign = np.full(q, -1, dtype=int)
    for a in range(q):
        best, best_iou = -1, 0.0
        for j in range(g):
            overlap = naive_iou(gt_boxes[j], anchors_corner[a])
            if overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0 and best_iou >= pos_iou:
            assign[a] = best
    for j in range(g):
        best_a, best_iou = 0, -1.0
        for a in range(q):
            overlap = naive_iou(gt_boxes[j], anchors_corner[a])
            if overlap > best_iou:
                best_a, best_iou = a, overlap
        assign[best_a] = j
    return assign


def naive_average_precision(is_tp_in_rank_order: list[bool], n_gt: int) -> float:
    """All-points interpolated AP by scanning every achieved recall level.

    Takes the true/false-positive flags already sorted by detection rank.
    """
    points = []
    tp = fp = 0
    for flag in is_tp_in_rank_order:
        if flag:
            tp += 1
        else:
            fp += 1
        points.append((tp / n_gt, tp / (tp + fp)))
    area = 0.0
    prev_recall = 0.0
    for recall, _ in points:
        if recall > prev_recall:
            best = max(p for r, p in points if r >= recall)
            area += (recall - prev_recall) * best
            prev_recall = recall
    return area


def brute_force_class_ap(tubes, gts, threshold: float, tube_iou_fn) -> float:
    """Reference AP for one class: rank by score (ties by video id then
    insertion order), greedily match each tube to its best still-unmatched
    same-video ground truth at or above the threshold."""
    order = sorted(range(len(tubes)), key=lambda i: (-tubes[i].score, tubes[i].video_id, i))
    used: set[int] = set()
    flags: list[bool] = []
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if j in used or gt.video_id != tubes[i].video_id:
                continue
            overlap = tube_iou_fn(tubes[i], gt)
            if overlap >= threshold and overlap > best_iou:
                best_j, best_iou = j, overlap
        if best_j >= 0:
            used.add(best_j)
        flags.append(best_j >= 0)
    if not gts:
        return 0.0
    return naive_average_precision(flags, len(gts))


def _frame_matchings(n_prev: int, n_cur: int, allowed) -> list[tuple[tuple[int, int], ...]]:
    """Every injective partial matching between two detection sets, using
    only `allowed` (prev, cur) pairs."""
    out: list[tuple[tuple[int, int], ...]] = []
    for k in range(min(n_prev, n_cur) + 1):
        for rows in itertools.combinations(range(n_prev), k):
            for cols in itertools.permutations(range(n_cur), k):
                pairing = tuple(zip(rows, cols))
                if all(p in allowed for p in pairing):
                    out.append(pairing)
    return out


def exhaustive_linking_optimum(per_frame_boxes: list[np.ndarray],
                               per_frame_scores: list[np.ndarray],
                               lambda_iou: float) -> float:
    """Maximum total link value over every legal chain assignment, by full
    enumeration of the cartesian product of per-frame matchings.

    A link joins a detection at frame t-1 to one at frame t with positive
    IoU and contributes score(next) + lambda * IoU(prev, next); chains are
    whatever the chosen links compose into.
    """
    transition_options: list[list[tuple[float, ...]]] = []
    for t in range(1, len(per_frame_boxes)):
        prev, cur = per_frame_boxes[t - 1], per_frame_boxes[t]
        scores = per_frame_scores[t]
        values = {}
        for r in range(len(prev)):
            for c in range(len(cur)):
                overlap = naive_iou(prev[r], cur[c])
                if overlap > 0.0:
                    values[(r, c)] = scores[c] + lambda_iou * overlap
        options = []
        for matching in _frame_matchings(len(prev), len(cur), set(values)):
            options.append(sum(values[p] for p in matching))
        transition_options.append(options)
    best = 0.0
    for combo in itertools.product(*transition_options):
        best = max(best, sum(combo))
    return best
