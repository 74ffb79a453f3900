"""Action tubes: temporal linking of detections and video-mAP scoring.

Tube overlap is the per-frame box IoU averaged over the union of the two
temporal extents (frames covered by only one tube count as zero), so a tube
is penalized both for drifting spatially and for over- or under-covering the
action in time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .detector import Detection, TubeletDetection, iou_matrix

log = logging.getLogger(__name__)

LAMBDA_IOU = 1.0
GAP_MAX = 1
MIN_TUBE_LEN = 2
_INVALID = -1e18


@dataclass
class ActionTube:
    """A scored chain of per-frame boxes with one class label.

    boxes[t] is the corner-form box at frame start_frame + t; frames are
    consecutive by construction.
    """

    video_id: str
    class_id: int
    score: float
    start_frame: int
    boxes: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.boxes) < 1:
            raise ValueError("a tube needs at least one box")

    @property
    def length(self) -> int:
        return len(self.boxes)

    @property
    def end_frame(self) -> int:
        return self.start_frame + self.length - 1

    def box_at(self, frame: int) -> np.ndarray | None:
        if self.start_frame <= frame <= self.end_frame:
            return self.boxes[frame - self.start_frame]
        return None


@dataclass
class GroundTruthTube:
    video_id: str
    class_id: int
    start_frame: int
    boxes: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.boxes) < 1:
            raise ValueError("a tube needs at least one box")

    @property
    def length(self) -> int:
        return len(self.boxes)

    @property
    def end_frame(self) -> int:
        return self.start_frame + self.length - 1

    def box_at(self, frame: int) -> np.ndarray | None:
        if self.start_frame <= frame <= self.end_frame:
            return self.boxes[frame - self.start_frame]
        return None


def spatial_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two corner-form boxes."""
    return float(iou_matrix(np.asarray(a).reshape(1, 4),
                            np.asarray(b).reshape(1, 4))[0, 0])


def tube_iou(a, b) -> float:
    """Mean per-frame IoU over the union of both tubes' temporal extents."""
    frames = range(min(a.start_frame, b.start_frame),
                   max(a.end_frame, b.end_frame) + 1)
    total = 0.0
    count = 0
    for f in frames:
        box_a, box_b = a.box_at(f), b.box_at(f)
        if box_a is None and box_b is None:
            continue
        count += 1
        if box_a is not None and box_b is not None:
            total += spatial_iou(box_a, box_b)
    return total / count if count else 0.0


# ----- linking frame detections -----------------------------------------------

class _PartialTube:
    __slots__ = ("start", "boxes", "scores")

    def __init__(self, start: int, box: np.ndarray, score: float):
        self.start = start
        self.boxes = [box]
        self.scores = [score]


def _assign(values: np.ndarray) -> list[tuple[int, int]]:
    """Max-total-value one-to-one assignment; entries <= _INVALID mean the
    pair is not linkable and rows may stay unmatched instead."""
    n_rows, n_cols = values.shape
    padded = np.full((n_rows, n_cols + n_rows), 0.0)
    padded[:, :n_cols] = values
    rows, cols = linear_sum_assignment(padded, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols)
            if c < n_cols and values[r, c] > _INVALID]


def link_detections(per_frame: Sequence[Sequence[Detection]], class_id: int,
                    lambda_iou: float = LAMBDA_IOU,
                    min_length: int = MIN_TUBE_LEN,
                    video_id: str = "") -> list[ActionTube]:
    """Chain one class's detections across frames into tubes.

    Frame by frame, active tubes are matched one-to-one to that frame's
    detections so that the summed link value (detection score plus
    lambda_iou times the IoU with the tube's last box) is maximal; links
    require positive IoU. Unmatched detections open new tubes, unmatched
    tubes terminate. A tube's score is the mean of its members' scores;
    tubes shorter than `min_length` are discarded.
    """
    active: list[_PartialTube] = []
    done: list[_PartialTube] = []
    for t, dets in enumerate(per_frame):
        dets = [d for d in dets if d.class_id == class_id]
        matched_tubes: set[int] = set()
        matched_dets: set[int] = set()
        if active and dets:
            last = np.stack([tube.boxes[-1] for tube in active])
            cand = np.stack([d.box for d in dets])
            iou = iou_matrix(last, cand)
            values = np.where(iou > 0.0,
                              np.array([d.score for d in dets])[None, :] + lambda_iou * iou,
                              _INVALID)
            for r, c in _assign(values):
                active[r].boxes.append(dets[c].box)
                active[r].scores.append(dets[c].score)
                matched_tubes.add(r)
                matched_dets.add(c)
        done.extend(tube for i, tube in enumerate(active) if i not in matched_tubes)
        active = [tube for i, tube in enumerate(active) if i in matched_tubes]
        for c, det in enumerate(dets):
            if c not in matched_dets:
                active.append(_PartialTube(t, det.box, det.score))
    done.extend(active)
    return [ActionTube(video_id=video_id, class_id=class_id,
                       score=float(np.mean(tube.scores)),
                       start_frame=tube.start, boxes=np.stack(tube.boxes))
            for tube in done if len(tube.boxes) >= min_length]


# ----- linking tubelets ---------------------------------------------------------

class _PartialMerge:
    __slots__ = ("start", "wsum", "weights", "scores", "last_start")

    def __init__(self, det: TubeletDetection):
        self.start = det.start_frame
        self.wsum = [det.score * b for b in det.boxes]
        self.weights = [det.score] * len(det.boxes)
        self.scores = [det.score]
        self.last_start = det.start_frame

    def frame_boxes(self) -> np.ndarray:
        return np.stack([s / w for s, w in zip(self.wsum, self.weights)])

    def merge(self, det: TubeletDetection) -> None:
        for i, b in enumerate(det.boxes):
            f = det.start_frame + i - self.start
            if f < len(self.wsum):
                self.wsum[f] = self.wsum[f] + det.score * b
                self.weights[f] += det.score
            else:
                self.wsum.append(det.score * b)
                self.weights.append(det.score)
        self.scores.append(det.score)
        self.last_start = det.start_frame


def link_tubelets(tubelets: Sequence[TubeletDetection],
                  min_length: int = MIN_TUBE_LEN,
                  video_id: str = "") -> list[ActionTube]:
    """Merge temporally overlapping tubelets of one video into tubes.

    Walking start frames in order, open tubes are matched to candidate
    tubelets of the same class so that total mean IoU over the shared frames
    is maximal; a matched tubelet's boxes join the tube as a score-weighted
    per-frame average. Length-1 tubelets carry no overlap and are chained
    with the frame-level linker instead.
    """
    if not tubelets:
        return []
    k = len(tubelets[0].boxes)
    if k == 1:
        per_frame: dict[int, list[Detection]] = {}
        for d in tubelets:
            per_frame.setdefault(d.start_frame, []).append(
                Detection(box=d.boxes[0], class_id=d.class_id, score=d.score,
                          frame_index=d.start_frame, anchor_index=d.anchor_index))
        frames = [per_frame.get(t, []) for t in range(max(per_frame) + 1)]
        out = []
        for class_id in sorted({d.class_id for d in tubelets}):
            out.extend(link_detections(frames, class_id, video_id=video_id))
        return out

    tubes: list[ActionTube] = []
    for class_id in sorted({d.class_id for d in tubelets}):
        group = sorted((d for d in tubelets if d.class_id == class_id),
                       key=lambda d: (d.start_frame, -d.score, d.anchor_index))
        active: list[_PartialMerge] = []
        done: list[_PartialMerge] = []
        starts = sorted({d.start_frame for d in group})
        for s in starts:
            cands = [d for d in group if d.start_frame == s]
            # Tubes whose newest tubelet is too old can no longer overlap.
            still = [m for m in active if s - m.last_start <= GAP_MAX and
                     m.start + len(m.wsum) > s]
            done.extend(m for m in active if m not in still)
            active = still
            matched_tubes: set[int] = set()
            matched_dets: set[int] = set()
            if active and cands:
                values = np.full((len(active), len(cands)), _INVALID)
                for i, m in enumerate(active):
                    boxes = m.frame_boxes()
                    for j, d in enumerate(cands):
                        shared = range(max(m.start, s), min(m.start + len(boxes), s + k))
                        if len(shared) == 0:
                            continue
                        overlap = np.mean([
                            spatial_iou(boxes[f - m.start], d.boxes[f - s])
                            for f in shared])
                        if overlap > 0.0:
                            values[i, j] = overlap
                for r, c in _assign(values):
                    active[r].merge(cands[c])
                    matched_tubes.add(r)
                    matched_dets.add(c)
            for j, d in enumerate(cands):
                if j not in matched_dets:
                    active.append(_PartialMerge(d))
        done.extend(active)
        tubes.extend(ActionTube(video_id=video_id, class_id=class_id,
                                score=float(np.mean(m.scores)),
                                start_frame=m.start, boxes=m.frame_boxes())
                     for m in done if len(m.weights) >= min_length)
    return tubes


def nms_tubes(tubes: Sequence[ActionTube], iou_thresh: float = 0.3) -> list[ActionTube]:
    """Suppress near-duplicate tubes of the same video and class.

    Greedy by score descending (ties by video, start frame, length); a tube
    is dropped when its tube IoU with an already-kept tube of the same video
    and class exceeds `iou_thresh`. Parallel chains through neighbouring
    detections otherwise rank as duplicate false positives.
    """
    order = sorted(tubes, key=lambda t: (-t.score, t.video_id, t.start_frame,
                                         -t.length))
    kept: list[ActionTube] = []
    for t in order:
        if all(k.video_id != t.video_id or k.class_id != t.class_id or
               tube_iou(k, t) <= iou_thresh for k in kept):
            kept.append(t)
    return kept


# ----- video mean average precision --------------------------------------------

def average_precision(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """All-points interpolated area under the precision-recall curve."""
    r = np.concatenate([[0.0], recalls, [1.0]])
    p = np.concatenate([[0.0], precisions, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    idx = np.flatnonzero(r[1:] != r[:-1]) + 1
    return float(np.sum((r[idx] - r[idx - 1]) * p[idx]))


def _class_ap(tubes: list[ActionTube], gts: list[GroundTruthTube],
              threshold: float) -> float:
    order = sorted(range(len(tubes)),
                   key=lambda i: (-tubes[i].score, tubes[i].video_id, i))
    matched: set[int] = set()
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        tube = tubes[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if j in matched or gt.video_id != tube.video_id:
                continue
            overlap = tube_iou(tube, gt)
            if overlap >= threshold and overlap > best_iou:
                best_iou, best_j = overlap, j
        if best_j >= 0:
            matched.add(best_j)
            tp[rank] = 1.0
    if len(order) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recalls = cum_tp / len(gts)
    precisions = cum_tp / np.arange(1, len(order) + 1)
    return average_precision(recalls, precisions)


def video_map(tubes: Sequence[ActionTube], gt: Sequence[GroundTruthTube],
              iou_thresholds: Sequence[float]) -> dict[float, dict]:
    """Per-class AP and mAP at each tube-IoU threshold.

    A tube is a true positive when its tube IoU with a so-far unmatched
    ground-truth tube of the same class and video reaches the threshold;
    tubes are consumed by score descending. Classes without any ground
    truth are excluded from the mean (and logged).
    """
    for t in iou_thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"iou threshold {t} outside (0, 1)")
    classes = sorted({g.class_id for g in gt} | {t.class_id for t in tubes})
    result: dict[float, dict] = {}
    for thr in iou_thresholds:
        ap_per_class: dict[int, float] = {}
        for c in classes:
            class_gt = [g for g in gt if g.class_id == c]
            if not class_gt:
                log.info("class %d has no ground truth; excluded from mAP", c)
                continue
            class_tubes = [t for t in tubes if t.class_id == c]
            ap_per_class[c] = _class_ap(class_tubes, class_gt, thr)
        mean = float(np.mean(list(ap_per_class.values()))) if ap_per_class else 0.0
        result[thr] = {"ap": ap_per_class, "map": mean}
    return result


RANGE_50_95 = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))


def video_map_range(tubes, gt, thresholds=RANGE_50_95) -> float:
    """Mean of the per-threshold mAP over a threshold sweep (default 0.50:0.95)."""
    per = video_map(tubes, gt, thresholds)
    return float(np.mean([per[t]["map"] for t in thresholds]))


# ----- tube records -------------------------------------------------------------

def format_tube_line(tube: ActionTube | GroundTruthTube, score: float | None = None) -> str:
    if score is None:
        score = getattr(tube, "score", 1.0)
    boxes = " ".join(
        f"{tube.start_frame + i}:" + ",".join(f"{v:.9g}" for v in box)
        for i, box in enumerate(tube.boxes))
    return f"{tube.video_id},{tube.class_id},{score:.9g} {boxes}"


def parse_tube_line(line: str) -> ActionTube:
    head, _, rest = line.strip().partition(" ")
    video_id, class_id, score = head.split(",")
    pairs = rest.split()
    frames, boxes = [], []
    for pair in pairs:
        f, _, coords = pair.partition(":")
        frames.append(int(f))
        boxes.append([float(v) for v in coords.split(",")])
    if frames != list(range(frames[0], frames[0] + len(frames))):
        raise ValueError(f"tube frames not consecutive: {frames}")
    return ActionTube(video_id=video_id, class_id=int(class_id),
                      score=float(score), start_frame=frames[0],
                      boxes=np.array(boxes))


def write_tubes(tubes: Sequence[ActionTube], path: str | Path) -> None:
    Path(path).write_text("".join(format_tube_line(t) + "\n" for t in tubes),
                          encoding="utf-8")


def read_tubes(path: str | Path) -> list[ActionTube]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [parse_tube_line(ln) for ln in lines if ln.strip()]
