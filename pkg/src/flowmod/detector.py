"""Anchor-box action detector over a small conv backbone.

One network class covers four variants: an RGB stream, a flow stream (same
backbone on 2-channel flow input), a flow-modulated RGB stream, and a
multi-frame variant that concatenates per-frame features before the heads
and regresses one box per frame of the window. Score fusion of two trained
streams is a plain per-anchor average.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nm
from .condition import ConditionConfig, ConditionModule, modulate
from .numerics import Parameter, ShapeError, Tensor

MODES = ("rgb", "flow", "two_in_one")

# Backbone topology: 3x3 convs, downsampling at conv2 and conv4.
BACKBONE_ORDER = ("conv1", "conv2", "conv3", "conv4")
BACKBONE_STRIDES = {"conv1": 1, "conv2": 2, "conv3": 1, "conv4": 2}
SITE_DOWNSAMPLE = {"conv1": 1, "conv2": 2, "conv3": 2, "conv4": 4}


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    num_classes: int = 4
    backbone_channels: tuple[int, int, int, int] = (16, 32, 48, 64)
    head_sites: tuple[str, ...] = ("conv3", "conv4")
    anchor_scales: tuple[float, ...] = (0.45, 0.65)
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)
    tubelet_len: int = 1
    pos_iou: float = 0.5
    neg_pos_ratio: int = 3
    conf_thresh: float = 0.5
    eval_conf_thresh: float = 0.01
    nms_iou: float = 0.45
    top_k: int = 50
    flow_input_scale: float = 20.0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one action class")
        if self.tubelet_len < 1:
            raise ValueError("tubelet_len must be >= 1")
        if len(self.anchor_scales) != len(self.head_sites):
            raise ValueError("one anchor scale per head site is required")
        if not 0.0 < self.pos_iou < 1.0:
            raise ValueError("pos_iou must be in (0, 1)")

    @property
    def site_channels(self) -> dict[str, int]:
        return dict(zip(BACKBONE_ORDER, self.backbone_channels))

    def grid_size(self, site: str) -> int:
        return self.image_size // SITE_DOWNSAMPLE[site]


# ----- boxes and anchors ------------------------------------------------------

def corner_to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    wh = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + 0.5 * wh, wh], axis=-1)


def center_to_corner(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = 0.5 * boxes[..., 2:]
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner-form box sets (M,4) and (N,4) -> (M,N)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def generate_anchors(grid_sizes: Sequence[int], scales: Sequence[float],
                     ratios: Sequence[float] = (1.0, 2.0, 0.5)) -> np.ndarray:
    """Center-form anchors (cx,cy,w,h), row-major cells then aspect ratio."""
    levels = []
    for g, s in zip(grid_sizes, scales):
        cy, cx = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
        centers = np.stack([(cx + 0.5) / g, (cy + 0.5) / g], axis=-1).reshape(-1, 2)
        shapes = np.array([[s * np.sqrt(r), s / np.sqrt(r)] for r in ratios])
        cells = np.repeat(centers, len(ratios), axis=0)
        whs = np.tile(shapes, (g * g, 1))
        levels.append(np.concatenate([cells, whs], axis=1))
    return np.concatenate(levels, axis=0)


def anchors_for_config(cfg: DetectorConfig) -> np.ndarray:
    return generate_anchors([cfg.grid_size(s) for s in cfg.head_sites],
                            cfg.anchor_scales, cfg.aspect_ratios)


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Center-form ground truth -> regression offsets against anchors.

    Offsets are ((g_cx - d_cx)/d_w, (g_cy - d_cy)/d_h, log(g_w/d_w),
    log(g_h/d_h)); decode_boxes is the exact inverse.
    """
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if np.any(gt[..., 2:] <= 0.0) or np.any(anchors[..., 2:] <= 0.0):
        raise ValueError("encode_boxes requires positive widths and heights")
    txy = (gt[..., :2] - anchors[..., :2]) / anchors[..., 2:]
    twh = np.log(gt[..., 2:] / anchors[..., 2:])
    return np.concatenate([txy, twh], axis=-1)


def decode_boxes(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if np.any(anchors[..., 2:] <= 0.0):
        raise ValueError("decode_boxes requires positive anchor dimensions")
    xy = anchors[..., :2] + offsets[..., :2] * anchors[..., 2:]
    wh = anchors[..., 2:] * np.exp(offsets[..., 2:])
    return np.concatenate([xy, wh], axis=-1)


# ----- anchor matching --------------------------------------------------------

@dataclass
class MatchAssignment:
    """Per-anchor training targets: class label 0 (background) or 1..P,
    matched ground-truth index (-1 for background), and encoded box offsets
    of shape (Q, K, 4) that are zero outside positives."""

    labels: np.ndarray
    gt_index: np.ndarray
    loc_targets: np.ndarray
    num_matched: int


def match_anchors(gt_boxes: np.ndarray, gt_classes: np.ndarray,
                  anchors: np.ndarray, pos_iou: float = 0.5) -> MatchAssignment:
    """Assign anchors to ground-truth boxes (single frame).

    gt_boxes are corner-form (G,4); anchors center-form (Q,4). The best
    anchor of each ground truth is forced positive (processed in gt order,
    ties to the lower anchor index); every other anchor with IoU >= pos_iou
    joins its best-overlapping ground truth.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    return _match(gt_boxes.reshape(-1, 1, 4), gt_classes, anchors, pos_iou)


def match_anchor_cuboids(gt_boxes: np.ndarray, gt_classes: np.ndarray,
                         anchors: np.ndarray, pos_iou: float = 0.5) -> MatchAssignment:
    """Tubelet matching: gt_boxes (G,K,4) corner-form; anchor overlap is the
    mean per-frame IoU of the (static) anchor against the K boxes."""
    return _match(np.asarray(gt_boxes, dtype=np.float64), gt_classes, anchors, pos_iou)


def _match(gt_boxes: np.ndarray, gt_classes, anchors: np.ndarray,
           pos_iou: float) -> MatchAssignment:
    if not 0.0 < pos_iou < 1.0:
        raise ValueError("pos_iou must be in (0, 1)")
    anchors = np.asarray(anchors, dtype=np.float64)
    q = anchors.shape[0]
    g = gt_boxes.shape[0]
    k = gt_boxes.shape[1] if g else 1
    labels = np.zeros(q, dtype=np.int64)
    gt_index = np.full(q, -1, dtype=np.int64)
    loc_targets = np.zeros((q, k, 4))
    if g == 0:
        return MatchAssignment(labels, gt_index, loc_targets, 0)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    anchor_corners = center_to_corner(anchors)
    iou = np.mean(
        np.stack([iou_matrix(gt_boxes[:, f, :], anchor_corners) for f in range(k)]),
        axis=0)
    best_gt = iou.argmax(axis=0)
    best_iou = iou[best_gt, np.arange(q)]
    positive = best_iou >= pos_iou
    gt_index[positive] = best_gt[positive]
    for j in range(g):
        gt_index[iou[j].argmax()] = j
    pos = gt_index >= 0
    labels[pos] = gt_classes[gt_index[pos]]
    pos_idx = np.flatnonzero(pos)
    for f in range(k):
        gt_centers = corner_to_center(gt_boxes[gt_index[pos_idx], f, :])
        loc_targets[pos_idx, f, :] = encode_boxes(gt_centers, anchors[pos_idx])
    return MatchAssignment(labels, gt_index, loc_targets, int(pos.sum()))


# ----- multibox loss ----------------------------------------------------------

def multibox_loss(class_logits: Tensor, box_preds: Tensor,
                  assignment: MatchAssignment, neg_pos_ratio: int = 3) -> Tensor:
    """Localization + confidence loss over one frame (or tubelet window).

    Confidence is softmax cross-entropy over the positive anchors plus the
    hardest background anchors at `neg_pos_ratio` per positive; localization
    is smooth-L1 over the positives' encoded offsets. The sum is divided by
    the number of matches (clamped to 1 when nothing matched, in which case
    the localization term is dropped entirely).
    """
    labels = assignment.labels
    q = labels.shape[0]
    if class_logits.shape[0] != q:
        raise ShapeError(f"logits rows {class_logits.shape[0]} != anchor count {q}")
    targets = assignment.loc_targets
    if targets.shape[1] == 1 and box_preds.data.ndim == 2:
        targets = targets[:, 0, :]
    if box_preds.shape != targets.shape:
        raise ShapeError(f"box predictions {box_preds.shape} != targets {targets.shape}")

    logp = nm.log_softmax(class_logits, axis=-1)
    pos_idx = np.flatnonzero(labels > 0)
    n = len(pos_idx)

    hardness = -logp.data[:, 0]
    hardness[pos_idx] = -np.inf
    n_neg = min(neg_pos_ratio * max(n, 1), q - n)
    neg_idx = np.argsort(-hardness, kind="stable")[:n_neg]

    conf = -nm.tsum(logp[(neg_idx, np.zeros(len(neg_idx), dtype=np.int64))])
    if n:
        conf = conf + -nm.tsum(logp[(pos_idx, labels[pos_idx])])
        loc = nm.tsum(nm.smooth_l1(box_preds[pos_idx] - targets[pos_idx]))
        total = conf + loc
    else:
        total = conf
    return nm.mul(total, 1.0 / max(n, 1))


def multibox_loss_batch(class_logits: Tensor, box_preds: Tensor,
                        assignments: Sequence[MatchAssignment],
                        neg_pos_ratio: int = 3) -> Tensor:
    """Mean of the per-sample multibox losses over a batch, computed as one
    graph; selections and values match a per-sample loop exactly."""
    b, q = class_logits.shape[0], class_logits.shape[1]
    if len(assignments) != b:
        raise ShapeError(f"{len(assignments)} assignments for batch of {b}")
    labels = np.stack([a.labels for a in assignments])
    targets = np.stack([a.loc_targets for a in assignments])
    if box_preds.shape != targets.shape:
        raise ShapeError(f"box predictions {box_preds.shape} != targets {targets.shape}")
    weights = np.array([1.0 / max(a.num_matched, 1) for a in assignments])

    logp = nm.log_softmax(class_logits, axis=-1)
    pos_b, pos_q = np.nonzero(labels > 0)
    hardness = -logp.data[..., 0]
    hardness[pos_b, pos_q] = -np.inf
    neg_b, neg_q = [], []
    for i, a in enumerate(assignments):
        n_neg = min(neg_pos_ratio * max(a.num_matched, 1), q - a.num_matched)
        idx = np.argsort(-hardness[i], kind="stable")[:n_neg]
        neg_b.append(np.full(len(idx), i))
        neg_q.append(idx)
    neg_b = np.concatenate(neg_b)
    neg_q = np.concatenate(neg_q)

    conf_neg = nm.tsum(nm.mul(
        logp[(neg_b, neg_q, np.zeros(len(neg_b), dtype=np.int64))], -weights[neg_b]))
    total = conf_neg
    if len(pos_b):
        conf_pos = nm.tsum(nm.mul(
            logp[(pos_b, pos_q, labels[pos_b, pos_q])], -weights[pos_b]))
        penalties = nm.smooth_l1(box_preds[(pos_b, pos_q)] - targets[pos_b, pos_q])
        loc = nm.tsum(nm.mul(penalties, weights[pos_b].reshape(-1, 1, 1)))
        total = total + conf_pos + loc
    return nm.mul(total, 1.0 / b)


# ----- the network ------------------------------------------------------------

class Network:
    """Backbone + prediction heads, with optional flow modulation.

    mode "rgb": 3-channel input. mode "flow": the same backbone on
    2-channel flow. mode "two_in_one": RGB input whose low-level features
    are scaled/shifted by flow-derived maps. With tubelet_len K > 1 the
    heads see the channel concatenation of K per-frame feature maps and
    regress K boxes per anchor.
    """

    def __init__(self, mode: str, cfg: DetectorConfig,
                 cond_cfg: ConditionConfig | None = None, seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r} (expected one of {MODES})")
        if mode == "two_in_one" and cond_cfg is None:
            cond_cfg = ConditionConfig()
        self.mode = mode
        self.cfg = cfg
        self.cond_cfg = cond_cfg if mode == "two_in_one" else None
        self.seed = seed
        self.params: dict[str, Parameter] = {}

        in_ch = 2 if mode == "flow" else 3
        for site, out_ch in zip(BACKBONE_ORDER, cfg.backbone_channels):
            self._add_conv(f"detector/{site}", in_ch, out_ch, 3, seed)
            in_ch = out_ch

        k = cfg.tubelet_len
        p1 = cfg.num_classes + 1
        a = len(cfg.aspect_ratios)
        for site in cfg.head_sites:
            c = cfg.site_channels[site] * k
            self._add_conv(f"detector/head_{site}/cls", c, a * p1, 1, seed)
            self._add_conv(f"detector/head_{site}/loc", c, a * k * 4, 1, seed)

        self.condition: ConditionModule | None = None
        if mode == "two_in_one":
            self.condition = ConditionModule(
                self.cond_cfg, cfg.site_channels, SITE_DOWNSAMPLE, seed=seed)
            self.params.update(self.condition.params)

        self.anchors = anchors_for_config(cfg)

    def _add_conv(self, name: str, in_ch: int, out_ch: int, k: int, seed: int) -> None:
        wname, bname = f"{name}/weight", f"{name}/bias"
        w = nm.he_uniform((out_ch, in_ch, k, k), in_ch * k * k, seed, wname)
        self.params[wname] = Parameter(Tensor(w, requires_grad=True), wname)
        self.params[bname] = Parameter(Tensor(np.zeros(out_ch), requires_grad=True), bname)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return nm.parameter_count(self.parameters())

    def _p(self, name: str) -> Tensor:
        return self.params[name].tensor

    @staticmethod
    def _to_nchw(arr: np.ndarray, channels: int, k: int) -> tuple[np.ndarray, int]:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim == 4:
            arr = arr[:, None]
        if arr.ndim != 5 or arr.shape[1] != k or arr.shape[4] != channels:
            raise ShapeError(
                f"expected input of shape (N,{k},H,W,{channels}), got {arr.shape}")
        n, _, h, w, c = arr.shape
        return np.ascontiguousarray(arr.reshape(n * k, h, w, c).transpose(0, 3, 1, 2)), n

    def forward(self, frames: np.ndarray | None = None,
                flows: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Run the detector.

        frames: (N, K, H, W, 3) RGB in [0,1] (leading dims optional when N or
        K is 1); flows: (N, K, H, W, 2). Returns class logits (N, Q, P+1) and
        box offsets (N, Q, K, 4).
        """
        cfg = self.cfg
        k = cfg.tubelet_len
        if self.mode == "flow":
            if flows is None:
                raise ValueError("flow mode requires flow input")
            xin, n = self._to_nchw(flows, 2, k)
            x = Tensor(xin / cfg.flow_input_scale)
        else:
            if frames is None:
                raise ValueError(f"{self.mode} mode requires RGB frames")
            xin, n = self._to_nchw(frames, 3, k)
            x = Tensor(xin - 0.5)

        mods = {}
        if self.mode == "two_in_one":
            if flows is None:
                raise ValueError("two_in_one mode requires flow input")
            fin, nf = self._to_nchw(flows, 2, k)
            if nf != n:
                raise ShapeError(f"frame batch {n} != flow batch {nf}")
            psi = self.condition.motion_condition(Tensor(fin))
            mods = {site: self.condition.modulation_params(psi, site)
                    for site in self.cond_cfg.modulate_at}

        feats: dict[str, Tensor] = {}
        h = x
        for site in BACKBONE_ORDER:
            h = nm.conv2d(h, self._p(f"detector/{site}/weight"),
                          self._p(f"detector/{site}/bias"),
                          stride=BACKBONE_STRIDES[site], pad=1)
            h = nm.relu(h)
            if site in mods:
                h = modulate(h, mods[site])
            feats[site] = h

        p1 = cfg.num_classes + 1
        a = len(cfg.aspect_ratios)
        logit_parts, loc_parts = [], []
        for site in cfg.head_sites:
            f = feats[site]
            g = f.shape[-1]
            if k > 1:
                f = nm.reshape(f, (n, k * f.shape[1], g, g))
            # Both heads share one im2col/GEMM over the site features.
            w = nm.concat([self._p(f"detector/head_{site}/cls/weight"),
                           self._p(f"detector/head_{site}/loc/weight")], axis=0)
            b = nm.concat([self._p(f"detector/head_{site}/cls/bias"),
                           self._p(f"detector/head_{site}/loc/bias")], axis=0)
            pred = nm.conv2d(f, w, b)
            cls = nm.narrow(pred, 1, 0, a * p1)
            loc = nm.narrow(pred, 1, a * p1, a * k * 4)
            cls = nm.reshape(cls, (n, a, p1, g, g))
            cls = nm.transpose(cls, (0, 3, 4, 1, 2))
            logit_parts.append(nm.reshape(cls, (n, g * g * a, p1)))
            loc = nm.reshape(loc, (n, a, k, 4, g, g))
            loc = nm.transpose(loc, (0, 4, 5, 1, 2, 3))
            loc_parts.append(nm.reshape(loc, (n, g * g * a, k, 4)))
        return nm.concat(logit_parts, axis=1), nm.concat(loc_parts, axis=1)


# ----- detections -------------------------------------------------------------

@dataclass
class Detection:
    """One scored box prediction on one frame (corner form, normalized)."""

    box: np.ndarray
    class_id: int
    score: float
    frame_index: int = -1
    video_id: str = ""
    anchor_index: int = -1

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)
        if self.box.shape != (4,):
            raise ValueError(f"detection box must have 4 coordinates, got {self.box.shape}")
        if not (self.box[0] < self.box[2] and self.box[1] < self.box[3]):
            raise ValueError(f"degenerate detection box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        if self.class_id < 1:
            raise ValueError("detection class_id must be a positive action class")


@dataclass
class TubeletDetection:
    """One scored sequence of K consecutive boxes sharing a class."""

    boxes: np.ndarray
    class_id: int
    score: float
    start_frame: int = 0
    video_id: str = ""
    anchor_index: int = -1

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
            raise ValueError(f"tubelet boxes must be (K,4), got {self.boxes.shape}")


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float,
        tie_index: np.ndarray | None = None,
        max_keep: int | None = None) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices.

    Candidates are visited by score descending (ties by `tie_index`
    ascending, default the input position); a candidate is dropped when its
    IoU with any kept box exceeds `iou_thresh`.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if tie_index is None:
        tie_index = np.arange(len(scores))
    order = np.lexsort((tie_index, -scores))
    kept: list[int] = []
    while order.size:
        i = order[0]
        kept.append(int(i))
        if max_keep is not None and len(kept) >= max_keep:
            break
        rest = order[1:]
        ious = iou_matrix(boxes[i], boxes[rest])[0]
        order = rest[ious <= iou_thresh]
    return kept


def _clip_boxes(corner: np.ndarray) -> np.ndarray:
    return np.clip(corner, 0.0, 1.0)


def detect_batch(network: Network, frames=None, flows=None,
                 conf_thresh: float | None = None, nms_iou: float | None = None,
                 top_k: int | None = None) -> list[list[Detection]]:
    """Frame detections for a batch; requires tubelet_len == 1."""
    cfg = network.cfg
    if cfg.tubelet_len != 1:
        raise ValueError("detect_batch requires a single-frame network; use detect_tubelet")
    conf_thresh = cfg.conf_thresh if conf_thresh is None else conf_thresh
    with nm.no_grad():
        logits, loc = network.forward(frames, flows)
    scores = _softmax_np(logits.data)
    return [_postprocess_frame(scores[i], loc.data[i, :, 0, :], network.anchors,
                               cfg, conf_thresh, nms_iou, top_k)
            for i in range(scores.shape[0])]


def detect(network: Network, frame=None, flow=None, conf_thresh=None,
           nms_iou=None, top_k=None) -> list[Detection]:
    """Detections on a single frame (see detect_batch)."""
    frames = None if frame is None else np.asarray(frame)[None]
    flows = None if flow is None else np.asarray(flow)[None]
    return detect_batch(network, frames, flows, conf_thresh, nms_iou, top_k)[0]


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _postprocess_frame(scores: np.ndarray, offsets: np.ndarray, anchors: np.ndarray,
                       cfg: DetectorConfig, conf_thresh: float,
                       nms_iou: float | None, top_k: int | None) -> list[Detection]:
    nms_iou = cfg.nms_iou if nms_iou is None else nms_iou
    top_k = cfg.top_k if top_k is None else top_k
    boxes = _clip_boxes(center_to_corner(decode_boxes(offsets, anchors)))
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    dets: list[Detection] = []
    for p in range(1, cfg.num_classes + 1):
        mask = (scores[:, p] > conf_thresh) & valid
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            continue
        keep = nms(boxes[idx], scores[idx, p], nms_iou, tie_index=idx, max_keep=top_k)
        dets.extend(Detection(box=boxes[idx[j]], class_id=p,
                              score=float(scores[idx[j], p]),
                              anchor_index=int(idx[j]))
                    for j in keep)
    dets.sort(key=lambda d: (-d.score, d.anchor_index, d.class_id))
    return dets[:top_k]


def _cuboid_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mean per-frame IoU between box sequences (M,K,4) and (N,K,4)."""
    k = a.shape[1]
    return np.mean(np.stack([iou_matrix(a[:, f], b[:, f]) for f in range(k)]), axis=0)


def detect_tubelet(network: Network, frames, flows=None, conf_thresh=None,
                   nms_iou=None, top_k=None) -> list[TubeletDetection]:
    """Tubelet detections for one window of K consecutive frames."""
    cfg = network.cfg
    k = cfg.tubelet_len
    frames = None if frames is None else np.asarray(frames)
    flows = None if flows is None else np.asarray(flows)
    ref = frames if frames is not None else flows
    if ref is None or ref.ndim != 4 or ref.shape[0] != k:
        raise ValueError(f"detect_tubelet needs exactly {k} frames, got "
                         f"{None if ref is None else ref.shape}")
    conf_thresh = cfg.conf_thresh if conf_thresh is None else conf_thresh
    nms_iou = cfg.nms_iou if nms_iou is None else nms_iou
    top_k = cfg.top_k if top_k is None else top_k
    with nm.no_grad():
        logits, loc = network.forward(
            None if frames is None else frames[None],
            None if flows is None else flows[None])
    scores = _softmax_np(logits.data)[0]
    offsets = loc.data[0]
    boxes = _clip_boxes(center_to_corner(
        decode_boxes(offsets, network.anchors[:, None, :])))
    valid = (boxes[..., 2] > boxes[..., 0]).all(axis=1) & \
            (boxes[..., 3] > boxes[..., 1]).all(axis=1)
    out: list[TubeletDetection] = []
    for p in range(1, cfg.num_classes + 1):
        idx = np.flatnonzero((scores[:, p] > conf_thresh) & valid)
        if idx.size == 0:
            continue
        order = idx[np.lexsort((idx, -scores[idx, p]))]
        kept: list[int] = []
        while order.size:
            i = order[0]
            kept.append(int(i))
            if len(kept) >= top_k:
                break
            rest = order[1:]
            ious = _cuboid_iou_matrix(boxes[i][None], boxes[rest])[0]
            order = rest[ious <= nms_iou]
        out.extend(TubeletDetection(boxes=boxes[i], class_id=p,
                                    score=float(scores[i, p]), anchor_index=int(i))
                   for i in kept)
    out.sort(key=lambda d: (-d.score, d.anchor_index, d.class_id))
    return out[:top_k]


def fuse_scores(scores_a: np.ndarray, scores_b: np.ndarray) -> np.ndarray:
    """Average fusion of two streams' class scores over a shared anchor set."""
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    if scores_a.shape != scores_b.shape:
        raise ShapeError(
            f"cannot fuse score tensors of shapes {scores_a.shape} and {scores_b.shape}")
    return 0.5 * (scores_a + scores_b)


def detect_batch_fused(net_a: Network, net_b: Network, frames, flows,
                       conf_thresh=None, nms_iou=None, top_k=None) -> list[list[Detection]]:
    """Two-stream detection: average the class scores of both networks per
    anchor and keep the appearance stream's boxes (net_a)."""
    cfg = net_a.cfg
    if net_a.anchors.shape != net_b.anchors.shape:
        raise ShapeError("fused streams must share one anchor set")
    conf_thresh = cfg.conf_thresh if conf_thresh is None else conf_thresh
    with nm.no_grad():
        logits_a, loc_a = net_a.forward(frames, flows)
        logits_b, _ = net_b.forward(frames, flows)
    fused = fuse_scores(_softmax_np(logits_a.data), _softmax_np(logits_b.data))
    return [_postprocess_frame(fused[i], loc_a.data[i, :, 0, :], net_a.anchors,
                               cfg, conf_thresh, nms_iou, top_k)
            for i in range(fused.shape[0])]
