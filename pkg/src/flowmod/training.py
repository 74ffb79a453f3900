"""Seeded minibatch training of a detector network.

Plain SGD with a step-decay schedule. An epoch visits every training video
once, drawing `frames_per_video` random frames (or tubelet windows) from
each; batches mix frames across videos. Fully deterministic for a given
seed: two runs produce bitwise-identical parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .checkpoint import dump_parameters, parse_parameters, restore_parameters
from .detector import (MatchAssignment, Network, match_anchor_cuboids,
                       match_anchors, multibox_loss_batch)
from .synthdata import VideoSample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 30
    batch_size: int = 8
    frames_per_video: int = 3   # sampled per video per epoch; 0 means all
    optimizer: str = "adam"     # "adam" or "sgd" (with optional momentum)
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 1e-4
    flip_augment: bool = True   # random horizontal flips of frames and flows
    decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (24,)
    eval_every: int = 0         # evaluate mAP every N epochs; 0 = never

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    lr: float
    eval_map: float = float("nan")


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)
    diverged: bool = False

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]


class _Optimizer:
    """Turns raw gradients into step directions in place; the actual
    parameter update stays p <- p - lr * direction (sgd_step)."""

    def __init__(self, schedule: TrainSchedule,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.schedule = schedule
        self.betas = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def transform_grads(self, params) -> None:
        sched = self.schedule
        if sched.optimizer == "sgd":
            for p in params:
                if not p.trainable:
                    continue
                g = p.tensor.grad
                if sched.weight_decay:
                    g = g + sched.weight_decay * p.tensor.data
                if sched.momentum:
                    m = self.m.get(p.name)
                    g = g if m is None else sched.momentum * m + g
                    self.m[p.name] = g
                p.tensor.grad = g.copy() if g is p.tensor.grad else g
            return
        b1, b2 = self.betas
        self.t += 1
        for p in params:
            if not p.trainable:
                continue
            g = p.tensor.grad
            m = self.m.get(p.name, np.zeros_like(g))
            v = self.v.get(p.name, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[p.name] = m
            self.v[p.name] = v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            # Decoupled weight decay: shrinkage rides the same lr as the step.
            p.tensor.grad = mhat / (np.sqrt(vhat) + self.eps) + \
                sched.weight_decay * p.tensor.data


def _maybe_flip_frames(frames: np.ndarray, flipped: bool) -> np.ndarray:
    return frames[:, :, ::-1, :] if flipped else frames


def _maybe_flip_flows(flows: np.ndarray, flipped: bool) -> np.ndarray:
    if not flipped:
        return flows
    out = flows[:, :, ::-1, :].copy()
    out[..., 0] = -out[..., 0]  # mirrored content moves the other way in x
    return out


def _gt_window(sample: VideoSample, start: int, k: int):
    """Ground-truth boxes (G,K,4) and classes for frames start..start+k-1;
    only tubes covering the whole window contribute."""
    boxes, classes = [], []
    for g in sample.gt_tubes:
        if g.start_frame <= start and g.end_frame >= start + k - 1:
            off = start - g.start_frame
            boxes.append(g.boxes[off:off + k])
            classes.append(g.class_id)
    if boxes:
        return np.stack(boxes), np.asarray(classes, dtype=np.int64)
    return np.zeros((0, k, 4)), np.zeros(0, dtype=np.int64)


def train(network: Network, samples: Sequence[VideoSample],
          schedule: TrainSchedule, seed: int,
          eval_fn: Callable[[Network], float] | None = None) -> TrainLog:
    """Train `network` in place on the given videos.

    Aborts on a non-finite loss, restoring the parameters from the end of
    the last clean epoch (the training log is then marked diverged).
    """
    cfg = network.cfg
    k = cfg.tubelet_len
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x7261])
    for s in samples:
        if len(s.frames) < k:
            raise ValueError(f"{s.video_id}: {len(s.frames)} frames < tubelet length {k}")

    # Anchor assignments depend only on the fixed ground truth (and the flip
    # bit): cache them.
    assignments: dict[tuple[int, int, bool], MatchAssignment] = {}

    def assignment(vi: int, start: int, flipped: bool) -> MatchAssignment:
        key = (vi, start, flipped)
        if key not in assignments:
            gt_boxes, gt_classes = _gt_window(samples[vi], start, k)
            if flipped:
                gt_boxes = gt_boxes[..., [2, 1, 0, 3]]
                gt_boxes[..., [0, 2]] = 1.0 - gt_boxes[..., [0, 2]]
            if k == 1:
                assignments[key] = match_anchors(
                    gt_boxes[:, 0, :], gt_classes, network.anchors, cfg.pos_iou)
            else:
                assignments[key] = match_anchor_cuboids(
                    gt_boxes, gt_classes, network.anchors, cfg.pos_iou)
        return assignments[key]

    params = network.parameters()
    snapshot = dump_parameters(params)
    opt = _Optimizer(schedule)
    lr = schedule.lr
    out = TrainLog()
    for epoch in range(schedule.epochs):
        if epoch in schedule.decay_epochs:
            lr *= schedule.decay_factor
        items: list[tuple[int, int, bool]] = []
        for vi, s in enumerate(samples):
            n_starts = len(s.frames) - k + 1
            if schedule.frames_per_video and schedule.frames_per_video < n_starts:
                starts = rng.choice(n_starts, size=schedule.frames_per_video, replace=False)
            else:
                starts = np.arange(n_starts)
            items.extend((vi, int(st), False) for st in np.sort(starts))
        order = rng.permutation(len(items))
        items = [items[i] for i in order]
        if schedule.flip_augment:
            flips = rng.random(len(items)) < 0.5
            items = [(vi, st, bool(fl)) for (vi, st, _), fl in zip(items, flips)]

        total_loss = 0.0
        diverged = False
        for lo in range(0, len(items), schedule.batch_size):
            batch = items[lo:lo + schedule.batch_size]
            frames = np.stack([_maybe_flip_frames(samples[vi].frames[st:st + k], fl)
                               for vi, st, fl in batch])
            flows = np.stack([_maybe_flip_flows(samples[vi].flows[st:st + k], fl)
                              for vi, st, fl in batch])
            logits, loc = network.forward(
                frames if network.mode != "flow" else None,
                flows if network.mode != "rgb" else None)
            loss = multibox_loss_batch(logits, loc,
                                       [assignment(*item) for item in batch],
                                       cfg.neg_pos_ratio)
            value = float(loss.data)
            if np.isfinite(value):
                loss.backward()
            if not np.isfinite(value) or any(
                    not np.isfinite(p.tensor.grad).all() for p in params if p.trainable):
                log.error("loss diverged at epoch %d; restoring last checkpoint", epoch)
                restore_parameters(params, parse_parameters(snapshot))
                diverged = True
                break
            opt.transform_grads(params)
            nm.sgd_step(params, lr)
            total_loss += value * len(batch)
        if diverged:
            out.diverged = True
            break
        stats = EpochStats(epoch=epoch, loss=total_loss / len(items), lr=lr)
        if eval_fn is not None and schedule.eval_every and \
                (epoch + 1) % schedule.eval_every == 0:
            stats.eval_map = eval_fn(network)
        out.epochs.append(stats)
        snapshot = dump_parameters(params)
    return out
