"""End-to-end glue: train a mode, detect over a dataset, link, evaluate.

The five run modes are the single streams ("rgb", "flow", "two_in_one") and
the score-fused pairs ("two_stream" = rgb + flow, "two_in_one_two_stream" =
modulated stream + flow). Fused pairs average per-anchor class scores and
keep the appearance stream's boxes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .condition import ConditionConfig
from .detector import (Detection, DetectorConfig, Network, detect_batch,
                       detect_batch_fused)
from .synthdata import VideoSample
from .training import TrainLog, TrainSchedule, train
from .tubes import (ActionTube, GroundTruthTube, link_detections, nms_tubes,
                    video_map)

RUN_MODES = ("rgb", "flow", "two_in_one", "two_stream", "two_in_one_two_stream")
REPORT_THRESHOLDS = (0.2, 0.5, 0.75)


@dataclass(frozen=True)
class LinkParams:
    lambda_iou: float = 1.0
    min_length: int = 2
    tube_nms_iou: float = 0.3


@dataclass
class Streams:
    """The networks behind a run mode: an appearance-side stream and, for
    fused modes, a separate flow stream."""

    mode: str
    primary: Network
    flow: Network | None = None
    logs: dict[str, TrainLog] = field(default_factory=dict)

    def parameter_count(self) -> int:
        total = self.primary.parameter_count()
        if self.flow is not None:
            total += self.flow.parameter_count()
        return total


def build_streams(mode: str, det_cfg: DetectorConfig,
                  cond_cfg: ConditionConfig | None = None, seed: int = 0) -> Streams:
    if mode not in RUN_MODES:
        raise ValueError(f"unknown run mode {mode!r} (expected one of {RUN_MODES})")
    if mode in ("rgb", "flow", "two_in_one"):
        return Streams(mode, Network(mode, det_cfg, cond_cfg, seed=seed))
    appearance = "rgb" if mode == "two_stream" else "two_in_one"
    return Streams(mode, Network(appearance, det_cfg, cond_cfg, seed=seed),
                   Network("flow", det_cfg, seed=seed))


def split_samples(samples: Sequence[VideoSample], split: str) -> list[VideoSample]:
    return [s for s in samples if s.split == split]


def gt_tubes_of(samples: Sequence[VideoSample]) -> list[GroundTruthTube]:
    return [g for s in samples for g in s.gt_tubes]


def train_streams(streams: Streams, train_split: Sequence[VideoSample],
                  schedule: TrainSchedule, seed: int) -> Streams:
    streams.logs["primary"] = train(streams.primary, train_split, schedule, seed)
    if streams.flow is not None:
        streams.logs["flow"] = train(streams.flow, train_split, schedule, seed)
    return streams


def frame_detections(streams: Streams, samples: Sequence[VideoSample],
                     conf_thresh: float | None = None) -> dict[str, list[list[Detection]]]:
    """Per-video, per-frame detections at the evaluation threshold."""
    out: dict[str, list[list[Detection]]] = {}
    for s in samples:
        cfg = streams.primary.cfg
        thresh = cfg.eval_conf_thresh if conf_thresh is None else conf_thresh
        if streams.flow is None:
            per_frame = detect_batch(
                streams.primary,
                s.frames if streams.primary.mode != "flow" else None,
                s.flows if streams.primary.mode != "rgb" else None,
                conf_thresh=thresh)
        else:
            per_frame = detect_batch_fused(streams.primary, streams.flow,
                                           s.frames, s.flows, conf_thresh=thresh)
        for t, dets in enumerate(per_frame):
            for d in dets:
                d.frame_index = t
                d.video_id = s.video_id
        out[s.video_id] = per_frame
    return out


def link_dataset(per_video: dict[str, list[list[Detection]]], num_classes: int,
                 link: LinkParams = LinkParams()) -> list[ActionTube]:
    tubes: list[ActionTube] = []
    for video_id in sorted(per_video):
        per_frame = per_video[video_id]
        for class_id in range(1, num_classes + 1):
            tubes.extend(link_detections(per_frame, class_id,
                                         lambda_iou=link.lambda_iou,
                                         min_length=link.min_length,
                                         video_id=video_id))
    return nms_tubes(tubes, link.tube_nms_iou)


def evaluate_tubes(tubes: Sequence[ActionTube], gt: Sequence[GroundTruthTube],
                   thresholds: Sequence[float] = REPORT_THRESHOLDS) -> dict:
    """mAP at each requested threshold plus the 0.50:0.95 sweep."""
    sweep = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
    all_thr = tuple(dict.fromkeys(tuple(thresholds) + sweep))
    per = video_map(tubes, gt, all_thr)
    report = {f"map@{t:g}": per[t]["map"] for t in thresholds}
    report["map@0.5:0.95"] = float(np.mean([per[t]["map"] for t in sweep]))
    report["ap@0.5"] = dict(per[0.5]["ap"]) if 0.5 in per else {}
    return report


def evaluate_streams(streams: Streams, test_split: Sequence[VideoSample],
                     link: LinkParams = LinkParams(),
                     thresholds: Sequence[float] = REPORT_THRESHOLDS) -> dict:
    t0 = time.perf_counter()
    per_video = frame_detections(streams, test_split)
    detect_time = time.perf_counter() - t0
    n_frames = sum(len(s.frames) for s in test_split)
    tubes = link_dataset(per_video, streams.primary.cfg.num_classes, link)
    report = evaluate_tubes(tubes, gt_tubes_of(test_split), thresholds)
    report["seconds_per_frame"] = detect_time / max(n_frames, 1)
    report["parameters"] = streams.parameter_count()
    return report


def run_experiment(mode: str, samples: Sequence[VideoSample],
                   det_cfg: DetectorConfig, schedule: TrainSchedule,
                   cond_cfg: ConditionConfig | None = None, seed: int = 0,
                   link: LinkParams = LinkParams()) -> tuple[Streams, dict]:
    """Train `mode` on the train split and evaluate on the test split."""
    streams = build_streams(mode, det_cfg, cond_cfg, seed=seed)
    train_streams(streams, split_samples(samples, "train"), schedule, seed)
    report = evaluate_streams(streams, split_samples(samples, "test"), link)
    return streams, report
