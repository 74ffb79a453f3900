"""flowmod: flow-conditioned single-stream action detection at desk scale.

A small float64 autodiff core drives an anchor-box detector whose low-level
RGB features can be scaled and shifted by maps derived from optical flow.
Around it: two stand-in flow estimators, a synthetic moving-sprite video
generator whose classes are motion patterns, tube linking, and video-mAP
evaluation.
"""

from .condition import ConditionConfig, ConditionModule, ModulationParams, modulate
from .detector import (Detection, DetectorConfig, Network, TubeletDetection,
                       decode_boxes, detect, detect_batch, detect_tubelet,
                       encode_boxes, fuse_scores, generate_anchors,
                       match_anchors, multibox_loss, nms)
from .flow import estimate_flow, read_flow, read_ppm, write_flow, write_ppm
from .numerics import Parameter, Tensor, no_grad, parameter_count, sgd_step
from .pipeline import LinkParams, Streams, build_streams, run_experiment
from .synthdata import GenConfig, VideoSample, frame_shuffled, generate
from .training import TrainSchedule, train
from .tubes import (ActionTube, GroundTruthTube, link_detections,
                    link_tubelets, nms_tubes, spatial_iou, tube_iou, video_map)

__version__ = "0.1.0"
