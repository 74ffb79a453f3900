"""Multi-frame tubelet detection and two-stream score fusion.

Run:  python demos/06_tubelets_and_fusion.py
"""

import numpy as np

from flowmod.condition import ConditionConfig
from flowmod.detector import (DetectorConfig, Network, detect, detect_tubelet,
                              fuse_scores)
from flowmod.synthdata import GenConfig, generate
from flowmod.tubes import link_tubelets

gen = GenConfig(num_videos=2, num_test=0, frames_per_video=8,
                sprite_size_range=(20, 28), flow_quality="fast")
sample = generate(gen)[0]

print("== tubelet detection over 4-frame windows ==")
cfg = DetectorConfig(anchor_scales=(0.35, 0.6), tubelet_len=4)
net = Network("two_in_one", cfg, ConditionConfig(), seed=0)
q = net.anchors.shape[0]
print(f"{q} anchor cuboids, each scoring 4 consecutive boxes")
windows = []
for start in range(0, len(sample.frames) - cfg.tubelet_len + 1):
    dets = detect_tubelet(net, sample.frames[start:start + 4],
                          sample.flows[start:start + 4], conf_thresh=0.19)
    for d in dets:
        d.start_frame = start
    windows.extend(dets[:3])
print(f"{len(windows)} tubelets above threshold across "
      f"{len(sample.frames) - 3} windows (untrained net, low bar)")
tubes = link_tubelets(windows)
print(f"merged into {len(tubes)} tubes; lengths "
      f"{sorted(t.length for t in tubes)[-5:]}")

print("\n== average score fusion of two streams ==")
det_cfg = DetectorConfig(anchor_scales=(0.35, 0.6))
appearance = Network("two_in_one", det_cfg, ConditionConfig(), seed=1)
flow_stream = Network("flow", det_cfg, seed=2)
from flowmod import numerics as nm

with nm.no_grad():
    logits_a, _ = appearance.forward(sample.frames[:1][:, None],
                                     sample.flows[:1][:, None])
    logits_b, _ = flow_stream.forward(None, sample.flows[:1][:, None])
scores_a = nm.softmax(logits_a, axis=-1).data[0]
scores_b = nm.softmax(logits_b, axis=-1).data[0]
fused = fuse_scores(scores_a, scores_b)
i = int(np.argmax(np.abs(scores_a[:, 1] - scores_b[:, 1])))
print(f"anchor {i}: appearance {scores_a[i].round(3)}")
print(f"          flow       {scores_b[i].round(3)}")
print(f"          fused      {fused[i].round(3)}")
print("fusing a stream with itself is the identity:",
      bool(np.array_equal(fuse_scores(scores_a, scores_a), scores_a)))
