"""The synthetic video generator: motion-defined classes, camouflage mode,
flow statistics, dataset persistence, and the frame-shuffled control.

Run:  python demos/04_synthetic_videos.py
"""

import tempfile
from pathlib import Path

import numpy as np

from flowmod.synthdata import (GenConfig, frame_shuffled, generate,
                               read_dataset, write_dataset)

cfg = GenConfig(num_videos=4, num_test=2, frames_per_video=8, resolution=64,
                sprite_size_range=(20, 28), flow_quality="fast",
                noise_level=0.005)
samples = generate(cfg)

print("== what was generated ==")
for s in samples:
    g = s.gt_tubes[0]
    travel = g.boxes[-1, :2] - g.boxes[0, :2]
    print(f"{s.video_id} [{s.split:>5}] class={cfg.classes[g.class_id - 1]:>22} "
          f"net travel (dx, dy) = ({travel[0]:+.2f}, {travel[1]:+.2f})")

print("\n== the class lives in the motion, the texture carries nothing ==")
recolored = generate(GenConfig(**{**cfg.__dict__, "texture_seed": 1234}))
same_labels = all(
    [g.class_id for g in a.gt_tubes] == [g.class_id for g in b.gt_tubes]
    for a, b in zip(samples, recolored))
pixels_differ = any(not np.array_equal(a.frames, b.frames)
                    for a, b in zip(samples, recolored))
print(f"new textures, same labels: {same_labels}; pixels changed: {pixels_differ}")

print("\n== flow concentrates on the actor ==")
s = samples[0]
g = s.gt_tubes[0]
h, w = s.frames.shape[1:3]
inside, outside = [], []
for t in range(len(s.frames) - 1):
    x0, y0, x1, y1 = (g.boxes[t] * [w, h, w, h]).astype(int)
    mask = np.zeros((h, w), dtype=bool)
    mask[y0:y1, x0:x1] = True
    mag = np.abs(s.flows[t]).mean(axis=2)
    inside.append(mag[mask].mean())
    outside.append(mag[~mask].mean())
print(f"mean |flow| inside boxes {np.mean(inside):.3f} vs outside "
      f"{np.mean(outside):.3f} (ratio {np.mean(inside)/np.mean(outside):.1f}x)")

print("\n== frame-shuffled control: appearance kept, motion destroyed ==")
shuffled = frame_shuffled(samples, seed=0, flow_quality="fast")
s2 = shuffled[0]


def mean_v_inside(sample):
    g = sample.gt_tubes[0]
    vs = []
    for t in range(len(sample.frames) - 1):
        x0, y0, x1, y1 = (g.boxes[t] * [w, h, w, h]).astype(int)
        vs.append(sample.flows[t][y0:y1, x0:x1, 1].mean())
    return np.array(vs)


orig_v, shuf_v = mean_v_inside(s), mean_v_inside(s2)
print(f"{cfg.classes[s.gt_tubes[0].class_id - 1]}: per-frame vertical flow sign "
      f"consistent {np.mean(np.sign(orig_v) == np.sign(orig_v[0])):.0%} originally, "
      f"{np.mean(np.sign(shuf_v) == np.sign(shuf_v[0])):.0%} after shuffling "
      f"- labels unchanged: "
      f"{[g.class_id for g in s2.gt_tubes] == [g.class_id for g in s.gt_tubes]}")

print("\n== persistence round trip ==")
with tempfile.TemporaryDirectory() as d:
    root = Path(d) / "dataset"
    write_dataset(samples, root, cfg.classes)
    files = sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())
    print(f"{len(files)} files; first few:", [str(f) for f in files[:4]])
    back, classes = read_dataset(root)
    drift = max(np.abs(a.frames - b.frames).max() for a, b in zip(samples, back))
    print(f"classes {classes == cfg.classes}, max pixel drift {drift:.5f} "
          f"(within 8-bit quantization)")
