"""Deterministic synthetic videos with motion-defined action classes.

Each video contains one textured sprite whose class is its motion pattern
(up, down, horizontal oscillation, diagonal), never its texture, so a
detector that sees only single frames has nothing to classify with. In
camouflage mode the sprite texture is drawn from the same distribution as
the background, starving per-frame appearance of localization cues as well.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flow import estimate_flow, read_flow, read_ppm, write_flow, write_ppm
from .tubes import GroundTruthTube, format_tube_line, parse_tube_line

log = logging.getLogger(__name__)

MOTION_CLASSES = ("move_up", "move_down", "oscillate_horizontal", "move_diagonal")


class DatasetError(ValueError):
    """Missing or corrupt dataset files."""


@dataclass(frozen=True)
class GenConfig:
    num_videos: int = 60
    num_test: int = 20
    frames_per_video: int = 12
    resolution: int = 64
    classes: tuple[str, ...] = MOTION_CLASSES
    camouflage: bool = True
    texture_seed: int = 0
    noise_level: float = 0.003
    drift: float = 0.0
    flow_quality: str = "iterative"
    sprite_size_range: tuple[int, int] = (26, 34)

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need at least 2 motion classes")
        unknown = set(self.classes) - set(MOTION_CLASSES)
        if unknown:
            raise ValueError(f"unknown motion classes {sorted(unknown)}")
        if not 0 <= self.num_test <= self.num_videos:
            raise ValueError("num_test must be between 0 and num_videos")
        if self.frames_per_video < 2:
            raise ValueError("videos need at least 2 frames to define motion")
        if self.sprite_size_range[1] + 2 >= self.resolution:
            raise ValueError(
                f"sprite up to {self.sprite_size_range[1]}px does not fit in "
                f"{self.resolution}px frames")


@dataclass
class VideoSample:
    video_id: str
    frames: np.ndarray   # (T, H, W, 3) in [0, 1]
    flows: np.ndarray    # (T, H, W, 2), one field per frame
    gt_tubes: list[GroundTruthTube]
    split: str

    def __post_init__(self):
        if len(self.flows) != len(self.frames):
            raise ValueError("need exactly one flow field per frame")
        if self.frames.shape[1:3] != self.flows.shape[1:3]:
            raise ValueError("frame and flow resolutions differ")


def _smooth_noise(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Box-blurred uniform noise rescaled into [0.2, 0.8]."""
    x = rng.random((h + 4, w + 4, 3))
    k = np.ones(5) / 5.0
    x = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 0, x)
    x = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, x)
    lo, hi = x.min(), x.max()
    return 0.2 + 0.6 * (x - lo) / (hi - lo if hi > lo else 1.0)


def _trajectory(name: str, rng: np.random.Generator, h: int, w: int,
                size: int, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer top-left sprite positions (x(t), y(t)) for a motion class.

    Every class moves the sprite every frame, so each frame's flow field
    carries the class signal.
    """
    m = 1
    v = int(rng.integers(2, 4))
    v = max(1, min(v, (min(h, w) - 2 * m - size) // (t - 1)))
    span = v * (t - 1)
    steps = np.arange(t)
    if name == "move_up":
        x0 = int(rng.integers(m, w - m - size + 1))
        y0 = int(rng.integers(m + span, h - m - size + 1))
        return np.full(t, x0), y0 - v * steps
    if name == "move_down":
        x0 = int(rng.integers(m, w - m - size + 1))
        y0 = int(rng.integers(m, h - m - size - span + 1))
        return np.full(t, x0), y0 + v * steps
    if name == "oscillate_horizontal":
        half = int(rng.integers(3, 5))
        amp = min(v * half, w - 2 * m - size)
        half = max(1, amp // v)
        x0 = int(rng.integers(m, w - m - size - v * half + 1))
        y0 = int(rng.integers(m, h - m - size + 1))
        # Triangle wave: constant speed with periodic direction flips.
        xs = [x0]
        direction = 1
        for i in range(1, t):
            if (i - 1) % half == 0 and i > 1:
                direction = -direction
            xs.append(xs[-1] + direction * v)
        return np.array(xs), np.full(t, y0)
    if name == "move_diagonal":
        x0 = int(rng.integers(m, w - m - size - span + 1))
        y0 = int(rng.integers(m, h - m - size - span + 1))
        return x0 + v * steps, y0 + v * steps
    raise ValueError(f"unknown motion class {name!r}")


def _render_video(cfg: GenConfig, index: int) -> VideoSample:
    rng = np.random.default_rng([cfg.texture_seed & 0xFFFFFFFF, index])
    h = w = cfg.resolution
    t = cfg.frames_per_video
    class_idx = index % len(cfg.classes)
    name = cfg.classes[class_idx]
    background = _smooth_noise(rng, h, w)
    size = int(rng.integers(cfg.sprite_size_range[0], cfg.sprite_size_range[1] + 1))
    if cfg.camouflage:
        sprite = _smooth_noise(rng, size, size)
    else:
        sprite = rng.random((size, size, 3))
    xs, ys = _trajectory(name, rng, h, w, size, t)

    frames = np.empty((t, h, w, 3))
    boxes = np.empty((t, 4))
    for i in range(t):
        shift = int(round(cfg.drift * i))
        frame = np.roll(background, (shift, shift), axis=(0, 1)).copy()
        x, y = int(xs[i]), int(ys[i])
        frame[y:y + size, x:x + size] = sprite
        if cfg.noise_level > 0.0:
            frame = frame + rng.normal(0.0, cfg.noise_level, frame.shape)
        frames[i] = np.clip(frame, 0.0, 1.0)
        boxes[i] = (x / w, y / h, (x + size) / w, (y + size) / h)

    flows = np.empty((t, h, w, 2))
    for i in range(t - 1):
        flows[i] = estimate_flow(frames[i], frames[i + 1], cfg.flow_quality)
    flows[t - 1] = flows[t - 2]

    video_id = f"v{index:03d}"
    split = "train" if index < cfg.num_videos - cfg.num_test else "test"
    tube = GroundTruthTube(video_id=video_id, class_id=class_idx + 1,
                           start_frame=0, boxes=boxes)
    return VideoSample(video_id=video_id, frames=frames, flows=flows,
                       gt_tubes=[tube], split=split)


def generate(cfg: GenConfig) -> list[VideoSample]:
    """Render the full dataset; classes cycle through videos so both splits
    stay class-balanced. Deterministic in texture_seed."""
    return [_render_video(cfg, i) for i in range(cfg.num_videos)]


def frame_shuffled(samples: list[VideoSample], seed: int,
                   flow_quality: str = "iterative") -> list[VideoSample]:
    """Appearance-preserving control: permute each video's frames (killing
    the motion pattern), keep labels, and recompute flow on the shuffled
    order. Class labels become uninformative by construction."""
    out = []
    for i, s in enumerate(samples):
        rng = np.random.default_rng([seed & 0xFFFFFFFF, i])
        perm = rng.permutation(len(s.frames))
        frames = s.frames[perm]
        t = len(frames)
        flows = np.empty_like(s.flows)
        for f in range(t - 1):
            flows[f] = estimate_flow(frames[f], frames[f + 1], flow_quality)
        flows[t - 1] = flows[t - 2]
        tubes = [GroundTruthTube(video_id=g.video_id, class_id=g.class_id,
                                 start_frame=g.start_frame, boxes=g.boxes[perm])
                 for g in s.gt_tubes]
        out.append(VideoSample(video_id=s.video_id, frames=frames, flows=flows,
                               gt_tubes=tubes, split=s.split))
    return out


# ----- persistence -------------------------------------------------------------

def write_dataset(samples: list[VideoSample], root: str | Path,
                  class_names: tuple[str, ...], force: bool = False,
                  extra_manifest: dict[str, str] | None = None) -> None:
    root = Path(root)
    manifest = root / "manifest.txt"
    if manifest.exists() and not force:
        raise DatasetError(f"{manifest}: dataset already exists (use force to overwrite)")
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"classes={','.join(class_names)}"]
    for key, value in (extra_manifest or {}).items():
        lines.append(f"{key}={value}")
    for s in samples:
        lines.append(f"video={s.video_id},{s.split}")
        vdir = root / "videos" / s.video_id
        vdir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(s.frames):
            write_ppm(frame, vdir / f"frame_{i:03d}.ppm")
        for i, fl in enumerate(s.flows):
            write_flow(fl, vdir / f"flow_{i:03d}.flo")
        gt_text = "".join(format_tube_line(g, score=1.0) + "\n" for g in s.gt_tubes)
        (vdir / "gt.txt").write_text(gt_text, encoding="utf-8")
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(root: str | Path) -> tuple[list[VideoSample], tuple[str, ...]]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        if root.exists() and not any(root.iterdir()):
            log.warning("%s: empty dataset directory", root)
            return [], ()
        raise DatasetError(f"{manifest}: manifest not found")
    classes: tuple[str, ...] = ()
    videos: list[tuple[str, str]] = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key == "classes":
            classes = tuple(value.split(","))
        elif key == "video":
            vid, _, split = value.partition(",")
            videos.append((vid, split))
    samples = []
    for vid, split in videos:
        vdir = root / "videos" / vid
        frame_paths = sorted(vdir.glob("frame_*.ppm"))
        if not frame_paths:
            raise DatasetError(f"{vdir}: no frames found for listed video")
        frames = np.stack([read_ppm(p) for p in frame_paths])
        flows = []
        for i in range(len(frame_paths)):
            fpath = vdir / f"flow_{i:03d}.flo"
            if not fpath.exists():
                raise DatasetError(f"{fpath}: missing flow field")
            flows.append(read_flow(fpath))
        gt_path = vdir / "gt.txt"
        if not gt_path.exists():
            raise DatasetError(f"{gt_path}: missing ground-truth index")
        tubes = []
        for line in gt_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                t = parse_tube_line(line)
                tubes.append(GroundTruthTube(video_id=t.video_id, class_id=t.class_id,
                                             start_frame=t.start_frame, boxes=t.boxes))
        samples.append(VideoSample(video_id=vid, frames=frames,
                                   flows=np.stack(flows), gt_tubes=tubes, split=split))
    return samples, classes
