"""Optical-flow estimation between frame pairs, plus flow/frame file formats.

Conventions used throughout the package:

* a frame is a float64 array of shape (H, W, 3) with values in [0, 1];
* a flow field is a float64 array of shape (H, W, 2) whose channels are the
  x- and y-velocity in pixels per frame: content at (y, x) in the first
  frame appears at (y + v, x + u) in the second.

Two stand-in estimators of different quality are provided so that
flow-quality sensitivity experiments can be run without any external flow
method: integer block matching (``fast``) and an iterative Horn-Schunck
smoother (``iterative``).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FLO_MAGIC = b"PIEH"

BLOCK_SIZE = 8
SEARCH_RADIUS = 4
HS_SMOOTHNESS = 0.5
HS_ITERATIONS = 100


class FlowFormatError(ValueError):
    """Malformed flow or image file."""


def validate_frame(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"frame must have shape (H, W, 3), got {frame.shape}")
    if not np.isfinite(frame).all() or frame.min() < 0.0 or frame.max() > 1.0:
        raise ValueError("frame values must be finite and in [0, 1]")
    return frame


def _gray(frame: np.ndarray) -> np.ndarray:
    # 8-bit intensity scale; the Horn-Schunck smoothness weight is calibrated
    # against gradients of this magnitude.
    return frame.mean(axis=2) * 255.0


def _block_matching(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h, w = a.shape
    bs, r = BLOCK_SIZE, SEARCH_RADIUS
    hp = -h % bs
    wp = -w % bs
    if hp or wp:
        a = np.pad(a, ((0, hp), (0, wp)), mode="edge")
        b = np.pad(b, ((0, hp), (0, wp)), mode="edge")
    hb, wb = a.shape[0] // bs, a.shape[1] // bs
    # Out-of-frame candidates get a huge sentinel so their SAD never wins.
    bpad = np.pad(b, r, mode="constant", constant_values=1e30)

    # Offsets ordered by radius so ties resolve to the smallest displacement
    # ((0,0) first: identical or textureless frames give exactly zero flow).
    offsets = sorted(
        ((dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)),
        key=lambda o: (o[0] * o[0] + o[1] * o[1], o[0], o[1]))
    sads = np.empty((len(offsets), hb, wb))
    for i, (dy, dx) in enumerate(offsets):
        cand = bpad[r + dy:r + dy + a.shape[0], r + dx:r + dx + a.shape[1]]
        diff = np.abs(a - cand)
        sads[i] = diff.reshape(hb, bs, wb, bs).sum(axis=(1, 3))
    best = sads.argmin(axis=0)
    off = np.asarray(offsets, dtype=np.float64)
    u = off[best, 1].repeat(bs, axis=0).repeat(bs, axis=1)[:h, :w]
    v = off[best, 0].repeat(bs, axis=0).repeat(bs, axis=1)[:h, :w]
    return np.stack([u, v], axis=2)


def _neighbor_average(f: np.ndarray) -> np.ndarray:
    fp = np.pad(f, 1, mode="edge")
    cross = fp[:-2, 1:-1] + fp[2:, 1:-1] + fp[1:-1, :-2] + fp[1:-1, 2:]
    diag = fp[:-2, :-2] + fp[:-2, 2:] + fp[2:, :-2] + fp[2:, 2:]
    return cross / 6.0 + diag / 12.0


def _hs_iterations(a: np.ndarray, b: np.ndarray,
                   u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    avg = 0.5 * (a + b)
    ap = np.pad(avg, 1, mode="edge")
    ix = 0.5 * (ap[1:-1, 2:] - ap[1:-1, :-2])
    iy = 0.5 * (ap[2:, 1:-1] - ap[:-2, 1:-1])
    it = b - a
    denom = HS_SMOOTHNESS + ix * ix + iy * iy
    for _ in range(HS_ITERATIONS):
        ubar = _neighbor_average(u)
        vbar = _neighbor_average(v)
        t = (ix * ubar + iy * vbar + it) / denom
        u = ubar - ix * t
        v = vbar - iy * t
    return u, v


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _warp(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear backward warp: sample img at (x + u, y + v), edges clamped.
    Exact identity for zero flow."""
    h, w = img.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    x = np.clip(xs + u, 0.0, w - 1.0)
    y = np.clip(ys + v, 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = x - x0
    wy = y - y0
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _horn_schunck(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Match-then-refine: integer block matching seeds the field, then
    Horn-Schunck iterations against a warped second frame smooth it and add
    the sub-pixel residual. The seed keeps displacements beyond the
    linearization range recoverable; the refinement removes the blockiness.
    """
    init = _block_matching(a, b)
    u, v = init[..., 0], init[..., 1]
    warped = _warp(b, u, v)
    du, dv = _hs_iterations(a, warped, np.zeros_like(a), np.zeros_like(a))
    return np.stack([u + du, v + dv], axis=2)


def estimate_flow(a: np.ndarray, b: np.ndarray, quality: str = "iterative") -> np.ndarray:
    """Estimate per-pixel motion from frame `a` to frame `b`.

    quality "fast" is integer block matching (8x8 blocks, radius 4);
    "iterative" is a Horn-Schunck style smoothed estimate. Both return a
    (H, W, 2) float array at the input resolution.
    """
    a = validate_frame(a)
    b = validate_frame(b)
    if a.shape != b.shape:
        raise ValueError(f"frame resolutions differ: {a.shape[:2]} vs {b.shape[:2]}")
    ga, gb = _gray(a), _gray(b)
    if quality == "fast":
        return _block_matching(ga, gb)
    if quality == "iterative":
        return _horn_schunck(ga, gb)
    raise ValueError(f"unknown flow quality '{quality}' (expected 'fast' or 'iterative')")


# ----- flow file format ------------------------------------------------------

def write_flow(flow: np.ndarray, path: str | Path) -> None:
    """Write a flow field as magic + int32 width/height + float32 (u,v) pairs."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FlowFormatError(f"flow must have shape (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    if h == 0 or w == 0:
        raise FlowFormatError(f"refusing to write degenerate {h}x{w} flow field")
    payload = flow.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(payload)


def read_flow(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {blob[:4]!r} at byte 0 (expected {FLO_MAGIC!r})")
    if len(blob) < 12:
        raise FlowFormatError(f"{path}: truncated header at byte {len(blob)}")
    w, h = struct.unpack("<ii", blob[4:12])
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: invalid dimensions {w}x{h} at byte 4")
    expected = 12 + 8 * h * w
    if len(blob) < expected:
        raise FlowFormatError(
            f"{path}: truncated payload at byte {len(blob)} (expected {expected} bytes)")
    if len(blob) > expected:
        raise FlowFormatError(f"{path}: trailing bytes after payload at byte {expected}")
    data = np.frombuffer(blob, dtype="<f4", count=2 * h * w, offset=12)
    return data.reshape(h, w, 2).astype(np.float64)


# ----- frame file format (binary PPM) ----------------------------------------

def write_ppm(frame: np.ndarray, path: str | Path) -> None:
    frame = validate_frame(frame)
    h, w = frame.shape[:2]
    pixels = np.rint(frame * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens: list[bytes] = []
    off = 0
    while len(tokens) < 4 and off < len(blob):
        while off < len(blob) and blob[off:off + 1].isspace():
            off += 1
        if blob[off:off + 1] == b"#":
            while off < len(blob) and blob[off] != 0x0A:
                off += 1
            continue
        start = off
        while off < len(blob) and not blob[off:off + 1].isspace():
            off += 1
        tokens.append(blob[start:off])
    if len(tokens) != 4 or tokens[0] != b"P6":
        raise FlowFormatError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FlowFormatError(f"{path}: unsupported maxval {maxval}")
    off += 1  # single whitespace byte after maxval
    expected = off + 3 * h * w
    if len(blob) < expected:
        raise FlowFormatError(f"{path}: truncated pixel data at byte {len(blob)} (expected {expected})")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=3 * h * w, offset=off)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0
