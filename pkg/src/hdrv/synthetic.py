"""Deterministic synthetic HDR scenes with known motion.

Used as ground truth by the test suite and by ``hdrv synth``. A scene is a
textured radiance canvas seen through a moving camera (global motion),
optionally with a textured foreground disc moving on its own (local motion).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imagecore import Domain, Image
from .radiometry import (AlternatingSequence, ExposureSpec, InputFrame, linear_to_ldr, make_alternating_sequence,
                         simulate_exposure_stack)

DATASET_EVS = (-3, -2, -1, 0, 1, 2, 3)
SCENE_KINDS = ("static", "global", "local", "full")
# the fixed scenes the test suite and documentation refer to
SHIPPED_SCENE = dict(n_frames=8, height=128, width=128, pattern=(-3, 0), seed=0, bits=8)
_MARGIN = 48


def smooth_noise(shape, rng, scales=(2.0, 6.0, 18.0), weights=(0.35, 0.4, 0.25)):
    """Zero-mean, unit-variance multi-scale band-limited noise."""
    acc = np.zeros(shape)
    for s, wgt in zip(scales, weights):
        f = ndimage.gaussian_filter(rng.standard_normal(shape), s, mode="wrap")
        acc += wgt * f / f.std()
    return (acc - acc.mean()) / acc.std()


def radiance_canvas(height, width, rng, log_mean=-1.0, log_std=1.1, highlights=4):
    """Colourful log-normal radiance texture with a few bright highlights."""
    base = np.exp(log_mean + log_std * smooth_noise((height, width), rng))
    tint = np.stack([np.exp(0.25 * smooth_noise((height, width), rng, (20.0,), (1.0,))) for _ in range(3)], axis=2)
    canvas = base[:, :, None] * tint
    ys, xs = np.mgrid[0:height, 0:width]
    for _ in range(highlights):
        cy, cx = rng.uniform(0.15, 0.85) * height, rng.uniform(0.15, 0.85) * width
        r = rng.uniform(4.0, 9.0)
        peak = rng.uniform(8.0, 30.0)
        canvas += peak * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * r * r))[:, :, None]
    return canvas


def _sample(canvas, sx, sy):
    out = np.empty(sx.shape + (canvas.shape[2],))
    for c in range(canvas.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(np.log(canvas[:, :, c]), [sy, sx], order=3, mode="nearest")
    return np.exp(out)


def homography_map(h, w, tx=0.0, ty=0.0, angle_deg=0.0, persp=(0.0, 0.0)):
    """Source coordinates for a camera displaced by the given motion.

    Returns the (x, y) canvas-relative coordinates that output pixel (x, y)
    samples; the perspective terms are in units of the half-diagonal.
    """
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    scale = 0.5 * np.hypot(w - 1, h - 1)
    dx, dy = (xs - cx) / scale, (ys - cy) / scale
    th = np.deg2rad(angle_deg)
    c, s = np.cos(th), np.sin(th)
    den = 1.0 + persp[0] * dx + persp[1] * dy
    rx = (c * dx - s * dy) / den
    ry = (s * dx + c * dy) / den
    return rx * scale + cx - tx, ry * scale + cy - ty


@dataclass
class SyntheticScene:
    kind: str
    truth: list  # [Image HDR] per frame
    sequence: AlternatingSequence
    stacks: list  # [MultiExposureStack] per frame (may be empty)
    sources: list  # per-frame canvas sampling maps

    def input_frames(self):
        return [InputFrame.from_ldr(img, spec) for img, spec in self.sequence.frames]


def render_scene(kind="global", n_frames=5, height=128, width=128, pattern=(-3, 0), seed=0, bits=8,
                 noise_sigma=0.0, with_stacks=False, stack_bits=16, motion_scale=1.0) -> SyntheticScene:
    """Render a short alternating-exposure sequence plus per-frame HDR truth."""
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")
    rng = np.random.default_rng(seed)
    ch, cw = height + 2 * _MARGIN, width + 2 * _MARGIN
    canvas = radiance_canvas(ch, cw, rng)
    obj_r = 0.22 * min(height, width)
    obj_tex = radiance_canvas(int(2 * obj_r) + 8, int(2 * obj_r) + 8, rng, log_mean=-0.3, log_std=0.9, highlights=1)
    cam = (kind in ("global", "full"))
    obj = (kind in ("local", "full"))
    # per-frame motion parameters
    g_step = np.array([2.5, -1.5]) * motion_scale
    rot_step = 0.35 * motion_scale
    o_step = np.array([4.0, 2.5]) * motion_scale
    o_start = np.array([width * 0.5, height * 0.5]) - o_step * (n_frames - 1) / 2

    truth, sources = [], []
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    for k in range(n_frames):
        t = k - (n_frames - 1) / 2
        if cam:
            sx, sy = homography_map(height, width, *(g_step * t), rot_step * t, (0.004 * t, -0.003 * t))
        else:
            sx, sy = xs.copy(), ys.copy()
        frame = _sample(canvas, sx + _MARGIN, sy + _MARGIN)
        if obj:
            ox, oy = o_start + o_step * k
            rr = np.hypot(xs - ox, ys - oy)
            alpha = np.clip(obj_r - rr + 0.5, 0.0, 1.0)[:, :, None]
            tex = _sample(obj_tex, xs - ox + obj_tex.shape[1] / 2, ys - oy + obj_tex.shape[0] / 2)
            frame = frame * (1 - alpha) + tex * alpha
        truth.append(Image(frame.astype(np.float32), Domain.HDR))
        sources.append((sx, sy))

    stacks = []
    frames = []
    for k, hdr in enumerate(truth):
        ev = pattern[k % len(pattern)]
        if with_stacks:
            stack = simulate_exposure_stack(hdr, DATASET_EVS, stack_bits, noise_sigma, seed=seed * 1000 + k,
                                            frame_id=k)
            stacks.append(stack)
        spec = ExposureSpec.from_ev(ev)
        if noise_sigma > 0:
            from .radiometry import _display_encode
            noise = np.random.default_rng(seed * 7919 + k).normal(0.0, noise_sigma, hdr.shape)
            ldr = Image(_display_encode(hdr.data, spec, bits, noise), Domain.LDR)
        else:
            ldr = linear_to_ldr(hdr, spec, bits)
        frames.append((ldr, spec))
    seq = make_alternating_sequence(stacks, pattern) if with_stacks else AlternatingSequence(frames, tuple(pattern))
    return SyntheticScene(kind, truth, seq, stacks, sources)


def shipped_scene(kind, **overrides) -> SyntheticScene:
    """One of the fixed reference scenes (8 frames, 128x128, EV -3/0, 8-bit)."""
    return render_scene(kind, **{**SHIPPED_SCENE, **overrides})
