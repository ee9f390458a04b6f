"""Adaptive separable convolution and a block-matching kernel estimator.

Each output pixel is a local 2-D filter of its neighbourhood whose kernel is
the outer product of a per-pixel vertical and horizontal 1-D kernel. Kernels
are estimated by exhaustive block matching over a coarse-to-fine pyramid and
expressed as (softened) shifted deltas so that the same operator performs
the alignment.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .global_align import FlowField, warp_array
from .imagecore import Image, blur_decimate, luminance_array, max_pyramid_levels
from .exposure_masks import MaskSet, adaptive_mask

log = logging.getLogger(__name__)

KERNEL_SIZE = 31
SEARCH_RADIUS = 15
BLOCK_SIZE = 8
SOFTEN = np.array([0.25, 0.5, 0.25])
# mean wellness per pixel below which a block casts no vote
MIN_VOTE_WEIGHT = 1e-3


@dataclass(frozen=True)
class SeparableKernelField:
    """Per-pixel vertical (``kv``) and horizontal (``kh``) kernels, each (H, W, K).

    Tap ``i`` of a kernel addresses offset ``i - K // 2``.
    """

    kv: np.ndarray
    kh: np.ndarray
    normalize: bool = field(default=True, repr=False)

    def __post_init__(self):
        kv = np.asarray(self.kv, dtype=np.float64)
        kh = np.asarray(self.kh, dtype=np.float64)
        if kv.shape != kh.shape or kv.ndim != 3:
            raise ParameterError(f"kv and kh must both be (H, W, K), got {kv.shape} and {kh.shape}")
        if kv.shape[2] % 2 == 0:
            raise ParameterError(f"kernel length must be odd, got {kv.shape[2]}")
        if self.normalize:
            kv = kv / kv.sum(axis=2, keepdims=True)
            kh = kh / kh.sum(axis=2, keepdims=True)
        object.__setattr__(self, "kv", kv.astype(np.float32))
        object.__setattr__(self, "kh", kh.astype(np.float32))

    @property
    def size(self):
        return self.kv.shape[2]

    @property
    def shape(self):
        return self.kv.shape[:2]

    @classmethod
    def from_displacement(cls, dx, dy, size=KERNEL_SIZE, soften=True):
        """Delta kernels at integer displacements, optionally smoothed across pixels."""
        half = size // 2
        dx = np.asarray(dx, dtype=np.intp)
        dy = np.asarray(dy, dtype=np.intp)
        if np.abs(dx).max(initial=0) > half or np.abs(dy).max(initial=0) > half:
            raise ParameterError(f"displacement exceeds kernel half-width {half}")
        h, w = dx.shape
        kv = np.zeros((h, w, size))
        kh = np.zeros((h, w, size))
        rows, cols = np.mgrid[0:h, 0:w]
        kv[rows, cols, dy + half] = 1.0
        kh[rows, cols, dx + half] = 1.0
        if soften:
            kv = _soften(kv)
            kh = _soften(kh)
        return cls(kv, kh)


def _soften(k):
    # triangular smoothing across neighbouring pixels keeps block seams soft;
    # uniform regions are unchanged and every kernel still sums to one
    k = ndimage.correlate1d(k, SOFTEN, axis=0, mode="nearest")
    return ndimage.correlate1d(k, SOFTEN, axis=1, mode="nearest")


def asconv_array(a, kv, kh):
    a = np.asarray(a, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    h, w, _ = a.shape
    size = kv.shape[2]
    half = size // 2
    padded = np.pad(a, ((half, half), (half, half), (0, 0)), mode="edge")
    kv = kv.astype(np.float64)
    kh = kh.astype(np.float64)
    rows = [i for i in range(size) if np.any(kv[:, :, i])]
    cols = [j for j in range(size) if np.any(kh[:, :, j])]
    out = np.zeros_like(a)
    for i in rows:
        band = padded[i:i + h]
        acc = np.zeros_like(a)
        for j in cols:
            acc += kh[:, :, j, None] * band[:, j:j + w]
        out += kv[:, :, i, None] * acc
    return out[:, :, 0] if squeeze else out


def asconv(img: Image, kernels: SeparableKernelField) -> Image:
    """``out(p) = sum_ij kv_p[i] kh_p[j] img(p + (j, i))``, edge-clamped, per channel."""
    if kernels.size % 2 == 0:
        raise ParameterError(f"kernel length must be odd, got {kernels.size}")
    if tuple(kernels.shape) != (img.height, img.width):
        raise ParameterError(f"kernel field is {kernels.shape}, image is {img.height}x{img.width}")
    out = asconv_array(img.data, kernels.kv, kernels.kh)
    signed = bool((kernels.kv < 0).any() or (kernels.kh < 0).any())
    return img.with_data(out.astype(np.float32), check=img.check and not signed)


# ---------------------------------------------------------------------------
# Block matching


def _candidates(radius):
    """Search offsets ordered by the tie-break rule: |d|, then dy, then dx."""
    offs = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    offs.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    return offs


def _block_sum(a, block):
    h, w = a.shape
    bh, bw = -(-h // block), -(-w // block)
    padded = np.zeros((bh * block, bw * block))
    padded[:h, :w] = a
    return padded.reshape(bh, block, bw, block).sum(axis=(1, 3))


def _expand(blocks, block, h, w):
    return np.repeat(np.repeat(blocks, block, axis=0), block, axis=1)[:h, :w]


@dataclass
class BlockMatch:
    dx: np.ndarray  # per pixel, int
    dy: np.ndarray
    confidence: np.ndarray
    voted: np.ndarray  # per pixel bool: block had usable weights


def block_match(ref_y, nbr_y, w_ref, w_nbr, radius=SEARCH_RADIUS, block=BLOCK_SIZE) -> BlockMatch:
    """Exhaustive wellness-weighted SAD search on luminance arrays."""
    h, w = ref_y.shape
    if block > h or block > w:
        raise ParameterError(f"block size {block} exceeds image size {h}x{w}")
    pad = ((radius, radius), (radius, radius))
    nbr_p = np.pad(nbr_y, pad, mode="edge")
    wn_p = np.pad(w_nbr, pad, mode="edge")
    offsets = _candidates(radius)
    nums = []
    dens = []
    for dy, dx in offsets:
        ys, xs = radius + dy, radius + dx
        shifted = nbr_p[ys:ys + h, xs:xs + w]
        wt = np.minimum(w_ref, wn_p[ys:ys + h, xs:xs + w])
        nums.append(_block_sum(wt * np.abs(ref_y - shifted), block))
        dens.append(_block_sum(wt, block))
    num = np.stack(nums)
    den = np.stack(dens)
    # candidates whose overlap carries almost no weight cannot be compared
    usable = den >= MIN_VOTE_WEIGHT * block * block
    with np.errstate(invalid="ignore", divide="ignore"):
        cost = np.where(usable & (den > 0), num / np.where(den > 0, den, 1.0), np.inf)
    # argmin returns the first minimum, i.e. the tie-break order of `offsets`
    best_idx = np.argmin(cost, axis=0)
    best = np.take_along_axis(cost, best_idx[None], axis=0)[0]
    masked = cost.copy()
    np.put_along_axis(masked, best_idx[None], np.inf, axis=0)
    second = masked.min(axis=0)
    second = np.where(np.isfinite(second), second, best)
    # `best` is finite wherever the block votes
    with np.errstate(invalid="ignore"):
        conf = np.clip(1.0 - best / (second + 1e-9), 0.0, 1.0)
    off = np.array(offsets)
    bdy = off[best_idx, 0]
    bdx = off[best_idx, 1]
    # a block votes only if it can be compared at its current estimate (offset 0,
    # first in the candidate order); otherwise any winner rests on a sliver of
    # overlap next to clipped content
    voted = usable[0]
    bdy = np.where(voted, bdy, 0)
    bdx = np.where(voted, bdx, 0)
    conf = np.where(voted, conf, 0.0)
    return BlockMatch(
        _expand(bdx, block, h, w).astype(np.intp),
        _expand(bdy, block, h, w).astype(np.intp),
        _expand(conf, block, h, w),
        _expand(voted, block, h, w),
    )


def estimate_kernels_block_match(ref: Image, nbr: Image, masks_ref: MaskSet = None, masks_nbr: MaskSet = None,
                                 radius=SEARCH_RADIUS, block=BLOCK_SIZE, kernel_size=KERNEL_SIZE):
    """Block-matching kernel estimate for aligning ``nbr`` onto ``ref``.

    Returns ``(kernels, displacement, confidence)``. Blocks whose pixels are
    all badly exposed cast no vote and fall back to zero displacement with
    zero confidence.
    """
    if ref.shape[:2] != nbr.shape[:2]:
        raise ParameterError(f"shape mismatch: {ref.shape} vs {nbr.shape}")
    if radius > kernel_size // 2:
        raise ParameterError(f"search radius {radius} exceeds kernel half-width {kernel_size // 2}")
    masks_ref = masks_ref or adaptive_mask(ref)
    masks_nbr = masks_nbr or adaptive_mask(nbr)
    bm = block_match(luminance_array(ref.data), luminance_array(nbr.data),
                     masks_ref.wellness.data[:, :, 0].astype(np.float64),
                     masks_nbr.wellness.data[:, :, 0].astype(np.float64), radius, block)
    kernels = SeparableKernelField.from_displacement(bm.dx, bm.dy, kernel_size)
    flow = FlowField(bm.dx, bm.dy)
    conf = Image(bm.confidence.astype(np.float32))
    return kernels, flow, conf


# ---------------------------------------------------------------------------
# Coarse-to-fine cascade


@dataclass
class AlignedFrame:
    """A neighbour aligned onto the reference grid.

    The alignment is ``asconv(warp(nbr, prewarp), kernels)``; ``displacement``
    is the total committed integer displacement.
    """

    image: Image
    displacement: FlowField
    confidence: Image
    prewarp: FlowField = None
    kernels: SeparableKernelField = None
    voted: np.ndarray = None
    spec: object = None  # ExposureSpec of the aligned source, when known
    levels_used: int = 1

    def apply_to(self, img: Image) -> Image:
        """Apply the same alignment to another image on the neighbour's grid."""
        a = img.data
        if self.prewarp is not None:
            a = warp_array(a, self.prewarp.u, self.prewarp.v)
        if self.kernels is not None:
            a = asconv_array(a, self.kernels.kv, self.kernels.kh)
        return img.with_data(np.asarray(a, dtype=np.float32))


def _upsample_disp(d, h, w):
    up = 2 * np.repeat(np.repeat(d, 2, axis=0), 2, axis=1)
    ph, pw = max(0, h - up.shape[0]), max(0, w - up.shape[1])
    if ph or pw:
        up = np.pad(up, ((0, ph), (0, pw)), mode="edge")
    return up[:h, :w]


def level_radius(radius, level, levels):
    """Search radius at 1-based ``level`` (1 = finest) of an ``levels`` pyramid."""
    if level == levels:
        return radius
    return max(2, math.ceil(radius / 2 ** (levels - level)))


def align_local_pyramid(ref: Image, nbr: Image, levels=3, radius=SEARCH_RADIUS, block=BLOCK_SIZE,
                        kernel_size=KERNEL_SIZE, masks_ref: MaskSet = None, masks_nbr: MaskSet = None) -> AlignedFrame:
    """Coarse-to-fine block matching followed by adaptive separable convolution.

    ``masks_ref``/``masks_nbr`` default to masks computed from the inputs;
    pass masks of the original exposures when the inputs were re-exposed.
    """
    if ref.shape != nbr.shape:
        raise ParameterError(f"shape mismatch: {ref.shape} vs {nbr.shape}")
    if levels < 1:
        raise ParameterError(f"levels must be >= 1, got {levels}")
    masks_ref = masks_ref or adaptive_mask(ref)
    masks_nbr = masks_nbr or adaptive_mask(nbr)
    n = max_pyramid_levels(ref.height, ref.width, levels)
    if n < levels:
        log.warning("local pyramid clamped from %d to %d levels for %dx%d input", levels, n, ref.height, ref.width)

    ry = [luminance_array(ref.data)]
    ny = [luminance_array(nbr.data)]
    wr = [masks_ref.wellness.data[:, :, 0].astype(np.float64)]
    wn = [masks_nbr.wellness.data[:, :, 0].astype(np.float64)]
    for _ in range(n - 1):
        ry.append(blur_decimate(ry[-1]))
        ny.append(blur_decimate(ny[-1]))
        wr.append(blur_decimate(wr[-1]))
        wn.append(blur_decimate(wn[-1]))

    total_x = total_y = None
    bm = None
    pre_x = pre_y = None
    for idx in range(n - 1, -1, -1):
        h, w = ry[idx].shape
        lvl_block = min(block, h, w)
        r = level_radius(radius, idx + 1, n)
        if total_x is None:
            pre_x = np.zeros((h, w), np.intp)
            pre_y = np.zeros((h, w), np.intp)
        else:
            pre_x = _upsample_disp(total_x, h, w)
            pre_y = _upsample_disp(total_y, h, w)
        nyw = warp_array(ny[idx], pre_x, pre_y)
        wnw = warp_array(wn[idx], pre_x, pre_y)
        bm = block_match(ry[idx], nyw, wr[idx], wnw, r, lvl_block)
        total_x = pre_x + bm.dx
        total_y = pre_y + bm.dy

    kernels = SeparableKernelField.from_displacement(bm.dx, bm.dy, kernel_size)
    prewarp = FlowField(pre_x, pre_y)
    aligned = asconv_array(warp_array(nbr.data, pre_x, pre_y), kernels.kv, kernels.kh)
    return AlignedFrame(
        image=nbr.with_data(aligned.astype(np.float32)),
        displacement=FlowField(total_x, total_y),
        confidence=Image(bm.confidence.astype(np.float32)),
        prewarp=prewarp,
        kernels=kernels,
        voted=bm.voted,
        levels_used=n,
    )
