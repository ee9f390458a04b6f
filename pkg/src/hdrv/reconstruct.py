"""Per-frame HDR reconstruction from a reference frame and its two neighbours.

Pipeline per centre frame: linearize, fit and apply the global offset-basis
warp to each neighbour, refine with the local block-matching/ASConv cascade,
then fuse all three sources in the linear domain with well-exposedness
weights.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import global_align as ga
from .errors import DegenerateInputError, HdrvError, ParameterError
from .imagecore import Domain, Image, luminance_array
from .local_align import BLOCK_SIZE, KERNEL_SIZE, SEARCH_RADIUS, AlignedFrame, align_local_pyramid
from .exposure_masks import MaskSet, adaptive_mask, wellness_array
from .radiometry import DEFAULT_GAMMA, DEFAULT_MU, AlternatingSequence, InputFrame, ldr_to_linear

log = logging.getLogger(__name__)

REFERENCE_WEIGHT = 2.0
SATURATION_WELLNESS = 0.02
# display values this close to 0 or 1 in any channel count as clipped
CLIP_MARGIN = 0.005


@dataclass
class ReconstructionConfig:
    pattern: tuple = (-3, 0)
    gamma: float = DEFAULT_GAMMA
    mu: float = DEFAULT_MU
    levels: int = 3
    radius: int = SEARCH_RADIUS
    block: int = BLOCK_SIZE
    kernel_size: int = KERNEL_SIZE
    global_levels: int = 3
    global_iters: int = 100
    global_step: float = 1.0
    align: bool = True
    dump_intermediates: bool = False

    def __post_init__(self):
        self.pattern = tuple(self.pattern)
        if self.levels < 1 or self.global_levels < 1:
            raise ParameterError("pyramid levels must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ParameterError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 1 <= self.radius <= self.kernel_size // 2:
            raise ParameterError(f"radius must lie in [1, {self.kernel_size // 2}], got {self.radius}")
        if self.block < 1 or self.global_iters < 0 or not self.global_step > 0:
            raise ParameterError("block, global_iters and global_step must be positive")
        if not (self.gamma > 0 and self.mu > 0):
            raise ParameterError("gamma and mu must be positive")

    def to_dict(self):
        d = asdict(self)
        d["pattern"] = list(self.pattern)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown reconstruction option(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class FrameResult:
    hdr: Image
    global_alpha_prev: np.ndarray
    global_alpha_next: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    intermediates: dict = field(default_factory=dict)


def fuse_weight(ldr: Image) -> np.ndarray:
    """Well-exposedness, zeroed where any channel is clipped (its value is biased)."""
    return np.where(clipped_pixels(ldr), 0.0, wellness_array(ldr.data))


def fuse_aligned(ref: InputFrame, aligned_prev: AlignedFrame, aligned_next: AlignedFrame,
                 ref_weight=REFERENCE_WEIGHT) -> Image:
    """Exposure-weighted average of the three linearized sources.

    Neighbour weights are scaled by their per-pixel alignment confidence.
    Where every weight vanishes (all sources clipped) a clipped value only
    bounds the radiance: bright pixels take the largest linearization among
    the reference and any confident neighbour, dark pixels the smallest.
    With no confident neighbour that is the reference linearization.
    """
    ref_lin = ref.linear.data.astype(np.float64)
    w_ref = ref_weight * fuse_weight(ref.ldr)
    num = w_ref[..., None] * ref_lin
    den = w_ref
    hi = ref_lin.copy()
    lo = ref_lin.copy()
    for a in (aligned_prev, aligned_next):
        if a.spec is None:
            raise ParameterError("aligned neighbour carries no exposure metadata")
        if a.image.shape != ref.ldr.shape:
            raise ParameterError(f"aligned neighbour shape {a.image.shape} != reference {ref.ldr.shape}")
        conf = a.confidence.data[:, :, 0].astype(np.float64)
        lin = ldr_to_linear(a.image, a.spec).data.astype(np.float64)
        w = fuse_weight(a.image) * conf
        num = num + w[..., None] * lin
        den = den + w
        trusted = (conf > 0)[..., None]
        hi = np.where(trusted, np.maximum(hi, lin), hi)
        lo = np.where(trusted, np.minimum(lo, lin), lo)
    fallback = np.where(ref.ldr.data >= 0.5, hi, lo)
    out = np.where(den[..., None] > 0, num / np.where(den > 0, den, 1.0)[..., None], fallback)
    return Image(out.astype(np.float32), Domain.HDR)


def clipped_pixels(ldr: Image) -> np.ndarray:
    d = ldr.data
    return np.any((d <= CLIP_MARGIN) | (d >= 1.0 - CLIP_MARGIN), axis=2)


def voting_masks(ldr: Image) -> MaskSet:
    """Exposure masks whose wellness is zeroed on clipped pixels.

    A pixel clipped in one channel can keep a sizeable wellness, yet its
    luminance no longer matches the other exposure; it must not vote.
    """
    m = adaptive_mask(ldr)
    w = np.where(clipped_pixels(ldr), 0.0, m.wellness.data[:, :, 0])
    combined = m.combined.data.copy()
    combined[:, :, 1] = w
    return MaskSet.from_combined(Image(combined, Domain.HDR))


def common_luminance(frame: InputFrame, ref_spec) -> np.ndarray:
    """Luminance re-exposed to the reference exposure, display-encoded and clipped."""
    y = luminance_array(frame.linear.data) * ref_spec.time
    return np.clip(y, 0.0, 1.0) ** (1.0 / ref_spec.gamma)


def identity_alignment(nbr: InputFrame) -> AlignedFrame:
    h, w = nbr.ldr.height, nbr.ldr.width
    return AlignedFrame(
        image=nbr.ldr,
        displacement=ga.FlowField.zeros(h, w),
        confidence=Image(np.ones((h, w), np.float32)),
        spec=nbr.spec,
    )


def align_neighbor(cur: InputFrame, nbr: InputFrame, cfg: ReconstructionConfig):
    """Two-stage alignment of ``nbr`` onto ``cur``; returns (AlignedFrame, alpha, diagnostics)."""
    diag = {}
    ref_y = common_luminance(cur, cur.spec)
    nbr_y = common_luminance(nbr, cur.spec)
    valid = ((wellness_array(cur.ldr.data) >= SATURATION_WELLNESS) & (wellness_array(nbr.ldr.data) >= SATURATION_WELLNESS)
             & ~clipped_pixels(cur.ldr) & ~clipped_pixels(nbr.ldr))
    diag["global_valid_fraction"] = float(valid.mean())

    t0 = time.perf_counter()
    try:
        fit = ga.fit_global(ref_y, nbr_y, cfg.global_levels, cfg.global_iters, cfg.global_step, valid)
        alpha = fit.alpha
        diag["global_loss"] = fit.loss
        diag["global_identity_loss"] = fit.identity_loss
    except DegenerateInputError:
        # nothing to compare in a fully clipped pair; keep the identity
        alpha = np.zeros(ga.N_BASES)
        diag["global_loss"] = None
        diag["global_identity_loss"] = None
        diag["global_fallback"] = "no valid pixels"
    except HdrvError as exc:
        raise type(exc)(f"global alignment: {exc}") from exc
    diag["global_seconds"] = time.perf_counter() - t0

    bases = ga.make_offset_bases(cur.ldr.height, cur.ldr.width)
    flow = ga.compose_global_flow(alpha, bases)
    nbr_ldr_g = ga.warp_bilinear(nbr.ldr, flow)
    nbr_y_g = ga.warp_array(nbr_y, flow.u, flow.v)

    t0 = time.perf_counter()
    try:
        local = align_local_pyramid(
            Image(ref_y.astype(np.float32), Domain.LDR),
            Image(nbr_y_g.astype(np.float32), Domain.LDR),
            levels=cfg.levels, radius=cfg.radius, block=cfg.block, kernel_size=cfg.kernel_size,
            masks_ref=voting_masks(cur.ldr), masks_nbr=voting_masks(nbr_ldr_g),
        )
    except HdrvError as exc:
        raise type(exc)(f"local alignment: {exc}") from exc
    diag["local_seconds"] = time.perf_counter() - t0

    aligned_ldr = local.apply_to(nbr_ldr_g)
    # blocks without votes sit in regions the reference cannot verify; there
    # the global alignment is trusted as is
    conf = np.where(local.voted, local.confidence.data[:, :, 0], 1.0)
    total = local.displacement
    diag["local_mean_confidence"] = float(local.confidence.data.mean())
    diag["local_voted_fraction"] = float(local.voted.mean())
    diag["local_mean_displacement"] = float(np.hypot(total.u, total.v).mean())
    diag["local_levels_used"] = local.levels_used
    aligned = AlignedFrame(
        image=aligned_ldr,
        displacement=total,
        confidence=Image(conf.astype(np.float32)),
        prewarp=local.prewarp,
        kernels=local.kernels,
        voted=local.voted,
        spec=nbr.spec,
        levels_used=local.levels_used,
    )
    return aligned, alpha, diag, flow


def reconstruct_frame(prev: InputFrame, cur: InputFrame, next: InputFrame, cfg: ReconstructionConfig = None) -> FrameResult:
    cfg = cfg or ReconstructionConfig()
    for name, f in (("prev", prev), ("next", next)):
        if f.ldr.shape != cur.ldr.shape:
            raise ParameterError(f"{name} frame shape {f.ldr.shape} != reference {cur.ldr.shape}")
    diagnostics = {}
    intermediates = {}
    zero = np.zeros(ga.N_BASES)
    if not cfg.align:
        ap, an = identity_alignment(prev), identity_alignment(next)
        alphas = (zero, zero)
    else:
        ap, alpha_p, dp, flow_p = align_neighbor(cur, prev, cfg)
        if next is prev:
            an, alpha_n, dn, flow_n = ap, alpha_p, dp, flow_p
        else:
            an, alpha_n, dn, flow_n = align_neighbor(cur, next, cfg)
        alphas = (alpha_p, alpha_n)
        diagnostics["prev"] = dp
        diagnostics["next"] = dn
        if cfg.dump_intermediates:
            for tag, a, fl in (("prev", ap, flow_p), ("next", an, flow_n)):
                intermediates[f"{tag}_global_flow"] = Image(np.stack([fl.u, fl.v, np.zeros_like(fl.u)], 2), check=False)
                intermediates[f"{tag}_displacement"] = Image(
                    np.stack([a.displacement.u, a.displacement.v, np.zeros_like(a.displacement.u)], 2), check=False)
                intermediates[f"{tag}_confidence"] = a.confidence
                intermediates[f"{tag}_aligned"] = a.image
    if cfg.dump_intermediates:
        intermediates["ref_masks"] = adaptive_mask(cur.ldr).combined
    hdr = fuse_aligned(cur, ap, an)
    return FrameResult(hdr, np.asarray(alphas[0]), np.asarray(alphas[1]), diagnostics, intermediates)


def default_workers():
    try:
        return max(1, int(os.environ.get("HDRV_THREADS", "1")))
    except ValueError:
        return 1


def frame_windows(n):
    """(prev, cur, next) indices per frame; boundary frames duplicate their only neighbour."""
    if n < 3:
        raise ParameterError(f"a sequence needs at least 3 frames, got {n}")
    out = []
    for i in range(n):
        if i == 0:
            out.append((1, 0, 1))
        elif i == n - 1:
            out.append((n - 2, n - 1, n - 2))
        else:
            out.append((i - 1, i, i + 1))
    return out


def reconstruct_video(seq: AlternatingSequence, cfg: ReconstructionConfig = None, workers=None) -> list:
    """Reconstruct every frame; output order and values do not depend on ``workers``."""
    cfg = cfg or ReconstructionConfig(pattern=seq.pattern)
    frames = [InputFrame.from_ldr(img, spec) for img, spec in seq.frames]
    windows = frame_windows(len(frames))
    workers = default_workers() if workers is None else max(1, int(workers))

    def run(i):
        p, c, n = windows[i]
        t0 = time.perf_counter()
        try:
            res = reconstruct_frame(frames[p], frames[c], frames[n], cfg)
        except HdrvError as exc:
            raise type(exc)(f"frame {i}: {exc}") from exc
        res.diagnostics["frame"] = i
        res.diagnostics["neighbors"] = [p, n]
        res.diagnostics["seconds"] = time.perf_counter() - t0
        return res

    if workers == 1:
        return [run(i) for i in range(len(frames))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(len(frames))))
