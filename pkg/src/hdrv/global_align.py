"""Global motion as a weighted sum of eight fixed offset fields.

The bases span the tangent space of planar homographies: two translations,
rotation and shear, two axis scalings and two quadratic (perspective) terms.
Each basis is scaled so that its largest displacement on the grid is one
pixel, which makes the weights read directly as pixel amplitudes.

Weights are fitted by minimising a Charbonnier photometric loss between the
reference and the backward-warped neighbour, coarse to fine.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, NumericError, ParameterError
from .imagecore import Image, blur_decimate, max_pyramid_levels

log = logging.getLogger(__name__)

N_BASES = 8
CHARBONNIER_EPS = 1e-3
BASIS_NAMES = ("tx", "ty", "rot", "shear", "sx", "sy", "px", "py")


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement in pixels; ``u`` points right, ``v`` down."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float32)
        v = np.asarray(self.v, dtype=np.float32)
        if u.shape != v.shape or u.ndim != 2:
            raise ParameterError(f"flow components must be equal 2-D arrays, got {u.shape} and {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ParameterError("flow field contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self):
        return self.u.shape[0]

    @property
    def width(self):
        return self.u.shape[1]

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    def __add__(self, other):
        return FlowField(self.u + other.u, self.v + other.v)

    def endpoint_error(self, other, mask=None):
        err = np.hypot(self.u.astype(np.float64) - other.u, self.v.astype(np.float64) - other.v)
        return float(err[mask].mean() if mask is not None else err.mean())


@dataclass(frozen=True)
class OffsetBases:
    u: np.ndarray  # (8, H, W)
    v: np.ndarray

    @property
    def shape(self):
        return self.u.shape[1:]

    def __getitem__(self, k):
        return FlowField(self.u[k], self.v[k])

    def __len__(self):
        return self.u.shape[0]


def normalized_grid(height, width):
    """Pixel-centre coordinates mapped to [-1, 1] along each axis."""
    x = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    y = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    return np.meshgrid(x, y)


def make_offset_bases(height: int, width: int) -> OffsetBases:
    if height < 8 or width < 8:
        raise ParameterError(f"offset bases need a grid of at least 8x8, got {height}x{width}")
    x, y = normalized_grid(height, width)
    one, zero = np.ones_like(x), np.zeros_like(x)
    fields = [
        (one, zero),          # translation x
        (zero, one),          # translation y
        (-y, x),              # rotation
        (y, x),               # shear
        (x, zero),            # scale x
        (zero, y),            # scale y
        (x * x, x * y),       # perspective x
        (x * y, y * y),       # perspective y
    ]
    u = np.empty((N_BASES, height, width))
    v = np.empty((N_BASES, height, width))
    for k, (fu, fv) in enumerate(fields):
        peak = np.hypot(fu, fv).max()
        u[k] = fu / peak
        v[k] = fv / peak
    return OffsetBases(u, v)


def compose_global_flow(weights, bases: OffsetBases) -> FlowField:
    """Linear combination ``sum_k weights[k] * bases[k]``."""
    a = np.asarray(weights, dtype=np.float64).reshape(-1)
    if a.size != len(bases):
        raise ParameterError(f"expected {len(bases)} weights, got {a.size}")
    return FlowField(np.tensordot(a, bases.u, axes=1), np.tensordot(a, bases.v, axes=1))


# ---------------------------------------------------------------------------
# Bilinear backward warping


def _sample(a, xs, ys, with_grad=False):
    """Bilinear lookup of ``a`` (H, W, C) at float positions, edge-clamped.

    With ``with_grad`` also returns the exact partial derivatives of the
    bilinear interpolant with respect to x and y.
    """
    h, w = a.shape[:2]
    x0f = np.floor(xs)
    y0f = np.floor(ys)
    fx = (xs - x0f)[..., None]
    fy = (ys - y0f)[..., None]
    x0 = x0f.astype(np.intp)
    y0 = y0f.astype(np.intp)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    a00 = a[y0c, x0c]
    a01 = a[y0c, x1c]
    a10 = a[y1c, x0c]
    a11 = a[y1c, x1c]
    top = a00 + (a01 - a00) * fx
    bot = a10 + (a11 - a10) * fx
    out = top + (bot - top) * fy
    if not with_grad:
        return out
    gx = (a01 - a00) * (1 - fy) + (a11 - a10) * fy
    gy = bot - top
    return out, gx, gy


def _grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def warp_array(a, u, v):
    a = np.asarray(a, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    xs, ys = _grid(*a.shape[:2])
    out = _sample(a, xs + u, ys + v)
    return out[:, :, 0] if squeeze else out


def warp_bilinear(img: Image, flow: FlowField) -> Image:
    """Backward warp: ``out(p) = img(p + flow(p))`` with edge clamping."""
    if (flow.height, flow.width) != (img.height, img.width):
        raise ParameterError(f"flow is {flow.height}x{flow.width} but image is {img.height}x{img.width}")
    out = warp_array(img.data, flow.u.astype(np.float64), flow.v.astype(np.float64))
    return img.with_data(out.astype(np.float32))


# ---------------------------------------------------------------------------
# Photometric objective


def _as3(a):
    a = np.asarray(a.data if isinstance(a, Image) else a, dtype=np.float64)
    return a[:, :, None] if a.ndim == 2 else a


def _residuals(ref, nbr, alpha, bases):
    """Warped residual and its Jacobian rows with respect to alpha."""
    flow_u = np.tensordot(alpha, bases.u, axes=1)
    flow_v = np.tensordot(alpha, bases.v, axes=1)
    xs, ys = _grid(*ref.shape[:2])
    warped, gx, gy = _sample(nbr, xs + flow_u, ys + flow_v, with_grad=True)
    return warped - ref, gx, gy


def _valid_weights(valid, shape):
    if valid is None:
        return np.ones(shape[:2])
    m = np.asarray(valid.data if isinstance(valid, Image) else valid, dtype=np.float64)
    if m.ndim == 3:
        m = m[:, :, 0]
    if m.shape != tuple(shape[:2]):
        raise ParameterError(f"valid mask shape {m.shape} does not match image {shape[:2]}")
    return (m > 0.5).astype(np.float64)


def photometric_loss_and_grad(ref, nbr, alpha, bases: OffsetBases, valid=None, eps=CHARBONNIER_EPS):
    """Charbonnier loss of ``warp(nbr, O(alpha)) - ref`` and its alpha-gradient.

    ``valid`` is an optional (H, W) mask of pixels allowed to vote; the loss
    is the mean over valid pixels and channels.
    """
    r = _as3(ref)
    n = _as3(nbr)
    if r.shape != n.shape:
        raise ParameterError(f"shape mismatch: {r.shape} vs {n.shape}")
    if tuple(bases.shape) != r.shape[:2]:
        raise ParameterError(f"bases built for {bases.shape}, images are {r.shape[:2]}")
    m = _valid_weights(valid, r.shape)
    count = m.sum() * r.shape[2]
    if count == 0:
        raise DegenerateInputError("every pixel is masked out of the photometric loss")
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    e, gx, gy = _residuals(r, n, alpha, bases)
    rho = np.sqrt(e * e + eps * eps)
    loss = float((rho * m[..., None]).sum() / count)
    dl = (e / rho) * m[..., None]
    # d loss / d flow, summed over channels
    du = (dl * gx).sum(axis=2)
    dv = (dl * gy).sum(axis=2)
    grad = (np.tensordot(bases.u, du, axes=2) + np.tensordot(bases.v, dv, axes=2)) / count
    return loss, grad


def _gauss_newton_matrix(ref, nbr, alpha, bases, m, eps):
    """IRLS Gauss-Newton approximation of the loss Hessian (8x8)."""
    e, gx, gy = _residuals(ref, nbr, alpha, bases)
    irls = m[..., None] / np.sqrt(e * e + eps * eps)
    j = bases.u[:, :, :, None] * gx[None] + bases.v[:, :, :, None] * gy[None]  # (8, H, W, C)
    jw = j * irls[None]
    count = m.sum() * ref.shape[2]
    return np.tensordot(jw, j, axes=([1, 2, 3], [1, 2, 3])) / count


def _fit_level(ref, nbr, m, alpha, iters, step, level, eps, damping=1e-3):
    """Preconditioned descent with Armijo backtracking; never accepts an uphill step."""
    bases = make_offset_bases(*ref.shape[:2])
    loss, grad = photometric_loss_and_grad(ref, nbr, alpha, bases, m, eps)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at level {level}, iteration 0")
    history = [loss]
    for it in range(1, iters + 1):
        hmat = _gauss_newton_matrix(ref, nbr, alpha, bases, m, eps)
        hmat = hmat + damping * np.diag(np.diag(hmat)) + 1e-12 * np.eye(N_BASES)
        try:
            direction = -np.linalg.solve(hmat, grad)
        except np.linalg.LinAlgError:
            direction = -grad
        slope = float(grad @ direction)
        if slope >= 0:
            direction, slope = -grad, -float(grad @ grad)
        t = step
        accepted = False
        for _ in range(30):
            cand = alpha + t * direction
            cand_loss, cand_grad = photometric_loss_and_grad(ref, nbr, cand, bases, m, eps)
            if not np.isfinite(cand_loss):
                raise NumericError(f"non-finite loss at level {level}, iteration {it}")
            if cand_loss <= loss + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        improvement = loss - cand_loss
        alpha, loss, grad = cand, cand_loss, cand_grad
        history.append(loss)
        if improvement < 1e-10 * max(loss, 1e-12) or np.abs(t * direction).max() < 1e-5:
            break
    return alpha, loss, history


@dataclass
class GlobalFit:
    alpha: np.ndarray
    loss: float
    identity_loss: float
    history: list


def fit_global(ref, nbr, levels=3, iters_per_level=100, step=1.0, valid=None, eps=CHARBONNIER_EPS) -> GlobalFit:
    """Coarse-to-fine fit of the eight basis weights; see :func:`fit_global_weights`."""
    r = _as3(ref)
    n = _as3(nbr)
    if r.shape != n.shape:
        raise ParameterError(f"shape mismatch: {r.shape} vs {n.shape}")
    m = _valid_weights(valid, r.shape)
    if m.sum() == 0:
        raise DegenerateInputError("every pixel is masked out of the global fit")
    n_levels = max_pyramid_levels(r.shape[0], r.shape[1], levels)
    pyr = [(r, n, m)]
    for _ in range(n_levels - 1):
        pr, pn, pm = pyr[-1]
        # a coarse pixel is valid only if its whole footprint was valid
        pyr.append((blur_decimate(pr), blur_decimate(pn), (blur_decimate(pm) > 0.999).astype(np.float64)))

    bases_full = make_offset_bases(*r.shape[:2])
    zero = np.zeros(N_BASES)
    identity_loss, _ = photometric_loss_and_grad(r, n, zero, bases_full, m, eps)
    alpha = zero
    history = []
    for idx in range(n_levels - 1, -1, -1):
        lr, ln, lm = pyr[idx]
        if idx != n_levels - 1:
            # unit-pixel bases: one coarse pixel is two fine pixels for every component
            alpha = alpha * 2.0
        if lm.sum() == 0:
            continue
        alpha, loss, hist = _fit_level(lr, ln, lm, alpha, iters_per_level, step, idx + 1, eps)
        history.append(hist)
    loss, _ = photometric_loss_and_grad(r, n, alpha, bases_full, m, eps)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss at full resolution after fitting")
    if loss > identity_loss:
        alpha, loss = zero, identity_loss
    return GlobalFit(alpha, loss, identity_loss, history)


def fit_global_weights(ref, nbr, levels=3, iters_per_level=100, step=1.0, valid=None) -> np.ndarray:
    """Fit the 8 global weights aligning ``nbr`` onto ``ref``.

    Both inputs must already share an exposure domain. Returns the weight
    vector; the result never scores worse at full resolution than the
    identity.
    """
    return fit_global(ref, nbr, levels, iters_per_level, step, valid).alpha
