"""HDR quality metrics and dataset diversity statistics.

Quality scores compare an estimate against ground truth after both are
divided by the truth's 99.9th-percentile luminance and clipped to [0, 1];
scores are therefore invariant to a common exposure scale.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DomainError, ParameterError
from .imagecore import Image, luminance_array
from .radiometry import DEFAULT_MU, mu_tonemap_array

PSNR_CAP = 99.0
NORM_PERCENTILE = 99.9
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
HIGHLIGHT = 0.9

# PU21 "banding + glare" encoding (Mantiuk & Azimi 2021), valid for 0.005-10000 cd/m^2
PU21_P1 = 0.353487901
PU21_P2 = 0.3734658629
PU21_P3 = 8.277049286e-05
PU21_P4 = 0.9062562627
PU21_P5 = 0.09150303166
PU21_P6 = 0.9099517204
PU21_P7 = 596.3148142
PU21_L_MIN = 0.005
PU21_L_MAX = 10000.0
PU_PEAK_NITS = 1000.0


@dataclass
class QualityScores:
    psnr_mu: float
    ssim_mu: float
    pu_psnr: float
    pu_ssim: float


@dataclass
class DiversityScores:
    fhlp: float
    ehl: float
    si: float
    cf: float
    stdl: float
    all: float
    dr: float
    degenerate: bool = False


def _pair(estimate, truth):
    e = np.asarray(estimate.data if isinstance(estimate, Image) else estimate, dtype=np.float64)
    t = np.asarray(truth.data if isinstance(truth, Image) else truth, dtype=np.float64)
    if e.shape != t.shape:
        raise ParameterError(f"shape mismatch: estimate {e.shape} vs truth {t.shape}")
    return e, t


def normalization_scale(truth):
    """Truth's 99.9th-percentile luminance (falls back to its max, then 1)."""
    y = luminance_array(truth)
    s = float(np.percentile(y, NORM_PERCENTILE))
    if not s > 0:
        s = float(y.max())
    return s if s > 0 else 1.0


def normalize_pair(estimate, truth):
    e, t = _pair(estimate, truth)
    s = normalization_scale(t)
    return np.clip(e / s, 0.0, 1.0), np.clip(t / s, 0.0, 1.0)


def psnr(a, b, peak=1.0):
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window():
    r = SSIM_WIN // 2
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def ssim(a, b, data_range=1.0):
    """Mean SSIM of two 2-D arrays; Gaussian 11x11 window, valid region only."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ParameterError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape}")
    g = _gaussian_window()
    r = SSIM_WIN // 2

    def filt(x):
        x = ndimage.correlate1d(x, g, axis=0, mode="constant")
        x = ndimage.correlate1d(x, g, axis=1, mode="constant")
        return x[r:-r, r:-r]

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


def psnr_mu(estimate, truth, mu=DEFAULT_MU) -> float:
    e, t = normalize_pair(estimate, truth)
    return psnr(mu_tonemap_array(e, mu), mu_tonemap_array(t, mu))


def ssim_mu(estimate, truth, mu=DEFAULT_MU) -> float:
    e, t = normalize_pair(estimate, truth)
    return ssim(mu_tonemap_array(luminance_array(e), mu), mu_tonemap_array(luminance_array(t), mu))


def pu21_raw(nits):
    """Unscaled PU21 code value for absolute luminance in cd/m^2."""
    y = np.clip(np.asarray(nits, dtype=np.float64), PU21_L_MIN, PU21_L_MAX)
    yp = y ** PU21_P4
    return PU21_P7 * (((PU21_P1 + PU21_P2 * yp) / (1.0 + PU21_P3 * yp)) ** PU21_P5 - PU21_P6)


def pu_encode_array(values, peak_nits=PU_PEAK_NITS):
    v = np.asarray(values, dtype=np.float64)
    if v.size and v.min() < 0:
        raise DomainError(f"PU encoding needs non-negative input, got min {v.min()}")
    lo = pu21_raw(PU21_L_MIN)
    hi = pu21_raw(peak_nits)
    return (pu21_raw(v * peak_nits) - lo) / (hi - lo)


def pu_encode(img: Image, peak_nits=PU_PEAK_NITS) -> Image:
    """PU21 encoding of relative values, 1.0 mapping to ``peak_nits``.

    Output is offset so that black encodes to 0 and rescaled so that
    ``peak_nits`` encodes to 1.
    """
    return Image(pu_encode_array(img.data, peak_nits).astype(np.float32), check=False)


def pu_psnr(estimate, truth, peak_nits=PU_PEAK_NITS) -> float:
    e, t = normalize_pair(estimate, truth)
    return psnr(pu_encode_array(e, peak_nits), pu_encode_array(t, peak_nits))


def pu_ssim(estimate, truth, peak_nits=PU_PEAK_NITS) -> float:
    e, t = normalize_pair(estimate, truth)
    return ssim(pu_encode_array(luminance_array(e), peak_nits), pu_encode_array(luminance_array(t), peak_nits))


def quality_scores(estimate, truth, mu=DEFAULT_MU, peak_nits=PU_PEAK_NITS) -> QualityScores:
    return QualityScores(psnr_mu(estimate, truth, mu), ssim_mu(estimate, truth, mu),
                         pu_psnr(estimate, truth, peak_nits), pu_ssim(estimate, truth, peak_nits))


# ---------------------------------------------------------------------------
# Diversity statistics


def colorfulness(rgb):
    """Hasler-Suesstrunk colourfulness of an (H, W, 3) array."""
    r, g, b = rgb[:, :, 0], rgb[:, :, 1], rgb[:, :, 2]
    rg = r - g
    yb = 0.5 * (r + g) - b
    return float(np.hypot(rg.std(), yb.std()) + 0.3 * np.hypot(rg.mean(), yb.mean()))


def spatial_information(y):
    gx = ndimage.sobel(y, axis=1, mode="nearest")
    gy = ndimage.sobel(y, axis=0, mode="nearest")
    return float(np.hypot(gx, gy).std())


def diversity_metrics(hdr, mu=DEFAULT_MU) -> DiversityScores:
    """Highlight, spatial, colour and dynamic-range statistics of one HDR frame."""
    d = np.asarray(hdr.data if isinstance(hdr, Image) else hdr, dtype=np.float64)
    if d.ndim == 2:
        d = d[:, :, None]
    if d.shape[0] * d.shape[1] < 50:
        raise ParameterError(f"diversity metrics need at least 50 pixels, got {d.shape[0] * d.shape[1]}")
    if not np.all(np.isfinite(d)) or d.min() < 0:
        raise DomainError("diversity metrics need finite, non-negative HDR data")
    y_raw = luminance_array(d)
    scale = float(np.percentile(y_raw, NORM_PERCENTILE))
    degenerate = not scale > 0
    if degenerate:
        scale = float(y_raw.max()) or 1.0
    y = y_raw / scale
    n = y.size
    hl = y > HIGHLIGHT
    fhlp = float(hl.sum()) / n
    ehl = float(np.clip((y[hl] - HIGHLIGHT).sum() / (0.1 * n), 0.0, 1.0))
    ty = mu_tonemap_array(np.clip(y, 0.0, 1.0), mu)
    si = spatial_information(ty)
    if d.shape[2] == 3:
        cf = colorfulness(mu_tonemap_array(np.clip(d / scale, 0.0, 1.0), mu))
    else:
        cf = 0.0
    k = max(1, int(math.ceil(0.02 * n)))
    ys = np.sort(np.maximum(y.ravel(), 1e-6))
    dr = 0.0 if degenerate else float(np.log10(ys[-k:].mean()) - np.log10(ys[:k].mean()))
    return DiversityScores(fhlp, ehl, si, cf, float(ty.std()), float(ty.mean()), max(dr, 0.0), degenerate)


# ---------------------------------------------------------------------------
# Reports

QUALITY_FIELDS = ("psnr_mu", "ssim_mu", "pu_psnr", "pu_ssim")
DIVERSITY_FIELDS = ("fhlp", "ehl", "si", "cf", "stdl", "all", "dr")


def _sig6(v):
    return float(f"{v:.6g}")


@dataclass
class MetricReport:
    mode: str
    rows: list  # dicts with frame_id + metric fields
    aggregates: dict
    extra: dict = field(default_factory=dict)

    @property
    def fields(self):
        return QUALITY_FIELDS if self.mode == "quality" else DIVERSITY_FIELDS

    def to_json_dict(self):
        return {"mode": self.mode, "rows": self.rows, "aggregates": self.aggregates, **self.extra}

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("frame_id",) + self.fields)
            for row in self.rows:
                w.writerow([row["frame_id"]] + [f"{row[k]:.6g}" for k in self.fields])


def dataset_report(items, mode="quality", frame_ids=None) -> MetricReport:
    """Per-frame metric rows plus mean/std aggregates.

    ``items`` holds ``(estimate, truth)`` pairs for ``mode="quality"`` or HDR
    frames for ``mode="diversity"``. Values are rounded to 6 significant
    digits so the CSV and JSON views agree exactly.
    """
    items = list(items)
    if not items:
        raise ParameterError("dataset_report needs at least one frame")
    if mode not in ("quality", "diversity"):
        raise ParameterError(f"mode must be 'quality' or 'diversity', got {mode!r}")
    if frame_ids is None:
        frame_ids = [str(i) for i in range(len(items))]
    if len(frame_ids) != len(items):
        raise ParameterError("frame_ids and items differ in length")
    rows = []
    flagged = []
    for fid, item in zip(frame_ids, items):
        if mode == "quality":
            scores = asdict(quality_scores(*item))
        else:
            scores = asdict(diversity_metrics(item))
            if scores.pop("degenerate"):
                flagged.append(fid)
        rows.append({"frame_id": fid, **{k: _sig6(v) for k, v in scores.items()}})
    fields_ = QUALITY_FIELDS if mode == "quality" else DIVERSITY_FIELDS
    aggregates = {}
    for k in fields_:
        vals = np.array([r[k] for r in rows])
        aggregates[k] = {"mean": _sig6(vals.mean()), "std": _sig6(vals.std())}
    extra = {"degenerate_frames": flagged} if mode == "diversity" else {}
    return MetricReport(mode, rows, aggregates, extra)
