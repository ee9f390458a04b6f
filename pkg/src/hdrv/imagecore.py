"""Image container, file I/O, luminance and resampling primitives.

Pixel data is held as ``(H, W, C)`` float32 numpy arrays. All stencil
operations clamp to the edge, and every resampler uses the half-pixel
convention (pixel ``i`` is centred at ``i + 0.5``), so warping, resizing and
pyramids agree with one another.
"""

from __future__ import annotations

import enum
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DecodeError, DomainError, ParameterError, ValidationError

log = logging.getLogger(__name__)

REC709 = np.array([0.2126, 0.7152, 0.0722], dtype=np.float64)
BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
MIN_LEVEL_SIZE = 8
_LDR_TOL = 1e-6


class Domain(enum.Enum):
    LDR = "ldr"  # display-referred, values in [0, 1]
    HDR = "hdr"  # scene-referred linear, values >= 0


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable float32 raster of shape ``(H, W, C)`` with ``C`` in {1, 3}.

    ``check=False`` skips the value-domain checks; it is meant for
    intermediate results (signed filter outputs and the like).
    """

    data: np.ndarray
    domain: Domain = Domain.HDR
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise ParameterError(f"image data must be HxW, HxWx1 or HxWx3, got shape {np.shape(self.data)}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ParameterError(f"image must be at least 1x1, got {a.shape[:2]}")
        if self.check:
            if not np.all(np.isfinite(a)):
                raise ValidationError("image contains non-finite values")
            if self.domain is Domain.LDR:
                if a.min() < -_LDR_TOL or a.max() > 1 + _LDR_TOL:
                    raise DomainError(f"LDR image values must lie in [0, 1], got [{a.min()}, {a.max()}]")
                a = np.clip(a, 0.0, 1.0)
            elif a.min() < 0:
                raise DomainError(f"HDR image values must be >= 0, got min {a.min()}")
        if a is self.data:
            a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data, domain=None, check=None) -> "Image":
        return Image(data, self.domain if domain is None else domain, self.check if check is None else check)

    def __repr__(self):
        return f"Image({self.height}x{self.width}x{self.channels}, {self.domain.value})"


@dataclass(frozen=True)
class Pyramid:
    """Gaussian pyramid; ``levels[0]`` is full resolution."""

    levels: list
    requested_levels: int

    @property
    def clamped(self) -> bool:
        return len(self.levels) < self.requested_levels

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


# ---------------------------------------------------------------------------
# File I/O

_LDR_EXTS = {".png", ".ppm", ".pfm"}


def load_image(path, expected_domain=Domain.LDR) -> Image:
    """Read a .pfm, .png or .ppm file into an :class:`Image`.

    Integer formats are scaled to [0, 1] by their full-scale value. HDR
    images may only come from .pfm files.
    """
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext not in _LDR_EXTS:
        raise ParameterError(f"unsupported image extension {ext!r} for {path}")
    if expected_domain is Domain.HDR and ext != ".pfm":
        raise DomainError(f"HDR images must be stored as .pfm, got {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if ext == ".pfm":
        data = _decode_pfm(raw, path)
    elif ext == ".ppm":
        data = _decode_ppm(raw, path)
    else:
        data = _decode_png(raw, path)

    if expected_domain is Domain.HDR:
        if not np.all(np.isfinite(data)):
            raise ValidationError(f"non-finite value in HDR file {path}")
        if data.min() < 0:
            raise ValidationError(f"negative value in HDR file {path}")
    try:
        return Image(data, expected_domain)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def save_image(img: Image, path, bits=None) -> None:
    """Write ``img`` to ``path``; the format follows the extension.

    .pfm is lossless float32. Integer formats (.png, .ppm) accept LDR images
    only and quantize round-to-nearest to 8 bits, or 16 when ``bits=16``.
    """
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pfm":
        payload = _encode_pfm(img.data)
    elif ext in (".png", ".ppm"):
        if img.domain is not Domain.LDR:
            raise DomainError(f"HDR image cannot be written to integer format {ext} ({path})")
        bits = 8 if bits is None else bits
        if bits not in (8, 16):
            raise ParameterError(f"bits must be 8 or 16, got {bits}")
        q = quantize(img.data, bits)
        payload = _encode_ppm(q, bits) if ext == ".ppm" else _encode_png(q, path)
    else:
        raise ParameterError(f"unsupported image extension {ext!r} for {path}")
    try:
        with open(path, "wb") as f:
            f.write(payload)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def quantize(values, bits):
    """Round-half-up quantization of [0, 1] values to integer codes."""
    top = (1 << bits) - 1
    codes = np.floor(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * top + 0.5)
    return codes.astype(np.uint16 if bits > 8 else np.uint8)


_TOKEN = re.compile(rb"\S+")


def _header_tokens(raw, count, path):
    """Return ``count`` whitespace-separated header tokens and the data offset."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        m = _TOKEN.search(raw, pos)
        if m is None:
            raise DecodeError("truncated header", path, len(raw))
        if raw[m.start():m.start() + 1] == b"#":
            nl = raw.find(b"\n", m.start())
            pos = len(raw) if nl < 0 else nl + 1
            continue
        tokens.append((m.group(), m.start()))
        pos = m.end()
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(raw) or raw[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise DecodeError("missing whitespace after header", path, pos)
    return tokens, pos + 1


def _parse_int(tok, path, minimum=1):
    text, off = tok
    try:
        v = int(text)
    except ValueError:
        raise DecodeError(f"expected integer, found {text[:16]!r}", path, off) from None
    if v < minimum:
        raise DecodeError(f"value {v} below minimum {minimum}", path, off)
    return v


def _decode_pfm(raw, path):
    tokens, offset = _header_tokens(raw, 4, path)
    magic, off0 = tokens[0]
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise DecodeError(f"bad PFM magic {magic[:8]!r}", path, off0)
    width = _parse_int(tokens[1], path)
    height = _parse_int(tokens[2], path)
    try:
        scale = float(tokens[3][0])
    except ValueError:
        raise DecodeError(f"bad PFM scale {tokens[3][0][:16]!r}", path, tokens[3][1]) from None
    if scale == 0 or not np.isfinite(scale):
        raise DecodeError("PFM scale must be finite and non-zero", path, tokens[3][1])
    dtype = "<f4" if scale < 0 else ">f4"
    n = width * height * channels
    if len(raw) - offset < 4 * n:
        raise DecodeError(f"expected {4 * n} payload bytes, found {len(raw) - offset}", path, len(raw))
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset).astype(np.float32)
    # rows are stored bottom-up
    return data.reshape(height, width, channels)[::-1].copy()


def _encode_pfm(data):
    h, w, c = data.shape
    header = f"{'PF' if c == 3 else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(data[::-1], dtype="<f4").tobytes()
    return header + body


def _decode_ppm(raw, path):
    tokens, offset = _header_tokens(raw, 4, path)
    magic, off0 = tokens[0]
    if magic != b"P6":
        raise DecodeError(f"only binary P6 PPM is supported, found {magic[:8]!r}", path, off0)
    width = _parse_int(tokens[1], path)
    height = _parse_int(tokens[2], path)
    maxval = _parse_int(tokens[3], path)
    if maxval > 65535:
        raise DecodeError(f"PPM maxval {maxval} exceeds 65535", path, tokens[3][1])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = width * height * 3
    itemsize = np.dtype(dtype).itemsize
    if len(raw) - offset < n * itemsize:
        raise DecodeError(f"expected {n * itemsize} payload bytes, found {len(raw) - offset}", path, len(raw))
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset)
    return (data.astype(np.float64) / maxval).astype(np.float32).reshape(height, width, 3)


def _encode_ppm(codes, bits):
    h, w, c = codes.shape
    if c == 1:
        codes = np.repeat(codes, 3, axis=2)
    maxval = (1 << bits) - 1
    header = f"P6\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = np.uint8 if bits == 8 else np.dtype(">u2")
    return header + np.ascontiguousarray(codes, dtype=dtype).tobytes()


_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _decode_png(raw, path):
    import cv2

    if raw[:8] != _PNG_SIGNATURE:
        bad = next((i for i, (a, b) in enumerate(zip(raw[:8], _PNG_SIGNATURE)) if a != b), len(raw))
        raise DecodeError("bad PNG signature", path, bad)
    if raw[12:16] != b"IHDR":
        raise DecodeError("PNG does not start with an IHDR chunk", path, 12)
    arr = cv2.imdecode(np.frombuffer(raw, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise DecodeError("PNG payload could not be decoded", path, 8)
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype == np.uint16:
        scale = 65535.0
    else:
        raise DecodeError(f"unsupported PNG sample type {arr.dtype}", path, 24)
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[:, :, :3]
        arr = arr[:, :, ::-1]  # BGR -> RGB
    return (arr.astype(np.float64) / scale).astype(np.float32)


def _encode_png(codes, path):
    import cv2

    arr = codes[:, :, 0] if codes.shape[2] == 1 else codes[:, :, ::-1]
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(arr))
    if not ok:
        raise OSError(f"PNG encoding failed for {path}")
    return buf.tobytes()


# ---------------------------------------------------------------------------
# Pixel operations


def to_luminance(img: Image) -> Image:
    """Rec. 709 relative luminance; single-channel input is returned as is."""
    if img.channels == 1:
        return img
    y = np.tensordot(img.data.astype(np.float64), REC709, axes=([2], [0]))
    if img.domain is Domain.LDR:
        y = np.clip(y, 0.0, 1.0)
    return img.with_data(y.astype(np.float32))


def luminance_array(data):
    """Luminance of a raw ``(H, W, C)`` array as a float64 ``(H, W)`` array."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        return data
    if data.shape[2] == 1:
        return data[:, :, 0]
    return data @ REC709


def _resize_axis(a, n_out, axis):
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    shape = [1] * a.ndim
    shape[axis] = n_out
    f = f.reshape(shape)
    return np.take(a, i0, axis=axis) * (1 - f) + np.take(a, i1, axis=axis) * f


def resample(img: Image, new_h: int, new_w: int) -> Image:
    """Bilinear resize with half-pixel-centred sampling."""
    if new_h < 1 or new_w < 1:
        raise ParameterError(f"target size must be >= 1x1, got {new_h}x{new_w}")
    a = img.data.astype(np.float64)
    a = _resize_axis(_resize_axis(a, new_h, 0), new_w, 1)
    return img.with_data(a.astype(np.float32))


def blur_decimate(a):
    """One pyramid step on a raw array: binomial low-pass, then keep even samples."""
    a = np.asarray(a, dtype=np.float64)
    a = ndimage.correlate1d(a, BINOMIAL5, axis=0, mode="nearest")
    a = ndimage.correlate1d(a, BINOMIAL5, axis=1, mode="nearest")
    h, w = a.shape[0] // 2, a.shape[1] // 2
    return a[: 2 * h : 2, : 2 * w : 2]


def max_pyramid_levels(height, width, requested):
    levels = 1
    h, w = height, width
    while levels < requested and h // 2 >= MIN_LEVEL_SIZE and w // 2 >= MIN_LEVEL_SIZE:
        h, w = h // 2, w // 2
        levels += 1
    return levels


def build_pyramid(img: Image, levels: int = 3) -> Pyramid:
    """Gaussian pyramid with a 5-tap binomial filter and 2x decimation.

    The number of levels is reduced when a level would drop below 8x8;
    ``Pyramid.clamped`` reports that.
    """
    if levels < 1:
        raise ParameterError(f"levels must be >= 1, got {levels}")
    n = max_pyramid_levels(img.height, img.width, levels)
    if n < levels:
        log.warning("pyramid clamped from %d to %d levels for %dx%d input", levels, n, img.height, img.width)
    out = [img]
    a = img.data
    for _ in range(n - 1):
        a = blur_decimate(a)
        out.append(img.with_data(a.astype(np.float32)))
    return Pyramid(out, levels)
