"""Exposure conversions, mu-law tonemapping, stack merging and sequence assembly."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParameterError, ValidationError
from .imagecore import Domain, Image, load_image, quantize

DEFAULT_GAMMA = 2.2
DEFAULT_MU = 5000.0
REFERENCE_TIME = 1.0


@dataclass(frozen=True)
class ExposureSpec:
    ev: float
    time: float
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise ParameterError(f"exposure time must be positive and finite, got {self.time}")
        if not self.gamma > 0:
            raise ParameterError(f"gamma must be positive, got {self.gamma}")

    @classmethod
    def from_ev(cls, ev, gamma=DEFAULT_GAMMA, reference_time=REFERENCE_TIME):
        return cls(ev, reference_time * 2.0 ** ev, gamma)

    def to_dict(self):
        return {"ev": self.ev, "time_s": self.time, "gamma": self.gamma}


@dataclass
class MultiExposureStack:
    """Co-registered LDR shots of one static frame, sorted by EV."""

    frame_id: int
    shots: list

    def __post_init__(self):
        if not self.shots:
            raise ValidationError(f"stack {self.frame_id} has no shots")
        evs = [s.ev for s, _ in self.shots]
        if any(b <= a for a, b in zip(evs, evs[1:])):
            raise ValidationError(f"stack {self.frame_id}: EVs must be strictly increasing, got {evs}")
        shape = self.shots[0][1].shape
        for spec, img in self.shots:
            if img.shape != shape:
                raise ValidationError(
                    f"stack {self.frame_id}: shot at EV {spec.ev} has shape {img.shape}, expected {shape}")

    @property
    def evs(self):
        return [s.ev for s, _ in self.shots]

    def shot(self, ev):
        for spec, img in self.shots:
            if spec.ev == ev:
                return spec, img
        raise KeyError(ev)


@dataclass
class AlternatingSequence:
    frames: list  # [(Image, ExposureSpec)]
    pattern: tuple

    def __post_init__(self):
        self.pattern = validate_pattern(self.pattern)
        for i, (_, spec) in enumerate(self.frames):
            want = self.pattern[i % len(self.pattern)]
            if spec.ev != want:
                raise ValidationError(f"frame {i} has EV {spec.ev}, pattern requires {want}")

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class InputFrame:
    """An LDR frame paired with its linear radiance estimate."""

    ldr: Image
    linear: Image
    spec: ExposureSpec

    @classmethod
    def from_ldr(cls, ldr, spec):
        return cls(ldr, ldr_to_linear(ldr, spec), spec)


def validate_pattern(pattern):
    pattern = tuple(pattern)
    if len(pattern) < 2:
        raise ParameterError(f"an alternating pattern needs at least 2 exposures, got {list(pattern)}")
    for i in range(len(pattern)):
        if pattern[i] == pattern[(i + 1) % len(pattern)]:
            raise ParameterError(f"pattern {list(pattern)} repeats EV {pattern[i]} on adjacent frames")
    return pattern


def parse_pattern(text):
    """Parse ``"-3,0"`` / ``"-2,+1"`` into a tuple of integer EVs."""
    try:
        evs = tuple(int(tok.strip()) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise ParameterError(f"cannot parse EV pattern {text!r}") from None
    return validate_pattern(evs)


# ---------------------------------------------------------------------------
# Exposure-domain conversions


def ldr_to_linear(img: Image, spec: ExposureSpec) -> Image:
    """Map display values into the linear domain: ``img ** gamma / time``."""
    if spec.time <= 0:
        raise ParameterError(f"exposure time must be positive, got {spec.time}")
    a = np.clip(img.data.astype(np.float64), 0.0, 1.0)
    return Image((a ** spec.gamma / spec.time).astype(np.float32), Domain.HDR)


def _display_encode(linear, spec, bits, noise=None):
    v = np.maximum(np.asarray(linear, dtype=np.float64) * spec.time, 0.0) ** (1.0 / spec.gamma)
    if noise is not None:
        v = v + noise
    top = (1 << bits) - 1
    return (quantize(v, bits).astype(np.float64) / top).astype(np.float32)


def linear_to_ldr(img: Image, spec: ExposureSpec, bits: int = 8) -> Image:
    """Inverse of :func:`ldr_to_linear` with saturation clip and quantization."""
    if bits not in (8, 16):
        raise ParameterError(f"bits must be 8 or 16, got {bits}")
    if not np.all(np.isfinite(img.data)):
        raise ValidationError("linear_to_ldr requires finite input")
    return Image(_display_encode(img.data, spec, bits), Domain.LDR)


def mu_tonemap_array(a, mu=DEFAULT_MU):
    a = np.asarray(a, dtype=np.float64)
    if a.size and (a.min() < -1e-6 or a.max() > 1 + 1e-6):
        raise DomainError(f"mu-law input must lie in [0, 1], got [{a.min()}, {a.max()}]")
    return np.log1p(mu * np.clip(a, 0.0, 1.0)) / math.log1p(mu)


def mu_tonemap(img: Image, mu=DEFAULT_MU) -> Image:
    """mu-law compression ``log(1 + mu H) / log(1 + mu)`` of [0, 1] data."""
    return Image(mu_tonemap_array(img.data, mu).astype(np.float32), Domain.LDR)


def mu_l1_loss(estimate: Image, truth: Image, mu=DEFAULT_MU) -> float:
    """Mean absolute difference between mu-law tonemapped images."""
    if estimate.shape != truth.shape:
        raise ParameterError(f"shape mismatch: {estimate.shape} vs {truth.shape}")
    return float(np.mean(np.abs(mu_tonemap_array(estimate.data, mu) - mu_tonemap_array(truth.data, mu))))


# ---------------------------------------------------------------------------
# Stack merging


def hat_weight(z):
    return np.maximum(0.0, 1.0 - np.abs(2.0 * z - 1.0))


def merge_stack_to_hdr(stack: MultiExposureStack) -> Image:
    """Hat-weighted radiance merge of a gamma-encoded exposure stack.

    Pixels clipped in every shot take the shortest exposure's estimate when
    bright-clipped and the longest exposure's when dark-clipped.
    """
    if len(stack.shots) < 2:
        raise ParameterError(f"stack {stack.frame_id}: merging needs at least 2 shots, got {len(stack.shots)}")
    num = 0.0
    den = 0.0
    for spec, img in stack.shots:
        z = img.data.astype(np.float64)
        w = hat_weight(z)
        num = num + w * (z ** spec.gamma / spec.time)
        den = den + w
    shortest_spec, shortest = min(stack.shots, key=lambda s: s[0].time)
    longest_spec, longest = max(stack.shots, key=lambda s: s[0].time)
    zs = shortest.data.astype(np.float64)
    zl = longest.data.astype(np.float64)
    fallback = np.where(
        zs >= 0.5,
        zs ** shortest_spec.gamma / shortest_spec.time,
        zl ** longest_spec.gamma / longest_spec.time,
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), fallback)
    return Image(out.astype(np.float32), Domain.HDR)


def make_alternating_sequence(stacks, pattern) -> AlternatingSequence:
    """Pick shot ``pattern[i % len(pattern)]`` from stack ``i``."""
    pattern = validate_pattern(pattern)
    frames = []
    for i, stack in enumerate(stacks):
        ev = pattern[i % len(pattern)]
        try:
            spec, img = stack.shot(ev)
        except KeyError:
            raise ValidationError(
                f"frame {i} (stack {stack.frame_id}) has no shot at EV {ev:+g}; available {stack.evs}") from None
        frames.append((img, spec))
    return AlternatingSequence(frames, pattern)


def simulate_exposure_stack(hdr: Image, evs, bits=16, noise_sigma=0.0, seed=0,
                            gamma=DEFAULT_GAMMA, frame_id=0) -> MultiExposureStack:
    """Render a gamma camera's exposure bracket of a linear radiance image.

    Gaussian read noise with standard deviation ``noise_sigma`` is added in
    the display domain before quantization.
    """
    evs = list(evs)
    if any(b <= a for a, b in zip(evs, evs[1:])):
        raise ParameterError(f"EVs must be strictly increasing, got {evs}")
    if not np.all(np.isfinite(hdr.data)):
        raise ValidationError("simulate_exposure_stack requires finite radiance")
    rng = np.random.default_rng(seed)
    shots = []
    for ev in evs:
        spec = ExposureSpec.from_ev(ev, gamma)
        noise = rng.normal(0.0, noise_sigma, hdr.shape) if noise_sigma > 0 else None
        shots.append((spec, Image(_display_encode(hdr.data, spec, bits, noise), Domain.LDR)))
    return MultiExposureStack(frame_id, shots)


# ---------------------------------------------------------------------------
# Metadata files

STACK_METADATA = "stack.json"


def load_stack(stack_dir) -> MultiExposureStack:
    """Load a stack directory described by its ``stack.json``."""
    stack_dir = os.fspath(stack_dir)
    meta_path = os.path.join(stack_dir, STACK_METADATA)
    if not os.path.exists(meta_path):
        raise ValidationError(f"missing stack metadata {meta_path}")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"invalid JSON in {meta_path}: {exc}") from None
    gamma = float(meta.get("gamma", DEFAULT_GAMMA))
    shots = []
    for k, entry in enumerate(meta.get("shots", [])):
        try:
            ev = entry["ev"]
            fname = entry["file"]
            time_s = float(entry.get("time_s", REFERENCE_TIME * 2.0 ** ev))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{meta_path}: shot #{k} is malformed ({exc})") from None
        shot_path = os.path.join(stack_dir, fname)
        if not os.path.exists(shot_path):
            raise ValidationError(f"{meta_path}: shot #{k} (EV {ev:+g}) file {shot_path} not found")
        try:
            spec = ExposureSpec(ev, time_s, gamma)
        except ParameterError as exc:
            raise ValidationError(f"{meta_path}: shot #{k} (EV {ev:+g}): {exc}") from None
        shots.append((spec, load_image(shot_path, Domain.LDR)))
    shots.sort(key=lambda s: s[0].ev)
    return MultiExposureStack(int(meta.get("frame", 0)), shots)


def save_stack(stack: MultiExposureStack, stack_dir, ext=".png", bits=16) -> None:
    from .imagecore import save_image

    os.makedirs(stack_dir, exist_ok=True)
    shots = []
    for spec, img in stack.shots:
        fname = f"ev{spec.ev:+g}{ext}"
        save_image(img, os.path.join(stack_dir, fname), bits=bits)
        shots.append({"ev": spec.ev, "time_s": spec.time, "file": fname})
    gamma = stack.shots[0][0].gamma
    with open(os.path.join(stack_dir, STACK_METADATA), "w") as f:
        json.dump({"frame": stack.frame_id, "shots": shots, "gamma": gamma}, f, indent=2)


def write_sequence_manifest(path, entries, pattern, gamma=DEFAULT_GAMMA, truth=None, extra=None) -> dict:
    """Write a sequence manifest; ``entries`` are ``(file, ExposureSpec)`` pairs.

    ``extra`` keys are stored alongside and ignored on load.
    """
    base = os.path.dirname(os.path.abspath(path))
    manifest = {
        "pattern": list(pattern),
        "gamma": gamma,
        "frames": [
            {"index": i, "file": os.path.relpath(os.path.abspath(f), base), "ev": s.ev, "time_s": s.time}
            for i, (f, s) in enumerate(entries)
        ],
    }
    if truth is not None:
        manifest["truth"] = [os.path.relpath(os.path.abspath(t), base) if t else None for t in truth]
    if extra:
        manifest.update(extra)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def load_sequence_manifest(path) -> AlternatingSequence:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ValidationError(f"manifest {path} not found")
    try:
        with open(path) as f:
            manifest = json.load(f)
        base = os.path.dirname(os.path.abspath(path))
        gamma = float(manifest.get("gamma", DEFAULT_GAMMA))
        frames = []
        for entry in manifest["frames"]:
            spec = ExposureSpec(entry["ev"], float(entry["time_s"]), gamma)
            frames.append((load_image(os.path.join(base, entry["file"]), Domain.LDR), spec))
        return AlternatingSequence(frames, tuple(manifest["pattern"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed manifest {path}: {exc}") from None
