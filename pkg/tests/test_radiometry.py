import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from hdrv.errors import DomainError, ParameterError, ValidationError
from hdrv.imagecore import Domain, Image
from hdrv.radiometry import (AlternatingSequence, ExposureSpec, InputFrame, MultiExposureStack, hat_weight,
                             ldr_to_linear, linear_to_ldr, load_sequence_manifest, load_stack,
                             make_alternating_sequence, merge_stack_to_hdr, mu_l1_loss, mu_tonemap,
                             parse_pattern, save_stack, simulate_exposure_stack, write_sequence_manifest)

EV0 = ExposureSpec.from_ev(0)


def ldr(v):
    return Image(np.asarray(v, dtype=np.float64), Domain.LDR)


def hdr(v):
    return Image(np.asarray(v, dtype=np.float64), Domain.HDR)


# --- ExposureSpec ------------------------------------------------------------

@pytest.mark.parametrize("ev", [-3, -2, -1, 0, 1, 2, 3])
def test_time_from_ev(ev):
    s = ExposureSpec.from_ev(ev, reference_time=0.01)
    assert s.time == pytest.approx(0.01 * 2.0 ** ev, rel=1e-9)
    assert s.gamma == 2.2


def test_spec_rejects_bad_values():
    with pytest.raises(ParameterError):
        ExposureSpec(0, 0.0)
    with pytest.raises(ParameterError):
        ExposureSpec(0, -1.0)
    with pytest.raises(ParameterError):
        ExposureSpec(0, 1.0, gamma=0.0)


# --- linearization -----------------------------------------------------------

def test_ldr_to_linear_examples():
    assert ldr_to_linear(ldr([[0.0]]), ExposureSpec(2, 4.0)).data[0, 0, 0] == 0.0
    assert ldr_to_linear(ldr([[1.0]]), EV0).data[0, 0, 0] == pytest.approx(1.0)
    assert ldr_to_linear(ldr([[0.5]]), EV0).data[0, 0, 0] == pytest.approx(0.21764, abs=1e-5)


def test_linear_to_ldr_examples():
    assert linear_to_ldr(hdr([[4.0]]), EV0).data[0, 0, 0] == 1.0
    assert linear_to_ldr(hdr([[0.21764]]), EV0, 8).data[0, 0, 0] == pytest.approx(128 / 255, abs=1e-7)
    with pytest.raises(ParameterError):
        linear_to_ldr(hdr([[0.1]]), EV0, 12)


def test_doubling_time_halves_linear(rng):
    img = ldr(rng.random((8, 8, 3)))
    a = ldr_to_linear(img, ExposureSpec(0, 0.5)).data.astype(np.float64)
    b = ldr_to_linear(img, ExposureSpec(1, 1.0)).data.astype(np.float64)
    assert np.allclose(b, a / 2, rtol=1e-7, atol=0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 100))
def test_ldr_to_linear_monotone(a, b, t):
    lo, hi = sorted((a, b))
    spec = ExposureSpec(0, t)
    ya = ldr_to_linear(ldr([[lo]]), spec).data[0, 0, 0]
    yb = ldr_to_linear(ldr([[hi]]), spec).data[0, 0, 0]
    assert ya <= yb
    if np.float32(hi) > np.float32(lo) and hi > 1e-3:
        assert ya < yb


def test_input_frame_linear_field():
    img = ldr(np.full((2, 2, 3), 0.25))
    f = InputFrame.from_ldr(img, ExposureSpec.from_ev(-3))
    assert np.array_equal(f.linear.data, ldr_to_linear(img, f.spec).data)


# --- mu-law ------------------------------------------------------------------

def test_mu_tonemap_values():
    out = mu_tonemap(hdr([[0.0, 1.0, 1 / 5000]])).data[0, :, 0]
    assert out[0] == 0.0 and out[1] == pytest.approx(1.0, abs=1e-7)
    assert out[2] == pytest.approx(math.log(2) / math.log(5001), abs=1e-6)
    assert out[2] == pytest.approx(0.08138, abs=1e-5)


def test_mu_tonemap_domain():
    with pytest.raises(DomainError):
        mu_tonemap(hdr([[1.01]]))
    mu_tonemap(hdr([[1 + 5e-7]]))  # within tolerance


def test_mu_l1_loss_examples():
    z = hdr(np.zeros((4, 4, 3)))
    assert mu_l1_loss(z, z) == 0.0
    assert mu_l1_loss(hdr(np.ones((4, 4, 3))), z) == pytest.approx(1.0)
    assert mu_l1_loss(hdr(np.full((4, 4, 3), 1 / 5000)), z) == pytest.approx(0.08138, abs=1e-5)
    with pytest.raises(ParameterError):
        mu_l1_loss(z, hdr(np.zeros((4, 5, 3))))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 3, 1), elements=st.floats(0, 1)),
       hnp.arrays(np.float64, (3, 3, 1), elements=st.floats(0, 1)))
def test_mu_l1_symmetric_nonnegative(a, b):
    la, lb = mu_l1_loss(hdr(a), hdr(b)), mu_l1_loss(hdr(b), hdr(a))
    assert la == lb and la >= 0


# --- merging -----------------------------------------------------------------

def render(radiance, evs, bits=16):
    return simulate_exposure_stack(hdr(radiance), evs, bits)


def test_hat_weight():
    assert hat_weight(np.array([0.0, 0.25, 0.5, 1.0])).tolist() == [0.0, 0.5, 1.0, 0.0]


def test_merge_constant_radiance():
    stack = MultiExposureStack(0, [
        (ExposureSpec(ev, 2.0 ** ev), ldr(np.full((3, 3, 3), (0.1 * 2.0 ** ev) ** (1 / 2.2))))
        for ev in (-1, 0, 1, 2)
    ])
    assert np.allclose(merge_stack_to_hdr(stack).data, 0.1, atol=1e-6)


def test_merge_bright_clipped_fallback():
    stack = render(np.full((2, 2, 3), 1000.0), [-3, 0, 3])
    out = merge_stack_to_hdr(stack)
    # shortest exposure is EV -3: z = 1 -> 1 / 0.125
    assert np.allclose(out.data, 8.0)


def test_merge_dark_clipped_fallback():
    stack = render(np.zeros((2, 2, 3)), [-1, 0, 1])
    assert np.all(merge_stack_to_hdr(stack).data == 0.0)


def test_merge_needs_two_shots():
    with pytest.raises(ParameterError):
        merge_stack_to_hdr(render(np.ones((2, 2, 3)) * 0.1, [0]))


def test_merge_is_exposure_invariant(rng):
    rad = np.exp(rng.normal(-1, 1, (8, 8, 3)))
    stack = render(rad, [-2, 0, 2])
    s = 3.0
    scaled = MultiExposureStack(0, [(ExposureSpec(sp.ev, sp.time * s), img) for sp, img in stack.shots])
    a = merge_stack_to_hdr(stack).data.astype(np.float64)
    b = merge_stack_to_hdr(scaled).data.astype(np.float64)
    assert np.allclose(b, a / s, rtol=1e-6)


def test_merge_ramp_within_one_percent():
    ramp = np.geomspace(1e-3, 50.0, 400).reshape(20, 20, 1).repeat(3, axis=2)
    stack = render(ramp, range(-3, 4))
    merged = merge_stack_to_hdr(stack).data
    unclipped = sum(((img.data > 0) & (img.data < 1)).astype(int) for _, img in stack.shots) >= 2
    rel = np.abs(merged - ramp) / ramp
    assert unclipped.mean() > 0.5
    assert rel[unclipped].max() < 0.01


# --- sequences ---------------------------------------------------------------

def stacks_for(n, evs=range(-3, 4)):
    return [render(np.full((4, 4, 3), 0.2), list(evs)) for _ in range(n)]


def test_sequence_pattern_minus3_0():
    seq = make_alternating_sequence(stacks_for(8), (-3, 0))
    assert [s.ev for _, s in seq.frames] == [-3, 0, -3, 0, -3, 0, -3, 0]


def test_sequence_pattern_minus2_plus1():
    seq = make_alternating_sequence(stacks_for(4), parse_pattern("-2,+1"))
    assert [s.ev for _, s in seq.frames] == [-2, 1, -2, 1]


def test_sequence_errors():
    with pytest.raises(ParameterError):
        make_alternating_sequence(stacks_for(2), (0,))
    with pytest.raises(ParameterError):
        parse_pattern("0,0")
    with pytest.raises(ParameterError):
        parse_pattern("-3,x")
    stacks = stacks_for(3)
    stacks[2] = render(np.full((4, 4, 3), 0.2), [-1, 0, 1])
    with pytest.raises(ValidationError, match=r"frame 2.*EV -3"):
        make_alternating_sequence(stacks, (-3, 0))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=2, max_size=4), st.integers(2, 9))
def test_sequence_never_repeats_adjacent(pattern, n):
    try:
        seq = make_alternating_sequence(stacks_for(n), pattern)
    except ParameterError:
        assert any(pattern[i] == pattern[(i + 1) % len(pattern)] for i in range(len(pattern)))
        return
    evs = [s.ev for _, s in seq.frames]
    assert all(a != b for a, b in zip(evs, evs[1:]))


def test_alternating_sequence_checks_tiling():
    frames = [(ldr(np.zeros((2, 2, 3))), ExposureSpec.from_ev(e)) for e in (-3, 0, 0)]
    with pytest.raises(ValidationError):
        AlternatingSequence(frames, (-3, 0))


# --- simulation --------------------------------------------------------------

def test_simulate_single_noiseless_shot():
    rad = hdr(np.random.default_rng(2).random((5, 5, 3)) * 2)
    stack = simulate_exposure_stack(rad, [0], bits=16)
    assert np.array_equal(stack.shots[0][1].data, linear_to_ldr(rad, EV0, 16).data)


def test_simulate_seeded_noise_is_deterministic():
    rad = hdr(np.full((6, 6, 3), 0.3))
    a = simulate_exposure_stack(rad, [-1, 1], 8, noise_sigma=0.02, seed=9)
    b = simulate_exposure_stack(rad, [-1, 1], 8, noise_sigma=0.02, seed=9)
    c = simulate_exposure_stack(rad, [-1, 1], 8, noise_sigma=0.02, seed=10)
    assert all(np.array_equal(x.data, y.data) for (_, x), (_, y) in zip(a.shots, b.shots))
    assert not np.array_equal(a.shots[0][1].data, c.shots[0][1].data)


def test_simulate_requires_increasing_evs():
    with pytest.raises(ParameterError):
        simulate_exposure_stack(hdr(np.ones((2, 2, 3))), [0, 0])


def test_stack_requires_matching_shapes():
    with pytest.raises(ValidationError):
        MultiExposureStack(0, [(ExposureSpec.from_ev(0), ldr(np.zeros((2, 2, 3)))),
                               (ExposureSpec.from_ev(1), ldr(np.zeros((3, 2, 3))))])


# --- metadata files ------------------------------------------------------------

def test_stack_round_trip(tmp_path):
    stack = render(np.geomspace(0.01, 5, 48).reshape(4, 4, 3), [-1, 0, 1])
    save_stack(stack, tmp_path / "f0")
    meta = json.loads((tmp_path / "f0" / "stack.json").read_text())
    assert [s["ev"] for s in meta["shots"]] == [-1, 0, 1] and meta["gamma"] == 2.2
    back = load_stack(tmp_path / "f0")
    assert back.evs == [-1, 0, 1]
    for (_, a), (_, b) in zip(stack.shots, back.shots):
        assert np.array_equal(a.data, b.data)


def test_stack_errors_name_the_shot(tmp_path):
    with pytest.raises(ValidationError, match="stack.json"):
        load_stack(tmp_path)
    save_stack(render(np.full((2, 2, 3), 0.2), [-1, 0]), tmp_path / "s")
    (tmp_path / "s" / "ev+0.png").unlink()
    with pytest.raises(ValidationError, match=r"EV \+0"):
        load_stack(tmp_path / "s")


def test_manifest_round_trip(tmp_path):
    stacks = stacks_for(4)
    seq = make_alternating_sequence(stacks, (-3, 0))
    entries = []
    for i, st_ in enumerate(stacks):
        d = tmp_path / f"f{i}"
        save_stack(st_, d)
        entries.append((d / f"ev{seq.frames[i][1].ev:+g}.png", seq.frames[i][1]))
    m = write_sequence_manifest(tmp_path / "m.json", entries, (-3, 0), extra={"note": 1})
    assert m["frames"][1]["file"] == "f1/ev+0.png" and m["note"] == 1
    back = load_sequence_manifest(tmp_path / "m.json")
    assert back.pattern == (-3, 0) and len(back) == 4
    for (a, sa), (b, sb) in zip(seq.frames, back.frames):
        assert sa == sb and np.array_equal(a.data, b.data)
