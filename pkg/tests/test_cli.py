import json
import os
import shutil

import numpy as np
import pytest

from hdrv.cli import EXIT_INVALID, EXIT_OK, main
from hdrv.imagecore import Domain, Image, load_image, save_image
from hdrv.radiometry import load_sequence_manifest, save_stack, simulate_exposure_stack
from hdrv.synthetic import DATASET_EVS, radiance_canvas


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    assert main(["synth", str(root), "--kind", "full", "--frames", "8", "--height", "40", "--width", "40"]) == 0
    return root


@pytest.fixture(scope="module")
def manifest(scene, tmp_path_factory):
    path = tmp_path_factory.mktemp("seq") / "seq.json"
    assert main(["sequence", str(scene), str(path), "--pattern=-3,0"]) == 0
    return path


@pytest.fixture(scope="module")
def recon(manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("rec")
    assert main(["reconstruct", str(manifest), str(out), "--workers", "1"]) == 0
    return out


def _pfms(d):
    return sorted(n for n in os.listdir(d) if n.endswith(".pfm"))


# --- merge ----------------------------------------------------------------------

def test_merge_seven_shots(tmp_path):
    rng = np.random.default_rng(8)
    # scaled so that every pixel stays below the shortest exposure's clip point
    hdr = Image(radiance_canvas(32, 32, rng).astype(np.float32) * 0.1, Domain.HDR)
    stack = simulate_exposure_stack(hdr, DATASET_EVS, bits=16)
    save_stack(stack, tmp_path / "stack", ".png", 16)
    out = tmp_path / "merged.pfm"
    assert main(["merge", str(tmp_path / "stack"), str(out)]) == EXIT_OK
    got = load_image(out, Domain.HDR).data
    rel = np.abs(got - hdr.data) / hdr.data
    assert rel.max() < 0.01
    side = json.loads((tmp_path / "merged.json").read_text())
    assert side["config"]["dry_run"] is False and side["inputs"]


def test_merge_missing_metadata(tmp_path, capsys):
    d = tmp_path / "empty"
    d.mkdir()
    assert main(["merge", str(d), str(tmp_path / "x.pfm")]) == EXIT_INVALID
    assert str(d) in capsys.readouterr().err


def test_merge_dry_run(scene, tmp_path, capsys):
    out = tmp_path / "x.pfm"
    assert main(["merge", str(scene / "frame_0000"), str(out), "--dry-run"]) == EXIT_OK
    assert not out.exists() and not (tmp_path / "x.json").exists()
    assert "dry run" in capsys.readouterr().out


# --- sequence -------------------------------------------------------------------

def test_sequence_alternates(manifest):
    seq = load_sequence_manifest(manifest)
    assert [s.ev for _, s in seq.frames] == [-3, 0] * 4
    data = json.loads(manifest.read_text())
    assert "config" in data and "inputs" in data


def test_sequence_other_pattern(scene, tmp_path):
    path = tmp_path / "m.json"
    assert main(["sequence", str(scene), str(path), "--pattern=-1,+2"]) == EXIT_OK
    assert [s.ev for _, s in load_sequence_manifest(path).frames] == [-1, 2] * 4


@pytest.mark.parametrize("pattern", ["0,0", "-3,+5", "a,b"])
def test_sequence_bad_pattern(scene, tmp_path, pattern):
    assert main(["sequence", str(scene), str(tmp_path / "m.json"), f"--pattern={pattern}"]) == EXIT_INVALID
    assert not (tmp_path / "m.json").exists()


# --- reconstruct ----------------------------------------------------------------

def test_reconstruct_outputs(recon):
    assert _pfms(recon) == [f"frame_{i:04d}.pfm" for i in range(8)]
    report = json.loads((recon / "report.json").read_text())
    assert len(report["frames"]) == 8
    f = report["frames"][3]
    assert f["neighbors"] == [2, 4] and len(f["global_alpha_prev"]) == 8 and f["seconds"] > 0
    assert report["config"]["align"] is True and report["inputs"]
    for n in _pfms(recon):
        d = load_image(recon / n, Domain.HDR).data
        assert np.all(np.isfinite(d)) and d.min() >= 0


def test_reconstruct_workers_identical(manifest, recon, tmp_path):
    assert main(["reconstruct", str(manifest), str(tmp_path), "--workers", "4"]) == EXIT_OK
    for n in _pfms(recon):
        assert (recon / n).read_bytes() == (tmp_path / n).read_bytes()


def test_reconstruct_no_align(manifest, recon, tmp_path):
    assert main(["reconstruct", str(manifest), str(tmp_path), "--no-align"]) == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["config"]["align"] is False
    assert all(not any(f["global_alpha_prev"]) for f in report["frames"])
    assert all(f["diagnostics"] == {} for f in report["frames"])
    a = load_image(recon / "frame_0003.pfm", Domain.HDR).data
    b = load_image(tmp_path / "frame_0003.pfm", Domain.HDR).data
    assert not np.array_equal(a, b)


def test_reconstruct_config_file_and_override(manifest, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"levels": 2, "radius": 4, "align": False}))
    out = tmp_path / "o"
    assert main(["reconstruct", str(manifest), str(out), "--config", str(cfg), "--radius", "6"]) == EXIT_OK
    c = json.loads((out / "report.json").read_text())["config"]
    assert (c["levels"], c["radius"], c["align"]) == (2, 6, False)


def test_reconstruct_unknown_config_key(manifest, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"levles": 2}))
    assert main(["reconstruct", str(manifest), str(tmp_path / "o"), "--config", str(cfg)]) == EXIT_INVALID


def test_reconstruct_invalid_option(manifest, tmp_path):
    assert main(["reconstruct", str(manifest), str(tmp_path), "--kernel-size", "30"]) == EXIT_INVALID
    assert main(["reconstruct", str(manifest), str(tmp_path), "--workers", "0"]) == EXIT_INVALID


def test_reconstruct_dump_intermediates(manifest, tmp_path):
    assert main(["reconstruct", str(manifest), str(tmp_path), "--dump-intermediates", "--levels", "1"]) == EXIT_OK
    names = os.listdir(tmp_path / "intermediates")
    assert "frame_0000_prev_aligned.pfm" in names


def test_reconstruct_missing_manifest(tmp_path, capsys):
    assert main(["reconstruct", str(tmp_path / "nope.json"), str(tmp_path)]) == EXIT_INVALID
    assert "nope.json" in capsys.readouterr().err


# --- eval / stats ---------------------------------------------------------------

def test_eval_identity(recon, tmp_path):
    out = tmp_path / "q.csv"
    assert main(["eval", str(recon), str(recon), str(out)]) == EXIT_OK
    rows = out.read_text().strip().splitlines()
    assert rows[0].startswith("frame_id,psnr_mu,ssim_mu")
    for row in rows[1:]:
        vals = [float(v) for v in row.split(",")[1:]]
        assert vals == [99.0, 1.0, 99.0, 1.0]
    side = json.loads((tmp_path / "q.json").read_text())
    assert side["aggregates"]["psnr_mu"]["mean"] == 99.0


def test_eval_count_mismatch(recon, tmp_path, capsys):
    truth = tmp_path / "truth"
    shutil.copytree(recon, truth)
    os.remove(truth / "frame_0007.pfm")
    assert main(["eval", str(recon), str(truth), str(tmp_path / "q.csv")]) == EXIT_INVALID
    assert "frame_0007.pfm" in capsys.readouterr().err


def test_eval_malformed_pfm(recon, tmp_path, capsys):
    est = tmp_path / "est"
    shutil.copytree(recon, est)
    (est / "frame_0002.pfm").write_bytes(b"PF\n12 x\n-1.0\n")
    assert main(["eval", str(est), str(recon), str(tmp_path / "q.csv")]) == EXIT_INVALID
    assert "frame_0002.pfm" in capsys.readouterr().err


def test_stats_constant_image(tmp_path):
    d = tmp_path / "hdr"
    d.mkdir()
    save_image(Image(np.full((16, 16, 3), 0.5, np.float32), Domain.HDR), d / "c.pfm")
    out = tmp_path / "s.csv"
    assert main(["stats", str(d), str(out)]) == EXIT_OK
    header, row = out.read_text().strip().splitlines()
    vals = dict(zip(header.split(","), row.split(",")))
    assert float(vals["stdl"]) == 0 and float(vals["dr"]) == 0 and float(vals["si"]) == 0


def test_stats_malformed(tmp_path, capsys):
    d = tmp_path / "hdr"
    d.mkdir()
    (d / "bad.pfm").write_bytes(b"nonsense")
    assert main(["stats", str(d), str(tmp_path / "s.csv")]) == EXIT_INVALID
    assert "bad.pfm" in capsys.readouterr().err


def test_stats_empty_dir(tmp_path):
    assert main(["stats", str(tmp_path), str(tmp_path / "s.csv")]) == EXIT_INVALID
