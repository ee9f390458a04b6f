"""Batch command line: merge stacks, build sequences, reconstruct, evaluate.

Every subcommand accepts ``--config FILE`` (JSON object of option values);
explicit flags override values from the file. Reports written by the
commands embed the resolved configuration and SHA-256 hashes of the inputs.

Exit status: 0 on success, 2 on invalid input, 3 on numeric failure.

EV patterns start with a minus sign, so pass them as ``--pattern=-3,0``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import HdrvError, NumericError, ValidationError
from .imagecore import Domain, load_image, save_image
from .metrics import dataset_report
from .radiometry import (STACK_METADATA, load_sequence_manifest, load_stack, make_alternating_sequence,
                         merge_stack_to_hdr, parse_pattern, save_stack, write_sequence_manifest)
from .reconstruct import ReconstructionConfig, default_workers, reconstruct_video

log = logging.getLogger("hdrv")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERIC = 3

# options every subcommand understands, with their defaults
COMMON_DEFAULTS = {"workers": None, "seed": 0, "dump_intermediates": False}

SUBCOMMAND_DEFAULTS = {
    "merge": {"dry_run": False},
    "sequence": {"pattern": "-3,0"},
    "reconstruct": {k: v for k, v in ReconstructionConfig().to_dict().items()
                    if k not in ("pattern", "gamma", "dump_intermediates")},
    "eval": {"peak_nits": 1000.0},
    "stats": {},
    "synth": {"kind": "global", "frames": 8, "height": 128, "width": 128, "pattern": "-3,0", "bits": 16,
              "noise": 0.0, "motion_scale": 1.0},
}


def sha256_file(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def hash_inputs(paths, base=None):
    """``{display path: sha256}`` for every file, keys relative to ``base`` when given."""
    out = {}
    for p in paths:
        key = os.path.relpath(p, base) if base else os.fspath(p)
        out[key] = sha256_file(p)
    return out


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, default=_json_default)
        f.write("\n")


def sidecar_path(path, suffix=".json"):
    return os.path.splitext(os.fspath(path))[0] + suffix


def resolve_config(command, args):
    """Defaults, then the ``--config`` file, then explicit flags."""
    cfg = dict(COMMON_DEFAULTS)
    cfg.update(SUBCOMMAND_DEFAULTS[command])
    if args.config:
        try:
            with open(args.config) as f:
                from_file = json.load(f)
        except OSError as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"invalid JSON in config {args.config}: {exc}") from None
        if not isinstance(from_file, dict):
            raise ValidationError(f"config {args.config} must hold a JSON object")
        unknown = sorted(set(from_file) - set(cfg))
        if unknown:
            raise ValidationError(f"config {args.config}: unknown option(s) {unknown} for '{command}'")
        cfg.update(from_file)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["workers"] is None:
        cfg["workers"] = default_workers()
    if int(cfg["workers"]) < 1:
        raise ValidationError(f"--workers must be >= 1, got {cfg['workers']}")
    return cfg


def _pfm_files(directory, what):
    if not os.path.isdir(directory):
        raise ValidationError(f"{what} directory {directory} not found")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".pfm"))
    if not names:
        raise ValidationError(f"{what} directory {directory} holds no .pfm files")
    return names


# ---------------------------------------------------------------------------
# subcommands


def cmd_merge(args, cfg):
    stack = load_stack(args.stack_dir)
    hdr = merge_stack_to_hdr(stack)
    y = hdr.data
    evs = ",".join(f"{ev:+g}" for ev in stack.evs)
    print(f"stack {stack.frame_id}: {len(stack.shots)} shots (EV {evs}), {hdr.width}x{hdr.height}, "
          f"radiance [{float(y.min()):.6g}, {float(y.max()):.6g}]")
    if cfg["dry_run"]:
        print("dry run: nothing written")
        return EXIT_OK
    save_image(hdr, args.out_path)
    files = [os.path.join(args.stack_dir, STACK_METADATA)]
    files += [os.path.join(args.stack_dir, f["file"]) for f in _stack_entries(args.stack_dir)]
    write_json(sidecar_path(args.out_path), {
        "command": "merge", "version": __version__, "config": cfg,
        "inputs": hash_inputs(files), "frame": stack.frame_id, "evs": stack.evs, "output": args.out_path,
    })
    return EXIT_OK


def _stack_entries(stack_dir):
    with open(os.path.join(stack_dir, STACK_METADATA)) as f:
        return json.load(f).get("shots", [])


def cmd_sequence(args, cfg):
    pattern = parse_pattern(cfg["pattern"])
    scene = args.scene_dir
    if not os.path.isdir(scene):
        raise ValidationError(f"scene directory {scene} not found")
    frame_dirs = sorted(os.path.join(scene, d) for d in os.listdir(scene)
                        if os.path.isfile(os.path.join(scene, d, STACK_METADATA)))
    if not frame_dirs:
        raise ValidationError(f"no frame directories with {STACK_METADATA} under {scene}")
    stacks = [load_stack(d) for d in frame_dirs]
    seq = make_alternating_sequence(stacks, pattern)
    entries, truth, files = [], [], []
    for i, d in enumerate(frame_dirs):
        by_ev = {e["ev"]: e["file"] for e in _stack_entries(d)}
        spec = seq.frames[i][1]
        path = os.path.join(d, by_ev[spec.ev])
        entries.append((path, spec))
        files.append(path)
        t = os.path.join(d, "truth.pfm")
        truth.append(t if os.path.isfile(t) else None)
    gamma = seq.frames[0][1].gamma
    write_sequence_manifest(
        args.out_manifest, entries, pattern, gamma, truth if any(truth) else None,
        extra={"config": cfg, "inputs": hash_inputs(files, scene)},
    )
    print(f"{len(entries)} frames, EVs {' '.join(f'{s.ev:+g}' for _, s in entries)} -> {args.out_manifest}")
    return EXIT_OK


def cmd_reconstruct(args, cfg):
    seq = load_sequence_manifest(args.manifest)
    with open(args.manifest) as f:
        manifest = json.load(f)
    base = os.path.dirname(os.path.abspath(args.manifest))
    files = [os.path.abspath(args.manifest)] + [os.path.join(base, e["file"]) for e in manifest["frames"]]

    options = {k: cfg[k] for k in SUBCOMMAND_DEFAULTS["reconstruct"]}
    rcfg = ReconstructionConfig(pattern=seq.pattern, gamma=seq.frames[0][1].gamma,
                                dump_intermediates=bool(cfg["dump_intermediates"]), **options)
    os.makedirs(args.out_dir, exist_ok=True)
    t0 = time.perf_counter()
    results = reconstruct_video(seq, rcfg, workers=int(cfg["workers"]))
    total = time.perf_counter() - t0

    frames = []
    for i, res in enumerate(results):
        if not np.all(np.isfinite(res.hdr.data)):
            raise NumericError(f"frame {i}: reconstruction produced non-finite values")
        name = f"frame_{i:04d}.pfm"
        save_image(res.hdr, os.path.join(args.out_dir, name))
        if rcfg.dump_intermediates:
            idir = os.path.join(args.out_dir, "intermediates")
            os.makedirs(idir, exist_ok=True)
            for key, img in sorted(res.intermediates.items()):
                save_image(img, os.path.join(idir, f"frame_{i:04d}_{key}.pfm"))
        diag = dict(res.diagnostics)
        frames.append({
            "index": i,
            "file": name,
            "ev": seq.frames[i][1].ev,
            "neighbors": diag.pop("neighbors", None),
            "seconds": diag.pop("seconds", None),
            "global_alpha_prev": [float(a) for a in res.global_alpha_prev],
            "global_alpha_next": [float(a) for a in res.global_alpha_next],
            "diagnostics": {k: v for k, v in diag.items() if k != "frame"},
        })
    write_json(os.path.join(args.out_dir, "report.json"), {
        "command": "reconstruct", "version": __version__,
        "config": {**cfg, **rcfg.to_dict()},
        "inputs": hash_inputs(files, base),
        "frames": frames,
        "total_seconds": total,
    })
    print(f"{len(results)} frames -> {args.out_dir} ({total:.1f} s, {cfg['workers']} worker(s))")
    return EXIT_OK


def cmd_eval(args, cfg):
    est_names = _pfm_files(args.estimates_dir, "estimates")
    truth_names = _pfm_files(args.truth_dir, "truth")
    only_est = sorted(set(est_names) - set(truth_names))
    only_truth = sorted(set(truth_names) - set(est_names))
    if only_est or only_truth:
        raise ValidationError(
            f"frame count mismatch ({len(est_names)} estimates vs {len(truth_names)} truth); "
            f"unmatched estimates: {only_est or 'none'}; unmatched truth: {only_truth or 'none'}")
    pairs = []
    for n in est_names:
        pairs.append((load_image(os.path.join(args.estimates_dir, n), Domain.HDR),
                      load_image(os.path.join(args.truth_dir, n), Domain.HDR)))
    ids = [os.path.splitext(n)[0] for n in est_names]
    report = dataset_report(pairs, "quality", ids)
    report.write_csv(args.out_csv)
    inputs = {"estimates": hash_inputs([os.path.join(args.estimates_dir, n) for n in est_names], args.estimates_dir),
              "truth": hash_inputs([os.path.join(args.truth_dir, n) for n in truth_names], args.truth_dir)}
    write_json(sidecar_path(args.out_csv), {"command": "eval", "version": __version__, "config": cfg,
                                            "inputs": inputs, **report.to_json_dict()})
    agg = report.aggregates
    print(f"{len(ids)} frames: PSNR-mu {agg['psnr_mu']['mean']:.2f} dB, SSIM-mu {agg['ssim_mu']['mean']:.4f}, "
          f"PU-PSNR {agg['pu_psnr']['mean']:.2f} dB, PU-SSIM {agg['pu_ssim']['mean']:.4f}")
    return EXIT_OK


def cmd_stats(args, cfg):
    names = _pfm_files(args.hdr_dir, "HDR")
    frames = [load_image(os.path.join(args.hdr_dir, n), Domain.HDR) for n in names]
    report = dataset_report(frames, "diversity", [os.path.splitext(n)[0] for n in names])
    report.write_csv(args.out_csv)
    write_json(sidecar_path(args.out_csv), {
        "command": "stats", "version": __version__, "config": cfg,
        "inputs": hash_inputs([os.path.join(args.hdr_dir, n) for n in names], args.hdr_dir),
        **report.to_json_dict(),
    })
    print(f"{len(names)} frames -> {args.out_csv}")
    return EXIT_OK


def cmd_synth(args, cfg):
    from .synthetic import SCENE_KINDS, render_scene

    if cfg["kind"] not in SCENE_KINDS:
        raise ValidationError(f"unknown scene kind {cfg['kind']!r}; choose from {list(SCENE_KINDS)}")
    if cfg["bits"] not in (8, 16):
        raise ValidationError(f"--bits must be 8 or 16, got {cfg['bits']}")
    pattern = parse_pattern(cfg["pattern"])
    scene = render_scene(cfg["kind"], int(cfg["frames"]), int(cfg["height"]), int(cfg["width"]), pattern,
                         seed=int(cfg["seed"]), noise_sigma=float(cfg["noise"]), with_stacks=True,
                         stack_bits=int(cfg["bits"]), motion_scale=float(cfg["motion_scale"]))
    for k, (stack, truth) in enumerate(zip(scene.stacks, scene.truth)):
        d = os.path.join(args.out_dir, f"frame_{k:04d}")
        save_stack(stack, d, ".png", int(cfg["bits"]))
        save_image(truth, os.path.join(d, "truth.pfm"))
    write_json(os.path.join(args.out_dir, "scene.json"), {"command": "synth", "version": __version__, "config": cfg})
    print(f"{cfg['kind']} scene, {len(scene.truth)} frames -> {args.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON file of option values (flags override)")
    common.add_argument("--workers", type=int, metavar="N", help="frame-level worker threads (default $HDRV_THREADS or 1)")
    common.add_argument("--seed", type=int, metavar="N", help="seed for synthetic generators")
    common.add_argument("--dump-intermediates", action="store_true", default=None,
                        help="also write alignment fields and masks as .pfm")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="hdrv", description="HDR video reconstruction toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("merge", parents=[common], help="merge an exposure stack into a .pfm radiance map")
    s.add_argument("stack_dir")
    s.add_argument("out_path")
    s.add_argument("--dry-run", action="store_true", default=None, help="validate only, write nothing")

    s = sub.add_parser("sequence", parents=[common], help="build an alternating-exposure manifest")
    s.add_argument("scene_dir", help="directory of per-frame stack directories")
    s.add_argument("out_manifest")
    s.add_argument("--pattern", help="EV cycle, e.g. --pattern=-3,0 (default -3,0)")

    s = sub.add_parser("reconstruct", parents=[common], help="reconstruct HDR frames from a manifest")
    s.add_argument("manifest")
    s.add_argument("out_dir")
    s.add_argument("--no-align", dest="align", action="store_false", default=None,
                   help="skip both alignment stages (baseline)")
    s.add_argument("--levels", type=int, help="local-alignment pyramid levels")
    s.add_argument("--radius", type=int, help="block-matching search radius in pixels")
    s.add_argument("--block", type=int, help="block size in pixels")
    s.add_argument("--kernel-size", type=int, help="ASConv kernel length (odd)")
    s.add_argument("--global-levels", type=int)
    s.add_argument("--global-iters", type=int)
    s.add_argument("--global-step", type=float)
    s.add_argument("--mu", type=float, help="mu-law compression parameter")

    s = sub.add_parser("eval", parents=[common], help="quality metrics of estimates against truth")
    s.add_argument("estimates_dir")
    s.add_argument("truth_dir")
    s.add_argument("out_csv")
    s.add_argument("--peak-nits", type=float)

    s = sub.add_parser("stats", parents=[common], help="diversity statistics of a directory of HDR frames")
    s.add_argument("hdr_dir")
    s.add_argument("out_csv")

    s = sub.add_parser("synth", parents=[common], help="render a synthetic scene as per-frame stacks")
    s.add_argument("out_dir")
    s.add_argument("--kind", help="static, global, local or full")
    s.add_argument("--frames", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--pattern", help="EV cycle used for the scene's own sequence")
    s.add_argument("--bits", type=int)
    s.add_argument("--noise", type=float, help="display-domain read noise sigma")
    s.add_argument("--motion-scale", type=float)
    return p


COMMANDS = {"merge": cmd_merge, "sequence": cmd_sequence, "reconstruct": cmd_reconstruct,
            "eval": cmd_eval, "stats": cmd_stats, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](args, cfg)
    except NumericError as exc:
        print(f"hdrv {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValidationError as exc:
        print(f"hdrv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except HdrvError as exc:
        print(f"hdrv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"hdrv {args.command}: error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
