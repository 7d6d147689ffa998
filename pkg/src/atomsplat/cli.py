"""Command line workflow: simulate, reconstruct, trace, evaluate, render, experiment.

Progress goes to stderr; stdout carries one JSON summary per command.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import AtomCloud, AtomSplatError, InvalidConfigurationError, VoxelVolume, volume_for_geometry
from .formats import (
    config_reference,
    read_atoms,
    read_config,
    read_projection_stack,
    read_volume,
    write_atoms,
    write_pgm,
    write_projection_stack,
    write_run_log,
    write_volume,
)

log = logging.getLogger("atomsplat")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(AtomSplatError):
    """Bad arguments that argparse cannot catch on its own."""


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _sections(path):
    if path is None:
        from .formats import parse_config
        return parse_config("")
    return read_config(_existing(path, "config file"))


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> dict:
    from .experiment import ExperimentConfig, _plain, derive_seeds
    from .simulate import make_particle, synthesize_projections

    cfg = ExperimentConfig.from_sections(_sections(_existing(args.particle, "particle file")))
    scheme = args.scheme or "full"
    gt = make_particle(cfg.particle_spec(args.seed))
    acq = cfg.acquisition_spec(scheme, args.seed)
    _progress(f"simulating {len(gt)} atoms, {scheme} scheme, {len(acq.angles())} tilts")
    stack = synthesize_projections(gt, acq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_atoms(out / "ground_truth.xyz", gt, comment=f"seed={args.seed} scheme={scheme}")
    write_projection_stack(out / "stack.aetp", stack)
    manifest = {
        "command": "simulate",
        "version": __version__,
        "seed": args.seed,
        "derived_seeds": derive_seeds(args.seed),
        "particle": _plain(cfg.particle_spec(args.seed)),
        "acquisition": _plain(acq),
        "n_atoms": len(gt),
        "n_angles": stack.geometry.n_angles,
        "angles_deg": list(stack.geometry.angles_deg),
        "checksums": {name: sha256_file(out / name) for name in ("ground_truth.xyz", "stack.aetp")},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return {"out": str(out), "n_atoms": len(gt), "n_angles": stack.geometry.n_angles,
            "stack_sha256": manifest["checksums"]["stack.aetp"]}


def cmd_reconstruct(args) -> dict:
    from .baselines import fbp, sart, trace_atoms
    from .experiment import BaselineConfig, ExperimentConfig, _plain
    from .optimize import reconstruct
    from .splat import rasterize_volume

    stack = read_projection_stack(_existing(args.input, "stack"))
    cfg = ExperimentConfig.from_sections(_sections(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = volume_for_geometry(stack.geometry)
    summary = {"method": args.method, "out": str(out)}
    t0 = time.perf_counter()
    if args.method == "gaussian":
        opt = cfg.optimizer_config(args.seed)
        _progress(f"gaussian fit: {opt.n_init} initial atoms, {opt.n_iters} iterations")
        every = max(1, opt.n_iters // 20)

        def report(rec, cloud):
            if rec.iter % every == 0:
                _progress(f"  iter {rec.iter:6d}  loss {rec.loss:.5g}  K {rec.k}")

        res = reconstruct(stack, opt, callback=report)
        write_atoms(out / "atoms.xyz", res.cloud, comment=f"method=gaussian seed={args.seed}")
        write_run_log(out / "run_log.csv", res.records)
        vol = rasterize_volume(res.cloud, grid)
        summary.update(k_final=len(res.cloud), failed=res.failed, warnings=res.warnings)
        params = {"optimizer": _plain(opt)}
    else:
        base: BaselineConfig = cfg.baselines
        if args.method == "fbp":
            vol = fbp(stack, grid)
        else:
            vol = sart(stack, grid, base.sart_iters, base.sart_relaxation)
            summary["sart_stopped_early"] = vol.stopped_early
        vol = VoxelVolume(vol.data, vol.spacing, vol.origin)
        params = {"baselines": _plain(base)}
        if args.trace:
            pos = trace_atoms(vol, base.min_separation, base.trace_floor)
            write_atoms(out / "atoms.xyz", AtomCloud(pos, np.full(len(pos), 0.5), np.ones(len(pos))),
                        comment=f"method={args.method} traced")
            summary["n_traced"] = len(pos)
    write_volume(out / "volume.aetv", vol)
    summary["seconds"] = round(time.perf_counter() - t0, 3)
    files = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    manifest = {"command": "reconstruct", "version": __version__, "method": args.method, "seed": args.seed,
                "input": str(args.input), "input_sha256": sha256_file(args.input), **params,
                "checksums": {n: sha256_file(out / n) for n in files}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    summary["volume_sha256"] = manifest["checksums"]["volume.aetv"]
    return summary


def cmd_trace(args) -> dict:
    from .baselines import trace_atoms

    if not args.min_sep > 0:
        raise UsageError("--min-sep must be positive")
    if not 0 <= args.floor < 1:
        raise UsageError("--floor must lie in [0, 1)")
    vol = read_volume(_existing(args.input, "volume"))
    pos = trace_atoms(vol, args.min_sep, args.floor)
    write_atoms(args.out, AtomCloud(pos, np.full(len(pos), 0.5), np.ones(len(pos))),
                comment=f"traced min_sep={args.min_sep} floor={args.floor}")
    return {"n_atoms": len(pos), "out": str(args.out)}


def cmd_evaluate(args) -> dict:
    import csv

    from .metrics import match_atoms, ssim3d

    if not args.tol > 0:
        raise UsageError("--tol must be positive")
    if (args.vol is None) != (args.gt_vol is None):
        raise UsageError("--vol and --gt-vol go together")
    pred = read_atoms(_existing(args.pred, "prediction"))
    gt = read_atoms(_existing(args.gt, "ground truth"))
    rep = match_atoms(pred.positions, gt.positions, args.tol, args.fpr_denominator)
    row = rep.as_row()
    if args.vol is not None:
        row["ssim"] = ssim3d(read_volume(_existing(args.gt_vol, "volume")),
                             read_volume(_existing(args.vol, "volume")), args.window)
    row = {k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()}
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)
    return row


def _parse_slice(text: str):
    try:
        axis, index = text.split("=")
        axis = axis.strip().lower()
        index = int(index)
    except ValueError:
        raise UsageError(f"--slice expects axis=index, got {text!r}") from None
    if axis not in ("x", "y", "z"):
        raise UsageError(f"--slice axis must be x, y or z, got {axis!r}")
    return axis, index


def grid_for_atoms(positions, spacing: float, margin: float = 3.0) -> VoxelVolume:
    """Cube centred on the origin that holds every position plus ``margin``."""
    extent = float(np.abs(positions).max()) + margin if len(positions) else margin
    n = int(np.ceil(2 * extent / spacing)) + 1
    return VoxelVolume.centered(n, spacing)


def cmd_render(args) -> dict:
    from .splat import rasterize_volume

    path = _existing(args.input, "input")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"AETV":
        vol = read_volume(path)
    else:
        rec = read_atoms(path)
        if not args.spacing > 0:
            raise UsageError("--spacing must be positive")
        vol = rasterize_volume(rec.to_cloud(), grid_for_atoms(rec.positions, args.spacing))
    data = vol.data
    if args.slice is None:
        axis, index = "z", data.shape[0] // 2
    else:
        axis, index = _parse_slice(args.slice)
    size = {"z": data.shape[0], "y": data.shape[1], "x": data.shape[2]}[axis]
    if not 0 <= index < size:
        raise UsageError(f"slice {axis}={index} outside 0..{size - 1}")
    img = {"z": lambda: data[index], "y": lambda: data[:, index, :], "x": lambda: data[:, :, index]}[axis]()
    write_pgm(args.out, img)
    return {"out": str(args.out), "axis": axis, "index": index, "shape": list(img.shape),
            "min": float(img.min()), "max": float(img.max())}


def cmd_experiment(args) -> dict:
    from dataclasses import replace

    from .experiment import ExperimentConfig, read_results, run_experiment

    cfg = ExperimentConfig.from_sections(_sections(_existing(args.matrix, "matrix config")),
                                         name=args.name or Path(args.matrix).stem)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.schemes:
        from .simulate import Scheme
        cfg = replace(cfg, schemes=tuple(Scheme.parse(s).value for s in args.schemes.split(",")))
    out = Path(args.out)
    csv_path = run_experiment(cfg, out, progress=_progress, figures=not args.no_figures)
    rows = read_results(csv_path)
    return {"csv": str(csv_path), "rows": len(rows), "csv_sha256": sha256_file(csv_path)}


def cmd_config_reference(args) -> dict:
    text = config_reference()
    if args.out:
        Path(args.out).write_text(text)
        return {"out": str(args.out)}
    sys.stdout.write(text)
    return None


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atomsplat", description="Gaussian-atom electron tomography workflow.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def seeded(sp, default=0):
        sp.add_argument("--seed", type=int, default=default, help="master seed (default %(default)s)")

    s = sub.add_parser("simulate", help="ground truth particle and tilt series")
    s.add_argument("--particle", required=True, help="config with [particle] and [acquisition] sections")
    s.add_argument("--scheme", choices=["full", "limited", "sampled", "mw"], default=None)
    s.add_argument("--out", required=True)
    seeded(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("reconstruct", help="gaussian fit or voxel baseline")
    s.add_argument("--method", required=True, choices=["gaussian", "fbp", "sart"])
    s.add_argument("--in", dest="input", required=True, help="projection stack (.aetp)")
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None, help="config with [optimizer] / [baselines] sections")
    s.add_argument("--trace", action="store_true", help="also trace atoms from fbp/sart volumes")
    seeded(s)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("trace", help="atom positions from a volume")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--min-sep", type=float, default=2.0, help="exclusion distance in angstrom")
    s.add_argument("--floor", type=float, default=0.15, help="peak floor as a fraction of the maximum")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("evaluate", help="match predicted and true atoms")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--vol", default=None)
    s.add_argument("--gt-vol", default=None)
    s.add_argument("--tol", type=float, default=0.75)
    s.add_argument("--window", type=int, default=7, help="SSIM window edge in voxels")
    s.add_argument("--fpr-denominator", choices=("pred", "gt"), default="pred",
                   help="FPR as FP / n_pred (default) or FP / n_gt")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", help="one slice of a volume or atom file as 16-bit PGM")
    s.add_argument("--in", dest="input", required=True, help="volume (.aetv) or atom list (.xyz)")
    s.add_argument("--slice", default=None, help="axis=index, default the central z slice")
    s.add_argument("--spacing", type=float, default=0.5, help="voxel size when rasterizing atoms")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("experiment", help="particle x scheme x method matrix")
    s.add_argument("--matrix", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--name", default=None, help="particle label in the CSV (default: config stem)")
    s.add_argument("--schemes", default=None, help="comma separated override of [experiment] schemes")
    s.add_argument("--no-figures", action="store_true")
    seeded(s, default=None)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("config-reference", help="print every config key with its default")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_config_reference)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except (UsageError, InvalidConfigurationError) as e:
        print(f"atomsplat {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (AtomSplatError, OSError, ValueError) as e:
        print(f"atomsplat {args.command}: failed: {e}", file=sys.stderr)
        return EXIT_FAILURE
    if summary is not None:
        _emit(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
