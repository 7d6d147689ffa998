"""Particle x scheme x method experiment grid with resumable cells.

Each cell is identified by a digest of everything that determines its
output, so re-running a matrix in the same directory only computes cells
that are missing. Rows of the consolidated CSV carry no timings, which keeps
the file byte-identical across re-runs.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from .baselines import TRACE_FLOOR, TRACE_MIN_SEPARATION, fbp, sart, trace_atoms
from .core import AtomCloud, InvalidConfigurationError, VoxelVolume, volume_for_geometry
from .formats import write_atoms, write_run_log, write_volume
from .metrics import FPR_DENOMINATORS, amplitude_histogram, match_atoms, ssim3d
from .optimize import OptimizerConfig, reconstruct
from .simulate import AcquisitionSpec, ParticleSpec, Scheme, make_particle, species_mix, synthesize_projections
from .splat import rasterize_volume

log = logging.getLogger(__name__)

METHODS = ("gaussian", "fbp", "sart")
SCHEME_ORDER = ("full", "sampled", "mw", "limited", "custom")
CSV_COLUMNS = ["particle", "seed", "scheme", "n_angles", "method", "n_gt", "n_pred", "n_tp", "n_fp", "n_fn",
               "tpr", "fpr", "matched_rmsd", "ssim", "k_final", "species_ratio"]


def derive_seeds(seed: int) -> dict:
    """Independent component seeds from one master seed."""
    children = np.random.SeedSequence(int(seed)).spawn(3)
    names = ("particle", "noise", "optimizer")
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def parse_species(items) -> tuple:
    """``label:fraction[:amplitude[:sigma]]`` strings to a species tuple."""
    entries = []
    for item in items:
        parts = [p.strip() for p in str(item).split(":")]
        entry = [parts[0], float(parts[1]) if len(parts) > 1 else 1.0]
        entry += [float(p) for p in parts[2:4]]
        entries.append(tuple(entry))
    return species_mix(entries)


@dataclasses.dataclass
class BaselineConfig:
    sart_iters: int = 50
    sart_relaxation: float = 0.3
    trace_floor: float = TRACE_FLOOR
    min_separation: float = TRACE_MIN_SEPARATION


@dataclasses.dataclass
class ExperimentConfig:
    particle: dict = dataclasses.field(default_factory=dict)
    acquisition: dict = dataclasses.field(default_factory=dict)
    optimizer: dict = dataclasses.field(default_factory=dict)
    baselines: BaselineConfig = dataclasses.field(default_factory=BaselineConfig)
    schemes: tuple = ("full", "limited")
    methods: tuple = METHODS
    seeds: tuple = (0,)
    match_tolerance: float = 0.75
    ssim_window: int = 7
    fpr_denominator: str = "pred"
    name: str = "particle"

    @classmethod
    def from_sections(cls, cfg: dict, name: str = "particle") -> "ExperimentConfig":
        exp = cfg.get("experiment", {})
        base = cfg.get("baselines", {})
        methods = tuple(m.lower() for m in exp.get("methods", METHODS))
        for m in methods:
            if m not in METHODS:
                raise InvalidConfigurationError(f"unknown method {m!r}")
        if exp.get("fpr_denominator", "pred") not in FPR_DENOMINATORS:
            raise InvalidConfigurationError(f"fpr_denominator must be one of {FPR_DENOMINATORS}")
        return cls(
            particle=dict(cfg.get("particle", {})),
            acquisition={k: v for k, v in cfg.get("acquisition", {}).items() if k not in ("scheme", "seed")},
            optimizer={k: v for k, v in cfg.get("optimizer", {}).items() if k != "seed"},
            baselines=BaselineConfig(**{k: base[k] for k in dataclasses.asdict(BaselineConfig()) if k in base}),
            schemes=tuple(Scheme.parse(s).value for s in exp.get("schemes", ("full", "limited"))),
            methods=methods,
            seeds=tuple(int(s) for s in exp.get("seeds", (0,))),
            match_tolerance=float(exp.get("match_tolerance", 0.75)),
            ssim_window=int(exp.get("ssim_window", 7)),
            fpr_denominator=str(exp.get("fpr_denominator", "pred")),
            name=name,
        )

    def particle_spec(self, seed: int) -> ParticleSpec:
        p = dict(self.particle)
        if p.get("species") and isinstance(p["species"][0], str):
            p["species"] = parse_species(p["species"])
        p["seed"] = derive_seeds(seed)["particle"]
        return ParticleSpec(**p)

    def acquisition_spec(self, scheme: str, seed: int) -> AcquisitionSpec:
        return AcquisitionSpec(scheme=scheme, seed=derive_seeds(seed)["noise"], **self.acquisition)

    def optimizer_config(self, seed: int) -> OptimizerConfig:
        return OptimizerConfig(seed=derive_seeds(seed)["optimizer"], **self.optimizer)

    def cells(self):
        for seed in self.seeds:
            for scheme in self.schemes:
                for method in self.methods:
                    yield seed, scheme, method

    def cell_inputs(self, seed: int, scheme: str, method: str) -> dict:
        inputs = {
            "particle": _plain(self.particle_spec(seed)),
            "acquisition": _plain(self.acquisition_spec(scheme, seed)),
            "method": method,
            "match_tolerance": self.match_tolerance,
            "ssim_window": self.ssim_window,
        }
        if self.fpr_denominator != "pred":
            inputs["fpr_denominator"] = self.fpr_denominator
        if method == "gaussian":
            inputs["optimizer"] = _plain(self.optimizer_config(seed))
        else:
            inputs["baselines"] = _plain(self.baselines)
        return inputs


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if hasattr(obj, "value") and not isinstance(obj, (int, float)):
        return obj.value
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, int) and hasattr(obj, "name"):
        return obj.name.lower()
    return obj


def cell_digest(inputs: dict) -> str:
    blob = json.dumps(inputs, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclasses.dataclass
class CellData:
    gt: object
    stack: object
    grid: VoxelVolume
    gt_volume: VoxelVolume


def simulate_cell(cfg: ExperimentConfig, seed: int, scheme: str) -> CellData:
    gt = make_particle(cfg.particle_spec(seed))
    acq = cfg.acquisition_spec(scheme, seed)
    stack = synthesize_projections(gt, acq)
    grid = volume_for_geometry(stack.geometry)
    # reference potential as the microscope sees it: atoms widened by the probe
    gt_volume = rasterize_volume(gt.to_cloud(acq.probe_sigma), grid)
    return CellData(gt, stack, grid, gt_volume)


def run_method(data: CellData, method: str, opt: OptimizerConfig, base: BaselineConfig):
    """Returns ``(positions, volume, cloud_or_None, run_records_or_None)``."""
    if method == "gaussian":
        res = reconstruct(data.stack, opt)
        vol = rasterize_volume(res.cloud, data.grid)
        return res.cloud.mu.copy(), vol, res.cloud, res.records
    if method == "fbp":
        vol = fbp(data.stack, data.grid)
    elif method == "sart":
        vol = sart(data.stack, data.grid, base.sart_iters, base.sart_relaxation)
    else:
        raise InvalidConfigurationError(f"unknown method {method!r}")
    pos = trace_atoms(vol, base.min_separation, base.trace_floor)
    return pos, VoxelVolume(vol.data, vol.spacing, vol.origin), None, None


def evaluate_cell(cfg: ExperimentConfig, data: CellData, seed: int, scheme: str, method: str,
                  pos, vol, cloud) -> dict:
    rep = match_atoms(pos, data.gt.positions, cfg.match_tolerance, cfg.fpr_denominator)
    ssim = ssim3d(data.gt_volume, vol, cfg.ssim_window)
    ratio = ""
    if cloud is not None and len(set(data.gt.species)) == 2:
        groups = amplitude_histogram(cloud, rep, data.gt.species)["groups"]
        if len(groups) == 2:
            ref = data.gt.ref_amplitude
            hi, lo = sorted(groups, key=lambda k: -ref[k])
            ratio = repr(groups[hi].mean / groups[lo].mean)
    row = {"particle": cfg.name, "seed": seed, "scheme": scheme, "n_angles": data.stack.geometry.n_angles,
           "method": method, **rep.as_row(), "ssim": ssim,
           "k_final": len(cloud) if cloud is not None else len(pos), "species_ratio": ratio}
    return {k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()}


def run_experiment(cfg: ExperimentConfig, out_dir, progress=None, figures: bool = True) -> Path:
    """Run every missing cell, then write ``results.csv`` (and figures) in ``out_dir``."""
    out = Path(out_dir)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"cells": {}}
    say = progress or (lambda msg: None)
    rows = []
    cache = {}
    todo = list(cfg.cells())
    for n, (seed, scheme, method) in enumerate(todo, 1):
        inputs = cfg.cell_inputs(seed, scheme, method)
        key = cell_digest(inputs)
        cdir = cells_dir / key
        row_path = cdir / "row.json"
        if key in manifest["cells"] and row_path.exists():
            say(f"[{n}/{len(todo)}] {scheme} {method} seed {seed}: cached")
            rows.append(json.loads(row_path.read_text()))
            continue
        say(f"[{n}/{len(todo)}] {scheme} {method} seed {seed}: running")
        if (seed, scheme) not in cache:
            cache = {(seed, scheme): simulate_cell(cfg, seed, scheme)}
        data = cache[(seed, scheme)]
        t0 = time.perf_counter()
        pos, vol, cloud, records = run_method(data, method, cfg.optimizer_config(seed), cfg.baselines)
        elapsed = time.perf_counter() - t0
        row = evaluate_cell(cfg, data, seed, scheme, method, pos, vol, cloud)
        cdir.mkdir(parents=True, exist_ok=True)
        write_volume(cdir / "volume.aetv", vol)
        write_volume(cdir / "gt_volume.aetv", data.gt_volume)
        write_atoms(cdir / "atoms.xyz", cloud if cloud is not None else AtomCloud(pos, np.full(len(pos), 0.5),
                                                                                     np.ones(len(pos))),
                    comment=f"method={method} scheme={scheme} seed={seed}")
        if records is not None:
            write_run_log(cdir / "run_log.csv", records)
        (cdir / "inputs.json").write_text(json.dumps(inputs, indent=1, sort_keys=True))
        row_path.write_text(json.dumps(row, sort_keys=True))
        manifest["cells"][key] = {"seed": seed, "scheme": scheme, "method": method, "seconds": round(elapsed, 3)}
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        say(f"    tpr {float(row['tpr']):.3f} fpr {float(row['fpr']):.3f} ssim {float(row['ssim']):.3f}"
            f" ({elapsed:.1f} s)")
        rows.append(row)
    csv_path = out / "results.csv"
    write_results(csv_path, rows)
    if figures:
        from .plotting import experiment_figures
        experiment_figures(rows, out / "figures", cells_dir=cells_dir, manifest=manifest)
    return csv_path


def _row_order(row):
    scheme = SCHEME_ORDER.index(row["scheme"]) if row["scheme"] in SCHEME_ORDER else len(SCHEME_ORDER)
    method = METHODS.index(row["method"]) if row["method"] in METHODS else len(METHODS)
    return (row["particle"], scheme, method, int(row["seed"]))


def write_results(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in sorted(rows, key=_row_order):
            w.writerow({k: r.get(k, "") for k in CSV_COLUMNS})


def read_results(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
