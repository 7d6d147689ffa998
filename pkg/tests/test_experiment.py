import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from atomsplat.core import InvalidConfigurationError
from atomsplat.experiment import (
    CSV_COLUMNS,
    ExperimentConfig,
    cell_digest,
    derive_seeds,
    parse_species,
    read_results,
    run_experiment,
)
from atomsplat.formats import parse_config

TINY = """
[particle]
radius = 4.5
[acquisition]
probe_sigma = 0.5
pixel_pitch = 0.5
det_rows = 24
det_cols = 24
[optimizer]
n_init = 100
n_iters = 150
[baselines]
sart_iters = 3
[experiment]
schemes = sampled
methods = fbp
seeds = 0
"""


def tiny_config(**changes) -> ExperimentConfig:
    return replace(ExperimentConfig.from_sections(parse_config(TINY), name="tiny"), **changes)


def test_derive_seeds_deterministic_and_distinct():
    a, b = derive_seeds(0), derive_seeds(0)
    assert a == b
    assert len(set(a.values())) == 3
    assert derive_seeds(1) != a


def test_parse_species():
    sp = parse_species(["A:0.25:2.0:0.4", "Ag:0.75"])
    assert [s.label for s in sp] == ["A", "Ag"]
    assert sp[0].ref_amplitude == 2.0 and sp[0].ref_sigma == 0.4
    assert sum(s.fraction for s in sp) == pytest.approx(1.0)
    with pytest.raises(InvalidConfigurationError):
        parse_species(["Q:1.0"])


def test_unknown_method_rejected():
    with pytest.raises(InvalidConfigurationError):
        ExperimentConfig.from_sections(parse_config("[experiment]\nmethods = fbp, magic\n"))


def test_bad_fpr_denominator_rejected():
    with pytest.raises(InvalidConfigurationError):
        ExperimentConfig.from_sections(parse_config("[experiment]\nfpr_denominator = total\n"))


def test_cell_digest_tracks_inputs():
    cfg = tiny_config()
    d0 = cell_digest(cfg.cell_inputs(0, "sampled", "fbp"))
    assert d0 == cell_digest(tiny_config().cell_inputs(0, "sampled", "fbp"))
    assert d0 != cell_digest(cfg.cell_inputs(1, "sampled", "fbp"))
    assert d0 != cell_digest(cfg.cell_inputs(0, "full", "fbp"))
    changed = tiny_config(acquisition={**cfg.acquisition, "noise_sigma": 0.1})
    assert d0 != cell_digest(changed.cell_inputs(0, "sampled", "fbp"))
    # optimizer settings do not invalidate baseline cells
    other_opt = tiny_config(optimizer={**cfg.optimizer, "n_iters": 7})
    assert d0 == cell_digest(other_opt.cell_inputs(0, "sampled", "fbp"))


def test_single_cell_matrix(tmp_path):
    path = run_experiment(tiny_config(), tmp_path, figures=False)
    rows = read_results(path)
    assert len(rows) == 1
    assert list(rows[0]) == CSV_COLUMNS
    r = rows[0]
    assert (r["particle"], r["scheme"], r["method"], r["n_angles"]) == ("tiny", "sampled", "fbp", "61")
    assert int(r["n_tp"]) + int(r["n_fn"]) == int(r["n_gt"])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    (key,) = manifest["cells"]
    for name in ("volume.aetv", "gt_volume.aetv", "atoms.xyz", "inputs.json", "row.json"):
        assert (tmp_path / "cells" / key / name).exists()


def test_resume_and_idempotence(tmp_path):
    cfg = tiny_config(methods=("fbp", "sart", "gaussian"))
    first = run_experiment(cfg, tmp_path / "a", figures=False).read_bytes()
    # interrupted run: one cell finished, then resumed with the full matrix
    run_experiment(tiny_config(methods=("sart",)), tmp_path / "b", figures=False)
    log = []
    resumed = run_experiment(cfg, tmp_path / "b", progress=log.append, figures=False).read_bytes()
    assert sum("cached" in m for m in log) == 1
    assert resumed == first
    log.clear()
    again = run_experiment(cfg, tmp_path / "b", progress=log.append, figures=False).read_bytes()
    assert again == first
    assert sum("cached" in m for m in log) == 3
    rows = list(csv.DictReader(first.decode().splitlines()))
    assert [r["method"] for r in rows] == ["gaussian", "fbp", "sart"]
    assert rows[0]["k_final"] != ""
    assert (tmp_path / "a" / "cells").is_dir()


def test_gaussian_cell_writes_run_log(tmp_path):
    run_experiment(tiny_config(methods=("gaussian",)), tmp_path, figures=False)
    (cell,) = (tmp_path / "cells").iterdir()
    text = (cell / "run_log.csv").read_text().splitlines()
    assert text[0] == "iter,loss,k,n_densified,n_pruned,n_merged"
    iters = [int(line.split(",")[0]) for line in text[1:]]
    assert iters == sorted(iters)


def test_figures_rendered(tmp_path):
    run_experiment(tiny_config(methods=("fbp", "sart")), tmp_path, figures=True)
    for name in ("rates.png", "slices.png"):
        png = tmp_path / "figures" / name
        assert png.exists()
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_species_ratio_column_for_two_species(tmp_path):
    text = TINY.replace("radius = 4.5", "radius = 4.5\nspecies = A:0.5:1.0:0.4, B:0.5:0.5:0.4")
    cfg = replace(ExperimentConfig.from_sections(parse_config(text), name="pair"), methods=("gaussian",))
    rows = read_results(run_experiment(cfg, tmp_path, figures=False))
    assert np.isfinite(float(rows[0]["species_ratio"]))
