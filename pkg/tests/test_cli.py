import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from atomsplat.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from atomsplat.core import AtomCloud, ProjectionStack, TiltGeometry, VoxelVolume
from atomsplat.formats import read_atoms, read_pgm, read_volume, write_atoms, write_projection_stack, write_volume
from atomsplat.simulate import make_tilt_scheme

SMALL = """
[particle]
radius = 4.5
[acquisition]
probe_sigma = 0.5
noise_sigma = 0.02
pixel_pitch = 0.5
det_rows = 24
det_cols = 24
[baselines]
sart_iters = 2
[experiment]
schemes = sampled
methods = fbp
"""

SINGLE = """
[particle]
radius = 1.0
species = X:1.0:1.0:0.4
[acquisition]
probe_sigma = 0.0
pixel_pitch = 0.25
det_rows = 32
det_cols = 32
[optimizer]
n_init = 50
n_iters = 1500
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    summary = json.loads(out.out.strip().splitlines()[-1]) if code == EXIT_OK and out.out.strip() else None
    return code, summary, out.err


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


def test_simulate_limited_manifest(capsys, tmp_path, small_cfg):
    code, summary, _ = run(capsys, "simulate", "--particle", small_cfg, "--scheme", "limited",
                           "--out", tmp_path / "sim")
    assert code == EXIT_OK
    manifest = json.loads((tmp_path / "sim" / "manifest.json").read_text())
    assert manifest["n_angles"] == 47
    assert len(manifest["angles_deg"]) == 47
    assert manifest["seed"] == 0 and set(manifest["derived_seeds"]) == {"particle", "noise", "optimizer"}
    assert summary["stack_sha256"] == manifest["checksums"]["stack.aetp"]
    assert len(read_atoms(tmp_path / "sim" / "ground_truth.xyz")) == summary["n_atoms"]


def test_simulate_same_seed_same_checksum(capsys, tmp_path, small_cfg):
    sums = []
    for name, seed in (("a", 5), ("b", 5), ("c", 6)):
        code, summary, _ = run(capsys, "simulate", "--particle", small_cfg, "--scheme", "sampled",
                               "--out", tmp_path / name, "--seed", seed)
        assert code == EXIT_OK
        sums.append(summary["stack_sha256"])
    assert sums[0] == sums[1] != sums[2]


def test_simulate_missing_particle_file(capsys, tmp_path):
    code, _, err = run(capsys, "simulate", "--particle", tmp_path / "nope.cfg", "--out", tmp_path / "o")
    assert code == EXIT_USAGE
    assert "not found" in err


def test_bad_config_value_is_usage_error(capsys, tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("[particle]\nradius = big\n")
    code, _, err = run(capsys, "simulate", "--particle", p, "--out", tmp_path / "o")
    assert code == EXIT_USAGE
    assert "line 2" in err


def test_unknown_method_is_usage_error(capsys, tmp_path):
    code, _, _ = run(capsys, "reconstruct", "--method", "magic", "--in", tmp_path / "x", "--out", tmp_path)
    assert code == EXIT_USAGE


def test_corrupt_stack_is_runtime_failure(capsys, tmp_path):
    (tmp_path / "bad.aetp").write_bytes(b"AETP\x01\x00")
    code, _, err = run(capsys, "reconstruct", "--method", "fbp", "--in", tmp_path / "bad.aetp",
                       "--out", tmp_path / "o")
    assert code == EXIT_FAILURE
    assert "byte" in err


def test_fbp_zero_stack_gives_zero_volume(capsys, tmp_path):
    g = TiltGeometry(make_tilt_scheme("sampled"), 16, 16, 0.5)
    write_projection_stack(tmp_path / "z.aetp", ProjectionStack.zeros(g))
    sums = []
    for name in ("a", "b"):
        code, summary, _ = run(capsys, "reconstruct", "--method", "fbp", "--in", tmp_path / "z.aetp",
                               "--out", tmp_path / name)
        assert code == EXIT_OK
        sums.append(summary["volume_sha256"])
    vol = read_volume(tmp_path / "a" / "volume.aetv")
    assert vol.data.shape == (16, 16, 16) and not np.any(vol.data)
    assert sums[0] == sums[1]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["checksums"]["volume.aetv"] == sums[0]


def test_gaussian_single_atom_end_to_end(capsys, tmp_path):
    cfg = tmp_path / "single.cfg"
    cfg.write_text(SINGLE)
    assert run(capsys, "simulate", "--particle", cfg, "--out", tmp_path / "sim")[0] == EXIT_OK
    code, summary, err = run(capsys, "reconstruct", "--method", "gaussian", "--in", tmp_path / "sim" / "stack.aetp",
                             "--config", cfg, "--out", tmp_path / "rec")
    assert code == EXIT_OK
    assert "iter" in err
    atoms = read_atoms(tmp_path / "rec" / "atoms.xyz")
    assert len(atoms) == 1 == summary["k_final"]
    truth = read_atoms(tmp_path / "sim" / "ground_truth.xyz")
    assert np.linalg.norm(atoms.positions[0] - truth.positions[0]) < 0.1
    log = (tmp_path / "rec" / "run_log.csv").read_text().splitlines()
    assert int(log[-1].split(",")[2]) == 1
    for name in ("atoms.xyz", "run_log.csv", "volume.aetv", "manifest.json"):
        assert (tmp_path / "rec" / name).exists()


def test_sart_with_trace(capsys, tmp_path, small_cfg):
    assert run(capsys, "simulate", "--particle", small_cfg, "--scheme", "sampled", "--out", tmp_path / "s")[0] == 0
    code, summary, _ = run(capsys, "reconstruct", "--method", "sart", "--in", tmp_path / "s" / "stack.aetp",
                           "--config", small_cfg, "--trace", "--out", tmp_path / "r")
    assert code == EXIT_OK
    assert summary["n_traced"] == len(read_atoms(tmp_path / "r" / "atoms.xyz"))


def _bumps(path, centers):
    vol = VoxelVolume.centered(24, 0.5)
    x, y, z = vol.axes()
    Z, Y, X = np.meshgrid(z, y, x, indexing="ij")
    data = sum(np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2) / 0.72) for c in centers)
    write_volume(path, vol.like(data))


def test_trace_two_bumps(capsys, tmp_path):
    _bumps(tmp_path / "v.aetv", [[-2.6, 0.3, 0.1], [2.4, -0.2, 0.3]])
    code, summary, _ = run(capsys, "trace", "--in", tmp_path / "v.aetv", "--min-sep", 2.0, "--out", tmp_path / "a.xyz")
    assert code == EXIT_OK and summary["n_atoms"] == 2
    assert len(read_atoms(tmp_path / "a.xyz")) == 2


def test_trace_uniform_volume(capsys, tmp_path):
    write_volume(tmp_path / "u.aetv", VoxelVolume.centered(8, 0.5, np.ones((8, 8, 8))))
    code, summary, _ = run(capsys, "trace", "--in", tmp_path / "u.aetv", "--out", tmp_path / "a.xyz")
    assert code == EXIT_OK and summary["n_atoms"] == 0


@pytest.mark.parametrize("sep", ["0", "-1"])
def test_trace_bad_min_sep(capsys, tmp_path, sep):
    write_volume(tmp_path / "u.aetv", VoxelVolume.centered(4, 0.5))
    code, _, _ = run(capsys, "trace", "--in", tmp_path / "u.aetv", "--min-sep", sep, "--out", tmp_path / "a.xyz")
    assert code == EXIT_USAGE


def _atoms_file(path, positions):
    p = np.asarray(positions, float)
    write_atoms(path, AtomCloud(p, np.full(len(p), 0.4), np.ones(len(p))))


def _report(path):
    with open(path, newline="") as fh:
        return next(csv.DictReader(fh))


def test_evaluate_identical_and_shifted(capsys, tmp_path):
    # 3 angstrom lattice: a 1 angstrom shift leaves every atom out of tolerance
    gt = 3.0 * np.stack(np.meshgrid(range(3), range(3), range(2), indexing="ij"), -1).reshape(-1, 3) - 3.0
    _atoms_file(tmp_path / "gt.xyz", gt)
    _atoms_file(tmp_path / "same.xyz", gt)
    _atoms_file(tmp_path / "shift.xyz", gt + [1.0, 0, 0])
    assert run(capsys, "evaluate", "--pred", tmp_path / "same.xyz", "--gt", tmp_path / "gt.xyz",
               "--out", tmp_path / "r1.csv")[0] == EXIT_OK
    r1 = _report(tmp_path / "r1.csv")
    assert (float(r1["tpr"]), float(r1["fpr"])) == (1.0, 0.0)
    assert run(capsys, "evaluate", "--pred", tmp_path / "shift.xyz", "--gt", tmp_path / "gt.xyz",
               "--tol", 0.75, "--out", tmp_path / "r2.csv")[0] == EXIT_OK
    assert float(_report(tmp_path / "r2.csv")["tpr"]) == 0.0


def test_evaluate_with_volumes(capsys, tmp_path):
    _atoms_file(tmp_path / "gt.xyz", [[0, 0, 0]])
    write_volume(tmp_path / "a.aetv", VoxelVolume.centered(9, 0.5, np.random.default_rng(0).random((9, 9, 9))))
    write_volume(tmp_path / "b.aetv", VoxelVolume.centered(10, 0.5))
    code, summary, _ = run(capsys, "evaluate", "--pred", tmp_path / "gt.xyz", "--gt", tmp_path / "gt.xyz",
                           "--vol", tmp_path / "a.aetv", "--gt-vol", tmp_path / "a.aetv", "--out", tmp_path / "r.csv")
    assert code == EXIT_OK
    assert float(summary["ssim"]) == pytest.approx(1.0)
    code, _, err = run(capsys, "evaluate", "--pred", tmp_path / "gt.xyz", "--gt", tmp_path / "gt.xyz",
                       "--vol", tmp_path / "a.aetv", "--gt-vol", tmp_path / "b.aetv", "--out", tmp_path / "r.csv")
    assert code == EXIT_FAILURE
    assert "shape" in err
    code, _, _ = run(capsys, "evaluate", "--pred", tmp_path / "gt.xyz", "--gt", tmp_path / "gt.xyz",
                     "--vol", tmp_path / "a.aetv", "--out", tmp_path / "r.csv")
    assert code == EXIT_USAGE


def test_render_zero_volume_uniform(capsys, tmp_path):
    write_volume(tmp_path / "z.aetv", VoxelVolume.centered(6, 0.5))
    code, summary, _ = run(capsys, "render", "--in", tmp_path / "z.aetv", "--slice", "z=3", "--out", tmp_path / "z.pgm")
    assert code == EXIT_OK
    pix, window = read_pgm(tmp_path / "z.pgm")
    assert pix.shape == (6, 6) and len(np.unique(pix)) == 1
    assert window == (0.0, 0.0)


def test_render_slice_axes(capsys, tmp_path):
    data = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4)
    write_volume(tmp_path / "v.aetv", VoxelVolume(data, 1.0))
    for spec, shape in (("z=1", (3, 4)), ("y=0", (2, 4)), ("x=3", (2, 3))):
        code, summary, _ = run(capsys, "render", "--in", tmp_path / "v.aetv", "--slice", spec,
                               "--out", tmp_path / "s.pgm")
        assert code == EXIT_OK and tuple(summary["shape"]) == shape
    for bad in ("z=2", "w=0", "z"):
        code, _, _ = run(capsys, "render", "--in", tmp_path / "v.aetv", "--slice", bad, "--out", tmp_path / "s.pgm")
        assert code == EXIT_USAGE


def test_render_xyz_is_rasterized(capsys, tmp_path):
    _atoms_file(tmp_path / "a.xyz", [[0, 0, 0], [2.5, 0, 0]])
    code, summary, _ = run(capsys, "render", "--in", tmp_path / "a.xyz", "--out", tmp_path / "a.pgm")
    assert code == EXIT_OK
    pix, (lo, hi) = read_pgm(tmp_path / "a.pgm")
    assert hi > lo >= 0
    # both atoms lie in the central z slice
    row = pix[pix.shape[0] // 2]
    assert np.sum((row[1:-1] > row[:-2]) & (row[1:-1] > row[2:])) == 2


def test_experiment_command(capsys, tmp_path, small_cfg):
    code, summary, err = run(capsys, "experiment", "--matrix", small_cfg, "--out", tmp_path / "m", "--name", "au")
    assert code == EXIT_OK
    assert summary["rows"] == 1
    assert (tmp_path / "m" / "figures" / "rates.png").exists()
    assert "running" in err
    code, again, err = run(capsys, "experiment", "--matrix", small_cfg, "--out", tmp_path / "m", "--name", "au",
                           "--no-figures")
    assert again["csv_sha256"] == summary["csv_sha256"]
    assert "cached" in err


def test_config_reference(capsys, tmp_path):
    code, _, _ = run(capsys, "config-reference", "--out", tmp_path / "ref.cfg")
    assert code == EXIT_OK
    assert "merge_distance = 0.25" in (tmp_path / "ref.cfg").read_text()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "atomsplat", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "atomsplat" in res.stdout
    res = subprocess.run([sys.executable, "-m", "atomsplat", "render"], capture_output=True, text=True)
    assert res.returncode == EXIT_USAGE
    assert res.stdout == ""
