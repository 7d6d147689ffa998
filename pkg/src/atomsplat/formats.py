"""On-disk formats: projection stacks, volumes, atom lists, configs, run logs.

Binary containers are little-endian with f64 metadata and f32 payloads.
Readers raise a distinct error class for a wrong magic, an unsupported
version and a truncated payload.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import enum
import io
import logging
import struct
from pathlib import Path

import numpy as np

from .core import (
    AtomCloud,
    AtomSplatError,
    Axis,
    GroundTruthStructure,
    InvalidConfigurationError,
    InvalidInputError,
    ProjectionStack,
    TiltGeometry,
    VoxelVolume,
)

log = logging.getLogger(__name__)

STACK_MAGIC = b"AETP"
VOLUME_MAGIC = b"AETV"
FORMAT_VERSION = 1
GAUSSIAN_LABEL = "GA"


class FormatError(AtomSplatError, ValueError):
    """Base class for unreadable files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class AtomsParseError(FormatError):
    pass


class ConfigError(InvalidConfigurationError):
    def __init__(self, message: str, line: int = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file ends inside {what}: need {n} bytes, {len(self.buf) - self.pos} left",
                                     self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def header(self, magic: bytes) -> int:
        got = self.take(4, "magic")
        if got != magic:
            raise BadMagicError(f"expected magic {magic!r}, found {got!r}")
        (version,) = self.unpack("<I", "version")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"format version {version} is not supported (expected {FORMAT_VERSION})")
        return version


def stack_bytes(stack: ProjectionStack) -> bytes:
    g = stack.geometry
    head = STACK_MAGIC + struct.pack("<IIIIdB", FORMAT_VERSION, g.n_angles, g.det_rows, g.det_cols,
                                     g.pixel_pitch, int(g.axis))
    angles = np.asarray(g.angles_deg, dtype="<f8").tobytes()
    return head + angles + np.ascontiguousarray(stack.data, dtype="<f4").tobytes()


def write_projection_stack(path, stack: ProjectionStack) -> None:
    Path(path).write_bytes(stack_bytes(stack))


def parse_projection_stack(buf: bytes) -> ProjectionStack:
    r = _Reader(buf)
    r.header(STACK_MAGIC)
    n, rows, cols = r.unpack("<III", "dimensions")
    (pitch,) = r.unpack("<d", "pixel pitch")
    (axis,) = r.unpack("<B", "axis")
    if axis > 2:
        raise FormatError(f"axis code {axis} is not one of 0, 1, 2")
    angles = np.frombuffer(r.take(8 * n, "tilt angles"), dtype="<f8")
    data = np.frombuffer(r.take(4 * n * rows * cols, "frame data"), dtype="<f4").reshape(n, rows, cols)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after frame data")
    geom = TiltGeometry(tuple(angles.tolist()), rows, cols, pitch, Axis(axis))
    return ProjectionStack(geom, data.astype(np.float64))


def read_projection_stack(path) -> ProjectionStack:
    return parse_projection_stack(Path(path).read_bytes())


def volume_bytes(volume: VoxelVolume) -> bytes:
    nz, ny, nx = volume.data.shape
    head = VOLUME_MAGIC + struct.pack("<IIIId3d", FORMAT_VERSION, nx, ny, nz, volume.spacing, *volume.origin)
    return head + np.ascontiguousarray(volume.data, dtype="<f4").tobytes()


def write_volume(path, volume: VoxelVolume) -> None:
    Path(path).write_bytes(volume_bytes(volume))


def parse_volume(buf: bytes) -> VoxelVolume:
    r = _Reader(buf)
    r.header(VOLUME_MAGIC)
    nx, ny, nz = r.unpack("<III", "dimensions")
    (spacing,) = r.unpack("<d", "spacing")
    origin = r.unpack("<3d", "origin")
    data = np.frombuffer(r.take(4 * nx * ny * nz, "voxel data"), dtype="<f4").reshape(nz, ny, nx)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after voxel data")
    return VoxelVolume(data.astype(np.float64), spacing, origin)


def read_volume(path) -> VoxelVolume:
    return parse_volume(Path(path).read_bytes())


def _g(x: float) -> str:
    return f"{x:.6g}"


def atoms_text(obj, comment: str = "") -> str:
    """Extended XYZ text for a cloud (label GA) or a ground-truth structure."""
    if isinstance(obj, GroundTruthStructure):
        labels = obj.species
        mu, q, sigma = obj.positions, obj.amplitudes(), obj.sigmas()
    elif isinstance(obj, AtomCloud):
        labels = [GAUSSIAN_LABEL] * len(obj)
        mu, q, sigma = obj.mu, obj.q, obj.sigma
    else:
        raise InvalidInputError("expected an AtomCloud or a GroundTruthStructure")
    note = "units=angstrom columns=label,x,y,z,q,sigma"
    if comment:
        note += " " + " ".join(comment.split())
    lines = [str(len(labels)), note]
    for lab, p, a, s in zip(labels, mu, q, sigma):
        lines.append(" ".join([lab, _g(p[0]), _g(p[1]), _g(p[2]), _g(a), _g(s)]))
    return "\n".join(lines) + "\n"


def write_atoms(path, obj, comment: str = "") -> None:
    Path(path).write_text(atoms_text(obj, comment))


@dataclasses.dataclass
class AtomRecords:
    labels: list
    positions: np.ndarray
    q: np.ndarray
    sigma: np.ndarray
    comment: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def to_cloud(self) -> AtomCloud:
        return AtomCloud(self.positions, self.sigma, self.q)

    def to_structure(self) -> GroundTruthStructure:
        """Rebuild a structure; every species must use one amplitude and sigma."""
        amp, sig = {}, {}
        for lab, a, s in zip(self.labels, self.q, self.sigma):
            if amp.setdefault(lab, a) != a or sig.setdefault(lab, s) != s:
                raise AtomsParseError(f"species {lab!r} has more than one amplitude or sigma")
        return GroundTruthStructure(self.positions, list(self.labels), amp, sig)


def parse_atoms(text: str) -> AtomRecords:
    lines = text.splitlines()
    if not lines:
        raise AtomsParseError("empty atom file")
    try:
        n = int(lines[0].strip())
    except ValueError:
        raise AtomsParseError(f"line 1: expected an atom count, got {lines[0]!r}") from None
    if n < 0:
        raise AtomsParseError("line 1: negative atom count")
    comment = lines[1] if len(lines) > 1 else ""
    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != n:
        raise AtomsParseError(f"header announces {n} atoms but the body has {len(body)}")
    labels, rows = [], []
    for k, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != 6:
            raise AtomsParseError(f"atom {k + 1}: expected 6 fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError:
            raise AtomsParseError(f"atom {k + 1}: non-numeric field in {ln!r}") from None
        labels.append(parts[0])
    arr = np.array(rows, dtype=float).reshape(-1, 5)
    return AtomRecords(labels, arr[:, :3].copy(), arr[:, 3].copy(), arr[:, 4].copy(), comment)


def read_atoms(path) -> AtomRecords:
    return parse_atoms(Path(path).read_text())


# ---------------------------------------------------------------------------
# configs

RUN_LOG_HEADER = ["iter", "loss", "k", "n_densified", "n_pruned", "n_merged"]


def write_run_log(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_LOG_HEADER)
        for r in records:
            w.writerow([r.iter, repr(float(r.loss)), r.k, r.n_densified, r.n_pruned, r.n_merged])


def read_run_log(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != RUN_LOG_HEADER:
        raise FormatError("run log header does not match")
    return [dict(zip(RUN_LOG_HEADER, (int(r[0]), float(r[1]), int(r[2]), int(r[3]), int(r[4]), int(r[5]))))
            for r in rows[1:]]


def _convert(value: str, default, key: str, line: int):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, enum.Enum):
            return value.strip()
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, (tuple, list)):
            return tuple(v.strip() for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {type(default).__name__}", line) from None
    return value.strip()


@dataclasses.dataclass(frozen=True)
class ConfigKey:
    default: object
    help: str
    required: bool = False


OPTIMIZER_HELP = {
    "n_init": "Gaussians drawn uniformly in the reconstruction cube",
    "n_iters": "optimization steps",
    "lr_mu": "position step (unit cube), decays to lr_mu * lr_mu_final_ratio",
    "lr_sigma": "log-sigma step",
    "lr_q": "amplitude step",
    "update_rule": "adam or momentum",
    "momentum": "first-moment decay",
    "adam_beta2": "second-moment decay",
    "adam_eps": "adam denominator floor",
    "lr_mu_final_ratio": "final / initial position step",
    "sigma_init": "initial Gaussian sigma (angstrom)",
    "q_init": "initial amplitude (0 = match the integrated projection mass)",
    "sigma_min": "hard sigma floor (angstrom)",
    "sigma_min_pixels": "sigma floor in detector pixels",
    "sigma_max": "sigma ceiling (angstrom)",
    "batch_angles": "tilts per step (0 = all)",
    "densify_grad_threshold": "mean positional-gradient magnitude that triggers a clone",
    "densify_interval": "steps between densify passes",
    "densify_until": "last densify step (0 = half of n_iters)",
    "prune_q_threshold": "prune below this fraction of the largest amplitude",
    "prune_interval": "steps between prune passes",
    "merge_distance": "minimum interatomic distance enforced by merging (angstrom)",
    "merge_interval": "steps between merge passes",
    "merge_enabled": "apply the minimum-distance merge",
    "knn_cutover": "above this many Gaussians merge candidates come from knn_k nearest neighbors",
    "knn_k": "neighbors searched per Gaussian above the cutover",
    "warmup_iters": "steps before densify, prune and merge start",
    "stall_window": "steps without improvement before a stall warning",
    "truncation": "footprint cutoff in sigmas",
    "seed": "optimizer seed",
}


def _schema():
    from .optimize import OptimizerConfig
    from .simulate import AcquisitionSpec

    particle = {
        "kind": ConfigKey("lattice_fcc", "lattice_fcc or amorphous"),
        "radius": ConfigKey(10.0, "particle radius (angstrom)"),
        "lattice_constant": ConfigKey(4.08, "FCC lattice constant (angstrom)"),
        "min_distance": ConfigKey(2.4, "amorphous minimum separation (angstrom)"),
        "species": ConfigKey(("Au:1.0",), "label:fraction[:amplitude[:sigma]] items, comma separated"),
        "n_atoms": ConfigKey(0, "amorphous target count (0 = fill until the rejection budget)"),
        "rejection_budget": ConfigKey(20000, "consecutive rejected draws before amorphous fill stops"),
        "seed": ConfigKey(0, "structure seed"),
    }
    acq_help = {
        "scheme": "full, limited, sampled, mw or custom",
        "angle_min": "custom scheme first tilt (deg)",
        "angle_max": "custom scheme last tilt (deg)",
        "angle_step": "custom scheme tilt step (deg)",
        "probe_sigma": "probe blur sigma (angstrom)",
        "noise_sigma": "additive Gaussian noise sigma (projection units)",
        "pixel_pitch": "detector pixel pitch (angstrom)",
        "det_rows": "detector rows",
        "det_cols": "detector columns",
        "axis": "tilt axis x, y or z",
        "seed": "noise seed",
        "truncation": "footprint cutoff in sigmas",
    }
    acq_defaults = AcquisitionSpec()
    acquisition = {}
    for f in dataclasses.fields(AcquisitionSpec):
        d = getattr(acq_defaults, f.name)
        if isinstance(d, enum.Enum):
            d = d.name.lower() if isinstance(d, Axis) else d.value
        acquisition[f.name] = ConfigKey(d, acq_help.get(f.name, ""))
    opt_defaults = OptimizerConfig()
    optimizer = {f.name: ConfigKey(getattr(opt_defaults, f.name), OPTIMIZER_HELP.get(f.name, ""))
                 for f in dataclasses.fields(OptimizerConfig)}
    baselines = {
        "sart_iters": ConfigKey(50, "SART sweeps"),
        "sart_relaxation": ConfigKey(0.3, "SART relaxation"),
        "trace_floor": ConfigKey(0.15, "tracing floor as a fraction of the volume maximum"),
        "min_separation": ConfigKey(2.0, "tracing exclusion distance (angstrom)"),
    }
    experiment = {
        "schemes": ConfigKey(("full", "limited"), "tilt schemes, comma separated"),
        "methods": ConfigKey(("gaussian", "fbp", "sart"), "methods, comma separated"),
        "seeds": ConfigKey(("0",), "particle/noise seeds, comma separated"),
        "match_tolerance": ConfigKey(0.75, "atom matching tolerance (angstrom)"),
        "ssim_window": ConfigKey(7, "SSIM window edge (voxels)"),
        "fpr_denominator": ConfigKey("pred", "FPR denominator: pred (FP / n_pred) or gt (FP / n_gt)"),
    }
    return {"particle": particle, "acquisition": acquisition, "optimizer": optimizer,
            "baselines": baselines, "experiment": experiment}


def config_schema() -> dict:
    return _schema()


def parse_config(text: str, required: dict = None, schema: dict = None) -> dict:
    """Read sectioned ``key = value`` text into typed values, filling defaults.

    Unknown sections and keys are logged as warnings and ignored. ``required``
    maps section names to keys that must be present.
    """
    schema = _schema() if schema is None else schema
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), strict=True,
                                   empty_lines_in_values=False)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key outside of any [section]", e.lineno) from None
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigError(f"cannot parse {line.strip()!r}", lineno) from None
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"duplicate key {e.option!r} in [{e.section}]", e.lineno) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]", e.lineno) from None
    lines = {}
    section = None
    for n, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif section and ("=" in s or ":" in s) and not s.startswith(("#", ";")):
            key = s.split("=", 1)[0].split(":", 1)[0].strip() if "=" in s else s.split(":", 1)[0].strip()
            lines[(section, key)] = n
    out = {name: {k: v.default for k, v in keys.items()} for name, keys in schema.items()}
    present = {name: set() for name in schema}
    for sec in cp.sections():
        if sec not in schema:
            log.warning("unknown config section [%s] ignored", sec)
            continue
        for key, value in cp.items(sec):
            line = lines.get((sec, key))
            if key not in schema[sec]:
                log.warning("line %s: unknown key %r in [%s] ignored", line, key, sec)
                continue
            out[sec][key] = _convert(value, schema[sec][key].default, key, line)
            present[sec].add(key)
    missing = []
    for sec, keys in (required or {}).items():
        for key in keys:
            if key not in present.get(sec, ()):
                missing.append(f"[{sec}] {key}")
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing))
    return out


def read_config(path, required: dict = None) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, required)


def config_reference() -> str:
    """Every section, key and default as a commented config file."""
    buf = io.StringIO()
    buf.write("# atomsplat configuration reference; every key is optional unless marked required\n")
    for sec, keys in _schema().items():
        buf.write(f"\n[{sec}]\n")
        for key, spec in keys.items():
            d = spec.default
            if isinstance(d, enum.Enum):
                d = d.value
            if isinstance(d, (tuple, list)):
                d = ", ".join(str(v) for v in d)
            if isinstance(d, bool):
                d = "true" if d else "false"
            if spec.help:
                buf.write(f"# {spec.help}\n")
            buf.write(f"{key} = {d}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# slice renders

def pgm_bytes(image: np.ndarray) -> bytes:
    """16-bit binary PGM with min-max windowing; the window goes in the comment."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise InvalidInputError("PGM images must be 2D")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = np.round((img - lo) / (hi - lo) * 65535.0)
    else:
        scaled = np.zeros_like(img)
    head = f"P5\n# window min={lo!r} max={hi!r}\n{img.shape[1]} {img.shape[0]}\n65535\n".encode()
    return head + scaled.astype(">u2").tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(image))


def read_pgm(path):
    """Return ``(pixels, (lo, hi))`` from a file written by :func:`write_pgm`."""
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise BadMagicError("not a binary PGM")
    window = dict(kv.split("=") for kv in parts[1].decode().lstrip("# ").split()[1:])
    w, h = (int(v) for v in parts[2].split())
    if len(parts[4]) < 2 * w * h:
        raise TruncatedFileError("PGM pixel data is short", len(buf))
    pix = np.frombuffer(parts[4][: 2 * w * h], dtype=">u2").reshape(h, w)
    return pix.astype(np.int64), (float(window["min"]), float(window["max"]))
