"""Ground-truth nanoparticles and synthetic tilt series."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    AtomSplatError,
    Axis,
    GroundTruthStructure,
    InvalidConfigurationError,
    ProjectionStack,
    TiltGeometry,
)
from .splat import DEFAULT_TRUNCATION, project_frames

ATOMIC_NUMBERS = {
    "H": 1, "C": 6, "N": 7, "O": 8, "Al": 13, "Si": 14, "Ti": 22, "Fe": 26, "Co": 27, "Ni": 28, "Cu": 29,
    "Zn": 30, "Zr": 40, "Mo": 42, "Ru": 44, "Rh": 45, "Pd": 46, "Ag": 47, "Te": 52, "W": 74, "Ir": 77,
    "Pt": 78, "Au": 79, "Pb": 82,
}

DEFAULT_ATOM_SIGMA = 0.4


class EmptyStructureError(AtomSplatError):
    pass


class InfeasibleSpecError(AtomSplatError):
    pass


class ParticleKind(str, enum.Enum):
    LATTICE_FCC = "lattice_fcc"
    AMORPHOUS = "amorphous"

    @classmethod
    def parse(cls, value) -> "ParticleKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"latticefcc": "lattice_fcc", "fcc": "lattice_fcc", "lattice": "lattice_fcc"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise InvalidConfigurationError(f"unknown particle kind {value!r}") from None


class Scheme(str, enum.Enum):
    FULL = "full"
    LIMITED = "limited"
    SAMPLED = "sampled"
    MW = "mw"
    CUSTOM = "custom"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise InvalidConfigurationError(f"unknown tilt scheme {value!r}") from None


# (min, max, step) in degrees
SCHEME_RANGES = {
    Scheme.FULL: (-90.0, 90.0, 1.0),
    Scheme.LIMITED: (-70.0, 70.0, 3.0),
    Scheme.SAMPLED: (-90.0, 90.0, 3.0),
    Scheme.MW: (-70.0, 70.0, 1.0),
}


@dataclass(frozen=True)
class Species:
    label: str
    fraction: float
    ref_amplitude: float
    ref_sigma: float = DEFAULT_ATOM_SIGMA


def species_mix(entries) -> tuple:
    """Build a species list from ``(label, fraction[, amplitude[, sigma]])`` items.

    Missing amplitudes follow the atomic number, scaled so that the heaviest
    species in the mix has amplitude 1.0.
    """
    entries = [tuple(e) for e in entries]
    if not entries:
        raise InvalidConfigurationError("species mix is empty")
    explicit = [len(e) >= 3 and e[2] is not None for e in entries]
    z = []
    for e, has_amp in zip(entries, explicit):
        if not has_amp and e[0] not in ATOMIC_NUMBERS:
            raise InvalidConfigurationError(f"no atomic number for species {e[0]!r}; give an amplitude")
        z.append(ATOMIC_NUMBERS.get(e[0], 0))
    zmax = max(z) or 1
    out = []
    for e, has_amp, zi in zip(entries, explicit, z):
        amp = float(e[2]) if has_amp else zi / zmax
        sigma = float(e[3]) if len(e) >= 4 and e[3] is not None else DEFAULT_ATOM_SIGMA
        out.append(Species(str(e[0]), float(e[1]), amp, sigma))
    return tuple(out)


@dataclass(frozen=True)
class ParticleSpec:
    kind: ParticleKind = ParticleKind.LATTICE_FCC
    radius: float = 10.0
    lattice_constant: float = 4.08
    min_distance: float = 2.4
    species: tuple = field(default_factory=lambda: species_mix([("Au", 1.0)]))
    seed: int = 0
    n_atoms: int = 0
    rejection_budget: int = 20000

    def __post_init__(self):
        object.__setattr__(self, "kind", ParticleKind.parse(self.kind))
        if not self.radius > 0:
            raise InvalidConfigurationError("particle radius must be positive")
        if not self.species:
            raise InvalidConfigurationError("particle needs at least one species")
        total = sum(s.fraction for s in self.species)
        if abs(total - 1.0) > 1e-9:
            raise InvalidConfigurationError(f"species fractions sum to {total}, expected 1")
        if any(s.fraction < 0 for s in self.species):
            raise InvalidConfigurationError("species fractions must be non-negative")
        if self.kind == ParticleKind.LATTICE_FCC and not self.lattice_constant > 0:
            raise InvalidConfigurationError("lattice constant must be positive")
        if self.kind == ParticleKind.AMORPHOUS and not self.min_distance > 0:
            raise InvalidConfigurationError("min_distance must be positive")


@dataclass(frozen=True)
class AcquisitionSpec:
    scheme: Scheme = Scheme.FULL
    angle_min: float = -90.0
    angle_max: float = 90.0
    angle_step: float = 1.0
    probe_sigma: float = 0.5
    noise_sigma: float = 0.0
    pixel_pitch: float = 0.25
    det_rows: int = 64
    det_cols: int = 64
    axis: Axis = Axis.Y
    seed: int = 0
    truncation: float = DEFAULT_TRUNCATION

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        object.__setattr__(self, "axis", Axis.parse(self.axis))
        if self.scheme != Scheme.CUSTOM:
            lo, hi, step = SCHEME_RANGES[self.scheme]
            object.__setattr__(self, "angle_min", lo)
            object.__setattr__(self, "angle_max", hi)
            object.__setattr__(self, "angle_step", step)
        if not self.angle_step > 0:
            raise InvalidConfigurationError("angle step must be positive")
        if not self.angle_min < self.angle_max:
            raise InvalidConfigurationError("angle_min must be below angle_max")
        if self.probe_sigma < 0 or self.noise_sigma < 0:
            raise InvalidConfigurationError("probe and noise sigmas must be non-negative")
        if not self.pixel_pitch > 0:
            raise InvalidConfigurationError("pixel pitch must be positive")

    def angles(self) -> tuple:
        return angle_range(self.angle_min, self.angle_max, self.angle_step)

    def geometry(self) -> TiltGeometry:
        return TiltGeometry(self.angles(), self.det_rows, self.det_cols, self.pixel_pitch, self.axis)


def angle_range(lo: float, hi: float, step: float) -> tuple:
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return tuple(float(round(lo + k * step, 10)) for k in range(n))


def make_tilt_scheme(scheme, custom=None) -> tuple:
    """Tilt angles (degrees) of a named acquisition scheme."""
    scheme = Scheme.parse(scheme)
    if scheme == Scheme.CUSTOM:
        if custom is None:
            raise InvalidConfigurationError("custom scheme needs explicit angles")
        return tuple(float(a) for a in custom)
    return angle_range(*SCHEME_RANGES[scheme])


def _assign_species(n: int, species, rng: np.random.Generator) -> list:
    # exact counts by largest remainder, then a seeded shuffle
    raw = np.array([s.fraction * n for s in species])
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    labels = [s.label for s, c in zip(species, counts) for _ in range(c)]
    perm = rng.permutation(n)
    return [labels[i] for i in perm]


def _structure(positions, spec: ParticleSpec, rng) -> GroundTruthStructure:
    return GroundTruthStructure(
        positions,
        _assign_species(len(positions), spec.species, rng),
        {s.label: s.ref_amplitude for s in spec.species},
        {s.label: s.ref_sigma for s in spec.species},
    )


def make_lattice_particle(spec: ParticleSpec) -> GroundTruthStructure:
    """FCC lattice sites within ``spec.radius`` of the origin."""
    if spec.kind != ParticleKind.LATTICE_FCC:
        raise InvalidConfigurationError("make_lattice_particle needs a lattice_fcc spec")
    a = spec.lattice_constant
    n = int(math.ceil(spec.radius / a)) + 1
    cells = np.arange(-n, n + 1)
    basis = np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]])
    grid = np.stack(np.meshgrid(cells, cells, cells, indexing="ij"), axis=-1).reshape(-1, 3)
    sites = (grid[:, None, :] + basis[None, :, :]).reshape(-1, 3) * a
    sites = sites[np.einsum("ij,ij->i", sites, sites) <= spec.radius**2 + 1e-9]
    if len(sites) == 0:
        raise EmptyStructureError(f"no lattice site within radius {spec.radius} A")
    sites = sites[np.lexsort((sites[:, 2], sites[:, 1], sites[:, 0]))]
    rng = np.random.default_rng(spec.seed)
    return _structure(sites, spec, rng)


def make_amorphous_particle(spec: ParticleSpec) -> GroundTruthStructure:
    """Random sequential insertion inside a sphere with a hard minimum distance.

    Insertion stops once ``rejection_budget`` consecutive candidates have been
    rejected, or the requested ``n_atoms`` is reached.
    """
    if spec.kind != ParticleKind.AMORPHOUS:
        raise InvalidConfigurationError("make_amorphous_particle needs an amorphous spec")
    rng = np.random.default_rng(spec.seed)
    d = spec.min_distance
    d2 = d * d
    cells: dict = {}
    placed = []
    misses = 0
    while misses < spec.rejection_budget:
        if spec.n_atoms and len(placed) >= spec.n_atoms:
            break
        p = rng.uniform(-spec.radius, spec.radius, 3)
        if p @ p > spec.radius**2:
            continue
        key = tuple(np.floor(p / d).astype(int))
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for other in cells.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                        diff = p - other
                        if diff @ diff < d2:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
        if not ok:
            misses += 1
            continue
        misses = 0
        placed.append(p)
        cells.setdefault(key, []).append(p)
    if not placed:
        raise InfeasibleSpecError("rejection budget exhausted before any atom was placed")
    if spec.n_atoms and len(placed) < spec.n_atoms:
        raise InfeasibleSpecError(f"placed only {len(placed)} of {spec.n_atoms} atoms")
    return _structure(np.array(placed), spec, rng)


def make_particle(spec: ParticleSpec) -> GroundTruthStructure:
    if spec.kind == ParticleKind.LATTICE_FCC:
        return make_lattice_particle(spec)
    return make_amorphous_particle(spec)


def frame_noise(seed: int, n_frames: int, shape, sigma: float) -> np.ndarray:
    """Per-frame i.i.d. Gaussian noise, each frame from its own spawned seed."""
    out = np.zeros((n_frames,) + tuple(shape))
    if sigma <= 0 or n_frames == 0:
        return out
    for a, child in enumerate(np.random.SeedSequence(seed).spawn(n_frames)):
        out[a] = np.random.default_rng(child).normal(0.0, sigma, shape)
    return out


def synthesize_projections(gt: GroundTruthStructure, acq: AcquisitionSpec, geometry: TiltGeometry = None) -> ProjectionStack:
    """Blurred, noisy projections of the ground truth.

    The probe blur is exact: each atom is projected as a Gaussian of width
    ``sqrt(ref_sigma**2 + probe_sigma**2)`` with mass-preserving amplitude.
    """
    geometry = acq.geometry() if geometry is None else geometry
    cloud = gt.to_cloud(acq.probe_sigma)
    data = project_frames(cloud.mu, cloud.sigma, cloud.q, geometry, acq.truncation)
    data += frame_noise(acq.seed, geometry.n_angles, geometry.frame_shape, acq.noise_sigma)
    return ProjectionStack(geometry, data)
