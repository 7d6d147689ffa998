"""Shared domain types, rotation conventions and unit normalization.

Conventions
-----------
Coordinates are right-handed and rotations are active. A tilt of ``angle``
degrees about ``axis`` maps a lab-frame point ``r`` to ``R(angle) @ r``; in
that beam-aligned frame the beam travels along +z, so the detector sees the
(x', y') components: detector columns follow x', detector rows follow y'.
Detector pixel ``(i, j)`` has its center at
``((j - (cols - 1) / 2) * pitch, (i - (rows - 1) / 2) * pitch)``.

Volume arrays are stored z-major, ``data[iz, iy, ix]``, and voxel
``(ix, iy, iz)`` sits at ``origin + spacing * (ix, iy, iz)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

PHYSICAL = "physical"
NORMALIZED = "normalized"

DATA_RANGE_MAX = 256.0


class AtomSplatError(Exception):
    """Base class for all library errors."""


class InvalidConfigurationError(AtomSplatError, ValueError):
    pass


class InvalidInputError(AtomSplatError, ValueError):
    pass


class Axis(enum.IntEnum):
    X = 0
    Y = 1
    Z = 2

    @classmethod
    def parse(cls, value) -> "Axis":
        if isinstance(value, Axis):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise InvalidConfigurationError(f"unknown tilt axis {value!r}") from None


def rotation_matrix(angle_deg: float, axis=Axis.Y) -> np.ndarray:
    """Active right-handed rotation by ``angle_deg`` about ``axis``."""
    axis = Axis.parse(axis)
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    if axis == Axis.X:
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == Axis.Y:
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_stack(angles_deg, axis=Axis.Y) -> np.ndarray:
    """Rotation matrices for every angle, shape ``(n_angles, 3, 3)``."""
    if len(angles_deg) == 0:
        return np.zeros((0, 3, 3))
    return np.stack([rotation_matrix(a, axis) for a in angles_deg])


def rotate_to_beam(point, angle_deg: float, axis=Axis.Y) -> np.ndarray:
    """Express ``point`` (or an ``(n, 3)`` array of points) in the beam frame."""
    if not -90.0 <= angle_deg <= 90.0:
        raise InvalidInputError(f"tilt angle {angle_deg} outside [-90, 90]")
    pts = np.asarray(point, dtype=float)
    return pts @ rotation_matrix(angle_deg, axis).T


@dataclass(frozen=True)
class GaussianAtom:
    mu: tuple
    sigma: float
    q: float

    def __post_init__(self):
        mu = tuple(float(v) for v in self.mu)
        if len(mu) != 3 or not all(math.isfinite(v) for v in mu):
            raise InvalidInputError(f"atom position must be 3 finite values, got {self.mu!r}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise InvalidInputError(f"sigma must be positive, got {self.sigma}")
        if not (self.q >= 0 and math.isfinite(self.q)):
            raise InvalidInputError(f"amplitude must be non-negative, got {self.q}")
        object.__setattr__(self, "mu", mu)


class AtomCloud:
    """Mutable, single-writer collection of isotropic Gaussians.

    Parameters are held as flat arrays. ``grad_accum`` is the running mean of
    the positional-gradient magnitude since the last densification reset and
    ``grad_count`` the number of accumulation events behind it.
    """

    def __init__(self, mu=None, sigma=None, q=None, units: str = PHYSICAL):
        self.mu = np.zeros((0, 3)) if mu is None else np.array(mu, dtype=float).reshape(-1, 3)
        n = len(self.mu)
        self.sigma = np.zeros(0) if sigma is None else np.array(sigma, dtype=float).reshape(-1)
        self.q = np.zeros(0) if q is None else np.array(q, dtype=float).reshape(-1)
        if len(self.sigma) != n or len(self.q) != n:
            raise InvalidInputError("mu, sigma and q must have matching lengths")
        if units not in (PHYSICAL, NORMALIZED):
            raise InvalidInputError(f"unknown units {units!r}")
        self.units = units
        self.grad_accum = np.zeros(n)
        self.grad_count = np.zeros(n, dtype=np.int64)
        self.validate()

    @classmethod
    def from_atoms(cls, atoms, units: str = PHYSICAL) -> "AtomCloud":
        atoms = list(atoms)
        if not atoms:
            return cls(units=units)
        return cls(
            mu=[a.mu for a in atoms],
            sigma=[a.sigma for a in atoms],
            q=[a.q for a in atoms],
            units=units,
        )

    def __len__(self) -> int:
        return len(self.mu)

    @property
    def atoms(self) -> list:
        return [GaussianAtom(tuple(m), float(s), float(a)) for m, s, a in zip(self.mu, self.sigma, self.q)]

    def validate(self) -> None:
        n = len(self.mu)
        if not (len(self.sigma) == len(self.q) == len(self.grad_accum) == len(self.grad_count) == n):
            raise InvalidInputError("atom cloud arrays have inconsistent lengths")
        if not np.all(np.isfinite(self.mu)):
            raise InvalidInputError("non-finite atom position")
        if np.any(~(self.sigma > 0)) or not np.all(np.isfinite(self.sigma)):
            raise InvalidInputError("sigma must be positive and finite")
        if np.any(~(self.q >= 0)) or not np.all(np.isfinite(self.q)):
            raise InvalidInputError("amplitude must be non-negative and finite")

    def copy(self) -> "AtomCloud":
        out = AtomCloud(self.mu, self.sigma, self.q, units=self.units)
        out.grad_accum = self.grad_accum.copy()
        out.grad_count = self.grad_count.copy()
        return out

    def subset(self, keep) -> "AtomCloud":
        """New cloud holding the selected atoms with their accumulators."""
        keep = np.asarray(keep)
        out = AtomCloud(self.mu[keep], self.sigma[keep], self.q[keep], units=self.units)
        out.grad_accum = self.grad_accum[keep].copy()
        out.grad_count = self.grad_count[keep].copy()
        return out

    def extend(self, other: "AtomCloud") -> "AtomCloud":
        if other.units != self.units:
            raise InvalidInputError("cannot combine physical and normalized clouds")
        out = AtomCloud(
            np.vstack([self.mu, other.mu]),
            np.concatenate([self.sigma, other.sigma]),
            np.concatenate([self.q, other.q]),
            units=self.units,
        )
        out.grad_accum = np.concatenate([self.grad_accum, other.grad_accum])
        out.grad_count = np.concatenate([self.grad_count, other.grad_count])
        return out

    def accumulate_gradients(self, grad_norms) -> None:
        """Fold one event of positional-gradient magnitudes into the running means."""
        g = np.asarray(grad_norms, dtype=float)
        if g.shape != self.grad_accum.shape:
            raise InvalidInputError("gradient length does not match cloud size")
        self.grad_count += 1
        self.grad_accum += (g - self.grad_accum) / self.grad_count

    def reset_accumulators(self) -> None:
        self.grad_accum[:] = 0.0
        self.grad_count[:] = 0


@dataclass(frozen=True)
class TiltGeometry:
    angles_deg: tuple
    det_rows: int
    det_cols: int
    pixel_pitch: float = 0.25
    axis: Axis = Axis.Y
    units: str = PHYSICAL

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles_deg)
        object.__setattr__(self, "angles_deg", angles)
        object.__setattr__(self, "axis", Axis.parse(self.axis))
        if any(not math.isfinite(a) or a < -90.0 or a > 90.0 for a in angles):
            raise InvalidConfigurationError("tilt angles must lie in [-90, 90]")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise InvalidConfigurationError("tilt angles must be strictly increasing")
        if int(self.det_rows) < 1 or int(self.det_cols) < 1:
            raise InvalidConfigurationError("detector must have at least one row and column")
        object.__setattr__(self, "det_rows", int(self.det_rows))
        object.__setattr__(self, "det_cols", int(self.det_cols))
        if not (self.pixel_pitch > 0 and math.isfinite(self.pixel_pitch)):
            raise InvalidConfigurationError("pixel pitch must be positive")
        if self.units not in (PHYSICAL, NORMALIZED):
            raise InvalidConfigurationError(f"unknown units {self.units!r}")

    @property
    def n_angles(self) -> int:
        return len(self.angles_deg)

    @property
    def frame_shape(self) -> tuple:
        return (self.det_rows, self.det_cols)

    def rotations(self) -> np.ndarray:
        return rotation_stack(self.angles_deg, self.axis)

    def subset(self, indices) -> "TiltGeometry":
        idx = sorted(int(i) for i in indices)
        return TiltGeometry(
            tuple(self.angles_deg[i] for i in idx),
            self.det_rows,
            self.det_cols,
            self.pixel_pitch,
            self.axis,
            self.units,
        )


@dataclass
class ProjectionStack:
    geometry: TiltGeometry
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        g = self.geometry
        if self.data.shape != (g.n_angles, g.det_rows, g.det_cols):
            raise InvalidInputError(
                f"stack shape {self.data.shape} does not match geometry "
                f"{(g.n_angles, g.det_rows, g.det_cols)}"
            )
        if not np.all(np.isfinite(self.data)):
            raise InvalidInputError("projection data must be finite")

    @classmethod
    def zeros(cls, geometry: TiltGeometry) -> "ProjectionStack":
        return cls(geometry, np.zeros((geometry.n_angles, geometry.det_rows, geometry.det_cols)))

    def subset(self, indices) -> "ProjectionStack":
        idx = sorted(int(i) for i in indices)
        return ProjectionStack(self.geometry.subset(idx), self.data[idx])


@dataclass
class VoxelVolume:
    data: np.ndarray
    spacing: float
    origin: tuple = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise InvalidInputError("volume data must be a non-empty 3D array")
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise InvalidInputError("voxel spacing must be positive")
        self.origin = tuple(float(v) for v in self.origin)
        if len(self.origin) != 3:
            raise InvalidInputError("origin must have 3 components")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInputError("volume data must be finite")

    @property
    def nz(self) -> int:
        return self.data.shape[0]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nx(self) -> int:
        return self.data.shape[2]

    @classmethod
    def centered(cls, n: int, spacing: float, data=None) -> "VoxelVolume":
        """Cubic ``n**3`` grid centered on the origin."""
        half = (n - 1) / 2 * spacing
        if data is None:
            data = np.zeros((n, n, n))
        return cls(data, spacing, (-half, -half, -half))

    def like(self, data) -> "VoxelVolume":
        return VoxelVolume(data, self.spacing, self.origin)

    def axes(self):
        """Physical coordinates of voxel centers along x, y, z."""
        ox, oy, oz = self.origin
        return (
            ox + self.spacing * np.arange(self.nx),
            oy + self.spacing * np.arange(self.ny),
            oz + self.spacing * np.arange(self.nz),
        )


def volume_for_geometry(geometry: TiltGeometry, data=None) -> VoxelVolume:
    """Cubic grid matched to a detector: one voxel per pixel, side = det_cols."""
    return VoxelVolume.centered(geometry.det_cols, geometry.pixel_pitch, data)


@dataclass
class GroundTruthStructure:
    positions: np.ndarray
    species: list
    ref_amplitude: dict
    ref_sigma: dict

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.species = [str(s) for s in self.species]
        if len(self.species) != len(self.positions):
            raise InvalidInputError("positions and species must have the same length")
        self.ref_amplitude = {str(k): float(v) for k, v in self.ref_amplitude.items()}
        self.ref_sigma = {str(k): float(v) for k, v in self.ref_sigma.items()}
        missing = (set(self.species) - set(self.ref_amplitude)) | (set(self.species) - set(self.ref_sigma))
        if missing:
            raise InvalidInputError(f"species without reference parameters: {sorted(missing)}")

    def __len__(self) -> int:
        return len(self.positions)

    def amplitudes(self) -> np.ndarray:
        return np.array([self.ref_amplitude[s] for s in self.species], dtype=float)

    def sigmas(self) -> np.ndarray:
        return np.array([self.ref_sigma[s] for s in self.species], dtype=float)

    def to_cloud(self, extra_sigma: float = 0.0) -> AtomCloud:
        """Gaussian cloud for the structure, optionally widened by a blur.

        Widening keeps the integrated mass: ``q * sigma**3`` is preserved.
        """
        sig = self.sigmas()
        q = self.amplitudes()
        if extra_sigma > 0:
            eff = np.sqrt(sig**2 + extra_sigma**2)
            q = q * (sig / eff) ** 3
            sig = eff
        return AtomCloud(self.positions, sig, q)


@dataclass(frozen=True)
class NormalizationMap:
    """Linear maps between physical and optimization units.

    Space: ``x_n = (x - center) / length`` so the reconstruction cube lands on
    [-0.5, 0.5]^3. Data: ``p_n = data_scale * p`` puts the stack maximum at
    256. Atom amplitudes pick up ``data_scale * length`` so that projecting a
    normalized cloud on the normalized geometry gives the normalized stack.
    """

    data_scale: float
    length: float
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (math.isfinite(self.data_scale) and self.data_scale > 0):
            raise InvalidConfigurationError(f"degenerate data scale {self.data_scale}")
        if not (math.isfinite(self.length) and self.length > 0):
            raise InvalidConfigurationError(f"degenerate space scale {self.length}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def for_stack(cls, stack: ProjectionStack) -> "NormalizationMap":
        g = stack.geometry
        peak = float(np.max(stack.data)) if stack.data.size else 0.0
        scale = DATA_RANGE_MAX / peak if peak > 0 else 1.0
        length = max(g.det_rows, g.det_cols) * g.pixel_pitch
        return cls(scale, length)

    @property
    def amplitude_scale(self) -> float:
        return self.data_scale * self.length

    def normalize_positions(self, x):
        return (np.asarray(x, dtype=float) - np.asarray(self.center)) / self.length

    def denormalize_positions(self, x):
        return np.asarray(x, dtype=float) * self.length + np.asarray(self.center)

    def normalize_geometry(self, g: TiltGeometry) -> TiltGeometry:
        if g.units != PHYSICAL:
            raise InvalidInputError("geometry is already normalized")
        return TiltGeometry(g.angles_deg, g.det_rows, g.det_cols, g.pixel_pitch / self.length, g.axis, NORMALIZED)

    def denormalize_geometry(self, g: TiltGeometry) -> TiltGeometry:
        if g.units != NORMALIZED:
            raise InvalidInputError("geometry is not normalized")
        return TiltGeometry(g.angles_deg, g.det_rows, g.det_cols, g.pixel_pitch * self.length, g.axis, PHYSICAL)

    def normalize(self, obj):
        if isinstance(obj, ProjectionStack):
            return ProjectionStack(self.normalize_geometry(obj.geometry), obj.data * self.data_scale)
        if isinstance(obj, AtomCloud):
            if obj.units != PHYSICAL:
                raise InvalidInputError("cloud is already normalized")
            out = AtomCloud(
                self.normalize_positions(obj.mu),
                obj.sigma / self.length,
                obj.q * self.amplitude_scale,
                units=NORMALIZED,
            )
            out.grad_accum = obj.grad_accum.copy()
            out.grad_count = obj.grad_count.copy()
            return out
        raise InvalidInputError(f"cannot normalize {type(obj).__name__}")

    def denormalize(self, obj):
        if isinstance(obj, ProjectionStack):
            return ProjectionStack(self.denormalize_geometry(obj.geometry), obj.data / self.data_scale)
        if isinstance(obj, AtomCloud):
            if obj.units != NORMALIZED:
                raise InvalidInputError("cloud is not normalized")
            out = AtomCloud(
                self.denormalize_positions(obj.mu),
                obj.sigma * self.length,
                obj.q / self.amplitude_scale,
                units=PHYSICAL,
            )
            out.grad_accum = obj.grad_accum.copy()
            out.grad_count = obj.grad_count.copy()
            return out
        raise InvalidInputError(f"cannot denormalize {type(obj).__name__}")
