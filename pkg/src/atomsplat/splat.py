"""Analytic projection of isotropic Gaussians and L1-loss gradients.

The line integral of ``q * exp(-|r - mu|^2 / (2 sigma^2))`` along the beam is
``q * sigma * sqrt(2 pi) * exp(-|u - c|^2 / (2 sigma^2))`` where ``c`` is the
detector-plane position of the rotated center. Footprints are evaluated at
pixel centers inside a disk of ``truncation * sigma`` and lowered by the
Gaussian's value at the disk edge, so the projection (and the loss) stays
continuous as pixels enter or leave the support.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .core import (
    DATA_RANGE_MAX,
    AtomCloud,
    GaussianAtom,
    InvalidInputError,
    ProjectionStack,
    TiltGeometry,
    VoxelVolume,
    rotation_matrix,
)

SQRT_2PI = math.sqrt(2.0 * math.pi)

# exp(-t^2/2) at 6 sigma is 1.5e-8: below every tolerance the footprint is held to.
DEFAULT_TRUNCATION = 6.0


@njit(cache=True)
def edge_value(truncation):
    """Relative footprint height at the truncation radius, removed from every pixel."""
    return math.exp(-0.5 * truncation * truncation)


@dataclass
class SplatGradients:
    d_mu: np.ndarray
    d_sigma: np.ndarray
    d_q: np.ndarray

    def __len__(self) -> int:
        return len(self.d_q)

    def position_norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.d_mu**2, axis=1))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.d_mu)) and np.all(np.isfinite(self.d_sigma)) and np.all(np.isfinite(self.d_q)))


@njit(cache=True)
def _pixel_range(center, radius, n, pitch):
    half = (n - 1) / 2.0
    lo = math.ceil((center - radius) / pitch + half)
    hi = math.floor((center + radius) / pitch + half)
    if lo < 0:
        lo = 0
    if hi > n - 1:
        hi = n - 1
    return lo, hi


@njit(cache=True)
def _splat_one(out, cx, cy, sigma, q, pitch, truncation):
    rows, cols = out.shape
    r = truncation * sigma
    r2 = r * r
    amp = q * sigma * SQRT_2PI
    inv = 1.0 / (2.0 * sigma * sigma)
    cut = edge_value(truncation)
    i0, i1 = _pixel_range(cy, r, rows, pitch)
    j0, j1 = _pixel_range(cx, r, cols, pitch)
    hr = (rows - 1) / 2.0
    hc = (cols - 1) / 2.0
    for i in range(i0, i1 + 1):
        dy = (i - hr) * pitch - cy
        for j in range(j0, j1 + 1):
            dx = (j - hc) * pitch - cx
            d2 = dx * dx + dy * dy
            if d2 <= r2:
                out[i, j] += amp * (math.exp(-d2 * inv) - cut)


@njit(cache=True, parallel=True)
def _forward_kernel(mu, sigma, q, rot, pitch, truncation, out):
    n_angles = rot.shape[0]
    for a in prange(n_angles):
        frame = out[a]
        for k in range(mu.shape[0]):
            cx = rot[a, 0, 0] * mu[k, 0] + rot[a, 0, 1] * mu[k, 1] + rot[a, 0, 2] * mu[k, 2]
            cy = rot[a, 1, 0] * mu[k, 0] + rot[a, 1, 1] * mu[k, 1] + rot[a, 1, 2] * mu[k, 2]
            _splat_one(frame, cx, cy, sigma[k], q[k], pitch, truncation)


@njit(cache=True, parallel=True)
def _backward_kernel(mu, sigma, q, rot, pitch, truncation, weight, d_mu, d_sigma, d_q):
    # weight holds dLoss/dPixel; every atom is reduced by one thread in a fixed order.
    n_angles, rows, cols = weight.shape
    hr = (rows - 1) / 2.0
    hc = (cols - 1) / 2.0
    cut = edge_value(truncation)
    for k in prange(mu.shape[0]):
        s = sigma[k]
        r = truncation * s
        r2 = r * r
        inv = 1.0 / (2.0 * s * s)
        inv_s2 = 1.0 / (s * s)
        base = s * SQRT_2PI
        amp = q[k] * base
        gq = 0.0
        gs = 0.0
        gm0 = 0.0
        gm1 = 0.0
        gm2 = 0.0
        for a in range(n_angles):
            cx = rot[a, 0, 0] * mu[k, 0] + rot[a, 0, 1] * mu[k, 1] + rot[a, 0, 2] * mu[k, 2]
            cy = rot[a, 1, 0] * mu[k, 0] + rot[a, 1, 1] * mu[k, 1] + rot[a, 1, 2] * mu[k, 2]
            i0, i1 = _pixel_range(cy, r, rows, pitch)
            j0, j1 = _pixel_range(cx, r, cols, pitch)
            sw = 0.0
            w0 = 0.0
            sd2 = 0.0
            gx = 0.0
            gy = 0.0
            for i in range(i0, i1 + 1):
                dy = (i - hr) * pitch - cy
                for j in range(j0, j1 + 1):
                    w = weight[a, i, j]
                    if w == 0.0:
                        continue
                    dx = (j - hc) * pitch - cx
                    d2 = dx * dx + dy * dy
                    if d2 <= r2:
                        we = w * math.exp(-d2 * inv)
                        w0 += w
                        sw += we
                        sd2 += we * d2
                        gx += we * dx
                        gy += we * dy
            gq += base * (sw - cut * w0)
            gs += q[k] * SQRT_2PI * (sw - cut * w0 + sd2 * inv_s2)
            gx *= amp * inv_s2
            gy *= amp * inv_s2
            gm0 += rot[a, 0, 0] * gx + rot[a, 1, 0] * gy
            gm1 += rot[a, 0, 1] * gx + rot[a, 1, 1] * gy
            gm2 += rot[a, 0, 2] * gx + rot[a, 1, 2] * gy
        d_q[k] = gq
        d_sigma[k] = gs
        d_mu[k, 0] = gm0
        d_mu[k, 1] = gm1
        d_mu[k, 2] = gm2


def _check_units(cloud: AtomCloud, geometry: TiltGeometry) -> None:
    if cloud.units != geometry.units:
        raise InvalidInputError(f"cloud is {cloud.units} but geometry is {geometry.units}")


def project_atom(atom: GaussianAtom, angle_deg: float, geometry: TiltGeometry, out: np.ndarray,
                 truncation: float = DEFAULT_TRUNCATION) -> None:
    """Add one atom's footprint at ``angle_deg`` to the 2D accumulator ``out``."""
    if out.shape != geometry.frame_shape:
        raise InvalidInputError(f"accumulator shape {out.shape} != detector {geometry.frame_shape}")
    rot = rotation_matrix(angle_deg, geometry.axis)
    c = rot @ np.asarray(atom.mu, dtype=float)
    _splat_one(out, float(c[0]), float(c[1]), float(atom.sigma), float(atom.q), float(geometry.pixel_pitch),
               float(truncation))


def _arrays(cloud: AtomCloud):
    return (np.ascontiguousarray(cloud.mu, dtype=np.float64),
            np.ascontiguousarray(cloud.sigma, dtype=np.float64),
            np.ascontiguousarray(cloud.q, dtype=np.float64))


def project_frames(mu, sigma, q, geometry: TiltGeometry, truncation: float = DEFAULT_TRUNCATION) -> np.ndarray:
    """Raw-array forward projection, shape ``(n_angles, rows, cols)``."""
    out = np.zeros((geometry.n_angles, geometry.det_rows, geometry.det_cols))
    if len(q) and geometry.n_angles:
        _forward_kernel(np.ascontiguousarray(mu, dtype=np.float64), np.ascontiguousarray(sigma, dtype=np.float64),
                        np.ascontiguousarray(q, dtype=np.float64), geometry.rotations(),
                        float(geometry.pixel_pitch), float(truncation), out)
    return out


def project_cloud(cloud: AtomCloud, geometry: TiltGeometry, truncation: float = DEFAULT_TRUNCATION) -> ProjectionStack:
    _check_units(cloud, geometry)
    return ProjectionStack(geometry, project_frames(*_arrays(cloud), geometry, truncation))


def l1_gradients(mu, sigma, q, geometry: TiltGeometry, measured: np.ndarray,
                 truncation: float = DEFAULT_TRUNCATION):
    """Mean-absolute-error loss and its gradients for raw parameter arrays."""
    pred = project_frames(mu, sigma, q, geometry, truncation)
    resid = pred - measured
    n = resid.size
    loss = float(np.abs(resid).mean()) if n else 0.0
    k = len(q)
    d_mu = np.zeros((k, 3))
    d_sigma = np.zeros(k)
    d_q = np.zeros(k)
    if k and n:
        weight = np.sign(resid) / n
        _backward_kernel(np.ascontiguousarray(mu, dtype=np.float64), np.ascontiguousarray(sigma, dtype=np.float64),
                         np.ascontiguousarray(q, dtype=np.float64), geometry.rotations(),
                         float(geometry.pixel_pitch), float(truncation), weight, d_mu, d_sigma, d_q)
    return loss, SplatGradients(d_mu, d_sigma, d_q)


def backward_l1(cloud: AtomCloud, geometry: TiltGeometry, measured: ProjectionStack,
                truncation: float = DEFAULT_TRUNCATION, accumulate: bool = True):
    """L1 loss (mean over all pixels of all frames) and analytic gradients.

    When ``accumulate`` is set the positional-gradient magnitudes are folded
    into ``cloud.grad_accum`` for densification. They are divided by the data
    range so the densify threshold reads as if frames peaked at 1; positions
    are expected in the unit cube.
    """
    _check_units(cloud, geometry)
    if measured.geometry.frame_shape != geometry.frame_shape or measured.geometry.n_angles != geometry.n_angles:
        raise InvalidInputError("measured stack does not match geometry")
    loss, grads = l1_gradients(*_arrays(cloud), geometry, measured.data, truncation)
    if accumulate and len(cloud):
        cloud.accumulate_gradients(grads.position_norms() / DATA_RANGE_MAX)
    return loss, grads


@njit(cache=True, parallel=True)
def _raster_kernel(mu, sigma, q, origin, spacing, truncation, out):
    nz, ny, nx = out.shape
    # parallel over z-slabs; atoms are visited in index order within each slab
    for iz in prange(nz):
        z = origin[2] + iz * spacing
        for k in range(mu.shape[0]):
            s = sigma[k]
            r = truncation * s
            dz = z - mu[k, 2]
            if dz * dz > r * r:
                continue
            inv = 1.0 / (2.0 * s * s)
            ry2 = r * r - dz * dz
            ry = math.sqrt(ry2)
            y0 = max(0, math.ceil((mu[k, 1] - ry - origin[1]) / spacing))
            y1 = min(ny - 1, math.floor((mu[k, 1] + ry - origin[1]) / spacing))
            for iy in range(y0, y1 + 1):
                dy = origin[1] + iy * spacing - mu[k, 1]
                rx2 = ry2 - dy * dy
                if rx2 < 0:
                    continue
                rx = math.sqrt(rx2)
                x0 = max(0, math.ceil((mu[k, 0] - rx - origin[0]) / spacing))
                x1 = min(nx - 1, math.floor((mu[k, 0] + rx - origin[0]) / spacing))
                for ix in range(x0, x1 + 1):
                    dx = origin[0] + ix * spacing - mu[k, 0]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 <= r * r:
                        out[iz, iy, ix] += q[k] * math.exp(-d2 * inv)


def rasterize_volume(cloud: AtomCloud, grid: VoxelVolume, truncation: float = DEFAULT_TRUNCATION) -> VoxelVolume:
    """Evaluate the summed potential of ``cloud`` on the voxel centers of ``grid``."""
    out = np.zeros(grid.data.shape)
    if len(cloud):
        _raster_kernel(*_arrays(cloud), np.asarray(grid.origin, dtype=np.float64), float(grid.spacing),
                       float(truncation), out)
    return grid.like(out)
