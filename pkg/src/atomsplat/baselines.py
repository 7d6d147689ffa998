"""Voxel baselines: filtered backprojection, SART, and peak tracing.

Both reconstructions live on a cube matched to the detector unless another
grid is passed. ``trace_atoms`` turns either volume into a point list so it
can be scored like a Gaussian reconstruction.
"""
from __future__ import annotations

import logging
import math

import numpy as np
from numba import njit, prange
from scipy import ndimage

from .core import (
    Axis,
    InvalidConfigurationError,
    InvalidInputError,
    ProjectionStack,
    VoxelVolume,
    volume_for_geometry,
)
from .voxel import backproject, forward_project

log = logging.getLogger(__name__)

TRACE_FLOOR = 0.15
TRACE_MIN_SEPARATION = 2.0


def ramp_kernel(n: int) -> np.ndarray:
    """Frequency response of the band-limited Ram-Lak filter for ``n`` taps.

    Built from the spatial kernel (1/4 at zero, -1/(pi k)^2 at odd k) so that
    the zero-frequency term is not lost, as in most FBP codes.
    """
    k = np.concatenate([np.arange(1, n // 2 + 1, 2), np.arange(n // 2 - 1, 0, -2)])
    h = np.zeros(n)
    h[0] = 0.25
    h[1::2] = -1.0 / (np.pi * k) ** 2
    return 2.0 * np.real(np.fft.fft(h))


def ramp_filter(frames: np.ndarray, axis: int = -1) -> np.ndarray:
    """Apply the Ram-Lak filter along ``axis`` of every frame (unit pitch)."""
    size = frames.shape[axis]
    n = max(64, int(2 ** math.ceil(math.log2(2 * size))))
    spec = np.fft.fft(frames, n=n, axis=axis)
    shape = [1] * frames.ndim
    shape[axis] = n
    out = np.real(np.fft.ifft(spec * ramp_kernel(n).reshape(shape), axis=axis))
    return np.take(out, np.arange(size), axis=axis)


@njit(cache=True, parallel=True)
def _fbp_kernel(filt, rot, weights, origin, spacing, pitch, out):
    nz, ny, nx = out.shape
    n_angles, rows, cols = filt.shape
    hr = (rows - 1) / 2.0
    hc = (cols - 1) / 2.0
    for iz in prange(nz):
        z = origin[2] + iz * spacing
        for iy in range(ny):
            y = origin[1] + iy * spacing
            for ix in range(nx):
                x = origin[0] + ix * spacing
                acc = 0.0
                for a in range(n_angles):
                    u = (rot[a, 0, 0] * x + rot[a, 0, 1] * y + rot[a, 0, 2] * z) / pitch + hc
                    v = (rot[a, 1, 0] * x + rot[a, 1, 1] * y + rot[a, 1, 2] * z) / pitch + hr
                    j = math.floor(u)
                    i = math.floor(v)
                    fu = u - j
                    fv = v - i
                    val = 0.0
                    for di in range(2):
                        ii = i + di
                        if ii < 0 or ii >= rows:
                            continue
                        wv = fv if di else 1.0 - fv
                        for dj in range(2):
                            jj = j + dj
                            if jj < 0 or jj >= cols:
                                continue
                            wu = fu if dj else 1.0 - fu
                            val += wv * wu * filt[a, ii, jj]
                    acc += weights[a] * val
                out[iz, iy, ix] = acc


def angle_weights(angles_deg) -> np.ndarray:
    """Per-projection angular measure in radians; pi/(2n) on an evenly filled half turn."""
    ang = np.asarray(angles_deg, dtype=float)
    n = len(ang)
    if n == 0:
        return np.zeros(0)
    if n == 1:
        return np.full(1, np.pi / 2.0)
    span = math.radians(ang[-1] - ang[0])
    # the reference scaling pi / (2 n) assumes the set covers exactly half a turn
    return np.full(n, span / (n - 1) / 2.0)


def fbp(stack: ProjectionStack, grid: VoxelVolume = None) -> VoxelVolume:
    """Filtered backprojection for a single-axis tilt series.

    Rows perpendicular to the tilt axis are ramp filtered, then smeared back
    along the beam with bilinear detector interpolation. The result is in
    potential units (line integrals divided by path length).
    """
    geom = stack.geometry
    if geom.axis == Axis.Z:
        raise InvalidConfigurationError("filtered backprojection needs a tilt axis perpendicular to the beam")
    grid = volume_for_geometry(geom) if grid is None else grid
    out = np.zeros(grid.data.shape)
    if geom.n_angles == 0 or not np.any(stack.data):
        return grid.like(out)
    # detector columns run perpendicular to a Y tilt axis, rows perpendicular to X
    filt = ramp_filter(stack.data, axis=2 if geom.axis == Axis.Y else 1) / geom.pixel_pitch
    _fbp_kernel(np.ascontiguousarray(filt), geom.rotations(), angle_weights(geom.angles_deg),
                np.asarray(grid.origin, dtype=float), float(grid.spacing), float(geom.pixel_pitch), out)
    return grid.like(out)


class SartResult(VoxelVolume):
    """Volume returned by :func:`sart`, carrying its residual trace."""

    def __init__(self, data, spacing, origin, residuals, stopped_early=False):
        super().__init__(data, spacing, origin)
        self.residuals = list(residuals)
        self.stopped_early = stopped_early


def sart(stack: ProjectionStack, grid: VoxelVolume = None, n_iters: int = 50, relaxation: float = 0.3,
         nonnegative: bool = True) -> SartResult:
    """Simultaneous algebraic reconstruction, one projection at a time.

    The correction for each angle is the residual divided by the ray
    lengths, backprojected and divided by the per-voxel weight a single
    projection deposits, then scaled by ``relaxation``. ``residuals`` holds the
    L1 projection residual of each sweep, summed over angles as each one is
    visited (so entry k measures the volume while sweep k runs); the run
    stops early once it doubles from its minimum.
    """
    if not 0 <= relaxation < 2:
        raise InvalidConfigurationError("relaxation must lie in [0, 2)")
    if n_iters < 0:
        raise InvalidConfigurationError("n_iters must be >= 0")
    geom = stack.geometry
    grid = volume_for_geometry(geom) if grid is None else grid
    x = np.zeros(grid.data.shape)
    residuals = []
    if geom.n_angles == 0:
        return SartResult(x, grid.spacing, grid.origin, residuals)
    row_sums = forward_project(grid.like(np.ones_like(x)), geom).data
    inv_rows = np.divide(1.0, row_sums, out=np.zeros_like(row_sums), where=row_sums > 1e-12)
    # weight one projection deposits on an interior voxel: step * (spacing / pitch)^2
    col_sum = grid.spacing * (grid.spacing / geom.pixel_pitch) ** 2
    singles = [geom.subset([a]) for a in range(geom.n_angles)]
    best = math.inf
    stopped = False
    for sweep in range(n_iters):
        r = 0.0
        for a, g1 in enumerate(singles):
            vol = grid.like(x)
            resid = stack.data[a:a + 1] - forward_project(vol, g1).data
            r += float(np.abs(resid).sum())
            corr = backproject(ProjectionStack(g1, resid * inv_rows[a:a + 1]), g1, grid).data
            x += (relaxation / col_sum) * corr
        if nonnegative:
            np.maximum(x, 0.0, out=x)
        residuals.append(r)
        best = min(best, r)
        if r > 2.0 * best:
            log.warning("SART residual doubled from its minimum at sweep %d; stopping", sweep)
            stopped = True
            break
    return SartResult(x, grid.spacing, grid.origin, residuals, stopped)


def _parabolic(fm, f0, fp):
    den = fm - 2.0 * f0 + fp
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (fm - fp) / den, -0.5, 0.5))


def local_maxima(data: np.ndarray, floor: float) -> np.ndarray:
    """Indices of voxels strictly above all 26 neighbors and above ``floor``."""
    footprint = np.ones((3, 3, 3), dtype=bool)
    footprint[1, 1, 1] = False
    neigh = ndimage.maximum_filter(data, footprint=footprint, mode="constant", cval=-np.inf)
    return np.argwhere((data > neigh) & (data > floor))


def trace_atoms(volume: VoxelVolume, min_separation: float = TRACE_MIN_SEPARATION,
                floor: float = TRACE_FLOOR) -> np.ndarray:
    """Greedy peak tracing; returns an ``(n, 3)`` array of ``(x, y, z)`` in angstrom.

    ``floor`` is a fraction of the volume maximum. Peaks are accepted in order
    of decreasing intensity when they lie at least ``min_separation`` from all
    accepted peaks, then refined to sub-voxel precision per axis.
    """
    data = np.asarray(volume.data, dtype=float)
    if not np.all(np.isfinite(data)):
        raise InvalidInputError("volume contains non-finite values")
    vmax = float(data.max()) if data.size else 0.0
    if vmax <= 0:
        return np.zeros((0, 3))
    idx = local_maxima(data, floor * vmax)
    if len(idx) == 0:
        return np.zeros((0, 3))
    vals = data[idx[:, 0], idx[:, 1], idx[:, 2]]
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0], -vals))
    origin = np.asarray(volume.origin, dtype=float)
    accepted = []
    min2 = min_separation**2
    for n in order:
        iz, iy, ix = idx[n]
        off = [0.0, 0.0, 0.0]
        for ax, (pos, size) in enumerate(((iz, data.shape[0]), (iy, data.shape[1]), (ix, data.shape[2]))):
            if 0 < pos < size - 1:
                lo = [iz, iy, ix]
                hi = [iz, iy, ix]
                lo[ax] -= 1
                hi[ax] += 1
                off[ax] = _parabolic(data[tuple(lo)], data[iz, iy, ix], data[tuple(hi)])
        p = origin + volume.spacing * np.array([ix + off[2], iy + off[1], iz + off[0]])
        if all(np.sum((p - q) ** 2) >= min2 for q in accepted):
            accepted.append(p)
    return np.array(accepted).reshape(-1, 3)
