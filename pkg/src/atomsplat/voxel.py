"""Ray-driven voxel projector and its exact transpose.

Each detector pixel casts a ray along the beam; the volume is sampled by
trilinear interpolation at points spaced one voxel apart along the ray and
the samples are summed times the step length. The adjoint scatters with the
same weights, so the pair is matched to machine precision.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

from .core import InvalidInputError, ProjectionStack, TiltGeometry, VoxelVolume, volume_for_geometry

# Fixed number of partial volumes in the adjoint, independent of thread count.
_ADJOINT_CHUNKS = 8


@njit(cache=True)
def _ray_limits(p0, d, lo, hi, step, n_half):
    # step indices m (t = m * step) for which the ray point lies inside [lo, hi]
    tmin = -1e300
    tmax = 1e300
    for ax in range(3):
        if abs(d[ax]) < 1e-12:
            if p0[ax] < lo[ax] or p0[ax] > hi[ax]:
                return 1, 0
        else:
            t1 = (lo[ax] - p0[ax]) / d[ax]
            t2 = (hi[ax] - p0[ax]) / d[ax]
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
    if tmin > tmax:
        return 1, 0
    m0 = math.ceil(tmin / step)
    m1 = math.floor(tmax / step)
    if m0 < -n_half:
        m0 = -n_half
    if m1 > n_half:
        m1 = n_half
    return m0, m1


@njit(cache=True)
def _trilinear_weights(px, py, pz, origin, spacing):
    fx = (px - origin[0]) / spacing
    fy = (py - origin[1]) / spacing
    fz = (pz - origin[2]) / spacing
    ix = math.floor(fx)
    iy = math.floor(fy)
    iz = math.floor(fz)
    return ix, iy, iz, fx - ix, fy - iy, fz - iz


@njit(cache=True)
def _ray_setup(rot, a, i, j, rows, cols, pitch):
    u = (j - (cols - 1) / 2.0) * pitch
    v = (i - (rows - 1) / 2.0) * pitch
    p0 = np.empty(3)
    d = np.empty(3)
    for ax in range(3):
        p0[ax] = u * rot[a, 0, ax] + v * rot[a, 1, ax]
        d[ax] = rot[a, 2, ax]
    return p0, d


@njit(cache=True, parallel=True)
def _forward_kernel(vol, origin, spacing, rot, rows, cols, pitch, step, out):
    nz, ny, nx = vol.shape
    lo = np.empty(3)
    hi = np.empty(3)
    lo[0] = origin[0] - spacing
    lo[1] = origin[1] - spacing
    lo[2] = origin[2] - spacing
    hi[0] = origin[0] + nx * spacing
    hi[1] = origin[1] + ny * spacing
    hi[2] = origin[2] + nz * spacing
    reach = 0.0
    for ax in range(3):
        reach = max(reach, abs(lo[ax]), abs(hi[ax]))
    n_half = int(math.ceil(reach * math.sqrt(3.0) / step)) + 1
    n_angles = rot.shape[0]
    for ar in prange(n_angles * rows):
        a = ar // rows
        i = ar % rows
        for j in range(cols):
            p0, d = _ray_setup(rot, a, i, j, rows, cols, pitch)
            m0, m1 = _ray_limits(p0, d, lo, hi, step, n_half)
            acc = 0.0
            for m in range(m0, m1 + 1):
                t = m * step
                ix, iy, iz, wx, wy, wz = _trilinear_weights(p0[0] + t * d[0], p0[1] + t * d[1],
                                                           p0[2] + t * d[2], origin, spacing)
                for cz in range(2):
                    z = iz + cz
                    if z < 0 or z >= nz:
                        continue
                    fz = wz if cz else 1.0 - wz
                    if fz == 0.0:
                        continue
                    for cy in range(2):
                        y = iy + cy
                        if y < 0 or y >= ny:
                            continue
                        fy = wy if cy else 1.0 - wy
                        if fy == 0.0:
                            continue
                        for cx in range(2):
                            x = ix + cx
                            if x < 0 or x >= nx:
                                continue
                            fx = wx if cx else 1.0 - wx
                            acc += fz * fy * fx * vol[z, y, x]
            out[a, i, j] = acc * step


@njit(cache=True, parallel=True)
def _adjoint_kernel(frames, origin, spacing, rot, pitch, step, n_chunks, partial):
    n_angles, rows, cols = frames.shape
    nz, ny, nx = partial.shape[1], partial.shape[2], partial.shape[3]
    lo = np.empty(3)
    hi = np.empty(3)
    lo[0] = origin[0] - spacing
    lo[1] = origin[1] - spacing
    lo[2] = origin[2] - spacing
    hi[0] = origin[0] + nx * spacing
    hi[1] = origin[1] + ny * spacing
    hi[2] = origin[2] + nz * spacing
    reach = 0.0
    for ax in range(3):
        reach = max(reach, abs(lo[ax]), abs(hi[ax]))
    n_half = int(math.ceil(reach * math.sqrt(3.0) / step)) + 1
    for c in prange(n_chunks):
        vol = partial[c]
        # chunk c owns every n_chunks-th (angle, row) pair, whatever the thread count
        for ar in range(c, n_angles * rows, n_chunks):
            a = ar // rows
            i = ar % rows
            for j in range(cols):
                y_ray = frames[a, i, j] * step
                if y_ray == 0.0:
                    continue
                p0, d = _ray_setup(rot, a, i, j, rows, cols, pitch)
                m0, m1 = _ray_limits(p0, d, lo, hi, step, n_half)
                for m in range(m0, m1 + 1):
                    t = m * step
                    ix, iy, iz, wx, wy, wz = _trilinear_weights(p0[0] + t * d[0], p0[1] + t * d[1],
                                                               p0[2] + t * d[2], origin, spacing)
                    for cz in range(2):
                        z = iz + cz
                        if z < 0 or z >= nz:
                            continue
                        fz = wz if cz else 1.0 - wz
                        if fz == 0.0:
                            continue
                        for cy in range(2):
                            y = iy + cy
                            if y < 0 or y >= ny:
                                continue
                            fy = wy if cy else 1.0 - wy
                            if fy == 0.0:
                                continue
                            for cx in range(2):
                                x = ix + cx
                                if x < 0 or x >= nx:
                                    continue
                                fx = wx if cx else 1.0 - wx
                                vol[z, y, x] += fz * fy * fx * y_ray


def forward_project(volume: VoxelVolume, geometry: TiltGeometry) -> ProjectionStack:
    """Line integrals of ``volume`` for every pixel of every tilt."""
    out = np.zeros((geometry.n_angles, geometry.det_rows, geometry.det_cols))
    if geometry.n_angles:
        _forward_kernel(np.ascontiguousarray(volume.data, dtype=np.float64),
                        np.asarray(volume.origin, dtype=np.float64), float(volume.spacing), geometry.rotations(),
                        geometry.det_rows, geometry.det_cols, float(geometry.pixel_pitch), float(volume.spacing), out)
    return ProjectionStack(geometry, out)


def backproject(stack: ProjectionStack, geometry: TiltGeometry = None, grid: VoxelVolume = None) -> VoxelVolume:
    """Exact transpose of :func:`forward_project` onto ``grid``.

    ``grid`` defaults to the cube matched to the detector.
    """
    geometry = stack.geometry if geometry is None else geometry
    if stack.data.shape != (geometry.n_angles, geometry.det_rows, geometry.det_cols):
        raise InvalidInputError("stack does not match geometry")
    grid = volume_for_geometry(geometry) if grid is None else grid
    n_chunks = max(1, min(_ADJOINT_CHUNKS, geometry.n_angles * geometry.det_rows))
    partial = np.zeros((n_chunks,) + grid.data.shape)
    if geometry.n_angles:
        _adjoint_kernel(np.ascontiguousarray(stack.data, dtype=np.float64), np.asarray(grid.origin, dtype=np.float64),
                        float(grid.spacing), geometry.rotations(), float(geometry.pixel_pitch), float(grid.spacing),
                        n_chunks, partial)
    total = partial[0].copy()
    for c in range(1, n_chunks):
        total += partial[c]
    return grid.like(total)
