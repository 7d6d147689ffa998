"""Reference implementations written separately from the package code paths.

These are slow, direct transcriptions of the definitions and exist only to
check the fast kernels.
"""
import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from atomsplat.core import NORMALIZED, TiltGeometry
from atomsplat.splat import project_frames


def rodrigues(axis_vec, angle_deg):
    """Active right-handed rotation about a unit vector (Rodrigues formula)."""
    k = np.asarray(axis_vec, dtype=float)
    k = k / np.linalg.norm(k)
    t = math.radians(angle_deg)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(t) * K + (1.0 - math.cos(t)) * (K @ K)


AXIS_VECTORS = {0: (1, 0, 0), 1: (0, 1, 0), 2: (0, 0, 1)}


def quadrature_frame(mu, sigma, q, angle_deg, rows, cols, pitch, axis=1, step_frac=1 / 50, span=6.0):
    """Midpoint-rule line integrals of one 3D Gaussian through every pixel center.

    The beam runs along +z of the rotated frame; a pixel at detector
    coordinates (u, v) samples world points R^T (u, v, t).
    """
    R = rodrigues(AXIS_VECTORS[axis], angle_deg)
    c = R @ np.asarray(mu, dtype=float)
    h = sigma * step_frac
    n = int(round(2 * span * sigma / h))
    t = c[2] - span * sigma + (np.arange(n) + 0.5) * h
    u = (np.arange(cols) - (cols - 1) / 2) * pitch
    v = (np.arange(rows) - (rows - 1) / 2) * pitch
    V, U, T = np.meshgrid(v, u, t, indexing="ij")
    pts = np.stack([U, V, T], axis=-1) @ R  # rows of R^T applied to (u, v, t)
    d2 = np.sum((pts - np.asarray(mu)) ** 2, axis=-1)
    return q * np.exp(-d2 / (2 * sigma**2)).sum(axis=-1) * h


def brute_potential(mu, sigma, q, grid_points):
    """Untruncated sum of Gaussians at an ``(n, 3)`` array of points."""
    out = np.zeros(len(grid_points))
    for m, s, a in zip(mu, sigma, q):
        d2 = np.sum((grid_points - m) ** 2, axis=1)
        out += a * np.exp(-d2 / (2 * s * s))
    return out


def min_pairwise_distance(points):
    p = np.asarray(points, dtype=float)
    if len(p) < 2:
        return math.inf
    d = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
    d[np.diag_indices(len(p))] = math.inf
    return float(d.min())


def optimal_tp(pred, gt, tol):
    """Maximum number of one-to-one pairs within ``tol`` (Hungarian assignment)."""
    P, G = np.asarray(pred, float), np.asarray(gt, float)
    if len(P) == 0 or len(G) == 0:
        return 0
    d = np.sqrt(((G[:, None, :] - P[None, :, :]) ** 2).sum(-1))
    cost = np.where(d <= tol, 0.0, 1.0)
    r, c = linear_sum_assignment(cost)
    return int(np.sum(cost[r, c] == 0.0))


def ssim_sliding(a, b, window=7, sigma=1.5, data_range=None):
    """Loop-over-windows SSIM with a separable Gaussian weight, valid windows only."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    r = np.arange(window) - (window - 1) / 2
    g = np.exp(-r**2 / (2 * sigma**2))
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    w /= w.sum()
    L = (a.max() - a.min()) if data_range is None else data_range
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    nz, ny, nx = a.shape
    for z in range(nz - window + 1):
        for y in range(ny - window + 1):
            for x in range(nx - window + 1):
                pa = a[z:z + window, y:y + window, x:x + window]
                pb = b[z:z + window, y:y + window, x:x + window]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va = (w * (pa - ma) ** 2).sum()
                vb = (w * (pb - mb) ** 2).sum()
                cov = (w * (pa - ma) * (pb - mb)).sum()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def fcc_sites_in_sphere(a, radius):
    """Count FCC lattice points (origin-centred) within ``radius`` by enumeration."""
    basis = np.array([[0, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0.5], [0, 0.5, 0.5]])
    n = int(math.ceil(radius / a)) + 1
    count = 0
    for i in range(-n, n + 1):
        for j in range(-n, n + 1):
            for k in range(-n, n + 1):
                for b in basis:
                    p = (np.array([i, j, k]) + b) * a
                    if p @ p <= radius * radius + 1e-9:
                        count += 1
    return count


def fwhm_1d(profile, spacing):
    """Full width at half maximum of a single-peaked profile with linear interpolation."""
    p = np.asarray(profile, float)
    k = int(np.argmax(p))
    half = p[k] / 2
    lo = k
    while lo > 0 and p[lo - 1] > half:
        lo -= 1
    hi = k
    while hi < len(p) - 1 and p[hi + 1] > half:
        hi += 1
    left = lo - (p[lo] - half) / (p[lo] - p[lo - 1]) if lo > 0 else lo
    right = hi + (p[hi] - half) / (p[hi] - p[hi + 1]) if hi < len(p) - 1 else hi
    return (right - left) * spacing


def gradient_case(seed, k=None, n_angles=3, units=NORMALIZED):
    """Random cloud (widths of 2 to 5 pixels) and a measured stack.

    Normalized clouds live in the unit cube at 1/32 pitch; physical clouds
    use angstrom at 0.25 pitch with unit-scale amplitudes. Every residual is
    held at least 0.2 of the peak away from zero, so the L1 loss is smooth
    over the finite-difference step.
    """
    r = np.random.default_rng(seed)
    k = int(r.integers(1, 11)) if k is None else k
    pitch, q_range = (1 / 32, (20, 200)) if units == NORMALIZED else (0.25, (0.5, 2.0))
    g = TiltGeometry(tuple(np.sort(r.choice(np.arange(-80, 81, 7), n_angles, replace=False)).astype(float)),
                     32, 32, pitch, units=units)
    mu = r.uniform(-8 * pitch, 8 * pitch, (k, 3))
    sigma = r.uniform(2 * pitch, 5 * pitch, k)
    q = r.uniform(*q_range, k)
    pred = project_frames(mu, sigma, q, g)
    offset = r.choice([-1.0, 1.0], pred.shape) * r.uniform(0.2, 1.0, pred.shape) * pred.max()
    return g, mu, sigma, q, pred + offset


def fd_gradients(mu, sigma, q, g, measured, h=1e-4):
    """Central differences of the mean L1 loss in every parameter."""
    def loss(m, s, a):
        return np.abs(project_frames(m, s, a, g) - measured).mean()

    d_mu = np.zeros_like(mu)
    d_s = np.zeros_like(sigma)
    d_q = np.zeros_like(q)
    for k in range(len(q)):
        for ax in range(3):
            mp, mm = mu.copy(), mu.copy()
            mp[k, ax] += h
            mm[k, ax] -= h
            d_mu[k, ax] = (loss(mp, sigma, q) - loss(mm, sigma, q)) / (2 * h)
        sp, sm = sigma.copy(), sigma.copy()
        sp[k] += h
        sm[k] -= h
        d_s[k] = (loss(mu, sp, q) - loss(mu, sm, q)) / (2 * h)
        qp, qm = q.copy(), q.copy()
        qp[k] += h
        qm[k] -= h
        d_q[k] = (loss(mu, sigma, qp) - loss(mu, sigma, qm)) / (2 * h)
    return d_mu, d_s, d_q


def _rel(a, n, floor):
    scale = np.maximum(np.abs(a), np.abs(n))
    keep = scale > floor
    return float((np.abs(a - n)[keep] / scale[keep]).max()) if keep.any() else 0.0


def gradient_errors(grads, numeric, floor=1e-6):
    """Worst relative error per parameter kind; a position counts as one 3-vector."""
    d_mu, d_s, d_q = numeric
    scale = np.maximum(np.linalg.norm(grads.d_mu, axis=1), np.linalg.norm(d_mu, axis=1))
    keep = scale > floor
    mu_err = float((np.linalg.norm(grads.d_mu - d_mu, axis=1)[keep] / scale[keep]).max()) if keep.any() else 0.0
    return mu_err, _rel(grads.d_sigma, d_s, floor), _rel(grads.d_q, d_q, floor)
