"""Direct reconstruction of atoms as isotropic Gaussians.

The loop optimizes positions, log-widths and amplitudes of a Gaussian cloud
against a projection stack with the mean-absolute-error loss. Every
``*_interval`` iterations after warmup the cloud is densified (high
positional gradient atoms are split), pruned (weak atoms dropped) and
merged (atoms closer than ``merge_distance`` replaced by their mean).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    NORMALIZED,
    AtomCloud,
    AtomSplatError,
    InvalidConfigurationError,
    NormalizationMap,
    ProjectionStack,
)
from .splat import DEFAULT_TRUNCATION, SQRT_2PI, SplatGradients, backward_l1

log = logging.getLogger(__name__)


class NonFiniteGradientError(AtomSplatError, FloatingPointError):
    pass


@dataclass
class OptimizerConfig:
    n_init: int = 10000
    n_iters: int = 10000
    lr_mu: float = 1e-3
    lr_sigma: float = 5e-3
    lr_q: float = 5e-2
    update_rule: str = "adam"
    momentum: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    lr_mu_final_ratio: float = 0.01
    sigma_init: float = 0.5
    q_init: float = 0.0
    sigma_min: float = 0.05
    sigma_min_pixels: float = 0.7
    sigma_max: float = 3.0
    batch_angles: int = 4
    densify_grad_threshold: float = 0.005
    densify_interval: int = 100
    densify_until: int = 0
    prune_q_threshold: float = 0.005
    prune_interval: int = 100
    merge_distance: float = 0.25
    merge_interval: int = 100
    merge_enabled: bool = True
    knn_cutover: int = 10000
    knn_k: int = 20
    warmup_iters: int = 500
    stall_window: int = 500
    truncation: float = DEFAULT_TRUNCATION
    seed: int = 0

    def __post_init__(self):
        for name in ("densify_interval", "prune_interval", "merge_interval"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfigurationError(f"{name} must be >= 1")
        if self.n_init < 1:
            raise InvalidConfigurationError("n_init must be >= 1")
        for name in ("densify_grad_threshold", "prune_q_threshold", "merge_distance", "lr_mu", "lr_sigma", "lr_q"):
            if getattr(self, name) < 0:
                raise InvalidConfigurationError(f"{name} must be >= 0")
        if self.update_rule not in ("adam", "momentum"):
            raise InvalidConfigurationError(f"unknown update rule {self.update_rule!r}")
        if self.batch_angles < 0:
            raise InvalidConfigurationError("batch_angles must be >= 0 (0 = all angles)")
        if self.n_iters < 0 or self.warmup_iters < 0 or self.densify_until < 0:
            raise InvalidConfigurationError("iteration counts must be >= 0")
        if not 0 < self.lr_mu_final_ratio <= 1:
            raise InvalidConfigurationError("lr_mu_final_ratio must lie in (0, 1]")
        if not 0 <= self.momentum < 1 or not 0 <= self.adam_beta2 < 1:
            raise InvalidConfigurationError("moment decays must lie in [0, 1)")
        if self.sigma_min < 0 or self.sigma_min_pixels < 0 or not self.sigma_max > self.sigma_min:
            raise InvalidConfigurationError("need 0 <= sigma_min < sigma_max and sigma_min_pixels >= 0")
        if not self.sigma_init > 0:
            raise InvalidConfigurationError("sigma_init must be positive")
        if self.knn_k < 1 or self.knn_cutover < 0:
            raise InvalidConfigurationError("knn_k must be >= 1 and knn_cutover >= 0")

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]


@dataclass
class OptimizerState:
    """Per-atom moment estimates, kept aligned with the cloud ordering."""

    m_mu: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    v_mu: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    m_s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v_s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    m_q: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v_q: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    q_unit: float = 1.0
    sigma_lo: float = 0.0
    sigma_hi: float = math.inf
    lr_scale: float = 1.0

    @classmethod
    def for_cloud(cls, n: int, q_unit: float = 1.0) -> "OptimizerState":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n),
                   np.zeros(n, dtype=np.int64), q_unit)

    def remap(self, source) -> None:
        """Re-gather per-atom state; ``source[i]`` is the old index behind new atom ``i`` (-1: fresh)."""
        src = np.asarray(source, dtype=int)
        fresh = src < 0
        safe = np.where(fresh, 0, src)
        for name in ("m_mu", "v_mu", "m_s", "v_s", "m_q", "v_q", "t"):
            old = getattr(self, name)
            if len(old) == 0:
                new = np.zeros((len(src),) + old.shape[1:], dtype=old.dtype)
            else:
                new = old[safe].copy()
                new[fresh] = 0
            setattr(self, name, new)


class EditResult(list):
    """Index map returned by cloud edits: entry ``i`` is the source atom of new atom ``i``."""


def init_random(config: OptimizerConfig, bounds=(-0.5, 0.5), sigma: float = None, q: float = None,
                rng: np.random.Generator = None) -> AtomCloud:
    """``n_init`` Gaussians uniform in the normalized cube.

    ``sigma`` and ``q`` are in normalized units; by default sigma is
    ``config.sigma_init`` read as a fraction of the cube side when no map is
    known, and q is 1.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    lo, hi = bounds
    mu = rng.uniform(lo, hi, (config.n_init, 3))
    s = config.sigma_init if sigma is None else sigma
    a = 1.0 if q is None else q
    return AtomCloud(mu, np.full(config.n_init, s), np.full(config.n_init, a), units=NORMALIZED)


def step(cloud: AtomCloud, grads: SplatGradients, config: OptimizerConfig, state: OptimizerState = None) -> None:
    """One descent update of every atom from its analytic gradients.

    ``sigma`` moves in log space and ``q`` is clamped at zero. With the
    momentum rule positions follow an exponential average of their gradients;
    the adam rule normalizes every parameter by its second moment.
    """
    if len(grads) != len(cloud):
        raise InvalidConfigurationError("gradient length does not match cloud")
    if not grads.is_finite():
        bad = np.flatnonzero(~(np.isfinite(grads.d_q) & np.isfinite(grads.d_sigma) & np.all(np.isfinite(grads.d_mu), 1)))
        raise NonFiniteGradientError(f"non-finite gradients for atoms {bad[:10].tolist()} (of {len(bad)})")
    if len(cloud) == 0:
        return
    if state is None:
        state = OptimizerState.for_cloud(len(cloud))
    elif len(state.t) != len(cloud):
        raise InvalidConfigurationError("optimizer state is not aligned with the cloud")
    g_mu = grads.d_mu
    g_logs = grads.d_sigma * cloud.sigma
    g_a = grads.d_q * state.q_unit
    lr_mu = config.lr_mu * state.lr_scale
    log_s = np.log(cloud.sigma)
    a = cloud.q / state.q_unit
    if config.update_rule == "momentum":
        b = config.momentum
        state.m_mu = b * state.m_mu + (1.0 - b) * g_mu
        cloud.mu = cloud.mu - lr_mu * state.m_mu
        log_s = log_s - config.lr_sigma * g_logs
        a = a - config.lr_q * g_a
    else:
        b1, b2, eps = config.momentum, config.adam_beta2, config.adam_eps
        state.t += 1
        c1 = 1.0 - b1 ** state.t
        c2 = 1.0 - b2 ** state.t
        state.m_mu = b1 * state.m_mu + (1 - b1) * g_mu
        state.v_mu = b2 * state.v_mu + (1 - b2) * g_mu**2
        state.m_s = b1 * state.m_s + (1 - b1) * g_logs
        state.v_s = b2 * state.v_s + (1 - b2) * g_logs**2
        state.m_q = b1 * state.m_q + (1 - b1) * g_a
        state.v_q = b2 * state.v_q + (1 - b2) * g_a**2
        cloud.mu = cloud.mu - lr_mu * (state.m_mu / c1[:, None]) / (np.sqrt(state.v_mu / c2[:, None]) + eps)
        log_s = log_s - config.lr_sigma * (state.m_s / c1) / (np.sqrt(state.v_s / c2) + eps)
        a = a - config.lr_q * (state.m_q / c1) / (np.sqrt(state.v_q / c2) + eps)
    cloud.sigma = np.clip(np.exp(log_s), state.sigma_lo, state.sigma_hi)
    cloud.q = np.maximum(0.0, a) * state.q_unit


def densify(cloud: AtomCloud, config: OptimizerConfig, rng: np.random.Generator = None) -> EditResult:
    """Split atoms whose mean positional gradient exceeds the threshold.

    The clone is displaced by a normal perturbation of scale sigma/2 and the
    amplitude is shared between parent and clone. Accumulators are reset.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n = len(cloud)
    hot = np.flatnonzero(cloud.grad_accum > config.densify_grad_threshold)
    source = EditResult(range(n))
    if len(hot):
        offset = rng.normal(0.0, 1.0, (len(hot), 3)) * (cloud.sigma[hot] / 2.0)[:, None]
        cloud.q = cloud.q.copy()
        cloud.q[hot] *= 0.5
        cloud.mu = np.vstack([cloud.mu, cloud.mu[hot] + offset])
        cloud.sigma = np.concatenate([cloud.sigma, cloud.sigma[hot]])
        cloud.q = np.concatenate([cloud.q, cloud.q[hot]])
        source.extend(hot.tolist())
    cloud.grad_accum = np.zeros(len(cloud))
    cloud.grad_count = np.zeros(len(cloud), dtype=np.int64)
    return source


def prune(cloud: AtomCloud, config: OptimizerConfig) -> EditResult:
    """Drop atoms with amplitude below ``prune_q_threshold`` times the current maximum."""
    thr = config.prune_q_threshold
    if len(cloud) == 0 or thr <= 0:
        return EditResult(range(len(cloud)))
    qmax = float(cloud.q.max())
    drop = (cloud.q < thr * qmax) | (cloud.q <= 0)
    keep = np.flatnonzero(~drop)
    _apply_subset(cloud, keep)
    return EditResult(keep.tolist())


def in_view(mu: np.ndarray, geometry) -> np.ndarray:
    """Mask of positions whose projected center stays on the detector at every tilt."""
    if len(mu) == 0 or geometry.n_angles == 0:
        return np.ones(len(mu), dtype=bool)
    proj = np.einsum("aij,kj->aki", geometry.rotations()[:, :2, :], mu)
    half = np.array([(geometry.det_cols - 1) / 2, (geometry.det_rows - 1) / 2]) * geometry.pixel_pitch
    return np.all(np.abs(proj) <= half, axis=(0, 2))


def prune_out_of_view(cloud: AtomCloud, geometry) -> EditResult:
    keep = np.flatnonzero(in_view(cloud.mu, geometry))
    _apply_subset(cloud, keep)
    return EditResult(keep.tolist())


def _apply_subset(cloud: AtomCloud, keep) -> None:
    cloud.mu = cloud.mu[keep]
    cloud.sigma = cloud.sigma[keep]
    cloud.q = cloud.q[keep]
    cloud.grad_accum = cloud.grad_accum[keep]
    cloud.grad_count = cloud.grad_count[keep]


def _neighbor_lists(mu: np.ndarray, radius: float, config: OptimizerConfig) -> list:
    tree = cKDTree(mu)
    if len(mu) <= config.knn_cutover:
        # exact radius search over all pairs
        return tree.query_ball_point(mu, radius, p=2.0, return_sorted=True)
    k = min(config.knn_k + 1, len(mu))
    dist, idx = tree.query(mu, k=k)
    dist = np.atleast_2d(dist.T).T if k == 1 else dist
    idx = np.atleast_2d(idx.T).T if k == 1 else idx
    return [sorted(int(j) for j, d in zip(row_i, row_d) if d <= radius) for row_i, row_d in zip(idx, dist)]


def merge_close(cloud: AtomCloud, config: OptimizerConfig, distance: float = None) -> EditResult:
    """One merge pass: each atom absorbs its unmerged neighbors within ``distance``.

    Groups are replaced by the arithmetic mean of positions, amplitudes and
    widths. ``distance`` is in the cloud's own units (defaults to
    ``config.merge_distance``). Returned map points merged atoms at -1.
    """
    distance = config.merge_distance if distance is None else distance
    n = len(cloud)
    if n < 2 or distance <= 0:
        return EditResult(range(n))
    neigh = _neighbor_lists(cloud.mu, distance, config)
    used = np.zeros(n, dtype=bool)
    groups = []
    for i in range(n):
        if used[i]:
            continue
        members = [j for j in neigh[i] if not used[j]]
        if i not in members:
            members.insert(0, i)
        used[members] = True
        groups.append(members)
    if len(groups) == n:
        return EditResult(range(n))
    mu = np.array([cloud.mu[g].mean(axis=0) for g in groups])
    sigma = np.array([cloud.sigma[g].mean() for g in groups])
    q = np.array([cloud.q[g].mean() for g in groups])
    ga = np.array([cloud.grad_accum[g].mean() for g in groups])
    gc = np.array([cloud.grad_count[g].max() for g in groups], dtype=np.int64)
    cloud.mu, cloud.sigma, cloud.q, cloud.grad_accum, cloud.grad_count = mu, sigma, q, ga, gc
    return EditResult(g[0] if len(g) == 1 else -1 for g in groups)


def merge_until_stable(cloud: AtomCloud, config: OptimizerConfig, distance: float = None, max_passes: int = 1000):
    """Repeat merge passes until one changes nothing; returns the number of passes."""
    for n_pass in range(1, max_passes + 1):
        before = len(cloud)
        merge_close(cloud, config, distance)
        if len(cloud) == before:
            return n_pass
    return max_passes


@dataclass
class IterationRecord:
    iter: int
    loss: float
    k: int
    n_densified: int = 0
    n_pruned: int = 0
    n_merged: int = 0


@dataclass
class ReconstructionResult:
    cloud: AtomCloud
    records: list
    normalization: NormalizationMap
    warnings: list = field(default_factory=list)
    failed: bool = False


def _mass_matched_amplitude(stack: ProjectionStack, n_atoms: int, sigma_n: float) -> float:
    # integrated frame mass = sum_a q_a (2 pi)^{3/2} sigma_a^3 when every atom is in view
    pitch = stack.geometry.pixel_pitch
    mass = float(np.mean(stack.data.sum(axis=(1, 2)))) * pitch**2 if stack.data.size else 0.0
    return max(mass, 0.0) / (n_atoms * (2.0 * math.pi) ** 1.5 * sigma_n**3)


def reconstruct(stack: ProjectionStack, config: OptimizerConfig = None, callback=None) -> ReconstructionResult:
    """Fit a Gaussian atom cloud to ``stack`` and return it in physical units."""
    config = OptimizerConfig() if config is None else config
    nmap = NormalizationMap.for_stack(stack)
    ns = nmap.normalize(stack)
    geom = ns.geometry
    init_rng, batch_rng, clone_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3))
    sigma_n = config.sigma_init / nmap.length
    q_unit = 256.0 / (sigma_n * SQRT_2PI)
    if config.q_init > 0:
        q0 = config.q_init * nmap.amplitude_scale
    else:
        q0 = _mass_matched_amplitude(ns, config.n_init, sigma_n)
    cloud = init_random(config, sigma=sigma_n, q=q0, rng=init_rng)
    state = OptimizerState.for_cloud(len(cloud), q_unit)
    # below about a pixel a Gaussian can only fit single-pixel noise
    floor = max(config.sigma_min, config.sigma_min_pixels * stack.geometry.pixel_pitch)
    state.sigma_lo = floor / nmap.length
    state.sigma_hi = config.sigma_max / nmap.length
    merge_n = config.merge_distance / nmap.length
    n_angles = geom.n_angles
    batch = n_angles if config.batch_angles in (0, None) or config.batch_angles >= n_angles else config.batch_angles
    records = []
    warnings = []
    failed = False
    best = math.inf
    best_iter = 0
    densify_until = config.densify_until or config.n_iters // 2
    for it in range(config.n_iters):
        frac = it / max(1, config.n_iters - 1)
        state.lr_scale = config.lr_mu_final_ratio ** frac
        if batch == n_angles:
            sub_g, sub_s = geom, ns
        else:
            idx = np.sort(batch_rng.choice(n_angles, size=batch, replace=False))
            sub_s = ns.subset(idx)
            sub_g = sub_s.geometry
        rec = IterationRecord(it, 0.0, len(cloud))
        if len(cloud) == 0:
            if not failed:
                warnings.append(f"iteration {it}: cloud is empty; densification cannot recover")
                log.warning(warnings[-1])
            failed = True
            rec.loss = float(np.abs(sub_s.data).mean()) if sub_s.data.size else 0.0
            records.append(rec)
            continue
        loss, grads = backward_l1(cloud, sub_g, sub_s, truncation=config.truncation)
        rec.loss = loss
        step(cloud, grads, config, state)
        after_warmup = it + 1 > config.warmup_iters
        if after_warmup and (it + 1) % config.densify_interval == 0 and it < densify_until:
            before = len(cloud)
            state.remap(densify(cloud, config, clone_rng))
            rec.n_densified = len(cloud) - before
        if after_warmup and (it + 1) % config.prune_interval == 0:
            before = len(cloud)
            state.remap(prune(cloud, config))
            state.remap(prune_out_of_view(cloud, geom))
            rec.n_pruned = before - len(cloud)
        if config.merge_enabled and after_warmup and (it + 1) % config.merge_interval == 0:
            before = len(cloud)
            state.remap(merge_close(cloud, config, merge_n))
            rec.n_merged = before - len(cloud)
        rec.k = len(cloud)
        records.append(rec)
        if loss < best * (1 - 1e-9):
            best, best_iter = loss, it
        elif it - best_iter >= config.stall_window and it % config.stall_window == 0:
            warnings.append(f"iteration {it}: loss has not improved for {it - best_iter} iterations")
            log.warning(warnings[-1])
        if callback is not None:
            callback(rec, cloud)
    if config.merge_enabled:
        merge_until_stable(cloud, config, merge_n)
    prune(cloud, config)
    prune_out_of_view(cloud, geom)
    if records:
        records[-1].k = len(cloud)
    cloud.reset_accumulators()
    out = nmap.denormalize(cloud)
    return ReconstructionResult(out, records, nmap, warnings, failed)
