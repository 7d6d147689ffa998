"""Atom matching rates and volumetric SSIM."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import AtomCloud, InvalidInputError, VoxelVolume

MATCH_TOLERANCE = 0.75
FPR_DENOMINATORS = ("pred", "gt")


@dataclass
class MatchReport:
    n_gt: int
    n_pred: int
    n_tp: int
    n_fp: int
    n_fn: int
    tpr: float
    fpr: float
    matched_rmsd: float
    pairs: list = field(default_factory=list)

    def as_row(self) -> dict:
        return {"n_gt": self.n_gt, "n_pred": self.n_pred, "n_tp": self.n_tp, "n_fp": self.n_fp,
                "n_fn": self.n_fn, "tpr": self.tpr, "fpr": self.fpr, "matched_rmsd": self.matched_rmsd}

    def pred_to_gt(self) -> dict:
        return {p: g for g, p, _ in self.pairs}


def _points(x) -> np.ndarray:
    if isinstance(x, AtomCloud):
        x = x.mu
    elif hasattr(x, "positions"):
        x = x.positions
    p = np.asarray(x, dtype=float)
    if p.size == 0:
        return np.zeros((0, 3))
    if p.ndim != 2 or p.shape[1] != 3:
        raise InvalidInputError("positions must be an (n, 3) array")
    return p


def match_atoms(pred, gt, tol: float = MATCH_TOLERANCE, fpr_denominator: str = "pred") -> MatchReport:
    """Greedy one-to-one matching of predicted to ground-truth positions.

    Ground-truth atoms are visited by ascending distance to their nearest
    prediction and take the closest prediction still free, if within ``tol``.
    FPR is FP / n_pred (false discovery rate) by default; ``fpr_denominator="gt"``
    reports FP / n_gt instead.
    """
    if not tol > 0:
        raise InvalidInputError("match tolerance must be positive")
    if fpr_denominator not in FPR_DENOMINATORS:
        raise InvalidInputError(f"fpr_denominator must be one of {FPR_DENOMINATORS}")
    P = _points(pred)
    G = _points(gt)
    n_gt, n_pred = len(G), len(P)
    pairs = []
    if n_gt and n_pred:
        tree = cKDTree(P)
        first, _ = tree.query(G)
        order = np.lexsort((np.arange(n_gt), first))
        taken = np.zeros(n_pred, dtype=bool)
        for g in order:
            if first[g] > tol:
                continue
            cand = tree.query_ball_point(G[g], tol)
            if not cand:
                continue
            cand = np.asarray(cand)
            cand = cand[~taken[cand]]
            if len(cand) == 0:
                continue
            d = np.linalg.norm(P[cand] - G[g], axis=1)
            j = np.lexsort((cand, d))[0]
            taken[cand[j]] = True
            pairs.append((int(g), int(cand[j]), float(d[j])))
    n_tp = len(pairs)
    denom = n_pred if fpr_denominator == "pred" else n_gt
    dist = np.array([p[2] for p in pairs])
    return MatchReport(
        n_gt=n_gt, n_pred=n_pred, n_tp=n_tp, n_fp=n_pred - n_tp, n_fn=n_gt - n_tp,
        tpr=n_tp / n_gt if n_gt else 0.0,
        fpr=(n_pred - n_tp) / denom if denom else 0.0,
        matched_rmsd=float(np.sqrt(np.mean(dist**2))) if n_tp else 0.0,
        pairs=sorted(pairs),
    )


def _gaussian_window(window: int, sigma: float, ndim: int = 3) -> np.ndarray:
    r = np.arange(window) - (window - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = g
    for _ in range(ndim - 1):
        w = np.multiply.outer(w, g)
    return w / w.sum()


def ssim3d(a, b, window: int = 7, data_range: float = None, sigma: float = 1.5) -> float:
    """Mean structural similarity over all fully contained Gaussian windows.

    ``a`` is taken as the reference: its dynamic range sets the stabilizing
    constants unless ``data_range`` is given.
    """
    A = np.asarray(a.data if isinstance(a, VoxelVolume) else a, dtype=float)
    B = np.asarray(b.data if isinstance(b, VoxelVolume) else b, dtype=float)
    if A.shape != B.shape:
        raise InvalidInputError(f"volume shapes differ: {A.shape} vs {B.shape}")
    if window < 1 or window % 2 == 0:
        raise InvalidInputError("window must be a positive odd integer")
    if min(A.shape) < window:
        raise InvalidInputError("volume is smaller than the SSIM window")
    L = float(A.max() - A.min()) if data_range is None else float(data_range)
    if L <= 0:
        L = 1.0
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2
    w = _gaussian_window(window, sigma, A.ndim)

    def filt(x):
        return ndimage.correlate(x, w, mode="constant")

    mu_a, mu_b = filt(A), filt(B)
    saa = filt(A * A) - mu_a**2
    sbb = filt(B * B) - mu_b**2
    sab = filt(A * B) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2))
    h = (window - 1) // 2
    inner = tuple(slice(h, n - h) for n in A.shape)
    return float(s[inner].mean())


@dataclass
class SpeciesAmplitudes:
    label: str
    values: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if len(self.values) else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.values)) if len(self.values) else float("nan")


def amplitude_histogram(cloud: AtomCloud, matched: MatchReport, gt_species) -> dict:
    """Group matched amplitudes by the species of their ground-truth partner.

    Returns ``{"groups": {label: SpeciesAmplitudes}, "separability": float}``;
    separability is the spread of group means over the pooled standard
    deviation (the mean gap for two species), nan with fewer than two groups.
    """
    species = list(gt_species)
    groups = {}
    for g, p, _ in matched.pairs:
        groups.setdefault(species[g], []).append(float(cloud.q[p]))
    out = {k: SpeciesAmplitudes(k, np.array(v)) for k, v in sorted(groups.items())}
    sep = float("nan")
    if len(out) >= 2:
        vals = list(out.values())
        means = sorted(v.mean for v in vals)
        n = sum(len(v.values) for v in vals)
        pooled = np.sqrt(sum(((len(v.values) - 1) * np.var(v.values, ddof=1) if len(v.values) > 1 else 0.0)
                             for v in vals) / max(1, n - len(vals)))
        gap = min(b - a for a, b in zip(means, means[1:]))
        sep = float(gap / pooled) if pooled > 0 else float("inf")
    return {"groups": out, "separability": sep}
