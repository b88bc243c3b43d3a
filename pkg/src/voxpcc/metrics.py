"""Geometry fidelity metrics and rate-distortion curve comparison.

D1 measures symmetric point-to-point squared error, D2 point-to-plane
error against reference-side normals; both report PSNR against the grid
peak (resolution - 1). Curve deltas use cubic interpolation through four
or more rate-distortion points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, UsageError
from .geometry import PointCloud

_TIE_RELATIVE = 1.0 + 1e-12


def nearest_neighbor(queries, references) -> tuple[np.ndarray, np.ndarray]:
    """Index into references of each query's nearest point, plus squared
    distances. Distance ties resolve to the smallest reference index."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    r = np.asarray(references, dtype=np.float64).reshape(-1, 3)
    if len(r) == 0:
        raise UsageError("reference cloud is empty")
    tree = cKDTree(r)
    k = min(8, len(r))
    while True:
        d, i = tree.query(q, k=k)
        d = d.reshape(len(q), -1)
        i = i.reshape(len(q), -1)
        best = d[:, 0] * _TIE_RELATIVE
        tied = d <= best[:, None]
        # A full row of ties may hide a smaller index beyond k.
        if k >= len(r) or not tied.all(axis=1).any():
            break
        k = min(2 * k, len(r))
    picked = np.where(tied, i, len(r))
    idx = picked.min(axis=1)
    return idx.astype(np.int64), d[:, 0] ** 2


def estimate_normals(points, k: int = 12) -> np.ndarray:
    """Unit surface normals from local covariance.

    Each point's normal is the smallest-eigenvalue direction of the
    covariance of its k nearest neighbors (the point itself excluded), so
    the cloud must contain more than k points. Sign is arbitrary.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) <= k:
        raise UsageError(f"normal estimation needs more than {k} points, "
                         f"got {len(p)}")
    tree = cKDTree(p)
    _, idx = tree.query(p, k=k + 1)
    neighbors = p[idx[:, 1:]]                       # drop the query itself
    centered = neighbors - neighbors.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(norms, 1e-30)


def _check_pair(a: PointCloud, b: PointCloud) -> int:
    if not isinstance(a, PointCloud) or not isinstance(b, PointCloud):
        raise UsageError("psnr metrics expect PointCloud inputs")
    if a.resolution != b.resolution:
        raise UsageError(f"resolution mismatch: {a.resolution} vs "
                         f"{b.resolution}")
    if len(a) == 0 or len(b) == 0:
        raise UsageError("psnr is undefined for empty clouds")
    return a.resolution


def _psnr(mse: float, peak: int) -> float:
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(3.0 * peak * peak / mse)


def d1_psnr(a: PointCloud, b: PointCloud) -> float:
    """Symmetric point-to-point PSNR over the worse direction."""
    res = _check_pair(a, b)
    _, d_ab = nearest_neighbor(a.points, b.points)
    _, d_ba = nearest_neighbor(b.points, a.points)
    mse = max(d_ab.mean(), d_ba.mean())
    return _psnr(float(mse), res - 1)


def d2_psnr(a: PointCloud, b: PointCloud,
            normals: np.ndarray | None = None) -> float:
    """Symmetric point-to-plane PSNR with reference-side (a) normals.

    Residuals project onto a's normals: at a itself for the a->b
    direction, and at the matched a point for b->a.
    """
    res = _check_pair(a, b)
    if normals is None:
        normals = estimate_normals(a.points)
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape != (len(a), 3):
        raise UsageError(f"normals shape {normals.shape} does not match "
                         f"reference cloud of {len(a)} points")
    ap = a.points.astype(np.float64)
    bp = b.points.astype(np.float64)
    idx_ab, _ = nearest_neighbor(ap, bp)
    err_ab = np.einsum("ij,ij->i", bp[idx_ab] - ap, normals) ** 2
    idx_ba, _ = nearest_neighbor(bp, ap)
    err_ba = np.einsum("ij,ij->i", bp - ap[idx_ba], normals[idx_ba]) ** 2
    mse = max(err_ab.mean(), err_ba.mean())
    return _psnr(float(mse), res - 1)


# ---------------------------------------------------------------------------
# rate-distortion curves

@dataclass(frozen=True)
class RDPoint:
    lam: float
    bpp: float
    d1_psnr: float
    d2_psnr: float = math.nan


@dataclass
class RDCurve:
    label: str
    points: list

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)

    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    def psnrs(self, metric: str = "d1") -> np.ndarray:
        if metric == "d1":
            return np.array([p.d1_psnr for p in self.points])
        if metric == "d2":
            return np.array([p.d2_psnr for p in self.points])
        raise UsageError(f"metric must be d1 or d2, got {metric!r}")


def _extract(curve, metric: str) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(curve, RDCurve):
        rates, psnrs = curve.rates(), curve.psnrs(metric)
    else:
        pairs = np.asarray(list(curve), dtype=np.float64)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise UsageError("curves are RDCurve or (rate, psnr) pairs")
        rates, psnrs = pairs[:, 0], pairs[:, 1]
    if len(rates) < 4:
        raise UsageError(f"curve comparison needs at least 4 points, "
                         f"got {len(rates)}")
    if np.any(rates <= 0):
        raise UsageError("rates must be positive")
    if not np.all(np.isfinite(psnrs)):
        raise UsageError("curve quality values must be finite")
    order = np.argsort(rates)
    return rates[order], psnrs[order]


def _poly_integral(coeffs: np.ndarray, lo: float, hi: float) -> float:
    anti = np.polyint(coeffs)
    return float(np.polyval(anti, hi) - np.polyval(anti, lo))


def bd_rate(reference, test, metric: str = "d1") -> float:
    """Average rate difference of test against reference, in percent,
    over the overlapping quality interval."""
    r_ref, q_ref = _extract(reference, metric)
    r_test, q_test = _extract(test, metric)
    lo = max(q_ref.min(), q_test.min())
    hi = min(q_ref.max(), q_test.max())
    if hi <= lo:
        raise DataError("quality ranges do not overlap")
    fit_ref = np.polyfit(q_ref, np.log10(r_ref), 3)
    fit_test = np.polyfit(q_test, np.log10(r_test), 3)
    delta = (_poly_integral(fit_test, lo, hi)
             - _poly_integral(fit_ref, lo, hi)) / (hi - lo)
    return (10.0 ** delta - 1.0) * 100.0


def bd_psnr(reference, test, metric: str = "d1") -> float:
    """Average quality difference of test against reference, in dB, over
    the overlapping log-rate interval."""
    r_ref, q_ref = _extract(reference, metric)
    r_test, q_test = _extract(test, metric)
    lr_ref, lr_test = np.log10(r_ref), np.log10(r_test)
    lo = max(lr_ref.min(), lr_test.min())
    hi = min(lr_ref.max(), lr_test.max())
    if hi <= lo:
        raise DataError("rate ranges do not overlap")
    fit_ref = np.polyfit(lr_ref, q_ref, 3)
    fit_test = np.polyfit(lr_test, q_test, 3)
    return (_poly_integral(fit_test, lo, hi)
            - _poly_integral(fit_ref, lo, hi)) / (hi - lo)
