"""Point-to-point (D1) and point-to-plane (D2) symmetric PSNR, evaluation Chamfer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from patchpcc.geometry import BOX_SIZE, as_cloud

PSNR_CAP = 100.0
DEFAULT_NORMAL_K = 16


class MetricError(ValueError):
    pass


def nearest(src, dst) -> tuple[np.ndarray, np.ndarray]:
    """For each point of ``src``: index of its nearest ``dst`` point and the exact squared distance."""
    _, idx = cKDTree(dst).query(src, k=1)
    d2 = np.sum((src - dst[idx]) ** 2, axis=1)
    return idx, d2


def estimate_normals(cloud, k_nn: int = DEFAULT_NORMAL_K) -> tuple[np.ndarray, np.ndarray]:
    """PCA normals from each point's ``k_nn`` neighbourhood.

    Returns ``(normals, valid)``; normals are oriented toward +z (then +x, +y on
    ties) and rows with a rank-deficient neighbourhood are flagged invalid.
    """
    pts = as_cloud(cloud)
    n = pts.shape[0]
    if k_nn < 3 or k_nn > n:
        raise ValueError(f"k_nn must be in [3, N={n}], got {k_nn}")
    _, idx = cKDTree(pts).query(pts, k=k_nn)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_nn
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    scale = np.maximum(w[:, 2], np.finfo(float).tiny)
    valid = w[:, 1] > 1e-10 * scale
    # orient by the first non-zero component in z, x, y order
    ordered = normals[:, [2, 0, 1]]
    first = np.argmax(np.abs(ordered) > 1e-12, axis=1)
    normals[ordered[np.arange(n), first] < 0] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals, valid


def _psnr(mse: float, peak: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def p2point_mse(reference, degraded) -> float:
    ref, deg = as_cloud(reference), as_cloud(degraded)
    return max(float(nearest(deg, ref)[1].mean()), float(nearest(ref, deg)[1].mean()))


def p2point_psnr(reference, degraded, peak: float = BOX_SIZE) -> float:
    return _psnr(p2point_mse(reference, degraded), peak)


def p2plane_mse(reference, degraded, k_nn: int = DEFAULT_NORMAL_K, normals=None) -> float:
    ref, deg = as_cloud(reference), as_cloud(degraded)
    if normals is None:
        normals, valid = estimate_normals(ref, k_nn)
    else:
        normals, valid = normals
    if not valid.any():
        raise MetricError("no valid reference normals")

    # degraded -> reference: project onto the normal of the matched reference point
    idx, _ = nearest(deg, ref)
    keep = valid[idx]
    e_dr = np.einsum("ij,ij->i", deg[keep] - ref[idx[keep]], normals[idx[keep]]) ** 2
    # reference -> degraded: project onto the reference point's own normal
    idx2, _ = nearest(ref[valid], deg)
    e_rd = np.einsum("ij,ij->i", ref[valid] - deg[idx2], normals[valid]) ** 2
    return max(float(e_dr.mean()) if e_dr.size else 0.0, float(e_rd.mean()))


def p2plane_psnr(reference, degraded, peak: float = BOX_SIZE, k_nn: int = DEFAULT_NORMAL_K) -> float:
    return _psnr(p2plane_mse(reference, degraded, k_nn), peak)


def chamfer_np(a, b) -> float:
    """Chamfer distance (squared, both directions averaged) between two clouds."""
    a, b = as_cloud(a), as_cloud(b)
    return float(nearest(a, b)[1].mean() + nearest(b, a)[1].mean())


@dataclass
class QualityReport:
    file: str
    bpp: float
    d1_psnr: float
    d2_psnr: float
    chamfer: float
    peak: float = BOX_SIZE

    @property
    def lossless_cap(self) -> bool:
        return self.d1_psnr >= PSNR_CAP and self.d2_psnr >= PSNR_CAP

    header = "file,bpp,d1_psnr,d2_psnr,chamfer"

    def csv_row(self) -> str:
        return f"{self.file},{self.bpp:.6f},{self.d1_psnr:.6f},{self.d2_psnr:.6f},{self.chamfer:.9g}"


def evaluate(reference, degraded, bpp: float = float("nan"), name: str = "",
             peak: float = BOX_SIZE) -> QualityReport:
    return QualityReport(
        file=name,
        bpp=bpp,
        d1_psnr=p2point_psnr(reference, degraded, peak),
        d2_psnr=p2plane_psnr(reference, degraded, peak),
        chamfer=chamfer_np(reference, degraded),
        peak=peak,
    )
