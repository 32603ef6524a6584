"""Patch division by farthest point sampling + KNN, and reassembly."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from patchpcc.geometry import as_cloud


def _exact(x) -> Fraction:
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


@dataclass(frozen=True)
class PatchConfig:
    """S patches of K points for encoding, k decoded points per patch.

    ``S * K == alpha * N`` and ``k == K / alpha`` so the decoded cloud has N points.
    """

    S: int
    K: int
    alpha: float
    k: int

    def __post_init__(self):
        if self.S < 1 or self.K < 1 or self.k < 1:
            raise ValueError("S, K and k must be positive")
        if not self.alpha > 1:
            raise ValueError("alpha must be > 1")
        if Fraction(self.k) * _exact(self.alpha) != self.K:
            raise ValueError(f"k={self.k} is not K/alpha for K={self.K}, alpha={self.alpha}")

    @classmethod
    def resolve(cls, n: int, K: int, alpha: float = 2.0) -> "PatchConfig":
        """Pick S = alpha*N/K and k = K/alpha, rejecting non-integral combinations."""
        a = _exact(alpha)
        if not a > 1:
            raise ValueError("alpha must be > 1")
        s = a * n / K
        k = Fraction(K) / a
        if s.denominator != 1:
            raise ValueError(f"alpha*N/K = {float(s)} is not an integer (N={n}, K={K}, alpha={alpha})")
        if k.denominator != 1:
            raise ValueError(f"K/alpha = {float(k)} is not an integer (K={K}, alpha={alpha})")
        if s < 1 or s > n:
            raise ValueError(f"patch count S={s} out of range for N={n}")
        return cls(S=int(s), K=K, alpha=float(alpha), k=int(k))

    def check(self, n: int) -> None:
        if _exact(self.alpha) * n != self.S * self.K:
            raise ValueError(
                f"S*K={self.S * self.K} does not equal alpha*N={self.alpha * n}")


def farthest_point_sample(cloud, S: int, start: int = 0) -> np.ndarray:
    """Greedy FPS; ties go to the lowest index."""
    pts = as_cloud(cloud)
    n = pts.shape[0]
    if not 1 <= S <= n:
        raise ValueError(f"cannot sample S={S} points from N={n}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    out = np.empty(S, dtype=np.int64)
    out[0] = start
    mind = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, S):
        nxt = int(np.argmax(mind))
        out[i] = nxt
        np.minimum(mind, np.sum((pts - pts[nxt]) ** 2, axis=1), out=mind)
    return out


def knn(cloud, query, K: int) -> np.ndarray:
    """Exact K nearest neighbours of ``query``, ascending distance, ties by index."""
    pts = as_cloud(cloud)
    if not 1 <= K <= pts.shape[0]:
        raise ValueError(f"cannot take K={K} neighbours from N={pts.shape[0]}")
    d2 = np.sum((pts - np.asarray(query, dtype=np.float64)) ** 2, axis=1)
    return np.argsort(d2, kind="stable")[:K]


def extract_patches(cloud, cfg: PatchConfig, start: int = 0):
    """Return ``(patches, centroids, neighbor_idx)``.

    ``patches`` has shape (S, K, 3) in centroid-local coordinates, ``centroids``
    (S, 3) in FPS order, and ``neighbor_idx`` (S, K) indexes the input cloud.
    """
    pts = as_cloud(cloud)
    cfg.check(pts.shape[0])
    return _patches(pts, cfg.S, cfg.K, start)


def _patches(pts, S, K, start=0):
    cidx = farthest_point_sample(pts, S, start)
    centroids = pts[cidx]
    nbr = np.stack([knn(pts, c, K) for c in centroids])
    patches = pts[nbr] - centroids[:, None, :]
    return patches, centroids, nbr


def patch_coverage(cloud, S: int, K: int, start: int = 0) -> float:
    """Fraction of input points that fall in at least one of the S K-point patches."""
    pts = as_cloud(cloud)
    _, _, nbr = _patches(pts, S, K, start)
    covered = np.zeros(pts.shape[0], dtype=bool)
    covered[nbr.ravel()] = True
    return float(covered.mean())


def assemble(decoded, centroids) -> np.ndarray:
    """Shift each decoded local patch back to its centroid and concatenate."""
    dec = np.asarray(decoded, dtype=np.float64)
    cen = np.asarray(centroids, dtype=np.float64)
    if dec.ndim != 3 or dec.shape[2] != 3:
        raise ValueError(f"decoded patches must have shape (S, k, 3), got {dec.shape}")
    if cen.shape != (dec.shape[0], 3):
        raise ValueError(f"{dec.shape[0]} patches but centroids have shape {cen.shape}")
    return (dec + cen[:, None, :]).reshape(-1, 3)
