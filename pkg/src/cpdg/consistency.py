"""Gaussian-kernel maximum mean discrepancy used as the consistency loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KernelParams:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.sigma}")


def _batch(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError(f"feature batch must be a nonempty (n, d) matrix, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("feature batch contains non-finite values")
    return z


def _check_pair(zs, zt):
    zs, zt = _batch(zs), _batch(zt)
    if zs.shape[1] != zt.shape[1]:
        raise ValueError(f"feature dimensions differ: {zs.shape[1]} vs {zt.shape[1]}")
    return zs, zt


def rbf_kernel(x, y, kp: KernelParams) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"vector shapes differ: {x.shape} vs {y.shape}")
    d2 = float(np.sum((x - y) ** 2))
    return float(np.exp(-d2 / (2.0 * kp.sigma**2)))


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def gram(a: np.ndarray, b: np.ndarray, kp: KernelParams) -> np.ndarray:
    return np.exp(-sq_dists(a, b) / (2.0 * kp.sigma**2))


def median_bandwidth(zs, zt) -> KernelParams:
    """sigma^2 = median pairwise squared distance of the pooled batch / 2."""
    zs, zt = _check_pair(zs, zt)
    pool = np.concatenate([zs, zt])
    n = pool.shape[0]
    if n < 2:
        raise ValueError("median heuristic needs at least two pooled points")
    iu = np.triu_indices(n, k=1)
    med = float(np.median(sq_dists(pool, pool)[iu]))
    if med < 1e-12:
        return KernelParams(1.0)
    return KernelParams(float(np.sqrt(med / 2.0)))


def mmd2(zs, zt, kp: KernelParams, unbiased: bool = False) -> float:
    zs, zt = _check_pair(zs, zt)
    ns, nt = zs.shape[0], zt.shape[0]
    kss = gram(zs, zs, kp)
    ktt = gram(zt, zt, kp)
    kst = gram(zs, zt, kp)
    if unbiased:
        if ns < 2 or nt < 2:
            raise ValueError("unbiased estimate needs at least two samples per batch")
        term_s = (kss.sum() - np.trace(kss)) / (ns * (ns - 1))
        term_t = (ktt.sum() - np.trace(ktt)) / (nt * (nt - 1))
        return float(term_s + term_t - 2.0 * kst.mean())
    return float(kss.mean() + ktt.mean() - 2.0 * kst.mean())


def mmd2_grad(zs, zt, kp: KernelParams) -> np.ndarray:
    """Gradient of the biased ``mmd2`` with respect to the rows of ``zt``.

    The bandwidth is held fixed. By symmetry ``mmd2_grad(zt, zs, kp)`` is the
    gradient with respect to ``zs``.
    """
    zs, zt = _check_pair(zs, zt)
    ns, nt = zs.shape[0], zt.shape[0]
    inv_s2 = 1.0 / kp.sigma**2
    ktt = gram(zt, zt, kp)
    kst = gram(zs, zt, kp)
    # d k(x, y) / dx = -k(x, y) (x - y) / sigma^2
    g_tt = (ktt.sum(axis=1)[:, None] * zt - ktt @ zt) * (-2.0 * inv_s2 / nt**2)
    g_st = (kst.sum(axis=0)[:, None] * zt - kst.T @ zs) * (2.0 * inv_s2 / (ns * nt))
    return g_tt + g_st
