"""Independent reference implementations shared by the unit and acceptance tests."""

import numpy as np

from cpdg.consistency import median_bandwidth, mmd2
from cpdg.model import cross_entropy, forward, init_params


def fd_gradient(loss, theta, h=1e-5):
    theta = np.array(theta, dtype=np.float64)
    g = np.empty_like(theta)
    for i in range(theta.size):
        keep = theta[i]
        theta[i] = keep + h
        up = loss(theta)
        theta[i] = keep - h
        dn = loss(theta)
        theta[i] = keep
        g[i] = (up - dn) / (2 * h)
    return g


def grad_mismatch(analytic, numeric, rel=1e-4, abs_tol=1e-7):
    """Indices where neither the relative nor the near-zero absolute bound holds."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = (diff > abs_tol) & (diff > rel * scale)
    return np.flatnonzero(bad), float(np.max(diff / np.maximum(scale, 1e-300)))


def check_gradient(loss, theta, analytic, h=1e-5, fine_h=1e-7):
    """Compare ``analytic`` with central differences on every coordinate.

    A step of ``h`` can straddle a ReLU kink, where the two-sided quotient is
    not the derivative at ``theta``. Coordinates that disagree are measured
    again with the much smaller ``fine_h`` before being counted as failures.
    Returns (failures, refined, worst relative error after refinement).
    """
    numeric = fd_gradient(loss, theta, h)
    bad, _ = grad_mismatch(analytic, numeric)
    if bad.size:
        th = np.array(theta, dtype=np.float64)
        for i in bad:
            up, dn = th.copy(), th.copy()
            up[i] += fine_h
            dn[i] -= fine_h
            numeric[i] = (loss(up) - loss(dn)) / (2 * fine_h)
    still, worst = grad_mismatch(analytic, numeric)
    return still.size, bad.size, worst


def random_instance(seed, dims=(16, 16), batch=2, n_cavs=2):
    rng = np.random.default_rng(seed)
    params = init_params(seed=seed)
    x = rng.random((batch, n_cavs, *dims, 3))
    y = (rng.random((batch, *dims, 3)) > 0.5).astype(float)
    return params, x, y


def ce_loss_fn(params, x, y):
    return lambda th: cross_entropy(forward(params.replace(th), x)[0], y)


def combined_loss_fn(params, xt, yt, zs, beta, kp):
    def loss(th):
        pred, tr = forward(params.replace(th), xt)
        return cross_entropy(pred, yt) + beta * mmd2(zs, tr.z, kp)

    return loss


def brute_iou(pred, label, threshold=0.5):
    """Pixel-by-pixel counting, one class at a time."""
    pred = np.asarray(pred).reshape(-1, pred.shape[-1])
    label = np.asarray(label).reshape(-1, label.shape[-1])
    out = []
    for k in range(pred.shape[1]):
        inter = union = 0
        for p, t in zip(pred[:, k], label[:, k]):
            a, b = p >= threshold, t >= 0.5
            inter += a and b
            union += a or b
        out.append(1.0 if union == 0 else inter / union)
    return out


__all__ = ["fd_gradient", "grad_mismatch", "check_gradient", "random_instance", "ce_loss_fn", "combined_loss_fn",
           "brute_iou", "median_bandwidth"]
