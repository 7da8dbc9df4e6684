import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpdg.consistency import KernelParams, median_bandwidth, mmd2, mmd2_grad, rbf_kernel


def mmd2_loops(zs, zt, sigma):
    def k(x, y):
        return math.exp(-sum((a - b) ** 2 for a, b in zip(x, y)) / (2 * sigma**2))

    ns, nt = len(zs), len(zt)
    ss = sum(k(a, b) for a in zs for b in zs) / ns**2
    tt = sum(k(a, b) for a in zt for b in zt) / nt**2
    st_ = sum(k(a, b) for a in zs for b in zt) / (ns * nt)
    return ss + tt - 2 * st_


def fd_grad(zs, zt, kp, h=1e-5):
    g = np.zeros_like(zt)
    for idx in np.ndindex(zt.shape):
        up, dn = zt.copy(), zt.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (mmd2(zs, up, kp) - mmd2(zs, dn, kp)) / (2 * h)
    return g


def test_kernel_values():
    kp = KernelParams(0.7)
    x = np.array([0.3, -1.0, 2.0])
    assert rbf_kernel(x, x, kp) == 1.0
    y = x + np.array([0.7 * math.sqrt(2), 0, 0])
    assert rbf_kernel(x, y, kp) == pytest.approx(math.exp(-1), abs=1e-12)
    with pytest.raises(ValueError):
        rbf_kernel(x, x[:2], kp)
    with pytest.raises(ValueError):
        KernelParams(0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kernel_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=4), rng.normal(size=4)
    kp = KernelParams(float(rng.uniform(0.1, 3)))
    assert rbf_kernel(x, y, kp) == rbf_kernel(y, x, kp)
    assert 0 < rbf_kernel(x, y, kp) <= 1


def test_median_bandwidth():
    same = np.ones((3, 2))
    assert median_bandwidth(same, same).sigma == 1.0
    assert median_bandwidth(np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]])).sigma == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    zs, zt = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    pool = np.concatenate([zs, zt])[rng.permutation(9)]
    assert median_bandwidth(pool[:2], pool[2:]).sigma == pytest.approx(median_bandwidth(zs, zt).sigma)
    with pytest.raises(ValueError):
        median_bandwidth(np.zeros((1, 2)), np.zeros((1, 3)))


def test_mmd_identical_and_single_rows():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(6, 4))
    kp = KernelParams(1.3)
    assert abs(mmd2(z, z, kp)) < 1e-12
    a, b = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    assert mmd2(a, b, kp) == pytest.approx(2 - 2 * rbf_kernel(a[0], b[0], kp), abs=1e-12)


def test_mmd_matches_loops():
    rng = np.random.default_rng(2)
    for _ in range(20):
        zs, zt = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)) + 0.5
        sigma = float(rng.uniform(0.3, 2))
        assert mmd2(zs, zt, KernelParams(sigma)) == pytest.approx(mmd2_loops(zs, zt, sigma), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6))
def test_mmd_nonnegative_and_symmetric(seed, ns, nt):
    rng = np.random.default_rng(seed)
    zs, zt = rng.normal(size=(ns, 3)), rng.normal(size=(nt, 3)) * rng.uniform(0.1, 3)
    kp = KernelParams(float(rng.uniform(0.1, 3)))
    assert mmd2(zs, zt, kp) >= -1e-15
    assert mmd2(zs, zt, kp) == pytest.approx(mmd2(zt, zs, kp), abs=1e-14)


def test_mmd_grows_with_separation():
    rng = np.random.default_rng(3)
    base = rng.normal(size=(40, 1))
    other = rng.normal(size=(40, 1))
    kp = KernelParams(1.0)
    vals = [mmd2(base, other + shift, kp) for shift in (0, 1, 2, 4)]
    assert vals == sorted(vals)


def test_unbiased_option():
    rng = np.random.default_rng(4)
    zs, zt = rng.normal(size=(5, 2)), rng.normal(size=(6, 2))
    kp = KernelParams(1.0)
    biased = mmd2(zs, zt, kp)
    unbiased = mmd2(zs, zt, kp, unbiased=True)
    kss = sum(rbf_kernel(a, b, kp) for i, a in enumerate(zs) for j, b in enumerate(zs) if i != j) / 20
    ktt = sum(rbf_kernel(a, b, kp) for i, a in enumerate(zt) for j, b in enumerate(zt) if i != j) / 30
    kst = sum(rbf_kernel(a, b, kp) for a in zs for b in zt) / 30
    assert unbiased == pytest.approx(kss + ktt - 2 * kst, abs=1e-12)
    assert unbiased != biased


def test_mmd_dimension_mismatch():
    with pytest.raises(ValueError):
        mmd2(np.zeros((2, 3)), np.zeros((2, 4)), KernelParams(1.0))


def test_grad_zero_on_identical_batches():
    z = np.random.default_rng(5).normal(size=(4, 3))
    assert np.max(np.abs(mmd2_grad(z, z, KernelParams(0.8)))) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_grad_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    zs, zt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)) + 0.3
    kp = median_bandwidth(zs, zt)
    ana, num = mmd2_grad(zs, zt, kp), fd_grad(zs, zt, kp)
    rel = np.abs(ana - num) / np.maximum(np.abs(num), 1e-7)
    assert np.max(rel) < 1e-4


def test_grad_wrt_source_by_symmetry():
    rng = np.random.default_rng(6)
    zs, zt = rng.normal(size=(3, 2)), rng.normal(size=(5, 2))
    kp = KernelParams(0.9)
    g = np.zeros_like(zs)
    h = 1e-5
    for idx in np.ndindex(zs.shape):
        up, dn = zs.copy(), zs.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (mmd2(up, zt, kp) - mmd2(dn, zt, kp)) / (2 * h)
    assert np.allclose(mmd2_grad(zt, zs, kp), g, atol=1e-9)


def test_scaling_law():
    rng = np.random.default_rng(7)
    zs, zt = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    kp, c = KernelParams(0.7), 3.5
    scaled = KernelParams(0.7 * c)
    assert mmd2(c * zs, c * zt, scaled) == pytest.approx(mmd2(zs, zt, kp), abs=1e-12)
    assert np.allclose(mmd2_grad(c * zs, c * zt, scaled), mmd2_grad(zs, zt, kp) / c, atol=1e-12)
