"""RGB -> XYZ -> LAB conversion and LAB statistics transfer between CAVs.

RGB is treated as linear. The reference white defaults to the XYZ image of
RGB (1, 1, 1) under ``RGB_TO_XYZ`` so that white lands on L = 100.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .image_core import as_image

RGB_TO_XYZ = np.array(
    [
        [0.4124, 0.3575, 0.1804],
        [0.2126, 0.7151, 0.0721],
        [0.0193, 0.1191, 0.9502],
    ]
)
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)

_DELTA = 6.0 / 29.0
SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class WhitePoint:
    Xn: float
    Yn: float
    Zn: float

    def __post_init__(self):
        if min(self.Xn, self.Yn, self.Zn) <= 0:
            raise ValueError("white point components must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.Xn, self.Yn, self.Zn])


DEFAULT_WHITE = WhitePoint(*RGB_TO_XYZ.sum(axis=1))


def rgb_to_xyz(img: np.ndarray) -> np.ndarray:
    img = np.clip(as_image(img, channels=3), 0.0, 1.0)
    return img @ RGB_TO_XYZ.T


def _f(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    linear = t / (3 * _DELTA**2) + 4.0 / 29.0
    return np.where(t > _DELTA**3, np.cbrt(t), linear)


def _f_inv(f: np.ndarray) -> np.ndarray:
    return np.where(f > _DELTA, f**3, 3 * _DELTA**2 * (f - 4.0 / 29.0))


def xyz_to_lab(xyz: np.ndarray, wp: WhitePoint = DEFAULT_WHITE) -> np.ndarray:
    """Returns an (H, W, 3) array of (L, a, b)."""
    t = np.asarray(xyz, dtype=np.float64) / wp.as_array()
    fx, fy, fz = _f(t[..., 0]), _f(t[..., 1]), _f(t[..., 2])
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_to_xyz(lab: np.ndarray, wp: WhitePoint = DEFAULT_WHITE) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    return np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * wp.as_array()


def rgb_to_lab(img: np.ndarray, wp: WhitePoint = DEFAULT_WHITE) -> np.ndarray:
    return xyz_to_lab(rgb_to_xyz(img), wp)


def lab_to_rgb(lab: np.ndarray, wp: WhitePoint = DEFAULT_WHITE, clip: bool = True) -> np.ndarray:
    rgb = lab_to_xyz(lab, wp) @ XYZ_TO_RGB.T
    return np.clip(rgb, 0.0, 1.0) if clip else rgb


@dataclass(frozen=True)
class LabStats:
    mu: tuple[float, float, float]
    sigma: tuple[float, float, float]
    pixel_count: int

    def __post_init__(self):
        if len(self.mu) != 3 or len(self.sigma) != 3:
            raise ValueError("LabStats needs three means and three deviations")
        if any(not math.isfinite(v) for v in (*self.mu, *self.sigma)):
            raise ValueError("LabStats values must be finite")
        if any(s < 0 for s in self.sigma):
            raise ValueError("standard deviations must be nonnegative")
        if self.pixel_count < 1:
            raise ValueError("pixel_count must be >= 1")


def compute_stats(lab: np.ndarray) -> LabStats:
    flat = np.asarray(lab, dtype=np.float64).reshape(-1, 3)
    if flat.shape[0] == 0:
        raise ValueError("cannot compute statistics of an empty image")
    mu = flat.mean(axis=0)
    sigma = flat.std(axis=0)
    return LabStats(tuple(float(v) for v in mu), tuple(float(v) for v in sigma), flat.shape[0])


def translate(src: np.ndarray, src_stats: LabStats, tgt_stats: LabStats) -> np.ndarray:
    """Per-channel affine map taking src statistics onto tgt statistics."""
    src = np.asarray(src, dtype=np.float64)
    if src_stats == tgt_stats:
        return src.copy()
    mu_s = np.array(src_stats.mu)
    mu_t = np.array(tgt_stats.mu)
    sig_s = np.array(src_stats.sigma)
    sig_t = np.array(tgt_stats.sigma)
    degenerate = sig_s < SIGMA_FLOOR
    scale = np.where(degenerate, 1.0, sig_t / np.where(degenerate, 1.0, sig_s))
    return scale * (src - mu_s) + mu_t


def align_images(ego: np.ndarray, others, wp: WhitePoint = DEFAULT_WHITE) -> list[np.ndarray]:
    """Restyle every non-ego image toward the ego image's LAB statistics."""
    ego_stats = compute_stats(rgb_to_lab(ego, wp))
    payload = decode_stats(encode_stats(ego_stats))
    return [align_to_stats(img, payload, wp) for img in others]


def align_to_stats(img: np.ndarray, target: LabStats, wp: WhitePoint = DEFAULT_WHITE) -> np.ndarray:
    lab = rgb_to_lab(img, wp)
    return lab_to_rgb(translate(lab, compute_stats(lab), target), wp)


def _num(x: float) -> str:
    return format(float(x), ".17g")


def encode_stats(stats: LabStats) -> bytes:
    mu = ",".join(_num(v) for v in stats.mu)
    sigma = ",".join(_num(v) for v in stats.sigma)
    return f'{{"mu":[{mu}],"sigma":[{sigma}],"n":{int(stats.pixel_count)}}}'.encode("ascii")


def decode_stats(message: bytes | str) -> LabStats:
    try:
        obj = json.loads(message)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"malformed stats message: {exc}") from None
    if not isinstance(obj, dict):
        raise ValueError("stats message must be an object")
    for key in ("mu", "sigma", "n"):
        if key not in obj:
            raise ValueError(f"stats message missing field {key!r}")
    mu, sigma, n = obj["mu"], obj["sigma"], obj["n"]
    if not (isinstance(mu, list) and isinstance(sigma, list) and len(mu) == 3 and len(sigma) == 3):
        raise ValueError("mu and sigma must be 3-element arrays")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in mu + sigma):
        raise ValueError("mu and sigma must be numeric")
    if not isinstance(n, int) or isinstance(n, bool):
        raise ValueError("n must be an integer")
    return LabStats(tuple(float(v) for v in mu), tuple(float(v) for v in sigma), n)
