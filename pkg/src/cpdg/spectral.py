"""Fourier amplitude augmentation (AmpAug).

Spectra are complex (H, W, C) arrays in the unshifted layout, DC at (0, 0).
The forward transform is the unnormalised sum, the inverse carries 1/(HW).
"""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image_core import as_image

log = logging.getLogger(__name__)

DEFAULT_MASK_RATIO = 0.01
IMAG_RESIDUE_WARN = 1e-6


def fft2d(img: np.ndarray) -> np.ndarray:
    img = as_image(img)
    return np.fft.fft2(img, axes=(0, 1))


def ifft2d(spec: np.ndarray) -> np.ndarray:
    """Inverse transform; returns the real part and logs large imaginary residue."""
    out = np.fft.ifft2(spec, axes=(0, 1))
    residue = float(np.max(np.abs(out.imag))) if out.size else 0.0
    if residue > IMAG_RESIDUE_WARN:
        log.warning("inverse FFT imaginary residue %.3g exceeds %.0e", residue, IMAG_RESIDUE_WARN)
    return np.ascontiguousarray(out.real)


def naive_dft2d(img: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Direct O((HW)^2) evaluation of the 2-D DFT sum, for odd sizes and as a check."""
    x = np.asarray(img, dtype=np.complex128)
    h, w = x.shape[:2]
    sign = 1.0 if inverse else -1.0
    hh = np.arange(h)
    ww = np.arange(w)
    # kernel[u, v, h, w] = exp(sign * 2 pi i (hu/H + wv/W))
    phase = (np.multiply.outer(hh, hh)[:, None, :, None] / h
             + np.multiply.outer(ww, ww)[None, :, None, :] / w)
    kernel = np.exp(sign * 2j * np.pi * phase)
    out = np.einsum("uvhw,hwc->uvc", kernel, x)
    if inverse:
        out /= h * w
    return out


@dataclass(frozen=True)
class AmplitudePhase:
    amplitude: np.ndarray
    phase: np.ndarray


def decompose(spec: np.ndarray) -> AmplitudePhase:
    amplitude = np.abs(spec)
    phase = np.where(amplitude > 0, np.angle(spec), 0.0)
    return AmplitudePhase(amplitude, phase)


def compose(ap: AmplitudePhase) -> np.ndarray:
    if ap.amplitude.shape != ap.phase.shape:
        raise ValueError(f"amplitude {ap.amplitude.shape} and phase {ap.phase.shape} differ")
    return ap.amplitude * (np.cos(ap.phase) + 1j * np.sin(ap.phase))


@dataclass(frozen=True)
class FreqMask:
    """Low-frequency box of half-extent (r_h, r_w) wrapped around DC."""

    ratio: float
    height: int
    width: int
    r_h: int
    r_w: int

    @property
    def array(self) -> np.ndarray:
        rows = _wrapped_band(self.height, self.r_h)
        cols = _wrapped_band(self.width, self.r_w)
        return rows[:, None] & cols[None, :]

    def __len__(self) -> int:
        return int(self.array.sum())


def _wrapped_band(n: int, r: int) -> np.ndarray:
    idx = np.arange(n)
    dist = np.minimum(idx, n - idx)
    return dist <= r


def _half_extent(ratio: float, n: int) -> int:
    # guard against ratio * n landing a hair under an integer
    return int(math.floor(ratio * n + 1e-9))


def low_freq_mask(ratio: float, h: int, w: int) -> FreqMask:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    if h < 1 or w < 1:
        raise ValueError("mask dimensions must be >= 1")
    return FreqMask(ratio, h, w, _half_extent(ratio, h), _half_extent(ratio, w))


def amp_swap(a_src: np.ndarray, a_tgt: np.ndarray, mask: FreqMask) -> np.ndarray:
    if a_src.shape != a_tgt.shape:
        raise ValueError(f"amplitude shapes differ: {a_src.shape} vs {a_tgt.shape}")
    if a_src.shape[:2] != (mask.height, mask.width):
        raise ValueError("mask dimensions do not match amplitude raster")
    m = mask.array[:, :, None]
    return np.where(m, a_tgt, a_src)


def amplitude_of(img: np.ndarray) -> np.ndarray:
    return np.abs(fft2d(img))


def ampaug_amplitude(src: np.ndarray, a_tgt: np.ndarray, ratio: float = DEFAULT_MASK_RATIO,
                     clip: bool = True) -> np.ndarray:
    """AmpAug against a precomputed target amplitude spectrum."""
    src = as_image(src)
    if src.shape != a_tgt.shape:
        raise ValueError(f"source {src.shape} and target amplitude {a_tgt.shape} differ")
    ap = decompose(fft2d(src))
    mask = low_freq_mask(ratio, src.shape[0], src.shape[1])
    mixed = AmplitudePhase(amp_swap(ap.amplitude, a_tgt, mask), ap.phase)
    out = ifft2d(compose(mixed))
    return np.clip(out, 0.0, 1.0) if clip else out


def ampaug(src: np.ndarray, tgt: np.ndarray, ratio: float = DEFAULT_MASK_RATIO,
           clip: bool = True) -> np.ndarray:
    """Replace the low-frequency amplitude of ``src`` by that of ``tgt``, keeping src's phase."""
    src = as_image(src)
    tgt = as_image(tgt)
    if src.shape != tgt.shape:
        raise ValueError(f"source {src.shape} and target {tgt.shape} differ")
    return ampaug_amplitude(src, amplitude_of(tgt), ratio, clip)


BANK_MAGIC = b"AMPBANK\x00"
BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<8sIIIII")


class AmplitudeBank:
    """Immutable stack of amplitude spectra, sampled uniformly by a caller RNG.

    File layout (little-endian): 8-byte magic ``AMPBANK\\0``, uint32 version,
    uint32 H, W, C, count, then count*H*W*C float64 values in C order.
    """

    def __init__(self, amplitudes: np.ndarray):
        amplitudes = np.array(amplitudes, dtype=np.float64)
        if amplitudes.ndim != 4 or amplitudes.shape[0] == 0:
            raise ValueError("bank needs a nonempty (count, H, W, C) stack")
        amplitudes.setflags(write=False)
        self._amps = amplitudes

    @classmethod
    def from_images(cls, images) -> "AmplitudeBank":
        images = [as_image(im) for im in images]
        if not images:
            raise ValueError("cannot build an amplitude bank from no images")
        shape = images[0].shape
        if any(im.shape != shape for im in images):
            raise ValueError("all bank images must share dimensions")
        return cls(np.stack([amplitude_of(im) for im in images]))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._amps.shape[1:]

    def __len__(self) -> int:
        return self._amps.shape[0]

    def __getitem__(self, i: int) -> np.ndarray:
        return self._amps[i]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self._amps[rng.integers(len(self))]

    def save(self, path: str | os.PathLike) -> None:
        h, w, c = self.shape
        header = _BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, h, w, c, len(self))
        Path(path).write_bytes(header + self._amps.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "AmplitudeBank":
        buf = Path(path).read_bytes()
        if len(buf) < _BANK_HEADER.size:
            raise ValueError("amplitude bank file too short")
        magic, version, h, w, c, count = _BANK_HEADER.unpack_from(buf)
        if magic != BANK_MAGIC:
            raise ValueError("not an amplitude bank file")
        if version != BANK_VERSION:
            raise ValueError(f"unsupported amplitude bank version {version}")
        body = buf[_BANK_HEADER.size:]
        if len(body) != count * h * w * c * 8:
            raise ValueError("amplitude bank payload size mismatch")
        amps = np.frombuffer(body, dtype="<f8").reshape(count, h, w, c)
        return cls(amps)


def build_amplitude_bank(images) -> AmplitudeBank:
    return AmplitudeBank.from_images(images)
