"""Image rasters, binary PPM I/O and bilinear resizing.

Images are plain float64 numpy arrays of shape (H, W, C) with values in
[0, 1]. Segmentation masks use the same layout with one binary channel per
class (vehicle, road, lane).
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

CLASS_NAMES = ("vehicle", "road", "lane")


class PPMError(ValueError):
    """Base class for PPM decoding problems."""


class PPMHeaderError(PPMError):
    pass


class PPMTruncatedError(PPMError):
    pass


class PPMMaxvalError(PPMError):
    pass


def as_image(data, channels: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a float64 (H, W, C) raster and check it is finite."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"expected an (H, W, C) raster, got shape {img.shape}")
    if channels is not None and img.shape[2] != channels:
        raise ValueError(f"expected {channels} channels, got {img.shape[2]}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and map to bytes with round-half-up."""
    clipped = np.clip(img, 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PPMHeaderError("unexpected end of header")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise PPMHeaderError(f"not a binary PPM (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise PPMHeaderError(f"bad header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PPMHeaderError("zero image dimension")
    if maxval != 255:
        raise PPMMaxvalError(f"unsupported maxval {maxval}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PPMHeaderError("missing whitespace after maxval")
    pos += 1
    need = width * height * 3
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise PPMTruncatedError(f"expected {need} payload bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return data.astype(np.float64) / 255.0


def encode_ppm(img: np.ndarray) -> bytes:
    img = as_image(img, channels=3)
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + quantize(img).tobytes()


def load_ppm(path: str | os.PathLike) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_ppm(img: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_ppm(img))


def save_mask_ppms(mask: np.ndarray, stem: str | os.PathLike) -> list[Path]:
    """Write one grey PPM (0/255) per class as ``<stem>_<class>.ppm``."""
    stem = Path(stem)
    out = []
    for k, name in enumerate(CLASS_NAMES):
        path = stem.with_name(f"{stem.name}_{name}.ppm")
        save_ppm(np.repeat(mask[:, :, k : k + 1], 3, axis=2), path)
        out.append(path)
    return out


def load_mask_ppms(stem: str | os.PathLike) -> np.ndarray:
    stem = Path(stem)
    planes = [
        load_ppm(stem.with_name(f"{stem.name}_{name}.ppm"))[:, :, 0] >= 0.5
        for name in CLASS_NAMES
    ]
    return np.stack(planes, axis=2).astype(np.float64)


def resize_bilinear(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resize with edge clamping (pixel centres aligned)."""
    if new_h < 1 or new_w < 1:
        raise ValueError("target dimensions must be >= 1")
    img = as_image(img)
    h, w, _ = img.shape
    if (h, w) == (new_h, new_w):
        return img.copy()

    def coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, new_h)
    x0, x1, fx = coords(w, new_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy
