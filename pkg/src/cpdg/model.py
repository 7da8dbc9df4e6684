"""Small collaborative segmentation network with hand-written gradients.

Each CAV image goes through a two-layer strided convolutional encoder; the
per-CAV feature maps are fused by an elementwise mean, and a two-layer
upsampling decoder emits one sigmoid map per class. The pooled latent vector
``z`` (spatial mean of the fused features) feeds the consistency loss.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .consistency import KernelParams, mmd2_grad

PROB_EPS = 1e-7


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    enc_channels: tuple[int, ...] = (8, 16)
    dec_channels: tuple[int, ...] = (8, 3)
    kernel: int = 3

    @property
    def latent_dim(self) -> int:
        return self.enc_channels[-1]

    @property
    def n_classes(self) -> int:
        return self.dec_channels[-1]

    @property
    def downsample(self) -> int:
        return 2 ** len(self.enc_channels)

    def layers(self) -> list[tuple[str, int, int]]:
        """(name, in_channels, out_channels) per filter layer, encoder first."""
        out = []
        cin = self.in_channels
        for i, c in enumerate(self.enc_channels):
            out.append((f"enc{i + 1}", cin, c))
            cin = c
        for i, c in enumerate(self.dec_channels):
            out.append((f"dec{i + 1}", cin, c))
            cin = c
        return out

    def digest(self) -> bytes:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple[int, ...]
    start: int

    @property
    def stop(self) -> int:
        return self.start + int(np.prod(self.shape))


@lru_cache(maxsize=None)
def param_layout(cfg: ArchConfig) -> tuple[Slot, ...]:
    slots = []
    pos = 0
    for name, cin, cout in cfg.layers():
        for suffix, shape in (("w", (cout, cin, cfg.kernel, cfg.kernel)), ("b", (cout,))):
            slot = Slot(f"{name}.{suffix}", shape, pos)
            slots.append(slot)
            pos = slot.stop
    return tuple(slots)


@lru_cache(maxsize=None)
def _slot_index(cfg: ArchConfig) -> dict[str, Slot]:
    return {s.name: s for s in param_layout(cfg)}


@dataclass(frozen=True)
class ModelParams:
    theta: np.ndarray
    cfg: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).ravel()
        if theta.size != param_layout(self.cfg)[-1].stop:
            raise ValueError(f"theta has {theta.size} entries, layout needs {self.size}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def size(self) -> int:
        return param_layout(self.cfg)[-1].stop

    @property
    def n_encoder(self) -> int:
        """Index splitting theta into encoder and decoder parts."""
        return next(s.start for s in param_layout(self.cfg) if s.name.startswith("dec"))

    @property
    def encoder(self) -> np.ndarray:
        return self.theta[: self.n_encoder]

    @property
    def decoder(self) -> np.ndarray:
        return self.theta[self.n_encoder :]

    def get(self, name: str) -> np.ndarray:
        s = _slot_index(self.cfg)[name]
        return self.theta[s.start : s.stop].reshape(s.shape)

    def replace(self, theta: np.ndarray) -> "ModelParams":
        return ModelParams(theta, self.cfg)


def init_params(cfg: ArchConfig = ArchConfig(), seed: int = 0) -> ModelParams:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(param_layout(cfg)[-1].stop)
    for s in param_layout(cfg):
        if s.name.endswith(".w"):
            fan_in = s.shape[1] * s.shape[2] * s.shape[3]
            bound = np.sqrt(1.0 / fan_in)
            theta[s.start : s.stop] = rng.uniform(-bound, bound, s.stop - s.start)
    return ModelParams(theta, cfg)


# -- layer primitives (NCHW) -------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, tuple[int, int]]:
    pad = k // 2
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    sb, sc, sh, sw = xp.strides
    win = as_strided(xp, (b, ho, wo, c, k, k), (sb, sh * stride, sw * stride, sc, sh, sw),
                     writeable=False)
    return win.reshape(b * ho * wo, c * k * k), (ho, wo)


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, out_hw) -> np.ndarray:
    b, c, h, w = x_shape
    ho, wo = out_hw
    pad = k // 2
    d = dcols.reshape(b, ho, wo, c, k, k)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dxp[:, :, pad : pad + h, pad : pad + w]


def _conv(x, w, b, stride):
    cols, (ho, wo) = _im2col(x, w.shape[2], stride)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    out = out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    return out, cols


def _conv_backward(dout, cols, x_shape, w, stride, need_dx=True):
    o = w.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dx = None
    if need_dx:
        dcols = d2 @ w.reshape(o, -1)
        dx = _col2im(dcols, x_shape, w.shape[2], stride, dout.shape[2:])
    return dw, db, dx


def _upsample(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample_backward(d):
    b, c, h, w = d.shape
    return d.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# -- forward / backward ------------------------------------------------------

@dataclass
class ForwardTrace:
    theta: np.ndarray
    batched: bool
    n_cavs: int
    cache: dict
    fused: np.ndarray
    z: np.ndarray
    logits: np.ndarray
    prob: np.ndarray


def _as_batch(cav_images) -> tuple[np.ndarray, bool]:
    if isinstance(cav_images, (list, tuple)):
        if not cav_images:
            raise ValueError("need at least one CAV image")
        shapes = {np.shape(im) for im in cav_images}
        if len(shapes) != 1:
            raise ValueError(f"CAV images differ in shape: {sorted(shapes)}")
    x = np.asarray(cav_images, dtype=np.float64)
    if x.ndim == 4:
        return x[None], False
    if x.ndim == 5:
        return x, True
    raise ValueError(f"expected (N, H, W, C) or (B, N, H, W, C) input, got {x.shape}")


def forward(params: ModelParams, cav_images) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network on one scene (N, H, W, C) or a batch (B, N, H, W, C).

    Returns per-class probabilities shaped like the input minus the CAV axis,
    with ``n_classes`` channels, and the trace needed by ``backward``.
    """
    cfg = params.cfg
    x, batched = _as_batch(cav_images)
    b, n, h, w, c = x.shape
    if n < 1:
        raise ValueError("need at least one CAV image")
    if c != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {c}")
    if h % cfg.downsample or w % cfg.downsample:
        raise ValueError(f"input dims must be multiples of {cfg.downsample}, got {h}x{w}")

    cache = {}
    a = x.reshape(b * n, h, w, c).transpose(0, 3, 1, 2)
    n_enc = len(cfg.enc_channels)
    for i in range(n_enc):
        name = f"enc{i + 1}"
        pre, cols = _conv(a, params.get(f"{name}.w"), params.get(f"{name}.b"), 2)
        cache[name] = (cols, a.shape, pre > 0)
        a = np.maximum(pre, 0.0)
    feat = a.reshape(b, n, *a.shape[1:])
    fused = feat.mean(axis=1)
    z = fused.mean(axis=(2, 3))

    a = fused
    n_dec = len(cfg.dec_channels)
    for i in range(n_dec):
        name = f"dec{i + 1}"
        up = _upsample(a)
        pre, cols = _conv(up, params.get(f"{name}.w"), params.get(f"{name}.b"), 1)
        last = i == n_dec - 1
        cache[name] = (cols, up.shape, None if last else pre > 0)
        a = pre if last else np.maximum(pre, 0.0)
    logits = a
    prob = 1.0 / (1.0 + np.exp(-logits))
    trace = ForwardTrace(params.theta, batched, n, cache, fused, z, logits, prob)
    pred = prob.transpose(0, 2, 3, 1)
    return (pred if batched else pred[0]), trace


def _labels_nchw(label, trace: ForwardTrace) -> np.ndarray:
    y = np.asarray(label, dtype=np.float64)
    if not trace.batched:
        y = y[None]
    y = y.transpose(0, 3, 1, 2)
    if y.shape != trace.prob.shape:
        raise ValueError(f"label shape {y.shape} does not match prediction {trace.prob.shape}")
    return y


def cross_entropy(pred, label) -> float:
    """Mean binary cross-entropy over pixels and classes, probabilities clamped."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    if pred.shape != y.shape:
        raise ValueError(f"prediction {pred.shape} and label {y.shape} differ")
    p = np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def trace_loss(trace: ForwardTrace, label) -> float:
    y = _labels_nchw(label, trace)
    return cross_entropy(trace.prob, y)


def _check_fresh(params: ModelParams, trace: ForwardTrace):
    if trace.theta is not params.theta and not np.array_equal(trace.theta, params.theta):
        raise ValueError("trace was produced with different parameters")


def _backprop(params: ModelParams, trace: ForwardTrace, dlogits, dz) -> np.ndarray:
    cfg = params.cfg
    grads = {}
    d = dlogits
    for i in reversed(range(len(cfg.dec_channels))):
        name = f"dec{i + 1}"
        cols, up_shape, mask = trace.cache[name]
        if mask is not None:
            d = d * mask
        dw, db, dup = _conv_backward(d, cols, up_shape, params.get(f"{name}.w"), 1)
        grads[f"{name}.w"], grads[f"{name}.b"] = dw, db
        d = _upsample_backward(dup)
    dfused = d
    if dz is not None:
        hh, ww = trace.fused.shape[2:]
        dfused = dfused + dz[:, :, None, None] / (hh * ww)
    b = dfused.shape[0]
    n = trace.n_cavs
    d = np.repeat(dfused[:, None] / n, n, axis=1).reshape(b * n, *dfused.shape[1:])
    for i in reversed(range(len(cfg.enc_channels))):
        name = f"enc{i + 1}"
        cols, x_shape, mask = trace.cache[name]
        d = d * mask
        dw, db, dx = _conv_backward(d, cols, x_shape, params.get(f"{name}.w"), 2, need_dx=i > 0)
        grads[f"{name}.w"], grads[f"{name}.b"] = dw, db
        d = dx
    flat = np.zeros(params.size)
    for s in param_layout(cfg):
        flat[s.start : s.stop] = grads[s.name].ravel()
    return flat


def _ce_logit_grad(trace: ForwardTrace, label) -> np.ndarray:
    y = _labels_nchw(label, trace)
    p = trace.prob
    live = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    return np.where(live, p - y, 0.0) / p.size


def backward(params: ModelParams, trace: ForwardTrace, label) -> np.ndarray:
    """Gradient of ``cross_entropy`` with respect to theta."""
    _check_fresh(params, trace)
    return _backprop(params, trace, _ce_logit_grad(trace, label), None)


def backward_with_consistency(params: ModelParams, trace_s: ForwardTrace, trace_t: ForwardTrace,
                              label_t, beta: float, kp: KernelParams) -> np.ndarray:
    """Gradient of CE(target) + beta * mmd2(z_s, z_t) w.r.t. theta.

    ``trace_t`` must come from ``params``. ``trace_s`` may be a trace or the
    pooled source latents directly; either way they are held constant.
    """
    _check_fresh(params, trace_t)
    dz = None
    if beta != 0:
        zs = trace_s.z if isinstance(trace_s, ForwardTrace) else trace_s
        dz = beta * mmd2_grad(zs, trace_t.z, kp)
    return _backprop(params, trace_t, _ce_logit_grad(trace_t, label_t), dz)


def latent_backward(params: ModelParams, trace: ForwardTrace, dz: np.ndarray) -> np.ndarray:
    """Pull a gradient on the pooled latent ``z`` back onto theta (encoder only)."""
    _check_fresh(params, trace)
    return _backprop(params, trace, np.zeros_like(trace.logits), dz)


def sgd_step(params: ModelParams, gradient: np.ndarray, lr: float) -> ModelParams:
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.theta.shape:
        raise ValueError(f"gradient length {g.size} != theta length {params.theta.size}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    return params.replace(params.theta - lr * g)


CKPT_MAGIC = b"CPDGCKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sI32sQ")


def save_checkpoint(params: ModelParams, path: str | os.PathLike) -> None:
    """Header (magic, uint32 version, sha256 of arch config, uint64 count) + f64 LE theta.

    The arch config itself is stored as a JSON sidecar after the payload so a
    checkpoint can be reloaded without knowing the architecture in advance.
    """
    header = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, params.cfg.digest(), params.size)
    arch = json.dumps(asdict(params.cfg), sort_keys=True).encode()
    Path(path).write_bytes(header + params.theta.astype("<f8").tobytes() + arch)


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEADER.size:
        raise ValueError("checkpoint file too short")
    magic, version, digest, count = _CKPT_HEADER.unpack_from(buf)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError("not a supported checkpoint file")
    start = _CKPT_HEADER.size
    stop = start + 8 * count
    theta = np.frombuffer(buf[start:stop], dtype="<f8")
    if theta.size != count:
        raise ValueError("truncated checkpoint payload")
    raw = json.loads(buf[stop:] or b"{}")
    cfg = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    if cfg.digest() != digest:
        raise ValueError("checkpoint architecture hash mismatch")
    return ModelParams(theta, cfg)
