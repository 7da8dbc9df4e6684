"""Meta-consistency training.

Each iteration takes a gradient step on the source batch (theta -> theta'),
evaluates theta' on the AmpAug counterpart of that batch with cross-entropy
plus a weighted MMD between source and target latents, and finally moves the
original theta along the sum of the source gradient and the meta gradient.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .consistency import KernelParams, median_bandwidth, mmd2, mmd2_grad
from .model import (
    ModelParams,
    backward,
    backward_with_consistency,
    cross_entropy,
    forward,
    init_params,
    latent_backward,
    sgd_step,
)
from .spectral import DEFAULT_MASK_RATIO, AmplitudeBank, ampaug_amplitude

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 1e-3
    outer_lr: float = 2e-4
    beta: float = 0.1
    epochs: int = 20
    seed: int = 0
    mask_ratio: float = DEFAULT_MASK_RATIO
    second_order: bool = False
    batch_size: int = 8
    hvp_eps: float = 1e-4

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class Batch:
    images: np.ndarray  # (B, N, H, W, 3)
    labels: np.ndarray  # (B, H, W, 3)


@dataclass(frozen=True)
class MetaBatch:
    source: Batch
    target: Batch


def collate(scenes) -> Batch:
    images = np.stack([np.stack(s.cav_images) for s in scenes])
    labels = np.stack([s.label for s in scenes])
    return Batch(images, labels)


def make_meta_batch(scenes, bank: AmplitudeBank | None, ratio: float,
                    rng: np.random.Generator) -> MetaBatch:
    """Pair a source batch with its AmpAug counterpart; labels are shared.

    One bank amplitude is drawn per scene and applied to all its CAV images.
    Without a bank the target branch is the source itself.
    """
    source = collate(scenes)
    if bank is None:
        return MetaBatch(source, source)
    target = np.empty_like(source.images)
    for i, cavs in enumerate(source.images):
        amp = bank.sample(rng)
        for j, img in enumerate(cavs):
            target[i, j] = ampaug_amplitude(img, amp, ratio)
    return MetaBatch(source, Batch(target, source.labels))


def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {what}: {value}")
    return value


@dataclass
class _SourcePass:
    loss: float
    grad: np.ndarray
    trace: object


def _source_pass(params: ModelParams, source: Batch) -> _SourcePass:
    pred, trace = forward(params, source.images)
    loss = _finite(cross_entropy(pred, source.labels), "meta-train loss")
    return _SourcePass(loss, backward(params, trace, source.labels), trace)


def inner_update(params: ModelParams, source: Batch, inner_lr: float) -> ModelParams:
    """theta' = theta - inner_lr * grad CE(source; theta). ``params`` is untouched."""
    return sgd_step(params, _source_pass(params, source).grad, inner_lr)


@dataclass(frozen=True)
class MetaObjective:
    value: float
    gradient: np.ndarray
    ce: float
    cons: float
    kp: KernelParams
    z_t: np.ndarray


def meta_objective(params_prime: ModelParams, batch: MetaBatch, zs: np.ndarray, beta: float,
                   kp: KernelParams | None = None) -> MetaObjective:
    """CE(target; theta') + beta * mmd2(zs, zt) and its gradient w.r.t. theta'.

    ``zs`` are the pooled meta-train latents. When ``kp`` is omitted the
    bandwidth comes from the median heuristic on this batch and is then held
    fixed for the gradient.
    """
    pred_t, trace_t = forward(params_prime, batch.target.images)
    ce = _finite(cross_entropy(pred_t, batch.target.labels), "meta-test loss")
    if kp is None:
        kp = median_bandwidth(zs, trace_t.z)
    cons = _finite(mmd2(zs, trace_t.z, kp), "consistency loss")
    grad = backward_with_consistency(params_prime, zs, trace_t, batch.target.labels, beta, kp)
    return MetaObjective(ce + beta * cons, grad, ce, cons, kp, trace_t.z)


def hessian_vector_product(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray,
                           v: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference H v using two gradient evaluations."""
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(theta)
    h = eps / norm
    return (grad_fn(theta + h * v) - grad_fn(theta - h * v)) / (2.0 * h)


def combine_meta_gradient(g_src: np.ndarray, g_meta_prime: np.ndarray, inner_lr: float,
                          src_grad_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                          theta: np.ndarray | None = None, eps: float = 1e-4) -> np.ndarray:
    """Gradient of L_src(theta) + L_meta(theta - inner_lr * grad L_src(theta)).

    With ``src_grad_fn`` absent this is the first-order approximation
    ``g_src + g_meta_prime``; otherwise the chain rule through theta' is applied
    with a finite-difference Hessian-vector product.
    """
    if src_grad_fn is None:
        return g_src + g_meta_prime
    hv = hessian_vector_product(src_grad_fn, theta, g_meta_prime, eps)
    return g_src + g_meta_prime - inner_lr * hv


@dataclass(frozen=True)
class LogRecord:
    iter: int
    epoch: int
    l_ce_train: float
    l_ce_test: float
    l_cons: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec: LogRecord):
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write(self, path: str | os.PathLike):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "TrainLog":
        with open(path) as fh:
            return cls([LogRecord(**json.loads(line)) for line in fh if line.strip()])


def outer_update(params: ModelParams, batch: MetaBatch, cfg: MetaConfig,
                 it: int = 0, epoch: int = 0) -> tuple[ModelParams, LogRecord]:
    src = _source_pass(params, batch.source)
    params_prime = sgd_step(params, src.grad, cfg.inner_lr)
    obj = meta_objective(params_prime, batch, src.trace.z, cfg.beta)
    if cfg.second_order:
        def src_grad(theta):
            q = params.replace(theta)
            _, tr = forward(q, batch.source.images)
            return backward(q, tr, batch.source.labels)

        g = combine_meta_gradient(src.grad, obj.gradient, cfg.inner_lr, src_grad,
                                  params.theta, cfg.hvp_eps)
        if cfg.beta != 0:
            # z_s = E(x_s; theta) also depends on theta
            dzs = cfg.beta * mmd2_grad(obj.z_t, src.trace.z, obj.kp)
            g = g + latent_backward(params, src.trace, dzs)
    else:
        g = combine_meta_gradient(src.grad, obj.gradient, cfg.inner_lr)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite meta gradient at iteration {it}")
    rec = LogRecord(it, epoch, src.loss, obj.ce, obj.cons)
    return sgd_step(params, g, cfg.outer_lr), rec


def erm_update(params: ModelParams, batch: MetaBatch, lr: float, augmented: bool,
               it: int = 0, epoch: int = 0) -> tuple[ModelParams, LogRecord]:
    """Plain gradient step on the source batch, plus the AmpAug batch when ``augmented``."""
    src = _source_pass(params, batch.source)
    g = src.grad
    l_test, cons = src.loss, 0.0
    if augmented:
        pred_t, trace_t = forward(params, batch.target.images)
        l_test = _finite(cross_entropy(pred_t, batch.target.labels), "augmented loss")
        g = g + backward(params, trace_t, batch.target.labels)
        cons = mmd2(src.trace.z, trace_t.z, median_bandwidth(src.trace.z, trace_t.z))
    return sgd_step(params, g, lr), LogRecord(it, epoch, src.loss, l_test, cons)


def iteration_rng(seed: int, epoch: int, it: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, it])


def train(dataset: Sequence, bank: AmplitudeBank | None, cfg: MetaConfig,
          params: ModelParams | None = None, meta: bool = True,
          lr: float | None = None, log_path: str | os.PathLike | None = None,
          ) -> tuple[ModelParams, TrainLog]:
    """Run ``cfg.epochs`` epochs over ``dataset``.

    ``bank=None`` disables AmpAug (the target branch equals the source).
    ``meta=False`` swaps the meta-consistency update for plain ERM at ``lr``
    (default ``cfg.outer_lr``).
    """
    if len(dataset) == 0:
        raise ValueError("training needs a nonempty dataset")
    if bank is not None and len(bank) == 0:
        raise ValueError("amplitude bank is empty")
    if params is None:
        params = init_params(seed=cfg.seed)
    lr = cfg.outer_lr if lr is None else lr
    tlog = TrainLog()
    sink = open(log_path, "w") if log_path is not None else None
    it = 0
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
            for start in range(0, len(order), cfg.batch_size):
                rng = iteration_rng(cfg.seed, epoch, it)
                scenes = [dataset[k] for k in order[start : start + cfg.batch_size]]
                batch = make_meta_batch(scenes, bank, cfg.mask_ratio, rng)
                if meta:
                    params, rec = outer_update(params, batch, cfg, it, epoch)
                else:
                    params, rec = erm_update(params, batch, lr, bank is not None, it, epoch)
                tlog.append(rec)
                if sink is not None:
                    sink.write(rec.to_json() + "\n")
                it += 1
            log.debug("epoch %d done, last record %s", epoch, tlog.records[-1] if tlog else None)
    finally:
        if sink is not None:
            sink.close()
    return params, tlog
