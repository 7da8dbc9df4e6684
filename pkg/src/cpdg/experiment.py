"""Experiment orchestration: data, training per toggle set, evaluation, ablation."""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .colorspace import align_images
from .domains import (
    SHIFTED_DOMAINS,
    CorruptionParams,
    JitterParams,
    Scene,
    build_domain_suite,
    generate_dataset,
    generate_style_images,
)
from .meta_train import MetaConfig, collate, train
from .metrics import IoUReport, iou
from .model import ModelParams, forward, init_params, save_checkpoint
from .spectral import AmplitudeBank

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Toggles:
    ampaug: bool = True
    meta_consistency: bool = True
    alignment: bool = True

    @property
    def tag(self) -> str:
        return "-".join(f"{k}{'+' if v else '-'}" for k, v in dataclasses.asdict(self).items())


@dataclass(frozen=True)
class DataSpec:
    n_train: int = 200
    n_test: int = 60
    dims: tuple[int, int] = (32, 32)
    n_cavs: int = 3
    seed: int = 0
    test_seed: int = 1000
    bank_size: int = 64
    bank_seed: int = 500
    bank_levels: tuple[float, float] = (0.25, 0.6)
    jitter: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec = DataSpec()
    meta: MetaConfig = MetaConfig()
    erm_epochs: int = 30
    erm_lr: float = 2e-4
    corruption: CorruptionParams = CorruptionParams()
    toggles: Toggles = Toggles()
    domains: tuple[str, ...] = SHIFTED_DOMAINS
    output_dir: str | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        def tup(sub):
            return {k: tuple(v) if isinstance(v, list) else v for k, v in sub.items()}

        return cls(
            data=DataSpec(**tup(d.get("data", {}))),
            meta=MetaConfig(**tup(d.get("meta", {}))),
            erm_epochs=d.get("erm_epochs", 30),
            erm_lr=d.get("erm_lr", 2e-4),
            corruption=CorruptionParams.from_dict(d.get("corruption", {})),
            toggles=Toggles(**d.get("toggles", {})),
            domains=tuple(d.get("domains", SHIFTED_DOMAINS)),
            output_dir=d.get("output_dir"),
        )

    def canonical_json(self) -> str:
        d = self.to_dict()
        d.pop("output_dir", None)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def with_toggles(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, toggles=dataclasses.replace(self.toggles, **kw))


def desk_config(seed: int = 0, **overrides) -> ExperimentConfig:
    """Learning rates that actually move the tiny model on a CPU in minutes.

    The stock defaults (2e-4 with plain SGD) barely leave initialisation
    at this size; everything else keeps its default.
    """
    data = DataSpec(seed=seed, test_seed=1000 + seed, bank_seed=500 + seed)
    meta = MetaConfig(inner_lr=0.1, outer_lr=0.25, beta=0.02, epochs=20, seed=seed, batch_size=4)
    return dataclasses.replace(ExperimentConfig(data=data, meta=meta, erm_epochs=30, erm_lr=0.5), **overrides)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ResultsRecord:
    run_id: str
    config_hash: str
    domain_tag: str
    report: IoUReport
    wall_time: float

    def to_json(self) -> str:
        return json.dumps({"run_id": self.run_id, "config_hash": self.config_hash,
                           "domain_tag": self.domain_tag, "iou": self.report.to_dict(),
                           "wall_time": self.wall_time}, sort_keys=True)


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


def prepare_inputs(scene: Scene, use_alignment: bool, ego_index: int = 0) -> np.ndarray:
    imgs = list(scene.cav_images)
    if use_alignment and len(imgs) > 1:
        ego = imgs[ego_index]
        others = [im for k, im in enumerate(imgs) if k != ego_index]
        aligned = iter(align_images(ego, others))
        imgs = [ego if k == ego_index else next(aligned) for k in range(len(imgs))]
    return np.stack(imgs)


@dataclass
class Evaluation:
    per_domain: dict[str, IoUReport]
    per_scene: dict[str, list[IoUReport]]

    def records(self) -> int:
        return sum(len(v) for v in self.per_scene.values())


def predict(params: ModelParams, scenes, use_alignment: bool = False) -> np.ndarray:
    x = np.stack([prepare_inputs(s, use_alignment) for s in scenes])
    pred, _ = forward(params, x)
    return pred


def evaluate(params: ModelParams, scenes, use_alignment: bool = False,
             threshold: float = 0.5) -> Evaluation:
    """Score ``params`` on scenes (a list, or a dict of domain -> list).

    Per-domain reports pool every pixel of the domain; per-scene reports are
    kept alongside.
    """
    if not isinstance(scenes, dict):
        scenes = {"clean": list(scenes)}
    per_domain, per_scene = {}, {}
    for tag, group in scenes.items():
        pred = predict(params, group, use_alignment)
        labels = np.stack([s.label for s in group])
        per_domain[tag] = iou(pred, labels, threshold)
        per_scene[tag] = [iou(p, s.label, threshold) for p, s in zip(pred, group)]
    return Evaluation(per_domain, per_scene)


def build_data(spec: DataSpec):
    jitter = JitterParams() if spec.jitter else None
    train_set = generate_dataset(spec.seed, spec.n_train, spec.dims, spec.n_cavs, jitter)
    test_set = generate_dataset(spec.test_seed, spec.n_test, spec.dims, spec.n_cavs, jitter)
    bank = AmplitudeBank.from_images(generate_style_images(spec.bank_seed, spec.bank_size, spec.dims,
                                                            spec.bank_levels))
    return train_set, test_set, bank


def train_model(cfg: ExperimentConfig, train_set, bank):
    """ERM warm-up, then the toggled second phase. Returns (params, erm_log, phase2_log)."""
    params = init_params(seed=cfg.meta.seed)
    erm_cfg = dataclasses.replace(cfg.meta, epochs=cfg.erm_epochs)
    params, erm_log = train(train_set, None, erm_cfg, params, meta=False, lr=cfg.erm_lr)
    use_bank = bank if cfg.toggles.ampaug else None
    phase2 = dataclasses.replace(cfg.meta, seed=cfg.meta.seed + 1)
    if cfg.toggles.meta_consistency:
        params, log2 = train(train_set, use_bank, phase2, params, meta=True)
    else:
        params, log2 = train(train_set, use_bank, phase2, params, meta=False, lr=cfg.erm_lr)
    return params, erm_log, log2


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except Exception as exc:  # noqa: BLE001
        raise ExperimentError(name, exc) from exc


def run_experiment(cfg: ExperimentConfig, data=None) -> list[ResultsRecord]:
    """Generate data, train per the toggles, evaluate on every domain.

    When ``cfg.output_dir`` is set, writes ``<output_dir>/<run_id>/`` with the
    config, training logs, checkpoint and ``results.jsonl``.
    """
    t0 = time.perf_counter()
    run_id = f"{cfg.toggles.tag}-{cfg.config_hash[:8]}"
    if data is None:
        data = _stage("data", build_data, cfg.data)
    train_set, test_set, bank = data
    params, erm_log, log2 = _stage("train", train_model, cfg, train_set, bank)
    suite = _stage("corrupt", build_domain_suite, test_set, cfg.corruption, cfg.domains)
    ev = _stage("evaluate", evaluate, params, suite, cfg.toggles.alignment)
    wall = time.perf_counter() - t0
    records = [ResultsRecord(run_id, cfg.config_hash, tag, ev.per_domain[tag], wall)
               for tag in cfg.domains]
    if cfg.output_dir is not None:
        _stage("write", _write_run, Path(cfg.output_dir) / run_id, cfg, params, erm_log, log2, records)
    log.info("run %s done in %.1fs", run_id, wall)
    return records


def _write_run(run_dir: Path, cfg, params, erm_log, log2, records):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    erm_log.write(run_dir / "train_erm.jsonl")
    log2.write(run_dir / "train_phase2.jsonl")
    save_checkpoint(params, run_dir / "checkpoint.bin")
    with open(run_dir / "results.jsonl", "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def toggle_grid() -> list[Toggles]:
    return [Toggles(*bits) for bits in itertools.product((False, True), repeat=3)]


def ablate(cfg: ExperimentConfig, grid=None) -> dict[str, list[ResultsRecord]]:
    """Run every toggle combination on shared data."""
    data = _stage("data", build_data, cfg.data)
    out = {}
    for tg in grid or toggle_grid():
        out[tg.tag] = run_experiment(dataclasses.replace(cfg, toggles=tg), data)
    return out
