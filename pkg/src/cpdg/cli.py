"""Command line entry point: ``cpdg gen | ampaug | align | train | eval | ablate``."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import click
import numpy as np

from .colorspace import align_images
from .domains import (DOMAIN_TAGS, CorruptionParams, JitterParams, build_domain_suite,
                      generate_dataset, load_scenes, save_scenes)
from .experiment import ExperimentConfig, ablate, evaluate, load_config, run_experiment, toggle_grid
from .image_core import load_ppm, save_ppm
from .model import load_checkpoint
from .spectral import DEFAULT_MASK_RATIO, AmplitudeBank, ampaug_amplitude


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--count", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--size", default=32, show_default=True, help="Square raster side, multiple of 4.")
@click.option("--cavs", default=3, show_default=True)
@click.option("--no-jitter", is_flag=True, help="Give every CAV the same photometry.")
@click.option("--domain", type=click.Choice(DOMAIN_TAGS), default="clean", show_default=True)
def gen(out_dir, count, seed, size, cavs, no_jitter, domain):
    """Generate synthetic scenes into OUT_DIR."""
    scenes = generate_dataset(seed, count, (size, size), cavs, None if no_jitter else JitterParams())
    if domain != "clean":
        scenes = build_domain_suite(scenes, CorruptionParams(), (domain,))[domain]
    manifest = save_scenes(scenes, out_dir)
    click.echo(f"wrote {len(scenes)} scenes to {manifest.parent}")


@main.command("ampaug")
@click.argument("in_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--bank", "bank_path", type=click.Path(exists=True), required=True,
              help="Amplitude bank file, or a directory of PPM style images.")
@click.option("--ratio", default=DEFAULT_MASK_RATIO, show_default=True, help="Low-frequency mask ratio.")
@click.option("--seed", default=0, show_default=True, help="Seed for drawing bank entries.")
def ampaug_cmd(in_dir, out_dir, bank_path, ratio, seed):
    """Augment every PPM in IN_DIR with a randomly drawn bank amplitude."""
    bp = Path(bank_path)
    if bp.is_dir():
        bank = AmplitudeBank.from_images([load_ppm(p) for p in sorted(bp.glob("*.ppm"))])
    else:
        bank = AmplitudeBank.load(bp)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    files = sorted(Path(in_dir).glob("*.ppm"))
    for f in files:
        save_ppm(ampaug_amplitude(load_ppm(f), bank.sample(rng), ratio), out / f.name)
    click.echo(f"augmented {len(files)} images")


@main.command()
@click.argument("in_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--ego-index", default=0, show_default=True)
def align(in_dir, out_dir, ego_index):
    """Translate each scene's non-ego CAV images to the ego's LAB statistics."""
    scenes = load_scenes(in_dir)
    aligned = []
    for s in scenes:
        if not 0 <= ego_index < s.n_cavs:
            raise click.BadParameter(f"scene has {s.n_cavs} CAVs", param_hint="--ego-index")
        ego = s.cav_images[ego_index]
        others = iter(align_images(ego, [im for k, im in enumerate(s.cav_images) if k != ego_index]))
        imgs = [ego if k == ego_index else next(others) for k in range(s.n_cavs)]
        aligned.append(s.with_images(imgs, s.domain_tag))
    save_scenes(aligned, out_dir)
    click.echo(f"aligned {len(aligned)} scenes")


def _meta_options(fn):
    fn = click.option("--outer-lr", type=float, default=None, help="Outer step size.  [config default: 2e-4]")(fn)
    fn = click.option("--inner-lr", type=float, default=None, help="Inner step size.  [config default: 1e-3]")(fn)
    fn = click.option("--beta", type=float, default=None, help="Consistency weight.  [config default: 0.1]")(fn)
    fn = click.option("--ratio", type=float, default=None,
                      help="AmpAug mask ratio.  [config default: 0.01]")(fn)
    fn = click.option("--output-dir", default=None, help="Run directory root (overrides the config).")(fn)
    return click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                        help="Experiment config JSON; omitted fields keep their defaults.")(fn)


def _resolve_config(config_path, output_dir, ratio, beta, inner_lr, outer_lr) -> ExperimentConfig:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    meta = {k: v for k, v in (("mask_ratio", ratio), ("beta", beta), ("inner_lr", inner_lr),
                              ("outer_lr", outer_lr)) if v is not None}
    if meta:
        cfg = dataclasses.replace(cfg, meta=dataclasses.replace(cfg.meta, **meta))
    if output_dir:
        cfg = dataclasses.replace(cfg, output_dir=output_dir)
    return cfg


def _emit(records):
    for r in records:
        click.echo(r.to_json())


@main.command()
@_meta_options
def train(config_path, output_dir, ratio, beta, inner_lr, outer_lr):
    """Train and evaluate one toggle setting; prints one record per domain."""
    cfg = _resolve_config(config_path, output_dir, ratio, beta, inner_lr, outer_lr)
    _emit(run_experiment(cfg))


@main.command("eval")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--scenes", "scene_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Directory of clean scenes to corrupt and score.")
@click.option("--domains", default="sunny,fog,rain,night", show_default=True)
@click.option("--align/--no-align", default=False, show_default=True)
def eval_cmd(ckpt, scene_dir, domains, align):
    """Score a checkpoint on corrupted copies of a scene directory."""
    params = load_checkpoint(ckpt)
    tags = tuple(t for t in domains.split(",") if t)
    bad = [t for t in tags if t not in DOMAIN_TAGS]
    if bad:
        raise click.BadParameter(f"unknown domains {bad}", param_hint="--domains")
    suite = build_domain_suite(load_scenes(scene_dir), CorruptionParams(), tags)
    ev = evaluate(params, suite, align)
    for tag, rep in ev.per_domain.items():
        click.echo(json.dumps({"domain_tag": tag, "align": align, "iou": rep.to_dict()}, sort_keys=True))


@main.command("ablate")
@_meta_options
@click.option("--grid", default="full", show_default=True,
              help="'full' for all 8 toggle combinations, or a comma list of tags "
                   "like 'ampaug+-meta_consistency+-alignment+'.")
def ablate_cmd(config_path, output_dir, ratio, beta, inner_lr, outer_lr, grid):
    """Run several toggle combinations on shared data."""
    cfg = _resolve_config(config_path, output_dir, ratio, beta, inner_lr, outer_lr)
    known = {t.tag: t for t in toggle_grid()}
    if grid == "full":
        chosen = list(known.values())
    else:
        try:
            chosen = [known[t] for t in grid.split(",")]
        except KeyError as exc:
            raise click.BadParameter(f"unknown toggle tag {exc}", param_hint="--grid") from None
    for recs in ablate(cfg, chosen).values():
        _emit(recs)


__all__ = ["main"]
