"""Procedural multi-CAV road scenes and photometric weather corruptions.

A scene is a top-down raster: grass, a curved road band, a dashed centre
lane and a few vehicle rectangles. Every CAV observes the same geometry
through its own photometric jitter (brightness, contrast, colour cast).
Corruptions are purely photometric, so labels are never touched.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .image_core import load_mask_ppms, load_ppm, save_mask_ppms, save_ppm

DOMAIN_TAGS = ("clean", "sunny", "fog", "rain", "night")
SHIFTED_DOMAINS = ("sunny", "fog", "rain", "night")


@dataclass(frozen=True)
class Vehicle:
    row: float  # centre, fraction of height
    col: float  # centre, fraction of width
    half_h: float
    half_w: float
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneGeometry:
    road_center: float  # fraction of width
    road_amp: float
    road_freq: float
    road_phase: float
    road_half_width: float
    lane_half_width: float
    dash_period: float  # fraction of height
    vehicles: tuple[Vehicle, ...]

    def centre_cols(self, h: int, w: int) -> np.ndarray:
        rows = (np.arange(h) + 0.5) / h
        c = self.road_center + self.road_amp * np.sin(2 * np.pi * self.road_freq * rows + self.road_phase)
        return c * w


def rasterize_label(geom: SceneGeometry, h: int, w: int) -> np.ndarray:
    """Binary (H, W, 3) mask with channels vehicle, road, lane."""
    rows = np.arange(h)[:, None] + 0.5
    cols = np.arange(w)[None, :] + 0.5
    offset = np.abs(cols - geom.centre_cols(h, w)[:, None])
    road = offset <= geom.road_half_width * w
    dash = ((rows / h) / geom.dash_period) % 1.0 < 0.5
    lane = (offset <= max(geom.lane_half_width * w, 0.5)) & dash
    vehicle = np.zeros((h, w), dtype=bool)
    for v in geom.vehicles:
        vehicle |= (np.abs(rows / h - v.row) <= v.half_h) & (np.abs(cols / w - v.col) <= v.half_w)
    lane &= ~vehicle
    return np.stack([vehicle, road, lane], axis=2).astype(np.float64)


@dataclass(frozen=True)
class JitterParams:
    brightness: float = 0.15
    contrast: tuple[float, float] = (0.8, 1.2)
    cast: float = 0.05


@dataclass(frozen=True)
class Scene:
    cav_images: tuple[np.ndarray, ...]
    label: np.ndarray
    scene_seed: int
    domain_tag: str = "clean"
    geometry: SceneGeometry | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")
        if not self.cav_images:
            raise ValueError("a scene needs at least one CAV image")
        if any(im.shape != self.label.shape for im in self.cav_images):
            raise ValueError("CAV images and label must share dimensions")

    @property
    def n_cavs(self) -> int:
        return len(self.cav_images)

    def with_images(self, images, tag: str) -> "Scene":
        return replace(self, cav_images=tuple(images), domain_tag=tag)


def _random_geometry(rng: np.random.Generator) -> SceneGeometry:
    center = rng.uniform(0.35, 0.65)
    amp = rng.uniform(0.0, 0.15)
    half_width = rng.uniform(0.16, 0.24)
    vehicles = []
    for _ in range(rng.integers(1, 6)):
        row = rng.uniform(0.1, 0.9)
        side = rng.choice([-1.0, 1.0])
        vehicles.append((row, side))
    geom = SceneGeometry(center, amp, rng.uniform(0.3, 1.2), rng.uniform(0, 2 * np.pi),
                         half_width, rng.uniform(0.015, 0.03), rng.uniform(0.2, 0.35), ())
    placed = []
    for row, side in vehicles:
        c = geom.road_center + geom.road_amp * np.sin(2 * np.pi * geom.road_freq * row + geom.road_phase)
        col = c + side * half_width * 0.5
        color = tuple(float(v) for v in rng.uniform(0.05, 0.95, 3))
        placed.append(Vehicle(float(row), float(col), float(rng.uniform(0.06, 0.1)),
                              float(rng.uniform(0.04, 0.06)), color))
    return replace(geom, vehicles=tuple(placed))


def _smooth_noise(rng: np.random.Generator, h: int, w: int, scale: int = 4) -> np.ndarray:
    coarse = rng.normal(size=(scale + 1, scale + 1))
    ys = np.linspace(0, scale, h)
    xs = np.linspace(0, scale, w)
    y0 = np.minimum(ys.astype(int), scale - 1)
    x0 = np.minimum(xs.astype(int), scale - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = coarse[y0][:, x0] * (1 - fx) + coarse[y0][:, x0 + 1] * fx
    bot = coarse[y0 + 1][:, x0] * (1 - fx) + coarse[y0 + 1][:, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def render(geom: SceneGeometry, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    label = rasterize_label(geom, h, w)
    vehicle, road, lane = (label[:, :, k].astype(bool) for k in range(3))
    grass = np.array([rng.uniform(0.2, 0.35), rng.uniform(0.45, 0.6), rng.uniform(0.15, 0.3)])
    asphalt = rng.uniform(0.3, 0.42)
    paint = np.array([0.92, 0.92, rng.uniform(0.55, 0.92)])
    img = np.empty((h, w, 3))
    img[:] = grass
    img += 0.05 * _smooth_noise(rng, h, w)[:, :, None]
    img[road] = asphalt
    img[lane] = paint
    rows = np.arange(h)[:, None] + 0.5
    cols = np.arange(w)[None, :] + 0.5
    for v in geom.vehicles:
        m = (np.abs(rows / h - v.row) <= v.half_h) & (np.abs(cols / w - v.col) <= v.half_w)
        img[m] = v.color
    img += rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def photometric_jitter(img: np.ndarray, rng: np.random.Generator,
                       p: JitterParams = JitterParams()) -> np.ndarray:
    delta = rng.uniform(-p.brightness, p.brightness)
    contrast = rng.uniform(*p.contrast)
    cast = rng.uniform(-p.cast, p.cast, 3)
    return np.clip((img - 0.5) * contrast + 0.5 + delta + cast, 0.0, 1.0)


def generate_scene(seed: int, dims: tuple[int, int] = (32, 32), n_cavs: int = 3,
                   jitter: JitterParams | None = JitterParams()) -> Scene:
    h, w = dims
    if n_cavs < 1:
        raise ValueError("n_cavs must be >= 1")
    if h < 4 or w < 4:
        raise ValueError(f"scene dims too small: {dims}")
    rng = np.random.default_rng([seed, 0])
    geom = _random_geometry(rng)
    base = render(geom, h, w, rng)
    images = []
    for k in range(n_cavs):
        cav_rng = np.random.default_rng([seed, 1, k])
        img = base if jitter is None else photometric_jitter(base, cav_rng, jitter)
        images.append(img.copy())
    return Scene(tuple(images), rasterize_label(geom, h, w), seed, "clean", geom)


def scene_seed(dataset_seed: int, index: int) -> int:
    return dataset_seed * 1_000_003 + index


def generate_dataset(seed: int, count: int, dims=(32, 32), n_cavs: int = 3,
                     jitter: JitterParams | None = JitterParams()) -> list[Scene]:
    return [generate_scene(scene_seed(seed, i), dims, n_cavs, jitter) for i in range(count)]


def generate_style_images(seed: int, count: int, dims=(32, 32),
                          levels: tuple[float, float] = (0.25, 0.6)) -> list[np.ndarray]:
    """Structure-free images of varied global colour, brightness and gradients.

    Used to fill the amplitude bank: their low-frequency spectra carry style
    only and share no content with any scene.
    """
    h, w = dims
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, 7, i])
        level = rng.uniform(*levels)
        tint = rng.uniform(-0.15, 0.15, 3)
        grad = rng.uniform(-0.3, 0.3)
        rows = np.linspace(-0.5, 0.5, h)[:, None, None]
        img = level + tint + grad * rows + 0.1 * _smooth_noise(rng, h, w, 3)[:, :, None]
        img = np.broadcast_to(img, (h, w, 3)) + rng.normal(0.0, 0.03, (h, w, 3))
        out.append(np.clip(img, 0.0, 1.0))
    return out


# -- corruptions ----------------------------------------------------------

@dataclass(frozen=True)
class FogParams:
    beta_fog: float = 1.0
    airlight: tuple[float, float, float] = (0.8, 0.8, 0.82)
    light: float = 0.5  # density presets, multiples of beta_fog
    dense: float = 1.5


@dataclass(frozen=True)
class RainParams:
    streak_count: int = 25
    length: tuple[float, float] = (0.15, 0.35)  # fraction of height
    angle: tuple[float, float] = (-20.0, 20.0)  # degrees from vertical
    intensity: tuple[float, float] = (0.4, 0.8)
    width: float = 0.7  # pixels
    shear: float = 0.2


@dataclass(frozen=True)
class NightParams:
    gain: tuple[float, float, float] = (0.55, 0.55, 0.7)
    gamma: float = 1.5


@dataclass(frozen=True)
class CorruptionParams:
    fog: FogParams = FogParams()
    rain: RainParams = RainParams()
    night: NightParams = NightParams()
    sunny_gain: float = 1.1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionParams":
        def tup(sub):
            return {k: tuple(v) if isinstance(v, list) else v for k, v in sub.items()}
        return cls(FogParams(**tup(d.get("fog", {}))), RainParams(**tup(d.get("rain", {}))),
                   NightParams(**tup(d.get("night", {}))), d.get("sunny_gain", 1.1))


def fog_depth(h: int) -> np.ndarray:
    """Depth proxy per row: 1 at the top row (far) down to 1/H at the bottom."""
    return 1.0 - np.arange(h) / h


def apply_fog(img: np.ndarray, p: FogParams = FogParams()) -> np.ndarray:
    t = np.exp(-p.beta_fog * fog_depth(img.shape[0]))[:, None, None]
    return img * t + np.asarray(p.airlight) * (1.0 - t)


def streak_map(h: int, w: int, p: RainParams, seed: int) -> np.ndarray:
    """Max-composited anti-aliased line segments under random affine warps."""
    rng = np.random.default_rng([seed, 11])
    out = np.zeros((h, w))
    if p.streak_count == 0:
        return out
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    for _ in range(p.streak_count):
        length = rng.uniform(*p.length) * h
        theta = np.deg2rad(rng.uniform(*p.angle))
        shear = rng.uniform(-p.shear, p.shear)
        # canonical vertical segment -> shear -> rotate -> translate
        d = np.array([shear, 1.0])
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        d = rot @ d
        d = d / np.linalg.norm(d) * length
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        x0, y0 = cx - d[0] / 2, cy - d[1] / 2
        px, py = xs - x0, ys - y0
        s = np.clip((px * d[0] + py * d[1]) / (d @ d), 0.0, 1.0)
        dist = np.hypot(px - s * d[0], py - s * d[1])
        val = rng.uniform(*p.intensity) * np.clip(1.0 - dist / p.width, 0.0, 1.0)
        np.maximum(out, val, out=out)
    return out


def screen_blend(img: np.ndarray, layer: np.ndarray) -> np.ndarray:
    """1 - (1 - img)(1 - layer), written so a zero layer is an exact identity."""
    return img + layer[:, :, None] * (1.0 - img)


def apply_rain(img: np.ndarray, p: RainParams = RainParams(), seed: int = 0) -> np.ndarray:
    return screen_blend(img, streak_map(img.shape[0], img.shape[1], p, seed))


def apply_night(img: np.ndarray, p: NightParams = NightParams()) -> np.ndarray:
    if any(not 0 < g <= 1 for g in p.gain) or p.gamma < 1:
        raise ValueError("night gains must lie in (0, 1] and gamma >= 1")
    return (img * np.asarray(p.gain)) ** p.gamma


def apply_sunny(img: np.ndarray, gain: float = 1.1) -> np.ndarray:
    return np.clip(img * gain, 0.0, 1.0)


def corrupt_scene(scene: Scene, tag: str, params: CorruptionParams = CorruptionParams()) -> Scene:
    if tag == "clean":
        return scene
    if tag == "sunny":
        imgs = [apply_sunny(im, params.sunny_gain) for im in scene.cav_images]
    elif tag == "fog":
        rng = np.random.default_rng([scene.scene_seed, 21])
        level = params.fog.dense if rng.random() < 0.5 else params.fog.light
        fp = replace(params.fog, beta_fog=params.fog.beta_fog * level)
        imgs = [apply_fog(im, fp) for im in scene.cav_images]
    elif tag == "rain":
        # one rain layer per scene; CAVs see the same weather
        imgs = [apply_rain(im, params.rain, scene.scene_seed) for im in scene.cav_images]
    elif tag == "night":
        imgs = [apply_night(im, params.night) for im in scene.cav_images]
    else:
        raise ValueError(f"unknown domain tag {tag!r}")
    return scene.with_images(imgs, tag)


def build_domain_suite(base, params: CorruptionParams = CorruptionParams(),
                       tags=SHIFTED_DOMAINS) -> dict[str, list[Scene]]:
    base = list(base)
    if not base:
        raise ValueError("domain suite needs at least one base scene")
    return {tag: [corrupt_scene(s, tag, params) for s in base] for tag in tags}


# -- scene directories ----------------------------------------------------

def save_scenes(scenes, directory: str | os.PathLike) -> Path:
    """Write PPM images, per-class label PPMs and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(scenes):
        name = f"scene_{k:05d}"
        for j, img in enumerate(s.cav_images):
            save_ppm(img, directory / f"{name}_cav{j}.ppm")
        save_mask_ppms(s.label, directory / f"{name}_label")
        h, w = s.label.shape[:2]
        entries.append({"name": name, "seed": s.scene_seed, "tag": s.domain_tag,
                        "n_cavs": s.n_cavs, "height": h, "width": w})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"version": 1, "scenes": entries}, indent=1, sort_keys=True))
    return manifest


def load_scenes(directory: str | os.PathLike) -> list[Scene]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = []
    for e in manifest["scenes"]:
        imgs = tuple(load_ppm(directory / f"{e['name']}_cav{j}.ppm") for j in range(e["n_cavs"]))
        label = load_mask_ppms(directory / f"{e['name']}_label")
        out.append(Scene(imgs, label, int(e["seed"]), e["tag"]))
    return out
