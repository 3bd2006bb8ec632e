"""Procedural top-down road scenes whose steering label is known in closed form.

The marked carriageway follows ``x(t) = cx + offset + curvature * t**2 / 2``
where ``t`` counts rows upward from the bottom of the image. Road-labeled
shoulders of random, independent width flank it on both sides, so only the
road lines pin down the offset exactly. Steering depends on (curvature,
offset) only; every distractor object is drawn from random streams that never
see either value.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .semantics import (
    COMPACT,
    FULL,
    LABEL_SETS,
    Label,
    LabelSet,
    ManifestRow,
    RemapTable,
    SemanticMap,
    TABLE1,
    read_manifest,
    read_pgm,
    read_ppm,
    remap_labels,
    render_palette,
    write_manifest,
    write_pgm,
    write_ppm,
)

MAX_STEERING_DEG = 70.0
WEATHERS = ("sunny", "rainy")

# pseudo-RGB appearance per weather, indexed by CARLA id
SUNNY = np.array(
    [
        (135, 160, 105),  # none: open ground
        (150, 120, 100),
        (160, 140, 110),
        (200, 170, 150),
        (200, 60, 60),
        (120, 120, 120),
        (240, 240, 235),  # road lines
        (100, 100, 105),  # road
        (180, 180, 175),
        (60, 130, 50),
        (30, 60, 160),
        (170, 160, 150),
        (230, 200, 30),
    ],
    dtype=np.float64,
)
RAINY = np.clip(SUNNY * 0.6 + np.array([0.0, 5.0, 20.0]), 0, 255)
WEATHER_PALETTES = {"sunny": SUNNY, "rainy": RAINY}


@dataclass
class SceneConfig:
    """Flat generator settings; serialised as JSON next to every dataset."""

    height: int = 64
    width: int = 96
    curvature_max: float = 0.015  # 1/px
    road_half_width_min: int = 10  # marked carriageway, edge line to centre
    road_half_width_max: int = 14
    shoulder_min: int = 0  # extra unmarked road beyond each edge line
    shoulder_max: int = 16
    sidewalk_width_min: int = 4
    sidewalk_width_max: int = 8
    offset_fraction: float = 0.3  # offset bound as a fraction of nominal road width
    gain_curvature: float | None = None
    gain_offset: float | None = None
    center_line_half_width: int = 1
    edge_line_width: int = 2
    dash_period: int = 10
    dash_on: int = 6
    noise_sigma: float = 8.0  # in 0..255 intensity units
    rainy_noise_factor: float = 1.5
    # expected object count per scene (Poisson)
    freq_vegetation: float = 2.0
    freq_buildings: float = 1.0
    freq_walls: float = 0.6
    freq_fences: float = 0.8
    freq_poles: float = 1.2
    freq_traffic_signs: float = 0.6
    freq_vehicles: float = 0.8
    freq_pedestrians: float = 0.8
    freq_other: float = 0.8

    def __post_init__(self):
        if self.gain_curvature is None:
            self.gain_curvature = 0.75 / self.curvature_max
        if self.gain_offset is None:
            self.gain_offset = 0.5 / self.offset_max

    @property
    def offset_max(self) -> float:
        nominal = self.road_half_width_min + self.road_half_width_max  # = mean road width
        return self.offset_fraction * nominal

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SceneConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SceneParams:
    curvature: float
    offset: float
    seed: int
    weather: str = "sunny"
    height: int = 64
    width: int = 96


@dataclass(frozen=True)
class Scene:
    semantic: SemanticMap
    rgb: np.ndarray
    steering: float
    params: SceneParams


def steering_from_geometry(curvature: float, offset: float, config: SceneConfig | None = None) -> float:
    cfg = config or SceneConfig()
    s = cfg.gain_curvature * curvature + cfg.gain_offset * offset
    return float(np.clip(s, -1.0, 1.0))


def steering_to_degrees(s: float) -> float:
    if abs(s) > 1:
        raise ValueError(f"steering {s} outside [-1, 1]")
    return s * MAX_STEERING_DEG


def degrees_to_steering(deg: float) -> float:
    if abs(deg) > MAX_STEERING_DEG:
        raise ValueError(f"{deg} deg exceeds the {MAX_STEERING_DEG} deg steering limit")
    return deg / MAX_STEERING_DEG


def _check(params: SceneParams, cfg: SceneConfig) -> None:
    if params.weather not in WEATHERS:
        raise ValueError(f"weather must be one of {WEATHERS}, got {params.weather!r}")
    span = 2 * (cfg.road_half_width_max + cfg.shoulder_max + cfg.sidewalk_width_max)
    if params.width < span or params.height < 8:
        raise ValueError(
            f"image {params.height}x{params.width} too small for road geometry "
            f"(needs width >= {span}, height >= 8)"
        )
    if abs(params.curvature) > cfg.curvature_max * (1 + 1e-12):
        raise ValueError(f"|curvature| {params.curvature} exceeds {cfg.curvature_max}")
    if abs(params.offset) > cfg.offset_max * (1 + 1e-12):
        raise ValueError(f"|offset| {params.offset} exceeds {cfg.offset_max}")


def centerline(params: SceneParams) -> np.ndarray:
    """Road centre column for every image row (top row first)."""
    h, w = params.height, params.width
    t = (h - 1 - np.arange(h)).astype(np.float64)
    return (w - 1) / 2.0 + params.offset + 0.5 * params.curvature * t * t


def road_layout(params: SceneParams, config: SceneConfig | None = None) -> np.ndarray:
    """Road, road lines and sidewalks on an unlabeled background (no distractors)."""
    cfg = config or SceneConfig()
    _check(params, cfg)
    rng = np.random.default_rng([params.seed, 3])
    half = int(rng.integers(cfg.road_half_width_min, cfg.road_half_width_max + 1))
    side = int(rng.integers(cfg.sidewalk_width_min, cfg.sidewalk_width_max + 1))
    phase = int(rng.integers(0, cfg.dash_period))
    left, right = (int(v) for v in rng.integers(cfg.shoulder_min, cfg.shoulder_max + 1, size=2))

    h, w = params.height, params.width
    cx = centerline(params)[:, None]
    u = np.arange(w)[None, :] - cx  # signed distance from the lane centre
    d = np.abs(u)
    t = (h - 1 - np.arange(h))[:, None]
    reach = np.where(u < 0, half + left, half + right)

    lab = np.full((h, w), Label.NONE, dtype=np.uint8)
    lab[(d > reach) & (d <= reach + side)] = Label.SIDEWALKS
    lab[d <= reach] = Label.ROADS
    lab[(d > half - cfg.edge_line_width) & (d <= half)] = Label.ROADLINES
    dashed = ((t + phase) % cfg.dash_period) < cfg.dash_on
    lab[(d <= cfg.center_line_half_width + 0.5) & dashed] = Label.ROADLINES
    return lab


def _paint_distractors(lab: np.ndarray, seed: int, cfg: SceneConfig) -> None:
    rng = np.random.default_rng([seed, 1])
    h, w = lab.shape
    yy, xx = np.mgrid[0:h, 0:w]

    def rect(label, y0, x0, hh, ww):
        lab[max(y0, 0) : max(y0 + hh, 0), max(x0, 0) : max(x0 + ww, 0)] = label

    for _ in range(rng.poisson(cfg.freq_vegetation)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(3, 8), rng.uniform(3, 8)
        lab[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = Label.VEGETATION
    for _ in range(rng.poisson(cfg.freq_buildings)):
        hh, ww = int(rng.integers(6, 15)), int(rng.integers(10, 25))
        rect(Label.BUILDINGS, int(rng.integers(-4, 9)), int(rng.integers(-ww // 2, w)), hh, ww)
    for _ in range(rng.poisson(cfg.freq_walls)):
        hh, ww = int(rng.integers(3, 6)), int(rng.integers(10, 21))
        if rng.random() < 0.5:
            hh, ww = ww, hh
        rect(Label.WALLS, int(rng.integers(0, h)), int(rng.integers(0, w)), hh, ww)
    for _ in range(rng.poisson(cfg.freq_fences)):
        thick, length = int(rng.integers(1, 3)), int(rng.integers(8, 21))
        hh, ww = (thick, length) if rng.random() < 0.5 else (length, thick)
        rect(Label.FENCES, int(rng.integers(0, h)), int(rng.integers(0, w)), hh, ww)
    for _ in range(rng.poisson(cfg.freq_other)):
        s = int(rng.integers(3, 6))
        rect(Label.OTHER, int(rng.integers(0, h)), int(rng.integers(0, w)), s, s)
    for _ in range(rng.poisson(cfg.freq_poles)):
        rect(Label.POLES, int(rng.integers(0, h)), int(rng.integers(0, w)),
             int(rng.integers(8, 17)), int(rng.integers(1, 3)))
    for _ in range(rng.poisson(cfg.freq_traffic_signs)):
        s = int(rng.integers(3, 5))
        rect(Label.TRAFFIC_SIGNS, int(rng.integers(0, h)), int(rng.integers(0, w)), s, s)
    for _ in range(rng.poisson(cfg.freq_vehicles)):
        rect(Label.VEHICLES, int(rng.integers(0, h)), int(rng.integers(0, w)),
             int(rng.integers(9, 15)), int(rng.integers(6, 10)))
    for _ in range(rng.poisson(cfg.freq_pedestrians)):
        rect(Label.PEDESTRIANS, int(rng.integers(0, h)), int(rng.integers(0, w)), 4, 2)


def render_weather(labels: np.ndarray, seed: int, weather: str, cfg: SceneConfig) -> np.ndarray:
    pal = WEATHER_PALETTES[weather]
    rng = np.random.default_rng([seed, 2, WEATHERS.index(weather)])
    sigma = cfg.noise_sigma * (cfg.rainy_noise_factor if weather == "rainy" else 1.0)
    img = pal[labels] + rng.normal(0.0, sigma, size=labels.shape + (3,))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_scene(params: SceneParams, config: SceneConfig | None = None) -> Scene:
    cfg = config or SceneConfig()
    lab = road_layout(params, cfg)
    _paint_distractors(lab, params.seed, cfg)
    sem = SemanticMap(lab, FULL)
    rgb = render_weather(sem.labels, params.seed, params.weather, cfg)
    return Scene(sem, rgb, steering_from_geometry(params.curvature, params.offset, cfg), params)


def sample_params(master_seed: int, index: int, cfg: SceneConfig) -> SceneParams:
    """Symmetric uniform draw of (curvature, offset, weather) for scene ``index``."""
    rng = np.random.default_rng([master_seed, index, 0])
    kappa = rng.uniform(-cfg.curvature_max, cfg.curvature_max)
    delta = rng.uniform(-cfg.offset_max, cfg.offset_max)
    weather = WEATHERS[int(rng.integers(0, 2))]
    seed = int(np.random.SeedSequence([master_seed, index, 1]).generate_state(1)[0])
    return SceneParams(kappa, delta, seed, weather, cfg.height, cfg.width)


# --------------------------------------------------------------------------
# datasets


def split_counts(n: int, ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    if n < 3:
        raise ValueError(f"n < 3 (got n={n}); need at least one scene per split")
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"split ratios must be 3 positive numbers summing to 1, got {ratios}")
    n_val = max(1, int(round(n * ratios[1])))
    n_test = max(1, int(round(n * ratios[2])))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"ratios {ratios} leave no training scenes for n={n}")
    return n_train, n_val, n_test


@dataclass
class Dataset:
    """In-memory corpus: scene arrays plus contiguous train/val/test id ranges."""

    labels: np.ndarray  # (N, H, W) uint8 channel ids of label_set
    rgb: np.ndarray  # (N, H, W, 3) uint8
    steering: np.ndarray
    curvature: np.ndarray
    offset: np.ndarray
    weather: list
    counts: tuple  # (train, val, test)
    label_set: LabelSet = FULL
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.steering)

    def split(self, name: str) -> np.ndarray:
        a, b, _ = self.counts
        ranges = {"train": (0, a), "val": (a, a + b), "test": (a + b, len(self))}
        if name == "all":
            return np.arange(len(self))
        if name not in ranges:
            raise ValueError(f"unknown split {name!r}")
        lo, hi = ranges[name]
        return np.arange(lo, hi)

    def rows(self) -> list[ManifestRow]:
        return [
            ManifestRow(i, float(self.steering[i]), float(self.curvature[i]),
                        float(self.offset[i]), self.weather[i])
            for i in range(len(self))
        ]


def synthesize(n: int, config: SceneConfig | None = None, seed: int = 0,
               ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> Dataset:
    cfg = config or SceneConfig()
    counts = split_counts(n, ratios)
    scenes = [generate_scene(sample_params(seed, i, cfg), cfg) for i in range(n)]
    return Dataset(
        labels=np.stack([s.semantic.labels for s in scenes]),
        rgb=np.stack([s.rgb for s in scenes]),
        steering=np.array([s.steering for s in scenes]),
        curvature=np.array([s.params.curvature for s in scenes]),
        offset=np.array([s.params.offset for s in scenes]),
        weather=[s.params.weather for s in scenes],
        counts=counts,
        label_set=FULL,
        meta={"scene_config": cfg.to_dict(), "seed": seed, "n": n, "ratios": list(ratios)},
    )


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "semantic").mkdir(parents=True, exist_ok=True)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        write_pgm(out / "semantic" / f"{i:06d}.pgm", ds.labels[i])
        write_ppm(out / "rgb" / f"{i:06d}.ppm", ds.rgb[i])
    write_manifest(out / "manifest.csv", ds.rows())
    info = dict(ds.meta)
    info.update(label_set=ds.label_set.name, splits=dict(zip(("train", "val", "test"), ds.counts)))
    (out / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out / "manifest.csv"


def generate_dataset(n: int, out_dir, config: SceneConfig | None = None, seed: int = 0,
                     ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> Dataset:
    """Write ``n`` scenes plus manifest and metadata under ``out_dir``."""
    split_counts(n, ratios)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    ds = synthesize(n, config, seed, ratios)
    save_dataset(ds, out)
    return ds


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "manifest.csv").exists():
        raise FileNotFoundError(f"no dataset at {root} (manifest.csv missing)")
    info = json.loads((root / "dataset.json").read_text())
    rows = read_manifest(root / "manifest.csv")
    label_set = LABEL_SETS[info["label_set"]]
    sp = info["splits"]
    return Dataset(
        labels=np.stack([read_pgm(root / "semantic" / f"{r.id:06d}.pgm") for r in rows]),
        rgb=np.stack([read_ppm(root / "rgb" / f"{r.id:06d}.ppm") for r in rows]),
        steering=np.array([r.steering for r in rows]),
        curvature=np.array([r.curvature for r in rows]),
        offset=np.array([r.offset for r in rows]),
        weather=[r.weather for r in rows],
        counts=(sp["train"], sp["val"], sp["test"]),
        label_set=label_set,
        meta={k: v for k, v in info.items() if k not in ("label_set", "splits")},
    )


def remap_dataset(ds: Dataset, table: RemapTable = TABLE1) -> Dataset:
    """Same scenes with every semantic map in the compact label set; no-op if already compact."""
    if ds.label_set == table.target_set:
        return ds
    if ds.label_set != FULL:
        raise ValueError(f"cannot remap a {ds.label_set.name} dataset")
    return dataclasses.replace(ds, labels=remap_labels(ds.labels, table), label_set=table.target_set)


def semantic_preview(ds: Dataset, i: int) -> np.ndarray:
    return render_palette(SemanticMap(ds.labels[i], ds.label_set))


__all__ = [
    "COMPACT",
    "Dataset",
    "MAX_STEERING_DEG",
    "Scene",
    "SceneConfig",
    "SceneParams",
    "centerline",
    "degrees_to_steering",
    "generate_dataset",
    "generate_scene",
    "load_dataset",
    "road_layout",
    "sample_params",
    "save_dataset",
    "split_counts",
    "steering_from_geometry",
    "steering_to_degrees",
    "synthesize",
]
