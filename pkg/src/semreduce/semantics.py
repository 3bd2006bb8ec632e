"""CARLA label taxonomy, the 13 -> 7 label remap, one-hot encoding and image I/O."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor


class Label(enum.IntEnum):
    NONE = 0
    BUILDINGS = 1
    FENCES = 2
    OTHER = 3
    PEDESTRIANS = 4
    POLES = 5
    ROADLINES = 6
    ROADS = 7
    SIDEWALKS = 8
    VEGETATION = 9
    VEHICLES = 10
    WALLS = 11
    TRAFFIC_SIGNS = 12


LABEL_NAMES = {
    Label.NONE: "None",
    Label.BUILDINGS: "Buildings",
    Label.FENCES: "Fences",
    Label.OTHER: "Other",
    Label.PEDESTRIANS: "Pedestrians",
    Label.POLES: "Poles",
    Label.ROADLINES: "RoadLines",
    Label.ROADS: "Roads",
    Label.SIDEWALKS: "Sidewalks",
    Label.VEGETATION: "Vegetation",
    Label.VEHICLES: "Vehicles",
    Label.WALLS: "Walls",
    Label.TRAFFIC_SIGNS: "TrafficSigns",
}

# CARLA 0.8 semantic colors
CARLA_PALETTE = {
    Label.NONE: (0, 0, 0),
    Label.BUILDINGS: (70, 70, 70),
    Label.FENCES: (190, 153, 153),
    Label.OTHER: (250, 170, 160),
    Label.PEDESTRIANS: (220, 20, 60),
    Label.POLES: (153, 153, 153),
    Label.ROADLINES: (157, 234, 50),
    Label.ROADS: (128, 64, 128),
    Label.SIDEWALKS: (244, 35, 232),
    Label.VEGETATION: (107, 142, 35),
    Label.VEHICLES: (0, 0, 142),
    Label.WALLS: (102, 102, 156),
    Label.TRAFFIC_SIGNS: (220, 220, 0),
}


@dataclass(frozen=True)
class LabelSet:
    """Ordered label taxonomy: ``ids[i]`` is the CARLA label behind channel ``i``."""

    name: str
    ids: tuple[Label, ...]

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError(f"label set {self.name}: duplicate labels")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def names(self) -> list[str]:
        return [LABEL_NAMES[l] for l in self.ids]

    @property
    def palette(self) -> np.ndarray:
        return np.array([CARLA_PALETTE[l] for l in self.ids], dtype=np.uint8)

    def index(self, label: "Label | int | str") -> int:
        """Channel index of a label given as CARLA id, :class:`Label` or name."""
        lab = parse_label(label)
        try:
            return self.ids.index(lab)
        except ValueError:
            raise ValueError(f"{LABEL_NAMES[lab]} is not part of label set {self.name}") from None


FULL = LabelSet("full13", tuple(Label))

# Table-1 remap in CARLA ids; every target survives in the compact set
REMAP = {
    Label.ROADS: Label.ROADS,
    Label.SIDEWALKS: Label.SIDEWALKS,
    Label.ROADLINES: Label.ROADLINES,
    Label.FENCES: Label.FENCES,
    Label.VEHICLES: Label.VEHICLES,
    Label.PEDESTRIANS: Label.OTHER,
    Label.OTHER: Label.OTHER,
    Label.VEGETATION: Label.OTHER,
    Label.POLES: Label.FENCES,
    Label.TRAFFIC_SIGNS: Label.FENCES,
    Label.WALLS: Label.OTHER,
    Label.BUILDINGS: Label.OTHER,
    Label.NONE: Label.NONE,
}

COMPACT = LabelSet("compact7", tuple(sorted(set(REMAP.values()))))

LABEL_SETS = {FULL.name: FULL, COMPACT.name: COMPACT}


def parse_label(label: "Label | int | str") -> Label:
    if isinstance(label, str):
        key = label.strip().lower().replace("_", "").replace(" ", "")
        for lab, name in LABEL_NAMES.items():
            if name.lower() == key or lab.name.lower().replace("_", "") == key:
                return lab
        aliases = {"road": Label.ROADS, "sidewalk": Label.SIDEWALKS, "roadline": Label.ROADLINES,
                   "fence": Label.FENCES, "vehicle": Label.VEHICLES, "pedestrian": Label.PEDESTRIANS,
                   "pole": Label.POLES, "wall": Label.WALLS, "building": Label.BUILDINGS,
                   "trafficsign": Label.TRAFFIC_SIGNS, "unlabeled": Label.NONE}
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown label name {label!r}")
    try:
        return Label(int(label))
    except ValueError:
        raise ValueError(f"invalid label id {label!r}") from None


@dataclass(frozen=True)
class RemapTable:
    """Total map from full-set labels to their surviving target label."""

    mapping: dict = field(default_factory=lambda: dict(REMAP))
    target_set: LabelSet = COMPACT

    def __post_init__(self):
        if set(self.mapping) != set(Label):
            raise ValueError("remap table must cover all 13 labels")
        for tgt in self.mapping.values():
            if tgt not in self.target_set.ids:
                raise ValueError(f"remap target {tgt!r} not in {self.target_set.name}")

    def lut(self) -> np.ndarray:
        """Lookup table from full-set channel index to compact channel index."""
        return np.array(
            [self.target_set.index(self.mapping[l]) for l in FULL.ids], dtype=np.uint8
        )


TABLE1 = RemapTable()


def remap_label(label: "Label | int", table: RemapTable = TABLE1) -> Label:
    lab = parse_label(label) if not isinstance(label, Label) else label
    return table.mapping[lab]


class SemanticMap:
    """Immutable H x W grid of channel indices into ``label_set``."""

    __slots__ = ("labels", "label_set")

    def __init__(self, labels, label_set: LabelSet = FULL):
        arr = np.array(labels, dtype=np.uint8, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"semantic map must be 2-D, got shape {arr.shape}")
        if arr.size and int(arr.max()) >= len(label_set):
            raise ValueError(
                f"label id {int(arr.max())} out of range for {label_set.name} ({len(label_set)} labels)"
            )
        arr.setflags(write=False)
        self.labels = arr
        self.label_set = label_set

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def count(self, label) -> int:
        return int(np.count_nonzero(self.labels == self.label_set.index(label)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SemanticMap):
            return NotImplemented
        return self.label_set == other.label_set and np.array_equal(self.labels, other.labels)

    def __hash__(self):
        return hash((self.label_set.name, self.labels.tobytes()))

    def __repr__(self) -> str:
        return f"SemanticMap({self.height}x{self.width}, {self.label_set.name})"


def remap_map(m: SemanticMap, table: RemapTable = TABLE1) -> SemanticMap:
    """Apply the remap pixelwise; the result lives in the compact label set.

    Maps already in the compact set are returned unchanged.
    """
    if m.label_set == table.target_set:
        return m
    if m.label_set != FULL:
        raise ValueError(f"cannot remap a {m.label_set.name} map")
    return SemanticMap(table.lut()[m.labels], table.target_set)


def remap_labels(labels: np.ndarray, table: RemapTable = TABLE1) -> np.ndarray:
    """Vectorised remap of raw full-set label arrays of any shape."""
    return table.lut()[labels]


def one_hot_array(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(..., H, W) integer labels -> (..., C, H, W) float64 one-hot."""
    eye = np.eye(num_classes, dtype=np.float64)
    out = eye[labels]
    return np.moveaxis(out, -1, -3)


def one_hot(m: SemanticMap) -> Tensor:
    return Tensor(one_hot_array(m.labels, len(m.label_set)))


def argmax_map(t: Tensor | np.ndarray, label_set: LabelSet = FULL) -> SemanticMap:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return SemanticMap(data.argmax(axis=0), label_set)


def _channel(t: Tensor, label, label_set: LabelSet | None) -> int:
    c = t.shape[-3]
    if label_set is None:
        label_set = FULL if c == len(FULL) else COMPACT if c == len(COMPACT) else None
    if label_set is not None:
        return label_set.index(label)
    idx = int(label)
    if not 0 <= idx < c:
        raise ValueError(f"channel {idx} out of range for {c} channels")
    return idx


def zero_channel(t: Tensor, label, label_set: LabelSet | None = None) -> Tensor:
    """Copy of ``t`` with one label's channel set to zero."""
    c = _channel(t, label, label_set)
    out = t.data.copy()
    out[..., c, :, :] = 0.0
    return Tensor(out)


def camouflage_channel(t: Tensor, label, target, label_set: LabelSet | None = None) -> Tensor:
    """Move one label's pixels into ``target``'s channel, keeping one-hot validity."""
    c = _channel(t, label, label_set)
    d = _channel(t, target, label_set)
    if c == d:
        raise ValueError("camouflage needs two different labels")
    out = t.data.copy()
    out[..., d, :, :] += out[..., c, :, :]
    out[..., c, :, :] = 0.0
    return Tensor(out)


def render_palette(m: SemanticMap, palette=None) -> np.ndarray:
    """Color each pixel by its label; returns an (H, W, 3) uint8 image."""
    if palette is None:
        pal = m.label_set.palette
    elif isinstance(palette, dict):
        try:
            pal = np.array([palette[l] for l in m.label_set.ids])
        except KeyError as e:
            raise ValueError(f"palette has no color for label {e.args[0]!r}") from None
    else:
        pal = np.asarray(palette)
    if pal.ndim != 2 or pal.shape[1] != 3 or len(pal) < len(m.label_set):
        raise ValueError(
            f"palette must provide {len(m.label_set)} RGB colors, got shape {pal.shape}"
        )
    return pal.astype(np.uint8)[m.labels]


# --------------------------------------------------------------------------
# netpbm + manifest


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM needs a 2-D uint8 array")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("PPM needs an (H, W, 3) uint8 array")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def _read_netpbm(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace before raster
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, found {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit netpbm not supported")
    return np.frombuffer(buf, dtype=np.uint8, offset=pos), h, w


def read_pgm(path) -> np.ndarray:
    raster, h, w = _read_netpbm(path, b"P5")
    return raster[: h * w].reshape(h, w).copy()


def read_ppm(path) -> np.ndarray:
    raster, h, w = _read_netpbm(path, b"P6")
    return raster[: h * w * 3].reshape(h, w, 3).copy()


MANIFEST_FIELDS = ("id", "steering", "curvature", "offset", "weather")


@dataclass(frozen=True)
class ManifestRow:
    id: int
    steering: float
    curvature: float
    offset: float
    weather: str


def write_manifest(path, rows: Iterable[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_FIELDS)
        for r in rows:
            # repr() of a float is the shortest string that round-trips exactly
            wr.writerow([r.id, repr(float(r.steering)), repr(float(r.curvature)),
                         repr(float(r.offset)), r.weather])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        return [
            ManifestRow(int(r["id"]), float(r["steering"]), float(r["curvature"]),
                        float(r["offset"]), r["weather"])
            for r in rd
        ]


def label_histogram(labels: np.ndarray, label_set: LabelSet = FULL) -> dict[str, int]:
    counts = np.bincount(np.asarray(labels).reshape(-1), minlength=len(label_set))
    return {name: int(c) for name, c in zip(label_set.names, counts)}


def names_for(ids: Sequence[int], label_set: LabelSet = FULL) -> list[str]:
    return [label_set.names[i] for i in ids]
