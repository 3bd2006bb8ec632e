"""Attribution (Grad-CAM, input saliency) and label-channel ablation reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .models import encode_inputs, predict_dataset
from .scenegen import Dataset
from .semantics import COMPACT, FULL, LabelSet

# light blue (irrelevant) ... dark red (important)
COLORMAP_STOPS = np.array([0.0, 0.3, 0.55, 0.8, 1.0])
COLORMAP_COLORS = np.array(
    [(170, 210, 255), (60, 200, 230), (250, 230, 50), (230, 30, 20), (139, 0, 0)], dtype=np.float64
)


def _as_batch(x) -> Tensor:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ValueError(f"attribution works on one sample, got shape {arr.shape}")
    return Tensor(arr)


def _normalize(m: np.ndarray) -> np.ndarray:
    top = m.max()
    return m / top if top > 0 else np.zeros_like(m)


def bilinear_resize(m: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling with edge clamping."""
    h, w = m.shape
    if (h, w) == (height, width):
        return m.copy()

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h, height)
    c0, c1, fc = axis(w, width)
    rows = m[r0] * (1 - fr)[:, None] + m[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]


def grad_cam(net, x, target_layer: int = 7, sign: float = 1.0) -> np.ndarray:
    """Grad-CAM heatmap in [0, 1] at input resolution.

    Channel weights are the spatial means of d(sign * y)/dA over the target
    layer's feature maps A; the map is relu(sum_k w_k A_k), bilinearly
    upsampled and max-normalised.
    """
    kinds = net.layer_kinds
    if not 1 <= target_layer <= len(kinds) or kinds[target_layer - 1] != "conv":
        raise ValueError(f"layer {target_layer} is not a convolution (layers: {kinds})")
    xb = _as_batch(x)
    with ad.no_grad():
        _, acts = net.forward(xb, capture=(target_layer,))
    feats = Tensor(acts[target_layer].data, requires_grad=True)
    with ad.Tape() as tape:
        y, _ = net.forward(feats, start=target_layer + 1)
        tape.backward(ad.scale(ad.sum_all(y), sign), only=(feats,))
    a = feats.data[0]
    weights = feats.grad[0].mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
    return _normalize(bilinear_resize(raw, xb.shape[2], xb.shape[3]))


def saliency_signed(net, x) -> np.ndarray:
    """Channel-max of |dy/dx| per pixel, max-normalised."""
    xb = _as_batch(x)
    xb.requires_grad = True
    with ad.Tape() as tape:
        y = net(xb)
        tape.backward(ad.sum_all(y), only=(xb,))
    return _normalize(np.abs(xb.grad[0]).max(axis=0))


def colormap(h: np.ndarray) -> np.ndarray:
    h = np.clip(np.asarray(h, dtype=np.float64), 0.0, 1.0)
    return np.stack(
        [np.interp(h, COLORMAP_STOPS, COLORMAP_COLORS[:, c]) for c in range(3)], axis=-1
    )


def overlay(heatmap: np.ndarray, base: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a colour-mapped heatmap onto an (H, W, 3) uint8 image."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    base = np.asarray(base)
    if base.shape[:2] != heatmap.shape or base.ndim != 3:
        raise ValueError(f"heatmap {heatmap.shape} and image {base.shape} differ in size")
    if alpha == 0.0:
        return base.astype(np.uint8).copy()
    out = (1.0 - alpha) * base + alpha * colormap(heatmap)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def within(mask: np.ndarray, radius: float) -> np.ndarray:
    """Pixels whose Euclidean distance to ``mask`` is at most ``radius``."""
    if not mask.any():
        return np.zeros_like(mask, dtype=bool)
    return ndimage.distance_transform_edt(~mask) <= radius


# --------------------------------------------------------------------------
# ablation


@dataclass
class SensitivityReport:
    """Per-label error increase when that label is ablated from every input."""

    baseline_mse: float
    labels: list[str]
    ablated_mse: list[float]
    delta_mse: list[float]
    ordering: list[int]
    mode: str = "zero"
    label_set: str = FULL.name
    n_samples: int = 0

    def ranked(self) -> list[tuple[str, float, float]]:
        return [(self.labels[i], self.ablated_mse[i], self.delta_mse[i]) for i in self.ordering]

    def rank_of(self, name: str) -> int:
        """1-based rank of a label in descending-delta order."""
        return [self.labels[i] for i in self.ordering].index(name) + 1

    def delta(self, name: str) -> float:
        return self.delta_mse[self.labels.index(name)]

    @property
    def max_delta(self) -> float:
        return max(self.delta_mse)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SensitivityReport":
        return cls(**d)

    def table(self) -> str:
        lines = [f"mode={self.mode}  baseline MSE={self.baseline_mse * 1e3:.3f}e-3  n={self.n_samples}",
                 f"{'rank':>4}  {'label':<14}{'MSE(e-3)':>10}{'dMSE(e-3)':>11}"]
        for r, (name, abl, d) in enumerate(self.ranked(), 1):
            lines.append(f"{r:>4}  {name:<14}{abl * 1e3:>10.3f}{d * 1e3:>11.3f}")
        return "\n".join(lines)


def rank_descending(values) -> list[int]:
    """Indices by value descending; equal values keep ascending index order."""
    return sorted(range(len(values)), key=lambda i: (-values[i], i))


def _label_set_for(kind: str) -> LabelSet:
    if kind == "seg13":
        return FULL
    if kind == "seg7":
        return COMPACT
    raise ValueError(f"channel ablation needs a label-channel input, model takes {kind!r}")


def sensitivity_scan(net, ds: Dataset, split="test", mode: str = "zero", target=None,
                     batch_size: int = 32) -> SensitivityReport:
    """Error increase from ablating each label channel over a split.

    ``mode="zero"`` removes the channel outright; ``mode="camouflage"`` moves
    the label's pixels into ``target``'s channel instead.
    """
    labels = _label_set_for(net.input_kind)
    idx = ds.split(split) if isinstance(split, str) else np.asarray(split)
    if len(idx) == 0:
        raise ValueError("sensitivity scan needs a non-empty test set")
    if mode not in ("zero", "camouflage"):
        raise ValueError(f"unknown ablation mode {mode!r}")
    tgt = None
    if mode == "camouflage":
        if target is None:
            raise ValueError("camouflage mode needs a target label")
        tgt = labels.index(target)
    y = ds.steering[idx]

    def mse_with(transform=None):
        pred = predict_dataset(net, ds, idx, batch_size, transform)
        return float(np.mean((pred - y) ** 2))

    baseline = mse_with()
    ablated = []
    for c in range(len(labels)):
        if c == tgt:
            # camouflaging a label into itself is the identity
            ablated.append(baseline)
            continue

        def tf(x, c=c):
            x = x.copy()
            if tgt is not None:
                x[:, tgt] += x[:, c]
            x[:, c] = 0.0
            return x

        ablated.append(mse_with(tf))
    delta = [a - baseline for a in ablated]
    mode_tag = "zero" if tgt is None else f"camouflage:{labels.names[tgt]}"
    return SensitivityReport(baseline, labels.names, ablated, delta, rank_descending(delta),
                             mode_tag, labels.name, int(len(idx)))


def export_report(report: SensitivityReport, out_dir, stem: str = "sensitivity") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / f"{stem}.json", "csv": out / f"{stem}.csv", "svg": out / f"{stem}.svg"}
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    with open(paths["csv"], "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["label", "delta_mse"])
        for name, _, d in report.ranked():
            wr.writerow([name, repr(d)])
    paths["svg"].write_text(bar_chart_svg(report))
    return paths


def load_report(path) -> SensitivityReport:
    return SensitivityReport.from_dict(json.loads(Path(path).read_text()))


def bar_chart_svg(report: SensitivityReport, bar_w: int = 36, plot_h: int = 240) -> str:
    ranked = report.ranked()
    vals = [d for _, _, d in ranked]
    top = max(max(vals), 0.0)
    bottom = min(min(vals), 0.0)
    span = (top - bottom) or 1.0
    scale = plot_h / span
    axis_y = 20 + top * scale
    width = 60 + bar_w * len(ranked)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{plot_h + 110}">',
        f'<text x="10" y="14" font-size="12">Increase in MSE per removed label ({report.mode})</text>',
        f'<line x1="40" y1="{axis_y:.2f}" x2="{width - 10}" y2="{axis_y:.2f}" stroke="black"/>',
    ]
    for i, (name, _, d) in enumerate(ranked):
        x = 44 + i * bar_w
        hgt = abs(d) * scale
        y = axis_y - hgt if d >= 0 else axis_y
        parts.append(
            f'<rect class="bar" x="{x}" y="{y:.2f}" width="{bar_w - 8}" height="{hgt:.2f}" '
            f'fill="#b22222" data-label="{name}" data-delta="{d!r}"/>'
        )
        ty = plot_h + 40
        parts.append(
            f'<text x="{x + 6}" y="{ty}" font-size="10" transform="rotate(60 {x + 6} {ty})">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


@dataclass
class AttributionSummary:
    near_line: float
    distractor: float
    n_scenes: int

    @property
    def ratio(self) -> float:
        return self.near_line / self.distractor if self.distractor > 0 else float("inf")


def attribution_contrast(net, ds: Dataset, idx, radius: float = 2.0, target_layer: int = 7,
                         distractors=("Vegetation", "Buildings")) -> AttributionSummary:
    """Mean Grad-CAM intensity near road lines versus on distractor pixels.

    Masks come from the dataset's own label maps, so RGB models work too.
    """
    labels = ds.label_set
    line_id = labels.index("RoadLines")
    dis_ids = [labels.index(d) for d in distractors if d in labels.names]
    near, dis = [], []
    for i in np.asarray(idx):
        x = encode_inputs(ds, [i], net.input_kind)[0]
        lab = ds.labels[i]
        heat = grad_cam(net, x, target_layer)
        line_zone = within(lab == line_id, radius)
        dmask = np.isin(lab, dis_ids) & ~line_zone
        if line_zone.any():
            near.append(heat[line_zone].mean())
        if dmask.any():
            dis.append(heat[dmask].mean())
    return AttributionSummary(float(np.mean(near)), float(np.mean(dis)) if dis else 0.0, len(near))


__all__ = [
    "AttributionSummary",
    "SensitivityReport",
    "attribution_contrast",
    "bar_chart_svg",
    "bilinear_resize",
    "colormap",
    "export_report",
    "grad_cam",
    "load_report",
    "overlay",
    "rank_descending",
    "saliency_signed",
    "sensitivity_scan",
    "within",
]
