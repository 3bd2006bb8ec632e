"""Steering CNN, encoder-decoder perception module, latent control head, training."""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scenegen import Dataset
from .semantics import COMPACT, FULL, one_hot_array, remap_labels

log = logging.getLogger(__name__)

INPUT_CHANNELS = {"rgb": 3, "seg13": len(FULL), "seg7": len(COMPACT)}


class TrainingDiverged(RuntimeError):
    pass


INIT_GAIN = {"lecun": 1.0, "he": math.sqrt(6.0)}


def _init_param(rng: np.random.Generator, shape, fan_in: int, init: str = "he") -> Tensor:
    """Uniform in +-gain/sqrt(fan_in); 1-D (bias) tensors start at zero under "he"."""
    bound = INIT_GAIN[init] / math.sqrt(fan_in)
    if init == "he" and len(shape) == 1:
        return Tensor(np.zeros(shape), requires_grad=True)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Sequential:
    """Numbered stack of layers over a shared parameter dict.

    ``layers[i]`` is ``(kind, fn)``; layer numbers are 1-based so that
    ``forward(x, start=k)`` feeds ``x`` in as the output of layer ``k - 1``.
    """

    model_id = "sequential"

    def __init__(self, layers: Sequence[tuple[str, Callable]], params: dict[str, Tensor],
                 input_kind: str = "seg13"):
        self.layers = list(layers)
        self.params = params
        self.input_kind = input_kind

    @property
    def layer_kinds(self) -> list[str]:
        return [k for k, _ in self.layers]

    def forward(self, x: Tensor, start: int = 1, capture: Sequence[int] = ()) -> tuple[Tensor, dict]:
        acts = {}
        h = x
        for i in range(start, len(self.layers) + 1):
            h = self.layers[i - 1][1](h)
            if i in capture:
                acts[i] = h
        return h, acts

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            out = self(Tensor(x))
        return out.data.reshape(len(x))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError(
                f"parameter names differ: missing {sorted(set(self.params) - set(state))}, "
                f"unexpected {sorted(set(state) - set(self.params))}"
            )
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)


# --------------------------------------------------------------------------
# steering network


@dataclass(frozen=True)
class SteerNetConfig:
    channels: int = 13
    f1: int = 5
    f2: int = 4
    f3: int = 14
    f4: int = 5
    height: int = 64
    width: int = 96
    kernel: int = 5
    padding: int = 2
    input_kind: str = "seg13"

    def __post_init__(self):
        if self.height % 8 or self.width % 8:
            raise ValueError("input height and width must be divisible by 8")
        if INPUT_CHANNELS[self.input_kind] != self.channels:
            raise ValueError(f"{self.input_kind} input has {INPUT_CHANNELS[self.input_kind]} channels")


STEER_PRESETS = {
    "steernet-rgb": SteerNetConfig(3, 3, 3, 13, 4, input_kind="rgb"),
    "steernet-seg13": SteerNetConfig(13, 5, 4, 14, 5, input_kind="seg13"),
    "steernet-seg7": SteerNetConfig(7, 5, 4, 14, 5, input_kind="seg7"),
}


class SteerNet(Sequential):
    """conv-relu-pool x3, fc-relu-fc-tanh.

    Layers 1, 4, 7 are the convolutions and layer 10 the F4-wide dense layer.
    """

    CONV_LAYERS = (1, 4, 7)

    def __init__(self, config: SteerNetConfig = STEER_PRESETS["steernet-seg13"], seed: int = 0,
                 zero_final: bool = False, init: str = "he"):
        self.config = c = config
        rng = np.random.default_rng(seed)
        _uniform = functools.partial(_init_param, init=init)
        k = c.kernel
        p: dict[str, Tensor] = {}
        chans = (c.channels, c.f1, c.f2, c.f3)
        for i in range(3):
            fan = chans[i] * k * k
            p[f"conv{i+1}.weight"] = _uniform(rng, (chans[i + 1], chans[i], k, k), fan)
            p[f"conv{i+1}.bias"] = _uniform(rng, (chans[i + 1],), fan)
        flat = c.f3 * (c.height // 8) * (c.width // 8)
        p["fc1.weight"] = _uniform(rng, (c.f4, flat), flat)
        p["fc1.bias"] = _uniform(rng, (c.f4,), flat)
        p["fc2.weight"] = _uniform(rng, (1, c.f4), c.f4)
        p["fc2.bias"] = _uniform(rng, (1,), c.f4)
        if zero_final:
            p["fc2.weight"].data[:] = 0.0
            p["fc2.bias"].data[:] = 0.0
        for name, t in p.items():
            t.name = name

        def conv(i):
            return lambda x: ad.conv2d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], 1, c.padding)

        pool = lambda x: ad.maxpool2d(x, 2, 2)
        layers = [
            ("conv", conv(1)), ("relu", ad.relu), ("pool", pool),
            ("conv", conv(2)), ("relu", ad.relu), ("pool", pool),
            ("conv", conv(3)), ("relu", ad.relu), ("pool", pool),
            ("fc", lambda x: ad.linear(ad.flatten(x), p["fc1.weight"], p["fc1.bias"])),
            ("relu", ad.relu),
            ("fc", lambda x: ad.linear(x, p["fc2.weight"], p["fc2.bias"])),
            ("tanh", ad.tanh),
        ]
        super().__init__(layers, p, c.input_kind)

    @property
    def model_id(self) -> str:
        return f"steernet-{self.config.input_kind}"

    def forward(self, x: Tensor, start: int = 1, capture: Sequence[int] = ()):
        if start == 1:
            c = self.config
            expect = (c.channels, c.height, c.width)
            if tuple(x.shape[-3:]) != expect or x.ndim not in (3, 4):
                raise ad.ShapeError(f"{self.model_id} expects input (N,)+{expect}, got {x.shape}")
            if x.ndim == 3:
                x = ad.reshape(x, (1,) + x.shape)
        return super().forward(x, start, capture)


# --------------------------------------------------------------------------
# modular pipeline


class PerceptionCoder:
    """Hourglass encoder-decoder without skip connections.

    The decoder only ever sees the latent vector ``z``.
    """

    def __init__(self, num_classes: int, in_channels: int = 3, height: int = 64, width: int = 96,
                 latent: int = 128, widths: Sequence[int] = (16, 32, 64, 64), seed: int = 0,
                 init: str = "he"):
        _uniform = functools.partial(_init_param, init=init)
        if height % 16 or width % 16:
            raise ValueError("perception input size must be divisible by 16")
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.height, self.width = height, width
        self.latent = latent
        self.widths = tuple(widths)
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}
        prev = in_channels
        for i, w in enumerate(self.widths):
            p[f"enc{i}.weight"] = _uniform(rng, (w, prev, 4, 4), prev * 16)
            p[f"enc{i}.bias"] = _uniform(rng, (w,), prev * 16)
            prev = w
        self.grid = (self.widths[-1], height // 16, width // 16)
        flat = int(np.prod(self.grid))
        p["enc_fc.weight"] = _uniform(rng, (latent, flat), flat)
        p["enc_fc.bias"] = _uniform(rng, (latent,), flat)
        p["dec_fc.weight"] = _uniform(rng, (flat, latent), latent)
        p["dec_fc.bias"] = _uniform(rng, (flat,), latent)
        dec = tuple(reversed(self.widths))  # 64, 64, 32, 16
        prev = dec[0]
        for i, w in enumerate(dec):
            p[f"dec{i}.weight"] = _uniform(rng, (w, prev, 3, 3), prev * 9)
            p[f"dec{i}.bias"] = _uniform(rng, (w,), prev * 9)
            prev = w
        p["head.weight"] = _uniform(rng, (num_classes, prev, 1, 1), prev)
        p["head.bias"] = _uniform(rng, (num_classes,), prev)
        for name, t in p.items():
            t.name = name
        self.params = p

    @property
    def model_id(self) -> str:
        return f"perception-{self.num_classes}"

    def encode(self, x: Tensor, capture: list | None = None) -> Tensor:
        p = self.params
        h = x
        for i in range(len(self.widths)):
            h = ad.relu(ad.conv2d(h, p[f"enc{i}.weight"], p[f"enc{i}.bias"], stride=2, padding=1))
            if capture is not None:
                capture.append(h)
        return ad.linear(ad.flatten(h), p["enc_fc.weight"], p["enc_fc.bias"])

    def decode(self, z: Tensor) -> Tensor:
        p = self.params
        batch = z.shape[0] if z.ndim == 2 else None
        h = ad.relu(ad.linear(z, p["dec_fc.weight"], p["dec_fc.bias"]))
        h = ad.reshape(h, ((batch,) if batch else ()) + self.grid)
        for i in range(len(self.widths)):
            h = ad.upsample_nearest2d(h, 2)
            h = ad.relu(ad.conv2d(h, p[f"dec{i}.weight"], p[f"dec{i}.bias"], stride=1, padding=1))
        return ad.conv2d(h, p["head.weight"], p["head.bias"], stride=1, padding=0)

    def __call__(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))

    def latents(self, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
        with ad.no_grad():
            return np.concatenate(
                [self.encode(Tensor(x[i : i + batch_size])).data for i in range(0, len(x), batch_size)]
            )

    def segment(self, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
        with ad.no_grad():
            return np.concatenate(
                [self(Tensor(x[i : i + batch_size])).data.argmax(axis=1) for i in range(0, len(x), batch_size)]
            )

    parameters = Sequential.parameters
    state = Sequential.state
    load_state = Sequential.load_state


class ControlHead(Sequential):
    """Dense latent -> steering regressor, tanh-bounded."""

    model_id = "control"

    def __init__(self, latent: int = 128, hidden: int = 32, seed: int = 0, init: str = "he"):
        rng = np.random.default_rng(seed)
        _uniform = functools.partial(_init_param, init=init)
        p = {
            "fc1.weight": _uniform(rng, (hidden, latent), latent),
            "fc1.bias": _uniform(rng, (hidden,), latent),
            "fc2.weight": _uniform(rng, (1, hidden), hidden),
            "fc2.bias": _uniform(rng, (1,), hidden),
        }
        for name, t in p.items():
            t.name = name
        layers = [
            ("fc", lambda z: ad.linear(z, p["fc1.weight"], p["fc1.bias"])),
            ("relu", ad.relu),
            ("fc", lambda z: ad.linear(z, p["fc2.weight"], p["fc2.bias"])),
            ("tanh", ad.tanh),
        ]
        super().__init__(layers, p, input_kind="latent")


class Pipeline:
    """Frozen perception encoder feeding a control head (RGB in, steering out)."""

    input_kind = "rgb"

    def __init__(self, perception: PerceptionCoder, control: ControlHead):
        self.perception = perception
        self.control = control

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.control.predict(self.perception.latents(x))


# --------------------------------------------------------------------------
# data plumbing


def encode_inputs(ds: Dataset, idx, kind: str) -> np.ndarray:
    """Network input for scenes ``idx``: scaled RGB or one-hot label channels."""
    idx = np.asarray(idx)
    if kind == "rgb":
        return ds.rgb[idx].transpose(0, 3, 1, 2) / 255.0
    return one_hot_array(encode_labels(ds, idx, kind), INPUT_CHANNELS[kind])


def encode_labels(ds: Dataset, idx, kind: str) -> np.ndarray:
    labels = ds.labels[np.asarray(idx)]
    if kind == "seg13":
        if ds.label_set != FULL:
            raise ValueError(f"seg13 needs a full13 dataset, got {ds.label_set.name}")
        return labels
    if kind == "seg7":
        return remap_labels(labels) if ds.label_set == FULL else labels
    raise ValueError(f"unknown label encoding {kind!r}")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SEMREDUCE_THREADS", "1")))
    except ValueError:
        return 1


def predict_dataset(model, ds: Dataset, idx, batch_size: int = 32,
                    transform: Callable[[np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """Predictions over ``idx`` in fixed batches; optionally shards batches over threads."""
    idx = np.asarray(idx)
    chunks = [idx[i : i + batch_size] for i in range(0, len(idx), batch_size)]

    def run(chunk):
        x = encode_inputs(ds, chunk, model.input_kind)
        if transform is not None:
            x = transform(x)
        return model.predict(x)

    workers = min(worker_count(), len(chunks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


def evaluate(model, ds: Dataset, split: str = "test", batch_size: int = 32) -> float:
    """Steering MSE over a split; no parameter updates."""
    idx = ds.split(split) if isinstance(split, str) else np.asarray(split)
    if len(idx) == 0:
        raise ValueError("cannot evaluate on an empty split")
    pred = predict_dataset(model, ds, idx, batch_size)
    return float(np.mean((pred - ds.steering[idx]) ** 2))


# --------------------------------------------------------------------------
# training


@dataclass
class HyperParams:
    lr: float = 0.01
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    momentum: float = 0.0
    init: str = "he"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.init not in INIT_GAIN:
            raise ValueError(f"invalid hyperparameters {self}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float | None = None


@dataclass
class TrainResult:
    model: object
    trace: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0

    def trace_rows(self) -> list[dict]:
        return [dataclasses.asdict(e) for e in self.trace]


def _check_finite(loss: float, epoch: int, step: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, step {step}; lower the learning rate")


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train_steernet(config: SteerNetConfig, ds: Dataset, hp: HyperParams | None = None,
                   callback: Callable[[EpochStats], None] | None = None) -> TrainResult:
    """SGD on steering MSE; keeps the parameters of the best validation epoch."""
    hp = hp or HyperParams()
    train_idx, val_idx = ds.split("train"), ds.split("val")
    if len(train_idx) == 0:
        raise ValueError("empty training split")
    net = SteerNet(config, seed=hp.seed, init=hp.init)
    opt = ad.SGD(net.parameters(), hp.lr, hp.momentum)
    rng = np.random.default_rng([hp.seed, 99])
    result = TrainResult(net)
    best, best_state = math.inf, net.state()
    for epoch in range(1, hp.epochs + 1):
        total, count = 0.0, 0
        for step, b in enumerate(_minibatches(len(train_idx), hp.batch_size, rng)):
            sel = train_idx[b]
            x = Tensor(encode_inputs(ds, sel, config.input_kind))
            with ad.Tape() as tape:
                y = net(x)
                loss = ad.mse(ad.reshape(y, (len(sel),)), ds.steering[sel])
                tape.backward(loss)
            lv = loss.item()
            _check_finite(lv, epoch, step)
            opt.step()
            total += lv * len(sel)
            count += len(sel)
        val = evaluate(net, ds, "val") if len(val_idx) else total / count
        stats = EpochStats(epoch, total / count, val)
        result.trace.append(stats)
        log.info("epoch %d train_mse=%.3fe-3 val_mse=%.3fe-3", epoch, stats.train_loss * 1e3, val * 1e3)
        if callback:
            callback(stats)
        if val < best:
            best, best_state, result.best_epoch = val, net.state(), epoch
    net.load_state(best_state)
    return result


def pixel_accuracy(model: PerceptionCoder, ds: Dataset, idx, kind: str, batch_size: int = 16) -> float:
    idx = np.asarray(idx)
    pred = model.segment(encode_inputs(ds, idx, "rgb"), batch_size)
    return float(np.mean(pred == encode_labels(ds, idx, kind)))


def train_perception(num_classes: int, ds: Dataset, hp: HyperParams | None = None,
                     callback: Callable[[EpochStats], None] | None = None, **arch) -> TrainResult:
    """Per-pixel cross-entropy from RGB to 13 or 7 semantic classes."""
    hp = hp or HyperParams(lr=0.05)
    kind = {len(FULL): "seg13", len(COMPACT): "seg7"}.get(num_classes)
    if kind is None:
        raise ValueError(f"num_classes must be {len(FULL)} or {len(COMPACT)}")
    model = PerceptionCoder(num_classes, height=ds.labels.shape[1], width=ds.labels.shape[2],
                            seed=hp.seed, init=hp.init, **arch)
    opt = ad.SGD(model.parameters(), hp.lr, hp.momentum)
    rng = np.random.default_rng([hp.seed, 98])
    train_idx, val_idx = ds.split("train"), ds.split("val")
    result = TrainResult(model)
    best, best_state = -1.0, model.state()
    for epoch in range(1, hp.epochs + 1):
        total, count = 0.0, 0
        for step, b in enumerate(_minibatches(len(train_idx), hp.batch_size, rng)):
            sel = train_idx[b]
            x = Tensor(encode_inputs(ds, sel, "rgb"))
            with ad.Tape() as tape:
                loss = ad.cross_entropy2d(model(x), encode_labels(ds, sel, kind))
                tape.backward(loss)
            lv = loss.item()
            _check_finite(lv, epoch, step)
            opt.step()
            total += lv * len(sel)
            count += len(sel)
        eval_idx = val_idx if len(val_idx) else train_idx
        acc = pixel_accuracy(model, ds, eval_idx, kind)
        stats = EpochStats(epoch, total / count, float("nan"), acc)
        result.trace.append(stats)
        log.info("epoch %d ce=%.4f val_pixel_acc=%.4f", epoch, stats.train_loss, acc)
        if callback:
            callback(stats)
        if acc > best:
            best, best_state, result.best_epoch = acc, model.state(), epoch
    model.load_state(best_state)
    return result


def train_control(perception: PerceptionCoder, ds: Dataset, hp: HyperParams | None = None,
                  hidden: int = 32, callback: Callable[[EpochStats], None] | None = None) -> TrainResult:
    """Fit a control head on frozen latents; the perception module is never updated."""
    hp = hp or HyperParams()
    z = perception.latents(encode_inputs(ds, np.arange(len(ds)), "rgb"))
    train_idx, val_idx = ds.split("train"), ds.split("val")
    head = ControlHead(perception.latent, hidden, seed=hp.seed, init=hp.init)
    opt = ad.SGD(head.parameters(), hp.lr, hp.momentum)
    rng = np.random.default_rng([hp.seed, 97])
    result = TrainResult(Pipeline(perception, head))
    best, best_state = math.inf, head.state()
    for epoch in range(1, hp.epochs + 1):
        total, count = 0.0, 0
        for step, b in enumerate(_minibatches(len(train_idx), hp.batch_size, rng)):
            sel = train_idx[b]
            with ad.Tape() as tape:
                y = head(Tensor(z[sel]))
                loss = ad.mse(ad.reshape(y, (len(sel),)), ds.steering[sel])
                tape.backward(loss)
            lv = loss.item()
            _check_finite(lv, epoch, step)
            opt.step()
            total += lv * len(sel)
            count += len(sel)
        vi = val_idx if len(val_idx) else train_idx
        val = float(np.mean((head.predict(z[vi]) - ds.steering[vi]) ** 2))
        stats = EpochStats(epoch, total / count, val)
        result.trace.append(stats)
        log.info("epoch %d train_mse=%.3fe-3 val_mse=%.3fe-3", epoch, stats.train_loss * 1e3, val * 1e3)
        if callback:
            callback(stats)
        if val < best:
            best, best_state, result.best_epoch = val, head.state(), epoch
    head.load_state(best_state)
    return result


def split_errors(model, ds: Dataset) -> dict[str, float]:
    """Train/val/test MSE in the same units as the dataset steering."""
    return {s: evaluate(model, ds, s) for s in ("train", "val", "test") if len(ds.split(s))}


# --------------------------------------------------------------------------
# checkpoints


def input_shape(model) -> tuple[int, ...]:
    if isinstance(model, SteerNet):
        c = model.config
        return (c.channels, c.height, c.width)
    if isinstance(model, PerceptionCoder):
        return (model.in_channels, model.height, model.width)
    if isinstance(model, ControlHead):
        return (model.params["fc1.weight"].shape[1],)
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_model(model, path) -> None:
    """Checkpoint a model; the input shape travels as a ``meta.input_shape`` entry."""
    params = dict(model.params)
    params["meta.input_shape"] = np.array(input_shape(model), dtype=np.float64)
    ad.save_checkpoint(path, model.model_id, params)


def load_model(path):
    model_id, state = ad.load_checkpoint(path)
    shape = tuple(int(v) for v in state.pop("meta.input_shape", ()))
    if model_id in STEER_PRESETS:
        _, h, w = shape
        model = SteerNet(dataclasses.replace(STEER_PRESETS[model_id], height=h, width=w))
    elif model_id in ("perception-13", "perception-7"):
        cin, h, w = shape
        n = sum(1 for k in state if k.startswith("enc") and k.endswith(".weight") and k[3].isdigit())
        widths = tuple(state[f"enc{i}.weight"].shape[0] for i in range(n))
        latent = state["enc_fc.weight"].shape[0]
        model = PerceptionCoder(int(model_id.split("-")[1]), cin, h, w, latent, widths)
    elif model_id == "control":
        hidden, latent = state["fc1.weight"].shape
        model = ControlHead(latent, hidden)
    else:
        raise ValueError(f"{path}: unknown model id {model_id!r}")
    model.load_state(state)
    return model
