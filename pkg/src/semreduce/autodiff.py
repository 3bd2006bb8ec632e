"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of operations the steering and perception models need are
provided. Every op accepts either a single sample (``C, H, W``) or a batch
(``N, C, H, W``) where that makes sense.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "no_grad",
    "current_tape",
    "backward",
    "add",
    "mul",
    "scale",
    "sum_all",
    "mean_all",
    "reshape",
    "flatten",
    "relu",
    "tanh",
    "linear",
    "conv2d",
    "maxpool2d",
    "upsample_nearest2d",
    "mse",
    "cross_entropy2d",
    "SGD",
    "sgd_step",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Ops executed while a tape is active (``with Tape() as tape:``) append one
    node each. :meth:`backward` replays the adjoints in reverse order.
    Without an explicit tape, ops record onto a per-thread default tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _state().stack
        stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        self.nodes.append(_Node(out, inputs, fn))

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Tensor, retain: bool = False, only: Iterable[Tensor] | None = None) -> None:
        """Replay adjoints; with ``only``, just those tensors receive ``.grad``."""
        keep = None if only is None else {id(t) for t in only}
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        adj: dict[int, tuple[Tensor, np.ndarray]] = {
            id(loss): (loss, np.ones_like(loss.data))
        }
        for node in reversed(self.nodes):
            entry = adj.pop(id(node.out), None)
            if entry is None:
                continue
            g = entry[1]
            if keep is None or id(node.out) in keep:
                _accumulate(node.out, g)
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adj:
                    adj[key] = (inp, adj[key][1] + gi)
                else:
                    adj[key] = (inp, gi)
        # whatever is left was not produced on this tape: leaves
        for t, g in adj.values():
            if t.requires_grad and (keep is None or id(t) in keep):
                _accumulate(t, g)
        if not retain:
            self.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default = Tape()
        self.enabled = True


_local = _State()


def _state() -> _State:
    return _local


def current_tape() -> Tape:
    st = _state()
    return st.stack[-1] if st.stack else st.default


@contextlib.contextmanager
def no_grad():
    """Disable recording in this thread."""
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    st = _state()
    needs = st.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        current_tape().record(out, inputs, fn)
    return out


def backward(loss: Tensor, tape: Tape | None = None, retain: bool = False,
             only: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``."""
    (tape or current_tape()).backward(loss, retain=retain, only=only)


# --------------------------------------------------------------------------
# elementwise and shape ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    return _record(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),)
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _record(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.full(a.shape, float(g) / n),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Flatten a ``(C,H,W)`` sample to ``(C*H*W,)`` or a batch to ``(N, C*H*W)``."""
    if a.ndim == 4:
        return reshape(a, (a.shape[0], -1))
    return reshape(a, (-1,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` for ``x`` of shape ``(N_in,)`` or ``(B, N_in)``."""
    if weight.ndim != 2 or bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: weight {weight.shape} / bias {bias.shape} disagree")
    if x.shape[-1] != weight.shape[1] or x.ndim not in (1, 2):
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def bw(g):
        gx = g @ weight.data
        if x.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return gx, gw, gb

    return _record(out, (x, weight, bias), bw)


# --------------------------------------------------------------------------
# convolution and pooling


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected (C,H,W) or (N,C,H,W), got {x.shape}")


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D cross-correlation with zero padding."""
    xb, single = _batched(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be (C_out,C_in,K,K), got {weight.shape}")
    n, c, h, w = xb.shape
    co, ci, k, _ = weight.shape
    if ci != c:
        raise ShapeError(
            f"conv2d: input has {c} channels but weight expects C_in={ci} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    if bias.shape != (co,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match C_out={co}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {hp}x{wp}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    xp = np.zeros((n, c, hp, wp))
    xp[:, :, padding : padding + h, padding : padding + w] = xb
    W = weight.data
    if stride == 1:
        out, ctx = _conv_shift_forward(xp, W, ho, wo)
    else:
        out, ctx = _conv_cols_forward(xp, W, ho, wo, stride)
    out += bias.data[None, :, None, None]

    def bw(g):
        gb = g if not single else g[None]
        gx = gw = None
        if stride == 1:
            gxp, gw = _conv_shift_backward(gb, xp, W, ctx, x.requires_grad, weight.requires_grad)
        else:
            gxp, gw = _conv_cols_backward(gb, xp, W, ctx, stride, x.requires_grad, weight.requires_grad)
        if gxp is not None:
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
            if single:
                gx = gx[0]
        gbias = gb.sum(axis=(0, 2, 3))
        return gx, gw, gbias

    return _record(out[0] if single else out, (x, weight, bias), bw)


def _conv_shift_forward(xp, W, ho, wo):
    # Stride-1 path: on the row-flattened padded image a (i, j) kernel tap is a
    # contiguous offset of i*wp + j, so each tap is one small matmul per sample.
    n, c, hp, wp = xp.shape
    co, _, k, _ = W.shape
    span = ho * wp
    flat = np.zeros((n, c, hp * wp + k))
    flat[:, :, : hp * wp] = xp.reshape(n, c, -1)
    taps = np.ascontiguousarray(W.transpose(2, 3, 0, 1))  # k,k,co,c
    full = np.zeros((n, co, span))
    for s in range(n):
        xs, acc = flat[s], full[s]
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                acc += taps[i, j] @ xs[:, off : off + span]
    out = full.reshape(n, co, ho, wp)[:, :, :, :wo]
    return np.ascontiguousarray(out), (flat, taps, span)


def _conv_shift_backward(g, xp, W, ctx, need_x, need_w):
    flat, taps, span = ctx
    n, c, hp, wp = xp.shape
    co, _, k, _ = W.shape
    ho, wo = g.shape[2], g.shape[3]
    gfull = np.zeros((n, co, ho, wp))
    gfull[:, :, :, :wo] = g
    gfull = gfull.reshape(n, co, span)
    gw = np.zeros((k, k, co, c)) if need_w else None
    gflat = np.zeros_like(flat) if need_x else None
    tapsT = np.ascontiguousarray(taps.transpose(0, 1, 3, 2)) if need_x else None
    for s in range(n):
        gs = gfull[s]
        xs = flat[s]
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                if need_w:
                    gw[i, j] += gs @ xs[:, off : off + span].T
                if need_x:
                    gflat[s, :, off : off + span] += tapsT[i, j] @ gs
    gx = gflat[:, :, : hp * wp].reshape(n, c, hp, wp) if need_x else None
    return gx, (gw.transpose(2, 3, 0, 1).copy() if need_w else None)


def _conv_cols_forward(xp, W, ho, wo, stride):
    n, c, hp, wp = xp.shape
    co, _, k, _ = W.shape
    sn, sc, sh, sw = xp.strides
    win = as_strided(
        xp, (n, c, k, k, ho, wo), (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False
    )
    cols = win.transpose(1, 2, 3, 0, 4, 5).reshape(c * k * k, n * ho * wo)
    out = (W.reshape(co, -1) @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def _conv_cols_backward(g, xp, W, cols, stride, need_x, need_w):
    n, c, hp, wp = xp.shape
    co, _, k, _ = W.shape
    ho, wo = g.shape[2], g.shape[3]
    g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
    gw = (g2 @ cols.T).reshape(W.shape) if need_w else None
    gx = None
    if need_x:
        dcols = (W.reshape(co, -1).T @ g2).reshape(c, k, k, n, ho, wo)
        gx = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, i, j
                ].transpose(1, 0, 2, 3)
    return gx, gw


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; ties go to the first index in row-major window order."""
    xb, single = _batched(x, "maxpool2d")
    n, c, h, w = xb.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"maxpool2d: kernel {kernel} larger than input {h}x{w}")
    if stride < 1:
        raise ValueError("maxpool2d: stride must be >= 1")
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    sn, sc, sh, sw = xb.strides
    win = as_strided(
        xb, (n, c, ho, wo, kernel, kernel), (sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    ).reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    # flat input index of every winner
    rows = np.arange(ho)[:, None] * stride + arg // kernel
    cols = np.arange(wo)[None, :] * stride + arg % kernel
    idx = rows * w + cols

    def bw(g):
        gb = g[None] if single else g
        gx = np.zeros((n, c, h * w))
        flat_idx = idx.reshape(n, c, -1)
        if kernel <= stride:
            np.put_along_axis(gx, flat_idx, gb.reshape(n, c, -1), axis=-1)
        else:
            nn_, cc = np.indices((n, c))
            np.add.at(gx, (nn_[..., None], cc[..., None], flat_idx), gb.reshape(n, c, -1))
        gx = gx.reshape(n, c, h, w)
        return (gx[0] if single else gx,)

    return _record(out[0] if single else out, (x,), bw)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    xb, single = _batched(x, "upsample_nearest2d")
    out = xb.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = xb.shape

    def bw(g):
        gb = g[None] if single else g
        gx = gb.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        return (gx[0] if single else gx,)

    return _record(out[0] if single else out, (x,), bw)


# --------------------------------------------------------------------------
# losses


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error; differentiable in ``pred`` only."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"mse: pred {pred.shape} vs target {t.shape}")
    if pred.size == 0:
        raise ValueError("mse: empty input")
    diff = pred.data - t
    n = diff.size
    return _record(np.asarray(np.mean(diff * diff)), (pred,), lambda g: (2.0 * float(g) * diff / n,))


def cross_entropy2d(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel softmax cross-entropy; ``logits`` is (N,C,H,W), ``labels`` (N,H,W)."""
    z = logits.data
    if z.ndim != 4 or labels.shape != (z.shape[0],) + z.shape[2:]:
        raise ShapeError(f"cross_entropy2d: logits {z.shape} vs labels {labels.shape}")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logp = z - m - np.log(s)
    lab = labels.astype(np.intp)[:, None]
    nll = -np.take_along_axis(logp, lab, axis=1)
    count = nll.size

    def bw(g):
        p = e / s
        np.put_along_axis(p, lab, np.take_along_axis(p, lab, axis=1) - 1.0, axis=1)
        return (p * (float(g) / count),)

    return _record(np.asarray(nll.mean()), (logits,), bw)


# --------------------------------------------------------------------------
# optimisation


class SGD:
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name or p.shape} has no gradient")
        for p, v in zip(self.params, self._velocity):
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.data -= self.lr * v
            else:
                p.data -= self.lr * p.grad
            p.grad = None


def sgd_step(params: Iterable[Tensor], learning_rate: float) -> None:
    SGD(params, learning_rate).step()


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"SEMRCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model_id: str, params: Mapping[str, "Tensor | np.ndarray"]) -> None:
    """Write named float64 parameters to a single little-endian binary file."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    mid = model_id.encode("utf-8")
    chunks.append(struct.pack("<I", len(mid)) + mid)
    chunks.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        bname = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(bname)) + bname)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (mlen,) = take("<I")
    model_id = buf[pos : pos + mlen].decode("utf-8")
    pos += mlen
    (count,) = take("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64)
        pos += nbytes
        params[name] = arr.reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return model_id, params
