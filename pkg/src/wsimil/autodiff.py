"""Minimal dense-tensor math with reverse-mode automatic differentiation.

Just enough machinery for small attention heads trained with bag-level
losses: 2-D tensors, a dynamically built tape, an Adam optimizer with
decoupled weight decay, a finite-difference gradient checker and a
length-prefixed checkpoint format.

Numeric policy: tensors store float32 by default; reductions (softmax
normalizers, means, layer-norm statistics, loss terms) accumulate in
float64 before casting back. Every op output is checked for NaN/Inf and
raises ``NonFiniteError`` on the first bad value. The gradient checker
promotes its inputs to float64 so central differences resolve below the
1e-4 relative-error bar.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import CheckpointError, NonFiniteError

_F32 = np.float32
_F64 = np.float64


def _guard(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    """A dense array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (_F32, _F64):
            arr = arr.astype(_F32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # small conveniences; the op functions below are the real API
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)


def _make(data, parents, backward, op: str) -> Tensor:
    out = Tensor(_guard(data, op))
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(parent: Tensor, grad: np.ndarray) -> None:
    if not (parent.requires_grad or parent._parents):
        return
    grad = grad.astype(parent.data.dtype, copy=False)
    if parent.grad is None:
        parent.grad = grad.copy() if grad.base is not None else grad
    else:
        parent.grad = parent.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; leaf grads are overwritten."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss tensor")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data @ b.data

    def back():
        g = out.grad
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    out = _make(data, (a, b), back, "matmul")
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back():
        g = out.grad
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    out = _make(data, (a, b), back, "add")
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back():
        g = out.grad
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    out = _make(data, (a, b), back, "mul")
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    data = a.data * np.asarray(s, dtype=a.data.dtype)

    def back():
        _accumulate(a, out.grad * s)

    out = _make(data, (a,), back, "scale")
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b with b broadcast over rows."""
    data = x.data @ w.data + b.data

    def back():
        g = out.grad
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)
        _accumulate(b, _unbroadcast(g, b.data.shape))

    out = _make(data, (x, w, b), back, "linear")
    return out


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    data = np.where(keep, a.data, a.data.dtype.type(0))

    def back():
        _accumulate(a, out.grad * keep)

    out = _make(data, (a,), back, "relu")
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(
        x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))
    ).astype(x.dtype)

    def back():
        _accumulate(a, out.grad * data * (1.0 - data))

    out = _make(data, (a,), back, "sigmoid")
    return out


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def back():
        _accumulate(a, out.grad * (1.0 - data * data))

    out = _make(data, (a,), back, "tanh")
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(_F64)
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x)
    y64 = e / np.sum(e, axis=axis, keepdims=True)
    data = y64.astype(a.data.dtype)

    def back():
        g = out.grad.astype(_F64)
        dot = np.sum(g * y64, axis=axis, keepdims=True)
        _accumulate(a, (y64 * (g - dot)).astype(a.data.dtype))

    out = _make(data, (a,), back, "softmax")
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then apply
    an elementwise affine transform."""
    v = x.data.astype(_F64)
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    data = (xhat * gain.data.astype(_F64) + bias.data.astype(_F64)).astype(x.data.dtype)

    def back():
        g = out.grad.astype(_F64)
        _accumulate(bias, _unbroadcast(g, bias.data.shape))
        _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        gx_hat = g * gain.data.astype(_F64)
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, (inv * (gx_hat - m1 - xhat * m2)).astype(x.data.dtype))

    out = _make(data, (x, gain, bias), back, "layer_norm")
    return out


_MASK64 = (1 << 64) - 1


class DropoutState:
    """Counter-based dropout mask streams (Philox), one stream per site.

    Masks depend only on (seed, site, call index at that site), never on
    global RNG state or worker scheduling.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._counters: dict[int, int] = {}

    def mask(self, site: int, shape: tuple[int, ...], p: float) -> np.ndarray:
        n = self._counters.get(site, 0)
        self._counters[site] = n + 1
        key = np.array([self.seed, int(site) & _MASK64], dtype=np.uint64)
        counter = np.array([n, 0, 0, 0], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(counter=counter, key=key))
        keep = gen.random(shape) >= p
        return keep.astype(_F32) / _F32(1.0 - p)


def dropout(x: Tensor, p: float, state: DropoutState | None, site: int,
            training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p == 0.0:
        return x
    if state is None:
        raise ValueError("training-mode dropout requires a DropoutState")
    mask = state.mask(site, x.data.shape, p).astype(x.data.dtype)
    data = x.data * mask

    def back():
        _accumulate(x, out.grad * mask)

    out = _make(data, (x,), back, "dropout")
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    out = _make(data, tuple(tensors), back, "concat")
    return out


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims, dtype=_F64).astype(a.data.dtype)
    count = a.data.size if axis is None else a.data.shape[axis]

    def back():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.data.shape))

    out = _make(data, (a,), back, "mean")
    return out


def tensor_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=_F64).astype(a.data.dtype)

    def back():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    out = _make(data, (a,), back, "sum")
    return out


def max_with_argmax(a: Tensor, axis: int = 0) -> tuple[Tensor, np.ndarray]:
    """Max along an axis plus its indices; ties resolve to the lowest index.
    The gradient flows only to the argmax elements."""
    idx = np.argmax(a.data, axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

    def back():
        g = np.zeros_like(a.data)
        np.put_along_axis(g, np.expand_dims(idx, axis), out.grad, axis=axis)
        _accumulate(a, g)

    out = _make(data, (a,), back, "max_with_argmax")
    return out, idx


def take_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    data = a.data[idx]

    def back():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _accumulate(a, g)

    out = _make(data, (a,), back, "take_rows")
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    data = a.data[start:stop]

    def back():
        g = np.zeros_like(a.data)
        g[start:stop] = out.grad
        _accumulate(a, g)

    out = _make(data, (a,), back, "slice_rows")
    return out


def transpose(a: Tensor) -> Tensor:
    data = a.data.T

    def back():
        _accumulate(a, out.grad.T)

    out = _make(data, (a,), back, "transpose")
    return out


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross entropy on raw logits (numerically stable form)."""
    y = np.asarray(targets, dtype=_F64)
    z = logits.data.astype(_F64)
    if y.shape != z.shape:
        y = np.broadcast_to(y, z.shape)
    elem = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    data = np.asarray(elem.mean(), dtype=logits.data.dtype)

    def back():
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        g = float(out.grad) * (s - y) / z.size
        _accumulate(logits, g.astype(logits.data.dtype))

    out = _make(data, (logits,), back, "bce_with_logits")
    return out


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, step: float = 1e-3) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of a scalar-valued function.

    Inputs are promoted to float64 leaves. The relative error denominator is
    max(|analytic|, |numeric|, 1e-8) elementwise.
    """
    leaves = []
    for x in inputs:
        arr = (x.data if isinstance(x, Tensor) else np.asarray(x)).astype(_F64)
        leaves.append(Tensor(arr, requires_grad=True))
    loss = fn(*leaves)
    if loss.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    backward(loss)
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves
    ]

    worst = 0.0
    for k, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn(*leaves).item()
            flat[i] = orig - step
            f_minus = fn(*leaves).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[k].reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


class Adam:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], config: AdamConfig | None = None):
        self.params = dict(params)
        self.config = config or AdamConfig()
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        c = self.config
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - c.beta1**t
        bias2 = 1.0 - c.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            m_hat = m / bias1
            v_hat = v / bias2
            update = c.lr * m_hat / (np.sqrt(v_hat) + c.eps)
            if c.weight_decay:
                update = update + c.lr * c.weight_decay * p.data
            p.data = (p.data - update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# initialization helpers


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...] | None = None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)).astype(_F32)


def parameter(data, name: str) -> Tensor:
    return Tensor(np.asarray(data, dtype=_F32), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# checkpoint I/O: little-endian; magic "WMCK", u16 version, u32 tensor count,
# then per tensor: u16 name length + UTF-8 name, u8 ndim, ndim x u32 dims,
# row-major f32 payload.

_CKPT_MAGIC = b"WMCK"
_CKPT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, Tensor | np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<HI", _CKPT_VERSION, len(params)))
        for name, value in params.items():
            arr = np.ascontiguousarray(
                value.data if isinstance(value, Tensor) else value, dtype="<f4"
            )
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    view = memoryview(raw)
    if raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    try:
        version, count = struct.unpack_from("<HI", raw, 4)
        if version != _CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        offset = 10
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            end = offset + 4 * n
            if end > len(raw):
                raise CheckpointError(f"{path}: unexpected end of checkpoint")
            out[name] = (
                np.frombuffer(view[offset:end], dtype="<f4").reshape(shape).copy()
            )
            offset = end
    except struct.error:
        raise CheckpointError(f"{path}: unexpected end of checkpoint") from None
    return out
