"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every op records its parents and a closure computing the vector-Jacobian
product, so the graph built during the forward pass is the tape. Layout for
image-like tensors is NHWC.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """Raised when a NaN or Inf appears in a forward value or a gradient."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite value produced by {where}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    # -- introspection
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; the gradient is zero where clamping is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def power(x: Tensor, p: float) -> Tensor:
    out = x.data ** p
    return _make(out, (x,), lambda g: (g * p * x.data ** (p - 1),), "power")


def grl(x: Tensor, lambda_g: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -lambda_g."""
    if lambda_g < 0:
        raise ValueError("lambda_g must be non-negative")
    return _make(x.data.copy(), (x,), lambda g: (-lambda_g * g,), "grl")


# ---------------------------------------------------------------- reductions

def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), fn, "reduce_sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


def reduce_max(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first arg-max on ties."""
    if axis is None:
        flat = x.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = np.asarray(flat[idx])
        if keepdims:
            out = out.reshape((1,) * x.data.ndim)

        def fn(g):
            gx = np.zeros(x.size)
            gx[idx] = float(np.asarray(g).reshape(()))
            return (gx.reshape(x.shape),)

        return _make(out, (x,), fn, "reduce_max")

    ax = axis % x.data.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, g, axis=ax)
        return (gx,)

    return _make(out if keepdims else np.squeeze(out, ax), (x,), fn, "reduce_max")


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        shapes = " and ".join(str(x.shape) for x in xs)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows along axis 0 (used to pick out positive anchors)."""
    index = np.asarray(index, dtype=np.int64)

    def fn(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), fn, "take")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """a @ b where ``b`` is 2-D and ``a`` may carry leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def fn(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(out, (a, b), fn, "matmul")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Dense stride-1 cross-correlation.

    x: (N, H, W, C_in); w: (C_out, C_in, kh, kw); b: (C_out,).
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, hgt, wid, cin = x.shape
    cout, _, kh, kw = w.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout)
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def fn(g):
        gm = g.reshape(-1, cout)
        gw = (gm.T @ cols).reshape(w.shape)
        gcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + ho, j:j + wo, :] += gcols[..., i, j]
        gx = gxp[:, p:p + hgt, p:p + wid, :] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _make(out, parents, fn, "conv2d")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = Tensor(x.data.max(axis=axis, keepdims=True))
    shifted = sub(x, m)
    return sub(shifted, log(reduce_sum(exp(shifted), axis=axis, keepdims=True)))


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grad = np.ones(loss.shape)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            _check_finite(g, f"gradient of {node.name or 'leaf'}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamConfig:
    lr: float = 1.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    one_cycle: bool = True
    pct_start: float = 0.4
    div_factor: float = 10.0
    final_div_factor: float = 100.0


def one_cycle_lr(step: int, total_steps: int, cfg: AdamConfig) -> float:
    """Cosine one-cycle schedule: warm up to ``lr`` then anneal down."""
    if not cfg.one_cycle or total_steps <= 1:
        return cfg.lr
    lo = cfg.lr / cfg.div_factor
    end = lo / cfg.final_div_factor
    up = max(1, int(round(cfg.pct_start * total_steps)))
    if step < up:
        frac = step / up
        return lo + (cfg.lr - lo) * 0.5 * (1 - math.cos(math.pi * frac))
    frac = min(1.0, (step - up) / max(1, total_steps - 1 - up))
    return end + (cfg.lr - end) * 0.5 * (1 + math.cos(math.pi * frac))


@dataclass
class Adam:
    params: dict[str, Tensor]
    config: AdamConfig = field(default_factory=AdamConfig)
    total_steps: int = 1
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def current_lr(self) -> float:
        return one_cycle_lr(self.t, self.total_steps, self.config)

    def step(self) -> float:
        cfg = self.config
        lr = self.current_lr()
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        return lr


def sgd_adam_step(params: dict[str, Tensor], optimizer: Adam) -> float:
    """One Adam update of ``params`` from their populated grads; returns the lr used."""
    optimizer.params = params
    return optimizer.step()


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    """JSON header (length-prefixed) followed by little-endian float64 payloads."""
    names = sorted(params)
    header = {
        "format": "uda3d-ckpt-v1",
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen])
    off = 8 + hlen
    params = {}
    for rec in header["tensors"]:
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64)
        params[rec["name"]] = Tensor(arr.reshape(rec["shape"]), requires_grad=True, name=rec["name"])
        off += 8 * count
    return params, header.get("meta", {})
