"""A minimal reverse-mode autodiff core on float64 numpy arrays.

Only what the adapter and the toy policies need: 1D convolution over time,
dense layers, a handful of elementwise ops, time pooling, Adam and a
finite-difference gradient checker.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: Tuple["Tensor", ...] = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- graph plumbing -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), back)


def square(a) -> Tensor:
    return _make(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sine(a) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cosine(a) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def tanh(a) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out ** 2),))


def elu(a, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    return _make(out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg_part + alpha),))


def relu(a) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def atan2(y, x) -> Tensor:
    """Elementwise atan2(y, x); the gradient at the origin is taken as zero."""
    y, x = as_tensor(y), as_tensor(x)
    r2 = y.data ** 2 + x.data ** 2
    safe = np.where(r2 > 0, r2, 1.0)

    def back(g):
        gy = np.where(r2 > 0, g * x.data / safe, 0.0)
        gx = np.where(r2 > 0, -g * y.data / safe, 0.0)
        return _unbroadcast(gy, y.shape), _unbroadcast(gx, x.shape)

    return _make(np.arctan2(y.data, x.data), (y, x), back)


# ---------------------------------------------------------------------------
# shape / reduction


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx) -> Tensor:
    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def take_last(a, index: np.ndarray) -> Tensor:
    """Gather ``a[..., index[...]]`` along the last axis; ``index`` has a's leading shape."""
    idx = np.asarray(index)[..., None]

    def back(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _make(np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), back)


# ---------------------------------------------------------------------------
# layers


def conv1d(x, weight, bias) -> Tensor:
    """'Same' zero-padded 1D convolution over time.

    x: (B, C_in, T); weight: (C_out, C_in, K) with K odd; bias: (C_out,).
    y[b, o, t] = bias[o] + sum_{i,k} w[o, i, k] * x[b, i, t + k - K//2].
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    B, C_in, T = x.shape
    C_out, C_in_w, K = weight.shape
    if C_in_w != C_in:
        raise ValueError(f"conv1d: input has {C_in} channels, weight expects {C_in_w}")
    if K % 2 != 1:
        raise ValueError("conv1d: kernel size must be odd")
    if bias.shape != (C_out,):
        raise ValueError("conv1d: bias shape mismatch")
    pad = K // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(xp, K, axis=2)  # B, C_in, T, K
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(B * T, C_in * K)
    wm = weight.data.reshape(C_out, C_in * K)
    y = (cols @ wm.T).reshape(B, T, C_out).transpose(0, 2, 1) + bias.data[None, :, None]

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * T, C_out)
        gw = (g2.T @ cols).reshape(C_out, C_in, K)
        gb = g.sum(axis=(0, 2))
        gcols = (g2 @ wm).reshape(B, T, C_in, K)
        gxp = np.zeros((B, C_in, T + 2 * pad))
        for k in range(K):
            gxp[:, :, k:k + T] += gcols[:, :, :, k].transpose(0, 2, 1)
        return gxp[:, :, pad:pad + T], gw, gb

    return _make(np.ascontiguousarray(y), (x, weight, bias), back)


def dense(x, weight, bias) -> Tensor:
    """Affine map x @ W^T + b; x: (B, F_in), weight: (F_out, F_in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"dense: input has {x.shape[-1]} features, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError("dense: bias shape mismatch")

    def back(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(x.data @ weight.data.T + bias.data, (x, weight, bias), back)


def avg_pool_time(x) -> Tensor:
    """(B, C, T) -> (B, C), mean over time."""
    return tmean(x, axis=2)


def mse(a, b) -> Tensor:
    return tmean(square(as_tensor(a) - as_tensor(b)))


# ---------------------------------------------------------------------------
# parameters and optimisation


class ParamSet:
    """Named parameters with gradient and Adam moment buffers."""

    def __init__(self, params: Optional[Dict[str, np.ndarray]] = None):
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        for k, v in (params or {}).items():
            self.add(k, v)

    def add(self, name: str, value) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.tensors[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in self.tensors.items()}

    def values(self) -> Dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_values(self, values: Dict[str, np.ndarray]):
        for k, v in values.items():
            if self.tensors[k].data.shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k!r}")
            self.tensors[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "ParamSet":
        out = ParamSet(self.values())
        for k in self.tensors:
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        return out

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))


def adam_step(params: ParamSet, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int = 1, grad_clip: Optional[float] = None,
              lr_scale: Optional[Dict[str, float]] = None) -> ParamSet:
    """One bias-corrected Adam update in place; gradients are zeroed afterwards.

    ``lr_scale`` multiplies the step size of the named parameters.
    """
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    grads = params.grads()
    if grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > grad_clip:
            grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = params.m[k]
        v = params.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (lr_scale.get(k, 1.0) if lr_scale else 1.0)
        p.data = p.data - step * (m / c1) / (np.sqrt(v / c2) + eps)
    params.zero_grad()
    return params


@dataclass
class GradcheckReport:
    errors: Dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def gradcheck(f: Callable[[ParamSet], Tensor], params: ParamSet, h: float = 1e-5, tol: float = 1e-4,
              atol: float = 1e-6, names: Optional[Iterable[str]] = None) -> GradcheckReport:
    """Compare analytic gradients with central differences.

    Per parameter, reports max_i |a_i - n_i| / max(|a_i|, |n_i|, atol).
    """
    params.zero_grad()
    loss = f(params)
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("non-finite loss")
    loss.backward()
    analytic = {k: g.copy() for k, g in params.grads().items()}
    params.zero_grad()
    errors = {}
    for name in (names or list(params)):
        p = params[name]
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params).data)
            flat[i] = orig - h
            fm = float(f(params).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError("non-finite loss")
            num[i] = (fp - fm) / (2 * h)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), atol)
        errors[name] = float(np.max(np.abs(a - num) / denom)) if a.size else 0.0
    return GradcheckReport(errors, tol)


# ---------------------------------------------------------------------------
# checkpoints

PARAMS_MAGIC = "#SMAP-PARAMS v1"


def _fmt(x: float) -> str:
    from .motion import format_value

    return format_value(x)


def dump_params(values: Dict[str, np.ndarray]) -> str:
    """SMAP-PARAMS v1 body: per parameter a ``name shape`` line then one line of values."""
    lines = [PARAMS_MAGIC]
    for name, v in values.items():
        v = np.asarray(v, dtype=float)
        shape = "x".join(str(d) for d in v.shape) or "scalar"
        lines.append(f"{name} {shape}")
        lines.append(" ".join(_fmt(x) for x in v.reshape(-1)))
    return "\n".join(lines) + "\n"


def parse_params(text: str) -> "OrderedDict[str, np.ndarray]":
    lines = text.split("\n")
    if not lines or lines[0].strip() != PARAMS_MAGIC:
        raise ValueError("not a SMAP-PARAMS v1 document")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        if line.startswith("#"):
            break
        try:
            name, shape_txt = line.split()
        except ValueError:
            raise ValueError(f"line {i + 1}: expected 'name shape'") from None
        shape = () if shape_txt == "scalar" else tuple(int(d) for d in shape_txt.split("x"))
        if i + 1 >= len(lines):
            raise ValueError(f"line {i + 1}: missing values for {name}")
        vals = np.array([float(t) for t in lines[i + 1].split()], dtype=float)
        if vals.size != int(np.prod(shape)):
            raise ValueError(f"line {i + 2}: {name} expects {int(np.prod(shape))} values, got {vals.size}")
        out[name] = vals.reshape(shape)
        i += 2
    return out


# ---------------------------------------------------------------------------
# small MLP helper shared by the adapter heads and the policies


def init_dense(params: ParamSet, name: str, f_in: int, f_out: int, rng: np.random.Generator, scale: float = 1.0):
    bound = scale * math.sqrt(6.0 / (f_in + f_out))
    params.add(f"{name}.w", rng.uniform(-bound, bound, size=(f_out, f_in)))
    params.add(f"{name}.b", np.zeros(f_out))


def init_conv(params: ParamSet, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator, scale: float = 1.0):
    bound = scale * math.sqrt(6.0 / ((c_in + c_out) * k))
    params.add(f"{name}.w", rng.uniform(-bound, bound, size=(c_out, c_in, k)))
    params.add(f"{name}.b", np.zeros(c_out))
