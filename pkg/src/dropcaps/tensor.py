"""Numpy-backed tensors with reverse-mode differentiation.

Every operation records a closure that pushes the upstream gradient to its
parents. ``Tensor.backward`` walks the graph in reverse topological order.
Leaf gradients accumulate across calls until ``zero_grad`` is called.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, UsageError

DEFAULT_DTYPE = np.float32


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        if self.data.ndim and 0 in self.data.shape:
            raise ConfigurationError(f"tensor extents must be positive, got {self.data.shape}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- autograd ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# -- elementwise & reductions ---------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _result(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _result(ad ** exponent, (a,),
                   lambda g: (g * exponent * ad ** (exponent - 1),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    total = tsum(a, axis, keepdims)
    count = a.size // max(total.size, 1)
    return total * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing with a scatter-add backward."""
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.asarray(a.data[index]), (a,), backward, "take")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Differentiable einsum for explicit-output subscripts.

    Every index of every operand must appear in the output or in another
    operand, which covers contractions and batched products.
    """
    inputs, output = subscripts.replace(" ", "").split("->")
    specs = inputs.split(",")
    if len(specs) != len(operands):
        raise ConfigurationError("einsum operand count does not match subscripts")
    for k, spec in enumerate(specs):
        others = set(output).union(*(specs[j] for j in range(len(specs)) if j != k))
        if not set(spec) <= others or len(set(spec)) != len(spec):
            raise ConfigurationError(f"einsum operand {k} ({spec}) is not supported")
    datas = [op.data for op in operands]
    out = np.einsum(subscripts, *datas, optimize=len(operands) > 2)

    def backward(g):
        grads = []
        for k, op in enumerate(operands):
            if not op.requires_grad:
                grads.append(None)
                continue
            rest = [specs[j] for j in range(len(specs)) if j != k]
            expr = ",".join([output] + rest) + "->" + specs[k]
            args = [g] + [datas[j] for j in range(len(specs)) if j != k]
            grads.append(np.einsum(expr, *args, optimize=len(args) > 2))
        return tuple(grads)

    return _result(out, tuple(operands), backward, "einsum")


def norm(a: Tensor, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm with a zero subgradient at the origin."""
    out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    safe = np.where(out > 0, out, 1.0)
    ad = a.data

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * ad / safe * (out > 0),)

    value = out if keepdims else np.squeeze(out, axis=axis)
    return _result(value, (a,), backward, "norm")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


# -- layers ------------------------------------------------------------------

@dataclass(frozen=True)
class Conv3dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    dilation: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        for name in ("kernel", "stride", "dilation"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 3 or min(value) < 1:
                raise ConfigurationError(f"{name} must be three positive integers, got {value}")
            object.__setattr__(self, name, value)
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be positive")

    def output_shape(self, spatial: Sequence[int]) -> tuple[int, int, int]:
        out = []
        for axis, (n, k, s, d) in enumerate(zip(spatial, self.kernel, self.stride, self.dilation)):
            extent = (k - 1) * d + 1
            if extent > n:
                raise ConfigurationError(
                    f"effective kernel extent {extent} exceeds input extent {n} on axis {axis}")
            out.append((n - extent) // s + 1)
        return tuple(out)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None, spec: Conv3dSpec) -> Tensor:
    """Valid dilated/strided 3D cross-correlation, input layout N,C,T,H,W."""
    if x.ndim != 5 or w.ndim != 5:
        raise ConfigurationError(f"conv3d expects 5-D input and weights, got {x.shape}, {w.shape}")
    n, c = x.shape[:2]
    f, cw, kt, kh, kw = w.shape
    if c != cw or c != spec.in_channels or f != spec.out_channels or (kt, kh, kw) != spec.kernel:
        raise ConfigurationError(
            f"conv3d shape mismatch: input {x.shape}, weights {w.shape}, spec {spec}")
    if b is not None and b.shape != (f,):
        raise ConfigurationError(f"bias shape {b.shape} does not match {f} filters")
    to, ho, wo = spec.output_shape(x.shape[2:])
    st, sh, sw = spec.stride
    dt, dh, dw = spec.dilation
    xd = x.data.transpose(1, 0, 2, 3, 4)  # C,N,T,H,W so one GEMM covers the batch
    p = to * ho * wo
    cols = np.empty((c, kt, kh, kw, n, to, ho, wo), dtype=x.data.dtype)
    slices = {}
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                sl = (slice(i * dt, i * dt + (to - 1) * st + 1, st),
                      slice(j * dh, j * dh + (ho - 1) * sh + 1, sh),
                      slice(k * dw, k * dw + (wo - 1) * sw + 1, sw))
                slices[i, j, k] = sl
                cols[:, i, j, k] = xd[(slice(None), slice(None)) + sl]
    ck = c * kt * kh * kw
    cols2 = cols.reshape(ck, n * p)
    w2 = w.data.reshape(f, ck)
    out = w2 @ cols2
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(f, n, to, ho, wo).transpose(1, 0, 2, 3, 4)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3, 4).reshape(f, n * p)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2 @ cols2.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, kt, kh, kw, n, to, ho, wo)
            gxt = np.zeros((c, n) + x.shape[2:], dtype=g.dtype)
            for (i, j, k), sl in slices.items():
                gxt[(slice(None), slice(None)) + sl] += gcols[:, i, j, k]
            gx = gxt.transpose(1, 0, 2, 3, 4)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv3d")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ConfigurationError(f"dense shape mismatch: {x.shape} @ {w.shape} + {b.shape}")
    return matmul(x, w) + b


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, features: int, dtype=DEFAULT_DTYPE) -> "BatchNormState":
        return cls(np.zeros(features, dtype=dtype), np.ones(features, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, state: BatchNormState,
               training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over every axis except axis 1."""
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        if x.shape[0] < 2:
            raise ConfigurationError("batch_norm needs a batch of at least 2 in train mode")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        count = xd.size // x.shape[1]
        unbiased = var * count / max(count - 1, 1)
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mean
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
    gd = np.ones(bshape, dtype=xd.dtype) if gamma is None else gamma.data.reshape(bshape)
    out = xhat * gd
    if beta is not None:
        out = out + beta.data.reshape(bshape)

    def backward(g):
        gxhat = g * gd
        gx = None
        if x.requires_grad:
            if training:
                m = xd.size // x.shape[1]
                gx = (inv.reshape(bshape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            else:
                gx = gxhat * inv.reshape(bshape)
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=axes) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.sum(axis=axes) if beta.requires_grad else None)
        return tuple(grads)

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return _result(out.astype(xd.dtype, copy=False), tuple(parents), backward, "batch_norm")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are rescaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
