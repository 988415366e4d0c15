"""Dense tensors with reverse-mode differentiation.

Every operation records its inputs and a closure that maps the output
gradient to input gradients. Nodes carry a global creation sequence number,
so sorting reachable nodes by that number gives a valid reverse topological
order for :meth:`Tensor.backward`.

Image-shaped tensors are channels-last: ``(batch, height, width, channels)``.
Token sequences are ``(batch, length, channels)``.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "elementwise",
    "add",
    "sub",
    "mul",
    "silu",
    "sigmoid",
    "relu",
    "exp",
    "reciprocal",
    "absolute",
    "softplus",
    "matmul",
    "conv2d",
    "causal_conv1d",
    "layernorm",
    "concat",
    "split",
    "reshape",
    "flip",
    "total",
    "mean",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


_seq = itertools.count()
_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar
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

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return total(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self) -> None:
        """Propagate d(self)/d(node) to every reachable node that requires grad.

        Gradients accumulate into ``.grad``; clear them between steps.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss is detached from the tape (no input requires grad)")

        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        nodes.sort(key=lambda n: n._seq, reverse=True)

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) may overflow to inf for very negative x; 1/(1+inf) is the right limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finite check
        e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def reciprocal(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        r = 1.0 / a.data
    return _make(r, (a,), lambda g: (-g * r * r,), "reciprocal")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


_UNARY = {
    "silu": silu,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "reciprocal": reciprocal,
    "abs": absolute,
    "softplus": softplus,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name; binary kinds need ``b``, unary kinds reject it."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} takes one operand")
        return _UNARY[op_kind](_as_tensor(a))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ------------------------------------------------------------------ linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., M, K) and a 2-D ``b`` of shape (K, N)."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if b.ndim != 2 or a.ndim < 1:
        raise ShapeError(f"matmul: expected (..., K) @ (K, N), got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# ------------------------------------------------------------- convolution

def _pad_spatial(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    bsz, h, w, c = x.shape
    out = np.zeros((bsz, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    out[:, p : p + h, p : p + w] = x
    if mode == "reflect":
        # mirror without repeating the edge row/column, same as np.pad(mode="reflect")
        back = np.arange(1, p + 1)
        out[:, :p, p : p + w] = x[:, back[::-1]]
        out[:, p + h :, p : p + w] = x[:, h - 1 - back]
        out[:, :, :p] = out[:, :, p + back[::-1]]
        out[:, :, p + w :] = out[:, :, p + w - 1 - back]
    return out


def _unpad_spatial(g: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return g
    if mode == "zero":
        return g[:, p:-p, p:-p, :]
    # fold the mirrored border back onto the rows/cols it copied
    g = g.copy()
    for axis in (1, 2):
        n = g.shape[axis] - 2 * p
        inner = [slice(None)] * 4
        inner[axis] = slice(p, p + n)
        core = g[tuple(inner)].copy()
        for r in range(1, p + 1):
            src = [slice(None)] * 4
            dst = [slice(None)] * 4
            src[axis] = p - r
            dst[axis] = r
            core[tuple(dst)] += g[tuple(src)]
            src[axis] = p + n - 1 + r
            dst[axis] = n - 1 - r
            core[tuple(dst)] += g[tuple(src)]
        g = core
    return g


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """(B, H+2p, W+2p, C) -> (B*H*W, k*k*C), columns ordered (ki, kj, c)."""
    bsz, _, _, c = xp.shape
    cols = np.empty((bsz, h, w, k * k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j, :] = xp[:, i : i + h, j : j + w, :]
    return cols.reshape(bsz * h * w, k * k * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding_mode: str = "reflect") -> Tensor:
    """Same-size 2-D cross-correlation.

    ``x`` is (B, H, W, C_in) and ``weight`` is (C_out, C_in, k, k) with odd ``k``.
    """
    if padding_mode not in ("zero", "reflect"):
        raise ValueError(f"padding_mode must be 'zero' or 'reflect', got {padding_mode!r}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected x (B,H,W,C) and weight (O,I,k,k), got {x.shape}, {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if x.shape[3] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[3]} channels, weight expects {c_in}")
    bsz, h, w, _ = x.shape
    p = (k - 1) // 2
    if padding_mode == "reflect" and p > min(h, w) - 1:
        raise ShapeError(f"conv2d: reflect padding {p} too large for {h}x{w} input")

    xp = _pad_spatial(x.data, p, padding_mode)
    cols = _im2col(xp, k, h, w)
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(c_out, k * k * c_in)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = out.reshape(bsz, h, w, c_out)
    xshape = xp.shape

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(bsz, h, w, k * k, c_in)
            gxp = np.zeros(xshape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + h, j : j + w, :] += gcols[:, :, :, i * k + j, :]
            gx = _unpad_spatial(gxp, p, padding_mode)
        return gx, np.ascontiguousarray(gw), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution over the length axis.

    ``x`` is (B, L, D); ``weight`` is (D, K). Output position t sees inputs
    t-K+1 .. t, with zeros before the sequence start.
    """
    bsz, length, d = x.shape
    if weight.shape[0] != d:
        raise ShapeError(f"causal_conv1d: {d} channels vs weight {weight.shape}")
    kc = weight.shape[1]
    xd, wd = x.data, weight.data
    out = np.zeros_like(xd)
    for j in range(kc):
        shift = kc - 1 - j
        if shift >= length:
            continue
        out[:, shift:, :] += xd[:, : length - shift, :] * wd[:, j]
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for j in range(kc):
            shift = kc - 1 - j
            if shift >= length:
                continue
            gx[:, : length - shift, :] += g[:, shift:, :] * wd[:, j]
            gw[:, j] = (g[:, shift:, :] * xd[:, : length - shift, :]).sum(axis=(0, 1))
        gb = g.sum(axis=(0, 1)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "causal_conv1d")


def layernorm(x: Tensor, gain: Tensor | None = None, offset: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layernorm over an empty last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if offset is not None:
        out = out + offset.data

    def backward(g):
        gg = _unbroadcast(g * xhat, gain.shape) if gain is not None else None
        go = _unbroadcast(g, offset.shape) if offset is not None else None
        gh = g * gain.data if gain is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, go

    parents = [x]
    if gain is not None:
        parents.append(gain)
    if offset is not None:
        parents.append(offset)

    def backward_dispatch(g):
        gx, gg, go = backward(g)
        res = [gx]
        if gain is not None:
            res.append(gg)
        if offset is not None:
            res.append(go)
        return res

    return _make(out, parents, backward_dispatch, "layernorm")


# ------------------------------------------------------------ shape plumbing

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def flip(a: Tensor, axis: int) -> Tensor:
    return _make(np.flip(a.data, axis=axis).copy(), (a,), lambda g: (np.flip(g, axis=axis).copy(),), "flip")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to {a.shape[axis]}")
    out = []
    start = 0
    for n in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + n)
        out.append(_getitem(a, tuple(index)))
        start += n
    return out


def _getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[index]), (a,), backward, "getitem")


def total(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(total(a, axis), 1.0 / n)
