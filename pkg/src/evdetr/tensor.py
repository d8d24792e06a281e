"""Dense float64 tensors with hand-written reverse-mode differentiation.

Every learnable operation in the detector is built from the ops in this
module. The differentiation contract is deliberately small: after
``backward(loss)``, each tensor reachable from ``loss`` with
``requires_grad`` holds the exact analytic gradient of the scalar loss,
verified against central finite differences (see ``gradcheck``).

Values are immutable after a forward pass; gradient accumulation is
single-writer. A model instance must not be shared across threads during
forward/backward, but read-only tensors may be.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ShapeError

Array = np.ndarray

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph construction (inference / oracles)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 ndarray plus an optional backward closure.

    ``data`` is the value, ``grad`` the same-shape accumulator (allocated on
    demand during ``backward``). Non-leaf tensors keep ``_parents`` and a
    ``_backward`` function mapping the output gradient to per-parent
    gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Sequence[Array | None]] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """A named leaf tensor; the name is its checkpoint identity."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class ParamStore:
    """Registry of uniquely named parameters for one model instance."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def new(self, name: str, data) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def state_dict(self) -> dict[str, Array]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state_dict(self, state: dict[str, Array]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ShapeError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            p = self._params[name]
            if tuple(arr.shape) != p.data.shape:
                raise ShapeError(f"parameter {name!r}: checkpoint shape {arr.shape} vs model {p.data.shape}")
            p.data = np.asarray(arr, dtype=np.float64).copy()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None


class RngStream:
    """Deterministic random stream: (seed, counter) fully determine draws.

    Each draw derives a fresh generator from ``SeedSequence(seed,
    spawn_key=(counter,))`` and bumps the counter, so state is trivially
    serializable and replay after restore is bit-exact.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed)
        self.counter = int(counter)

    def _gen(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.counter,))
        self.counter += 1
        return np.random.Generator(np.random.PCG64(seq))

    def uniform(self, low: float, high: float, shape=()) -> Array:
        return self._gen().uniform(low, high, size=shape)

    def normal(self, scale: float = 1.0, shape=()) -> Array:
        return self._gen().normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, shape=()) -> Array:
        return self._gen().integers(low, high, size=shape)

    def poisson(self, lam: float, shape=()) -> Array:
        return self._gen().poisson(lam, size=shape)

    def permutation(self, n: int) -> Array:
        return self._gen().permutation(n)

    def child(self, tag: int) -> "RngStream":
        """Independent substream; used to give each consumer its own lane."""
        return RngStream(self.seed ^ (0x9E3779B97F4A7C15 * (tag + 1) & 0xFFFFFFFFFFFFFFFF))

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        return cls(state["seed"], state["counter"])


# ---------------------------------------------------------------------------
# graph construction helpers


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward_fn
        return out
    return Tensor(data)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
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
    """Reverse-accumulate gradients of a scalar loss through the graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64)
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def fn(g):
        return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data
    def fn(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )
    return _make(data, (a, b), fn)


def power(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent
    return _make(data, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * 0.5 / data,))


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: (g * (1.0 - data * data),))


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_np(a.data)
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without overflow for large |x|."""
    x = a.data
    data = np.where(x >= 0, -np.log1p(np.exp(-x)), x - np.log1p(np.exp(x)))
    return _make(data, (a,), lambda g: (g * _sigmoid_np(-x),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-form GELU; smooth everywhere, so finite differences stay honest."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x + (_GELU_C * 0.044715) * (x2 * x))
    half_1pt = 0.5 + 0.5 * t
    data = x * half_1pt

    def fn(g):
        dinner = _GELU_C + (3.0 * 0.044715 * _GELU_C) * x2
        return (g * (half_1pt + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(data, (a,), fn)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)
    return _make(data, (a,), lambda g: (g * (a.data > 0),))


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    data = np.maximum(a.data, b.data)

    def fn(g):
        # ties split 0.5/0.5, matching the central finite difference exactly
        wa = np.where(a.data > b.data, 1.0, np.where(a.data < b.data, 0.0, 0.5))
        return (_unbroadcast(g * wa, a.data.shape), _unbroadcast(g * (1.0 - wa), b.data.shape))

    return _make(data, (a, b), fn)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    data = np.minimum(a.data, b.data)

    def fn(g):
        wa = np.where(a.data < b.data, 1.0, np.where(a.data > b.data, 0.0, 0.5))
        return (_unbroadcast(g * wa, a.data.shape), _unbroadcast(g * (1.0 - wa), b.data.shape))

    return _make(data, (a, b), fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _make(data, (a,), fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(data, tensors, fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def fn(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(p.squeeze(axis) for p in parts)

    return _make(data, tensors, fn)


def take(a: Tensor, index) -> Tensor:
    data = a.data[index]

    def fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(data, (a,), fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-d+ operands, got {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def fn(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), fn)


# ---------------------------------------------------------------------------
# fused neural-net ops


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ weight + bias over the trailing dimension of x."""
    d_in, d_out = weight.data.shape
    if x.data.shape[-1] != d_in:
        raise ShapeError(f"linear: input shape {x.data.shape} does not match weight shape {weight.data.shape}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    y = x2 @ weight.data
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data.T).reshape(x.data.shape)
        gw = x2.T @ g2
        if bias is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    return _make(y.reshape(*lead, d_out), parents, fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; output sums to 1 there."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing dimension to zero mean/unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def fn(g):
        dxhat = g * gamma.data
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        gx = (inv / d) * (d * dxhat - s1 - xhat * s2)
        return (gx, ggamma, gbeta)

    return _make(data, (x, gamma, beta), fn)


def dropout(x: Tensor, p: float, rng: RngStream, training: bool) -> Tensor:
    """Zero elements with probability p and rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.uniform(0.0, 1.0, x.data.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution on a single [C, H, W] image (no batch dimension).

    Padding replicates the border, so spatially constant inputs produce
    spatially constant outputs (zero input -> pure bias response).
    """
    c_in, h, w = x.data.shape
    c_out, c_in_w, kh, kw = weight.data.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv2d: input channels {c_in} vs weight channels {c_in_w}")
    if padding:
        ys = np.clip(np.arange(-padding, h + padding), 0, h - 1)
        xs = np.clip(np.arange(-padding, w + padding), 0, w - 1)
        xp = x.data[:, ys[:, None], xs[None, :]]
    else:
        xp = x.data
    hp, wp = xp.shape[1:]
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [C, Ho, Wo, kh, kw]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c_in * kh * kw)
    wmat = weight.data.reshape(c_out, -1)
    y = cols @ wmat.T + bias.data
    data = y.reshape(h_out, w_out, c_out).transpose(2, 0, 1)

    def fn(g):
        g2 = g.transpose(1, 2, 0).reshape(h_out * w_out, c_out)
        gw = (g2.T @ cols).reshape(weight.data.shape)
        gb = g2.sum(axis=0)
        dcols = (g2 @ wmat).reshape(h_out, w_out, c_in, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += dcols[
                    :, :, :, i, j
                ].transpose(2, 0, 1)
        if padding:
            p = padding
            folded = gxp[:, p : p + h, :].copy()
            folded[:, 0, :] += gxp[:, :p, :].sum(axis=1)
            folded[:, -1, :] += gxp[:, p + h :, :].sum(axis=1)
            gx = folded[:, :, p : p + w].copy()
            gx[:, :, 0] += folded[:, :, :p].sum(axis=2)
            gx[:, :, -1] += folded[:, :, p + w :].sum(axis=2)
        else:
            gx = gxp
        return (gx, gw, gb)

    return _make(data, (x, weight, bias), fn)


def _bilinear_forward(mapd: Array, pts: Array):
    """Core bilinear gather. mapd: [*B, H, W, C]; pts: [*B, *P, 2] in [0,1]^2.

    Points outside the unit square fade to a zero border (corner cells
    outside the grid contribute zero). All four corners are fetched with a
    single linear-index gather. Returns (value, cache for backward).
    """
    nb = mapd.ndim - 3
    bshape = mapd.shape[:nb]
    h, w, c = mapd.shape[nb:]
    pshape = pts.shape[nb:-1]
    nbatch = int(np.prod(bshape)) if nb else 1
    npts = int(np.prod(pshape)) if pshape else 1
    flat_map = mapd.reshape(nbatch * h * w, c)
    p2 = pts.reshape(nbatch, npts, 2)
    px = p2[..., 0] * (w - 1)
    py = p2[..., 1] * (h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    gx = 1.0 - fx
    gy = 1.0 - fy
    # corner order: (y0,x0), (y0,x1), (y1,x0), (y1,x1)
    xs = np.stack([x0, x0 + 1, x0, x0 + 1])  # [4, B, P]
    ys = np.stack([y0, y0, y0 + 1, y0 + 1])
    valid = ((xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)).astype(np.float64)
    wgt = np.stack([gx * gy, fx * gy, gx * fy, fx * fy]) * valid
    base = (np.arange(nbatch) * (h * w))[None, :, None]
    lin = base + np.clip(ys, 0, h - 1) * w + np.clip(xs, 0, w - 1)
    vals = flat_map[lin.reshape(-1)].reshape(4, nbatch, npts, c) * valid[..., None]
    out = np.einsum("kbp,kbpc->bpc", wgt, vals).reshape(bshape + pshape + (c,))
    cache = (vals, wgt, lin, fx, fy, gx, gy, w, h, nbatch, npts, c)
    return out, cache


def _bilinear_backward(g: Array, mapd_shape, pts_shape, cache):
    vals, wgt, lin, fx, fy, gx, gy, w, h, nbatch, npts, c = cache
    g2 = g.reshape(nbatch, npts, c)
    n_cells = int(np.prod(mapd_shape[:-1]))
    contrib = wgt[..., None] * g2[None]  # [4, B, P, C]
    idx = (lin[..., None] * c + np.arange(c)).reshape(-1)
    gmap = np.bincount(idx, weights=contrib.reshape(-1), minlength=n_cells * c).reshape(n_cells, c)
    # vals already carry the validity mask, so point grads see zero borders
    dfx = (vals[1] - vals[0]) * gy[..., None] + (vals[3] - vals[2]) * fy[..., None]
    dfy = (vals[2] - vals[0]) * gx[..., None] + (vals[3] - vals[1]) * fx[..., None]
    gu = (g2 * dfx).sum(axis=-1) * (w - 1)
    gv = (g2 * dfy).sum(axis=-1) * (h - 1)
    gpts = np.stack([gu, gv], axis=-1)
    return gmap.reshape(mapd_shape), gpts.reshape(pts_shape)


def bilinear_sample(fmap: Tensor, points: Tensor) -> Tensor:
    """Sample a [d, H, W] map at normalized (u, v) points.

    ``points`` has shape [..., 2]; the result has shape [..., d]. (u, v) in
    [0, 1]^2 maps to pixel coordinates (u*(W-1), v*(H-1)); points outside the
    unit square sample a zero border. Differentiable in both arguments.
    """
    if fmap.data.size == 0:
        raise ShapeError("bilinear_sample: empty map")
    mapd = np.moveaxis(fmap.data, 0, -1)  # [H, W, d]
    out, cache = _bilinear_forward(mapd, points.data)

    def fn(g):
        gmap, gpts = _bilinear_backward(g, mapd.shape, points.data.shape, cache)
        return (np.moveaxis(gmap, -1, 0), gpts)

    return _make(out, (fmap, points), fn)


def bilinear_sample_batched(fmap: Tensor, points: Tensor) -> Tensor:
    """Batched variant: map [*B, H, W, C], points [*B, *P, 2] -> [*B, *P, C]."""
    out, cache = _bilinear_forward(fmap.data, points.data)

    def fn(g):
        return _bilinear_backward(g, fmap.data.shape, points.data.shape, cache)

    return _make(out, (fmap, points), fn)


# ---------------------------------------------------------------------------
# plain numpy helpers shared by forward-only code paths


def _sigmoid_np(x: Array) -> Array:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logit_np(p: Array | float) -> Array:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def uniform_init(rng: RngStream, fan_in: int, shape) -> Array:
    """Projection init: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)
