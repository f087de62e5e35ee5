"""Dense-tensor engine with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array (float32 for training, float64 for
gradient checking) and remembers the operation that produced it. Calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates d(scalar)/d(leaf) into every reachable leaf's
``grad`` slot, summing over multiple paths.

Every op is a plain function taking/returning Tensors. Shapes are
validated eagerly and violations raise :class:`ShapeError` naming the
offending axes. Forward results on finite inputs are finite: softmax is
max-subtracted, layer norm is epsilon-regularized, and the subgradient of
``|x|`` at zero is defined as 0.
"""

from __future__ import annotations

import contextlib
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "ConfigError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "abs_",
    "relu",
    "gelu",
    "sigmoid",
    "exp",
    "power",
    "neg",
    "conv2d",
    "concat_channels",
    "upsample_bilinear",
    "layer_norm",
    "linear",
    "softmax_lastdim",
    "pool2d",
    "pad2d",
    "bmm",
    "transpose",
    "reshape",
    "sum_all",
    "mean_all",
    "log_softmax_pick",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class ConfigError(ValueError):
    """Raised when a configuration value is out of its legal domain."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference mode)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (
        np.float32,
        np.float64,
    ):
        return np.asarray(data)
    return np.asarray(data, dtype=np.float32)


class Tensor:
    """A dense real-valued array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every reachable leaf with d(self)/d(leaf).

        ``self`` must be a scalar (size-1) tensor.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


class Parameter:
    """A named, optionally trainable tensor owned by a model."""

    __slots__ = ("tensor", "name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        self.tensor = Tensor(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray):
        self.tensor.data = value

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def _make(out_data, parents: tuple, backward_fn: Callable) -> Tensor:
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=rg)
    if rg:
        out._parents = parents
        out._backward = backward_fn
    return out


def _coerce_pair(a, b):
    """Allow a python scalar on either side of a binary op."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")
        return a, b, None
    if isinstance(a, Tensor):
        return a, None, float(b)
    if isinstance(b, Tensor):
        return None, b, float(a)
    raise TypeError("at least one operand must be a Tensor")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    ta, tb, scalar = _coerce_pair(a, b)
    if scalar is None:
        return _make(ta.data + tb.data, (ta, tb), lambda g: (g, g))
    t = ta if ta is not None else tb
    return _make(t.data + scalar, (t,), lambda g: (g,))


def sub(a, b) -> Tensor:
    ta, tb, scalar = _coerce_pair(a, b)
    if scalar is None:
        return _make(ta.data - tb.data, (ta, tb), lambda g: (g, -g))
    if ta is not None:  # tensor - scalar
        return _make(ta.data - scalar, (ta,), lambda g: (g,))
    return _make(scalar - tb.data, (tb,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    ta, tb, scalar = _coerce_pair(a, b)
    if scalar is None:
        return _make(
            ta.data * tb.data, (ta, tb), lambda g: (g * tb.data, g * ta.data)
        )
    t = ta if ta is not None else tb
    return _make(t.data * scalar, (t,), lambda g: (g * scalar,))


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def abs_(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at x == 0."""
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    return _make(
        np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),)
    )


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(x.data * cdf, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # computed branch-wise to avoid exp overflow on large |x|
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def power(x: Tensor, p: float) -> Tensor:
    """x**p for x >= 0; the gradient at x == 0 is defined as 0."""
    p = float(p)
    out = x.data**p

    def backward(g):
        if p == 0.0:
            return (np.zeros_like(x.data),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * x.data ** (p - 1.0)
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _make(
        x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),)
    )


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),)
    )


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack (N, C_i, H, W) tensors along the channel axis, in order."""
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    base = parts[0].shape
    for i, p in enumerate(parts):
        if p.ndim != 4:
            raise ShapeError(f"part {i} is not 4-d: shape {p.shape}")
        if p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ShapeError(
                f"part {i} has shape {p.shape}; batch/spatial axes must match "
                f"{base}"
            )
    if len(parts) == 1:
        p = parts[0]
        return _make(p.data, (p,), lambda g: (g,))
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            g[:, offsets[i] : offsets[i + 1]] for i in range(len(parts))
        )

    return _make(
        np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward
    )


def sum_all(x: Tensor) -> Tensor:
    return _make(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, x.data.shape).copy(),),
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),),
    )


# ---------------------------------------------------------------------------
# linear algebra


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x @ weight + bias.

    x: (..., Cin), weight: (Cin, Cout), bias: (Cout,).
    """
    cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(
            f"linear: input last axis {x.shape[-1]} != weight rows {cin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({cout},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        x2 = x.data.reshape(-1, cin)
        dw = x2.T @ g2
        dx = (g2 @ weight.data.T).reshape(x.data.shape)
        db = g2.sum(axis=0) if bias is not None else None
        return (dx, dw, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: (..., m, k) @ (..., k, n) with equal leading dims."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ g
        return (da, db)

    return _make(a.data @ b.data, (a, b), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward)


def layer_norm(
    x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5
) -> Tensor:
    """Normalize over the last axis, then apply the affine gain/shift."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    c = x.shape[-1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(
            f"layer_norm: gain/shift shapes {gain.shape}/{shift.shape} "
            f"do not match channel width {c}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + shift.data

    def backward(g):
        dgain = (g * xhat).reshape(-1, c).sum(axis=0)
        dshift = g.reshape(-1, c).sum(axis=0)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return (dx, dgain, dshift)

    return _make(out, (x, gain, shift), backward)


# ---------------------------------------------------------------------------
# spatial ops


def _conv_geometry(h, w, kh, kw, stride, padding):
    ho, rem_h = divmod(h + 2 * padding - kh, stride)
    wo, rem_w = divmod(w + 2 * padding - kw, stride)
    if rem_h or rem_w or ho < 0 or wo < 0:
        raise ShapeError(
            f"conv2d: spatial size ({h},{w}) with kernel ({kh},{kw}), "
            f"stride {stride}, padding {padding} gives non-integral output"
        )
    return ho + 1, wo + 1


def _window_view(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    n, c, _, _ = xp.shape
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (n, c, ho, wo, kh, kw),
        (s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
        writeable=False,
    )


def _im2col(x: np.ndarray, kh, kw, stride, padding, ho, wo):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2))
    win = _window_view(x, kh, kw, stride, ho, wo)
    n, c = x.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-d cross-correlation of (N, Ci, H, W) with (Co, Ci, kH, kW) filters."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-d input/weight, got {x.shape}/{weight.shape}"
        )
    n, ci, h, w = x.shape
    co, ciw, kh, kw = weight.shape
    if ci != ciw:
        raise ShapeError(
            f"conv2d: input channel axis is {ci} but weight expects {ciw}"
        )
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: stride {stride} / padding {padding} invalid")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)

    wmat = weight.data.reshape(co, ci * kh * kw)
    cols = _im2col(x.data, kh, kw, stride, padding, ho, wo)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        cols_b = _im2col(x.data, kh, kw, stride, padding, ho, wo)
        dw = (g2.T @ cols_b).reshape(weight.data.shape)
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        dcols = (g2 @ wmat).reshape(n, ho, wo, ci, kh, kw)
        dcols = dcols.transpose(0, 3, 1, 2, 4, 5)  # (N, Ci, Ho, Wo, kH, kW)
        hp, wp = h + 2 * padding, w + 2 * padding
        dxp = np.zeros((n, ci, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[
                    :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
                ] += dcols[:, :, :, :, i, j]
        dx = (
            dxp[:, :, padding : padding + h, padding : padding + w]
            if padding
            else dxp
        )
        return (dx, dw, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def pool2d(kind: str, x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Windowed max/avg pooling with k x k windows."""
    if kind not in ("max", "avg"):
        raise ConfigError(f"pool2d: unknown kind {kind!r}")
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"pool2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w or (h - k) % stride or (w - k) % stride:
        raise ShapeError(
            f"pool2d: spatial size ({h},{w}) not tileable by window {k}, "
            f"stride {stride}"
        )
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = _window_view(x.data, k, k, stride, ho, wo)
    flat = win.reshape(n, c, ho, wo, k * k)

    if kind == "max":
        am = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

        def backward(g):
            dx = np.zeros_like(x.data)
            for t in range(k * k):
                i, j = divmod(t, k)
                dx[
                    :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
                ] += g * (am == t)
            return (dx,)

    else:
        out = flat.mean(axis=-1)

        def backward(g):
            dx = np.zeros_like(x.data)
            gk = g / (k * k)
            for t in range(k * k):
                i, j = divmod(t, k)
                dx[
                    :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
                ] += gk
            return (dx,)

    return _make(out, (x,), backward)


def pad2d(
    x: Tensor, top: int, bottom: int, left: int, right: int, mode: str = "zero"
) -> Tensor:
    """Pad the two trailing axes with zeros or replicated edge values."""
    if mode not in ("zero", "edge"):
        raise ConfigError(f"pad2d: unknown mode {mode!r}")
    if x.ndim != 4:
        raise ShapeError(f"pad2d: expected 4-d input, got {x.shape}")
    pads = ((0, 0), (0, 0), (top, bottom), (left, right))
    out = np.pad(x.data, pads, mode="constant" if mode == "zero" else "edge")
    hp, wp = out.shape[2], out.shape[3]
    h, w = x.shape[2], x.shape[3]

    def backward(g):
        core = g[:, :, top : hp - bottom, left : wp - right]
        if mode == "zero":
            return (core.copy(),)
        dx = core.copy()
        if top:
            dx[:, :, 0, :] += g[:, :, :top, left : wp - right].sum(axis=2)
        if bottom:
            dx[:, :, -1, :] += g[:, :, hp - bottom :, left : wp - right].sum(axis=2)
        if left:
            dx[:, :, :, 0] += g[:, :, top : hp - bottom, :left].sum(axis=3)
        if right:
            dx[:, :, :, -1] += g[:, :, top : hp - bottom, wp - right :].sum(axis=3)
        if top and left:
            dx[:, :, 0, 0] += g[:, :, :top, :left].sum(axis=(2, 3))
        if top and right:
            dx[:, :, 0, -1] += g[:, :, :top, wp - right :].sum(axis=(2, 3))
        if bottom and left:
            dx[:, :, -1, 0] += g[:, :, hp - bottom :, :left].sum(axis=(2, 3))
        if bottom and right:
            dx[:, :, -1, -1] += g[:, :, hp - bottom :, wp - right :].sum(axis=(2, 3))
        return (dx,)

    return _make(out, (x,), backward)


@lru_cache(maxsize=256)
def _interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row-stochastic 1-d linear interpolation matrix (half-pixel centers)."""
    a = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for o in range(out_size):
        src = (o + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        lo = min(max(i0, 0), in_size - 1)
        hi = min(max(i0 + 1, 0), in_size - 1)
        a[o, lo] += 1.0 - frac
        a[o, hi] += frac
    return a


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize (either direction) without corner alignment."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"upsample_bilinear: bad target ({out_h},{out_w})")
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear: expected 4-d input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    ah = _interp_matrix(h, out_h).astype(x.dtype)
    aw = _interp_matrix(w, out_w).astype(x.dtype)
    # separable: rows then columns, as two batched matmuls
    out = (ah @ x.data) @ aw.T

    def backward(g):
        return ((ah.T @ g) @ aw,)

    return _make(out, (x,), backward)


def log_softmax_pick(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-pixel log-probability of the labelled class.

    logits: (N, K, H, W); labels: integer array (N, H, W) with values in
    [0, K). Returns (N, H, W). Stable: the log-sum-exp is max-subtracted.
    """
    if logits.ndim != 4:
        raise ShapeError(f"log_softmax_pick: expected 4-d logits, got {logits.shape}")
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(
            f"log_softmax_pick: labels shape {labels.shape} != ({n},{h},{w})"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse  # (N, K, H, W)
    idx = labels[:, None, :, :]
    out = np.take_along_axis(logp, idx, axis=1)[:, 0]

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, idx, 1.0, axis=1)
        return (g[:, None] * (onehot - p), None)

    return _make(out, (logits,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-4
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks every entry of every input. Inputs should be float64; the
    relative error is |analytic - numeric| / max(|analytic|, |numeric|,
    1e-8).
    """
    if step <= 0:
        raise ConfigError(f"grad_check: step must be > 0, got {step}")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError("grad_check: f must be scalar-valued")
    out.backward()
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    worst = 0.0
    with no_grad():
        for t, ana in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + step
                hi = f(*inputs).item()
                flat[i] = saved - step
                lo = f(*inputs).item()
                flat[i] = saved
                num = (hi - lo) / (2.0 * step)
                a = float(ana.reshape(-1)[i])
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
