"""Dense float32 tensors with reverse-mode automatic differentiation.

Storage and math are 32-bit; loss-style reductions accumulate in 64-bit
before rounding back to float32. Every differentiable operation records
its inputs and a backward rule on the output tensor; ``backward()`` replays
the recorded graph in reverse topological order and accumulates gradients
additively. Graphs are single-use: a second backward without a new forward
raises :class:`StaleGraphError`.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateVarianceError,
    LabelError,
    NumericError,
    ShapeError,
    StaleGraphError,
)

__all__ = [
    "Tensor",
    "Parameter",
    "Graph",
    "BatchNormState",
    "backward",
    "add",
    "mul",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "relu",
    "dense",
    "softmax",
    "cross_entropy",
    "conv2d",
    "batchnorm2d",
    "maxpool2d",
    "bilinear_resize",
]


class Tensor:
    """N-dimensional float32 array, optionally tracked by the autodiff graph.

    ``data`` is always a C-contiguous float32 ndarray. ``grad`` is a same-shape
    float32 buffer allocated lazily the first time a gradient reaches the
    tensor; it accumulates additively across backward flows until zeroed.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable] = None
        self._spent = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradient bookkeeping -------------------------------------------

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def assert_finite(self, what: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what}")
        return self

    def backward(self):
        backward(self)

    # -- operator sugar (used mostly by tests) ---------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_ensure_tensor(other), -1.0))


class Parameter:
    """Named trainable tensor. ``decay`` marks it for weight decay."""

    __slots__ = ("name", "tensor", "decay")

    def __init__(self, name: str, tensor: Tensor, decay: bool = True):
        self.name = name
        self.tensor = tensor
        self.tensor.requires_grad = True
        self.decay = decay

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, decay={self.decay})"


def _ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _record(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable):
    """Attach a backward rule if any parent participates in differentiation."""
    if any(p.requires_grad or p._backward_fn is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along axes numpy broadcasting expanded."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(np.float32, copy=False).reshape(shape)


class Graph:
    """Reverse-topological record of the ops that produced a tensor.

    The node list is ordered so that every tensor appears before the ops that
    consumed it; replaying it in reverse propagates gradients from the loss to
    every reachable ``requires_grad`` tensor. A graph can be run once.
    """

    __slots__ = ("nodes", "_ran")

    def __init__(self, nodes: list):
        self.nodes = nodes
        self._ran = False

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list = []
        seen = set()
        stack = [(root, False)]
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
                if id(p) not in seen and p._backward_fn is not None:
                    stack.append((p, False))
        return cls(order)

    def run(self, root: Tensor):
        if self._ran:
            raise StaleGraphError("graph already replayed")
        self._ran = True
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            fn = node._backward_fn
            if fn is None or node.grad is None:
                continue
            grads = fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
            # release the tape entry; reuse without a fresh forward is an error
            node._parents = ()
            node._backward_fn = None
            node._spent = True


def backward(loss: Tensor):
    """Propagate d(loss)/d(tensor) to every reachable requires_grad tensor."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise StaleGraphError("backward() called twice on the same forward pass")
    if loss._backward_fn is None:
        raise StaleGraphError("loss was not produced by a recorded forward pass")
    Graph.trace(loss).run(loss)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = _ensure_tensor(a)
    b = _ensure_tensor(b)
    try:
        out = Tensor.__new__(Tensor)
        _init_raw(out, a.data + b.data)
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    a = _ensure_tensor(a)
    b = _ensure_tensor(b)
    try:
        out = Tensor.__new__(Tensor)
        _init_raw(out, a.data * b.data)
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    a_data, b_data = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _record(out, (a, b), bwd)


def _init_raw(t: Tensor, data: np.ndarray):
    """Internal constructor for op outputs (skips the finite scan)."""
    t.data = np.ascontiguousarray(data, dtype=np.float32)
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward_fn = None
    t._spent = False
    return t


def _raw(data: np.ndarray) -> Tensor:
    return _init_raw(Tensor.__new__(Tensor), data)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum with 64-bit accumulation, rounded back to float32."""
    out = _raw(np.sum(x.data, axis=axis, dtype=np.float64, keepdims=keepdims))
    shape = x.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), shape).astype(np.float32),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).astype(np.float32),)

    return _record(out, (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = _raw(x.data.reshape(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    orig = x.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _record(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    out = _raw(np.transpose(x.data, axes))
    inverse = np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _record(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_ensure_tensor(t) for t in tensors]
    out = _raw(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def relu(x: Tensor) -> Tensor:
    out = _raw(np.maximum(x.data, 0.0))
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _record(out, (x,), bwd)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map: ``y[b, m] = x[b, :] . weight[m, :] + bias[m]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: x {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} != ({weight.shape[0]},)")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = _raw(y)
    x_data, w_data = x.data, weight.data

    def bwd(g):
        gx = g @ w_data
        gw = g.T @ x_data
        gb = None if bias is None else g.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction for stability."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = _raw(s)

    def bwd(g):
        inner = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _record(out, (x,), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels.

    Labels must be 0 or 1 (binary heads are all this package builds); the
    log-softmax is fused for stability and the gradient is the standard
    ``(softmax - onehot) / batch`` form.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, K] logits, got {logits.shape}")
    lab = np.asarray(labels)
    if lab.ndim != 1 or lab.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"labels length {lab.shape} does not match batch {logits.shape[0]}"
        )
    if lab.dtype.kind not in "iu":
        if not np.all(lab == lab.astype(np.int64)):
            raise LabelError("labels must be integers")
        lab = lab.astype(np.int64)
    if np.any((lab != 0) & (lab != 1)):
        raise LabelError(f"labels outside {{0,1}}: {sorted(set(lab.tolist()))}")
    b, k = logits.shape
    if np.any(lab >= k):
        raise LabelError("label index exceeds logit width")

    z = logits.data - np.max(logits.data, axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    logp = z - logsumexp
    nll = -logp[np.arange(b), lab]
    out = _raw(np.sum(nll, dtype=np.float64) / b)
    probs = np.exp(logp)

    def bwd(g):
        grad = probs.copy()
        grad[np.arange(b), lab] -= 1.0
        return (grad * (float(g) / b),)

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation over [B, Cin, H, W] with an im2col lowering.

    Output spatial extent is ``floor((H + 2*padding - kH) / stride) + 1``.
    Backward produces gradients for the input, the kernel, and the bias.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input/weight, got {x.shape}/{weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} != ({cout},)")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    if not np.all(np.isfinite(x.data)):
        raise NumericError("conv2d: non-finite input")
    if not np.all(np.isfinite(weight.data)):
        raise NumericError("conv2d: non-finite kernel")

    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # [B, C, oh, ow, kh, kw] view, then flatten into the GEMM layout
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * oh * ow, cin * kh * kw
    )
    wmat = weight.data.reshape(cout, cin * kh * kw)
    y = cols @ wmat.T
    if bias is not None:
        y = y + bias.data
    out = _raw(y.reshape(b, oh, ow, cout).transpose(0, 3, 1, 2))

    hp, wp = h + 2 * padding, w + 2 * padding

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, cout)
        gw = (gmat.T @ cols).reshape(cout, cin, kh, kw)
        gcols = (gmat @ wmat).reshape(b, oh, ow, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gx = np.zeros((b, cin, hp, wp), dtype=np.float32)
        for i in range(kh):
            hi = i + stride * oh
            for j in range(kw):
                wj = j + stride * ow
                gx[:, :, i:hi:stride, j:wj:stride] += gcols[:, :, i, j]
        if padding:
            gx = gx[:, :, padding : padding + h, padding : padding + w]
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        out_grads = (np.ascontiguousarray(gx), gw)
        return out_grads if bias is None else out_grads + (gb,)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, bwd)


class BatchNormState:
    """Running mean/variance for one batch-norm layer.

    ``momentum`` follows new = (1 - m) * old + m * batch; population (biased)
    variance is stored, matching what normalization uses.
    """

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> "BatchNormState":
        s = BatchNormState(len(self.running_mean), self.momentum, self.eps)
        s.running_mean = self.running_mean.copy()
        s.running_var = self.running_var.copy()
        return s


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
) -> Tensor:
    """Per-channel batch normalization over [B, C, H, W].

    Train mode normalizes with batch statistics and updates the running
    state; eval mode is an affine map using the stored statistics. Both are
    differentiable w.r.t. input, gamma, and beta.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    eps = state.eps

    if mode == "train":
        n = b * h * w
        if n < 2:
            raise DegenerateVarianceError(
                f"batch variance undefined for {n} element(s) per channel"
            )
        mu = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.astype(np.float64).var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(np.float32)
        state.running_var = ((1 - m) * state.running_var + m * var).astype(np.float32)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(np.float32)
        mu32 = mu.astype(np.float32)
        xhat = (x.data - mu32[None, :, None, None]) * inv_std[None, :, None, None]
        out = _raw(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])
        g_data = gamma.data

        def bwd(g):
            ggamma = np.sum(g * xhat, axis=(0, 2, 3))
            gbeta = np.sum(g, axis=(0, 2, 3))
            gxhat = g * g_data[None, :, None, None]
            mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv_std[None, :, None, None] * (gxhat - mean_g - xhat * mean_gx)
            return gx.astype(np.float32), ggamma, gbeta

        return _record(out, (x, gamma, beta), bwd)

    inv_std = (1.0 / np.sqrt(state.running_var + eps)).astype(np.float32)
    xhat = (x.data - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = _raw(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])
    g_data = gamma.data

    def bwd_eval(g):
        ggamma = np.sum(g * xhat, axis=(0, 2, 3))
        gbeta = np.sum(g, axis=(0, 2, 3))
        gx = g * (g_data * inv_std)[None, :, None, None]
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd_eval)


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Window maximum over [B, C, H, W]; ties route to the first position
    in row-major window order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects [B,C,H,W], got {x.shape}")
    stride = k if stride is None else stride
    b, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} exceeds input {h}x{w}")
    if stride < 1:
        raise ShapeError(f"maxpool2d: stride must be >= 1, got {stride}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = np.ascontiguousarray(win).reshape(b, c, oh, ow, k * k)
    idx = flat.argmax(axis=-1)
    out = _raw(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])

    def bwd(g):
        if stride == k and oh * k == h and ow * k == w:
            # non-overlapping tiling: scatter via put_along_axis, no atomics
            gwin = np.zeros((b, c, oh, ow, k * k), dtype=np.float32)
            np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
            gx = (
                gwin.reshape(b, c, oh, ow, k, k)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c, h, w)
            )
            return (np.ascontiguousarray(gx),)
        gx = np.zeros((b, c, h * w), dtype=np.float32)
        rows = (np.arange(oh) * stride)[:, None] + (idx // k)
        cols = (np.arange(ow) * stride)[None, :] + (idx % k)
        pos = rows * w + cols  # [b, c, oh, ow]
        np.add.at(
            gx,
            (
                np.arange(b)[:, None, None, None],
                np.arange(c)[None, :, None, None],
                pos,
            ),
            g,
        )
        return (gx.reshape(b, c, h, w),)

    return _record(out, (x,), bwd)


def bilinear_resize(src, out_h: int, out_w: int):
    """Corner-aligned bilinear interpolation of a 2-D map.

    Sampling uses src = dst * (H - 1) / (out_h - 1); a degenerate output
    extent of 1 samples index 0. Not differentiable (interpretation only).
    Accepts a Tensor or ndarray and returns the same container type.
    """
    is_tensor = isinstance(src, Tensor)
    a = src.data if is_tensor else np.asarray(src, dtype=np.float32)
    if a.ndim != 2:
        raise ShapeError(f"bilinear_resize expects a 2-d map, got {a.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: bad target size {out_h}x{out_w}")
    h, w = a.shape
    ys = np.arange(out_h) * ((h - 1) / (out_h - 1)) if out_h > 1 else np.zeros(1)
    xs = np.arange(out_w) * ((w - 1) / (out_w - 1)) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[:, None]
    fx = (xs - x0).astype(np.float32)[None, :]
    top = a[np.ix_(y0, x0)] * (1 - fx) + a[np.ix_(y0, x1)] * fx
    bot = a[np.ix_(y1, x0)] * (1 - fx) + a[np.ix_(y1, x1)] * fx
    res = (top * (1 - fy) + bot * fy).astype(np.float32)
    return _raw(res) if is_tensor else res
