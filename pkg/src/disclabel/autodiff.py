"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive the hourglass network needs lives here:
convolution, 2x2 max-pooling, nearest-neighbor upsampling, relu/sigmoid,
instance normalization, broadcast arithmetic, concatenation and reduction.

Tensors are eager: an op computes its forward value immediately and
records its parents plus a backward closure, so the computation graph is
the implicit DAG of ``Tensor._parents`` links, topologically ordered by
construction. Calling :meth:`Tensor.backward` on a scalar output walks
that DAG once in reverse and accumulates ``.grad`` on every tensor
created with ``requires_grad=True``.

Data are float32 by default; gradient-check shadow paths run the same
ops in float64 by simply feeding float64 arrays (ops preserve dtype).
Tensors are immutable after construction as far as the graph is
concerned; reading them from multiple threads is safe, while graph
construction and backward are single-threaded per graph.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEFAULT_DTYPE = np.float32

# When True, every forward op asserts its output is finite. Costs time;
# enabled by tests and debuggable runs via set_debug(True).
_DEBUG_FINITE = False

_grad_state = threading.local()


def set_debug(enabled: bool) -> None:
    """Toggle per-op finite-value assertions (debug builds)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    prev = _grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite values in forward output")


class Tensor:
    """N-dimensional float array node in the differentiation graph.

    Attributes:
        data: the forward value, a row-major numpy array (float32/float64).
        requires_grad: whether backward should accumulate into ``grad``.
        grad: gradient buffer with the same shape as ``data``, populated
            by backward; ``None`` until then.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_backward_done")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Convenience operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    __radd__ = __add__
    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def backward(self) -> None:
        """Seed a backward pass from this scalar and fill leaf gradients.

        Raises:
            ValueError: if this tensor is not a scalar (size 1).
            RuntimeError: on a repeated backward without resetting grads.
        """
        if self.data.size != 1:
            raise ValueError(f"backward seed must be a scalar, got shape {self.data.shape}")
        if self._backward_done:
            raise RuntimeError("backward already ran on this graph; zero_grad and rebuild first")
        self._backward_done = True

        topo = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in topo:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward_fn is not None:
                node._backward_fn(g, grads)


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order of the DAG rooted at ``root`` (iterative)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _needs_graph(*tensors: Tensor) -> bool:
    return _grad_enabled() and any(t.requires_grad or t._backward_fn is not None for t in tensors)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    if _needs_graph(*parents):
        return Tensor(data, _parents=parents, _backward_fn=backward_fn)
    return Tensor(data)


def _accum(grads: dict, node: Tensor, g: np.ndarray) -> None:
    key = id(node)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward_fn(g, grads):
        _accum(grads, a, _unbroadcast(g, a.data.shape))
        _accum(grads, b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward_fn(g, grads):
        _accum(grads, a, _unbroadcast(g, a.data.shape))
        _accum(grads, b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), backward_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward_fn(g, grads):
        _accum(grads, a, _unbroadcast(g * b.data, a.data.shape))
        _accum(grads, b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward_fn, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def backward_fn(g, grads):
        _accum(grads, a, g * s)

    return _make(out, (a,), backward_fn, "scale")


def tensor_sum(a: Tensor) -> Tensor:
    out = a.data.sum()

    def backward_fn(g, grads):
        _accum(grads, a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))

    return _make(np.asarray(out), (a,), backward_fn, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward_fn(g, grads):
        _accum(grads, a, g.reshape(a.data.shape))

    return _make(out, (a,), backward_fn, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g, grads):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(grads, t, g[tuple(idx)])

    return _make(out, tuple(tensors), backward_fn, "concat")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward_fn(g, grads):
        _accum(grads, a, g * (a.data > 0))

    return _make(out, (a,), backward_fn, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # piecewise-stable form; clamp keeps the output strictly inside (0,1)
    # even where float exp saturates
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)
    info = np.finfo(x.dtype)
    out = np.clip(out, info.tiny, 1.0 - info.epsneg)

    def backward_fn(g, grads):
        _accum(grads, a, g * out * (1.0 - out))

    return _make(out, (a,), backward_fn, "sigmoid")


def activation(a: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity, ``kind`` in {"relu", "sigmoid"}."""
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_out_dim(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Gather kxk patches of x (N,C,H,W) into a (N*OH*OW, C*k*k) matrix."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    sn, sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(n, c, oh, ow, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
    )
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * k * k)


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add patch gradients back to the input layout (inverse of _im2col)."""
    n, c, h, w = x_shape
    oh = _conv_out_dim(h, k, stride, padding)
    ow = _conv_out_dim(w, k, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    dx = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    patches = cols.reshape(n, oh, ow, c, k, k).transpose(3, 4, 5, 0, 1, 2)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += patches[
                :, i, j
            ].transpose(1, 0, 2, 3)
    if padding:
        dx = dx[:, :, padding : padding + h, padding : padding + w]
    return dx


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of a batched input with a 4D kernel.

    Args:
        x: input of shape (N, C_in, H, W).
        kernel: weights of shape (C_out, C_in, k, k) with k odd.
        stride: positive step between patch positions.
        padding: zero-padding added on each spatial border.

    Returns:
        Tensor of shape (N, C_out, OH, OW) where
        OH = floor((H + 2*padding - k)/stride) + 1, differentiable with
        respect to both ``x`` and ``kernel``.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be 4D (N,C,H,W), got shape {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be 4D (C_out,C_in,k,k), got shape {kernel.data.shape}")
    co, ci, kh, kw = kernel.data.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got {kh}x{kw}")
    if kh % 2 != 1:
        raise ValueError(f"conv2d kernel size must be odd, got {kh}")
    if x.data.shape[1] != ci:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.data.shape[1]} channels, kernel expects {ci}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, _, h, w = x.data.shape
    oh = _conv_out_dim(h, kh, stride, padding)
    ow = _conv_out_dim(w, kh, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d output would be empty for input {h}x{w}, kernel {kh}, stride {stride}, padding {padding}"
        )

    cols = _im2col(x.data, kh, stride, padding)
    wmat = kernel.data.reshape(co, ci * kh * kw)
    out = (cols @ wmat.T).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)

    def backward_fn(g, grads):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
        _accum(grads, kernel, (gmat.T @ cols).reshape(kernel.data.shape))
        dcols = gmat @ wmat
        _accum(grads, x, _col2im(dcols, x.data.shape, kh, stride, padding))

    return _make(np.ascontiguousarray(out), (x, kernel), backward_fn, "conv2d")


def conv2d_reference(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Naive six-nested-loop convolution, kept as the test oracle for conv2d."""
    n, ci, h, w = x.shape
    co, ci_k, kh, kw = kernel.shape
    assert ci == ci_k
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = _conv_out_dim(h, kh, stride, padding)
    ow = _conv_out_dim(w, kw, stride, padding)
    out = np.zeros((n, co, oh, ow), dtype=np.float64)
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += float(x[b, c, i * stride + di, j * stride + dj]) * float(
                                    kernel[o, c, di, dj]
                                )
                    out[b, o, i, j] = acc
    return out.astype(x.dtype)


# ---------------------------------------------------------------------------
# pooling / upsampling
# ---------------------------------------------------------------------------


def maxpool2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 max-pooling with stride 2.

    Requires even spatial dims. Ties inside a window break toward the
    first occurrence in row-major order, so backward routes each window's
    gradient to exactly one deterministic position.

    Returns:
        (pooled tensor of shape (N,C,H/2,W/2), absolute argmax indices of
        shape (N,C,H/2,W/2,2) holding (row, col) into the input).
    """
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2 input must be 4D (N,C,H,W), got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 requires even spatial dims, got {h}x{w}; pad the input first")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    flat_idx = windows.argmax(axis=-1)  # first max wins ties (row-major window order)
    out = np.take_along_axis(windows, flat_idx[..., None], axis=-1)[..., 0]

    rows = (np.arange(h2)[None, None, :, None] * 2 + flat_idx // 2).astype(np.int64)
    cols = (np.arange(w2)[None, None, None, :] * 2 + flat_idx % 2).astype(np.int64)
    indices = np.stack([np.broadcast_to(rows, flat_idx.shape), np.broadcast_to(cols, flat_idx.shape)], axis=-1)

    def backward_fn(g, grads):
        dwin = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(dwin, flat_idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accum(grads, x, dx)

    return _make(np.ascontiguousarray(out), (x,), backward_fn, "maxpool2"), indices


def upsample_nearest2(x: Tensor) -> Tensor:
    """Double H and W by pixel replication; backward sums each 2x2 block."""
    if x.data.ndim != 4:
        raise ValueError(f"upsample_nearest2 input must be 4D (N,C,H,W), got shape {x.data.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.data.shape

    def backward_fn(g, grads):
        _accum(grads, x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out, (x,), backward_fn, "upsample_nearest2")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over spatial dims with affine.

    Stable at batch size 4 where batch statistics would be noisy; same
    interface as a batch-norm layer.
    """
    if x.data.ndim != 4:
        raise ValueError(f"instance_norm input must be 4D (N,C,H,W), got shape {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"instance_norm affine params must have shape ({c},), got {gamma.data.shape} and {beta.data.shape}"
        )
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward_fn(g, grads):
        _accum(grads, beta, g.sum(axis=(0, 2, 3)))
        _accum(grads, gamma, (g * xhat).sum(axis=(0, 2, 3)))
        dxhat = g * gamma.data.reshape(1, c, 1, 1)
        m1 = dxhat.mean(axis=(2, 3), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
        _accum(grads, x, inv * (dxhat - m1 - xhat * m2))

    return _make(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward_fn, "instance_norm")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_difference_grad(
    f: Callable[[Sequence[np.ndarray]], float],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-3,
) -> list[np.ndarray]:
    """Central finite differences of scalar ``f`` w.r.t. each input, in float64."""
    inputs64 = [np.asarray(a, dtype=np.float64).copy() for a in inputs]
    grads = []
    for arr in inputs64:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(inputs64)
            flat[i] = orig - eps
            fm = f(inputs64)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Max over elements of |a-n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
