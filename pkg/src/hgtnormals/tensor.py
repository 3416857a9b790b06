"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every learnable computation in this package is expressed through the
operations in this module. Each op computes its forward value eagerly with
NumPy and, when a Tape is active and some input requires gradients, records
a closure mapping the output gradient to input gradients. The tape is a flat
list in execution order, so iterating it in reverse is a valid topological
order and visits every node exactly once. A fresh tape is built per forward
pass; nothing is cached between passes.

All arithmetic is 64-bit. Convolution uses the cross-correlation convention
(kernels are not flipped). ReLU takes subgradient 0 at 0.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError, ConfigurationError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """A dense float64 array that can participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions are the real surface.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of executed ops; reverse iteration backpropagates.

    Use as a context manager around a forward pass. Without an active tape
    ops run forward-only, which is how evaluation avoids autograd overhead.
    """

    def __init__(self):
        self.ops: list[tuple[tuple[Tensor, ...], Tensor, object]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad leaf reachable from loss.

        Adjoints of intermediate results live only inside this call, so
        gradients accumulate additively both across multiple uses of a tensor
        within the tape and across separate backward calls on the same tape.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        adjoint: dict[int, tuple[Tensor, np.ndarray]] = {
            id(loss): (loss, np.ones_like(loss.data))
        }
        for inputs, output, rule in reversed(self.ops):
            entry = adjoint.pop(id(output), None)
            if entry is None:
                continue
            g = entry[1]
            for tensor, piece in zip(inputs, rule(g)):
                if piece is None:
                    continue
                key = id(tensor)
                prev = adjoint.get(key)
                adjoint[key] = (tensor, piece if prev is None else prev[1] + piece)
        for tensor, g in adjoint.values():
            if not tensor.requires_grad:
                continue
            if not (g.flags["C_CONTIGUOUS"] and g.flags["OWNDATA"]):
                g = g.copy()  # materialize broadcast views; keeps 0-d shape
            tensor.grad = g if tensor.grad is None else tensor.grad + g


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss on its recording tape."""
    if loss.tape is None:
        raise ContractError("loss was not recorded on a tape")
    loss.tape.backward(loss)


def _record(inputs: tuple[Tensor, ...], out_data: np.ndarray, rule) -> Tensor:
    """Create the output tensor, recording the op if a tape is active.

    `rule(out_grad)` must return one gradient array (or None) per input, in
    order. Rules may skip work for inputs whose requires_grad is False.
    """
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        out.tape = tape
        tape.ops.append((inputs, out, rule))
        return out
    return Tensor(out_data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and broadcasting ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def rule(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record((a, b), out, rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def rule(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = -_unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record((a, b), out, rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def rule(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record((a, b), out, rule)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def rule(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _record((a, b), out, rule)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record((x,), x.data * s, lambda g: (g * s if x.requires_grad else None,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def rule(g):
        return (g * (x.data > 0.0) if x.requires_grad else None,)

    return _record((x,), out, rule)


def clamp_min(x: Tensor, c: float) -> Tensor:
    """Elementwise max(x, c); subgradient 0 where x == c."""
    out = np.maximum(x.data, c)

    def rule(g):
        return (g * (x.data > c) if x.requires_grad else None,)

    return _record((x,), out, rule)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def rule(g):
        return (g * (2.0 * x.data) if x.requires_grad else None,)

    return _record((x,), out, rule)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def rule(g):
        return (g * (0.5 / out) if x.requires_grad else None,)

    return _record((x,), out, rule)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if not x.requires_grad:
            return (None,)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape),)

    return _record((x,), out, rule)


def tmean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if not x.requires_grad:
            return (None,)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.data.shape),)

    return _record((x,), out, rule)


def amax(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Reduce-max along one axis; gradient routes to the first argmax."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def rule(g):
        if not x.requires_grad:
            return (None,)
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis=axis)
        return (gx,)

    return _record((x,), out, rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def rule(g):
        return (g.reshape(x.data.shape) if x.requires_grad else None,)

    return _record((x,), out, rule)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.data.shape}")
    out = np.ascontiguousarray(x.data.T)

    def rule(g):
        return (g.T if x.requires_grad else None,)

    return _record((x,), out, rule)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for t, p in zip(tensors, pieces))

    return _record(tuple(tensors), out, rule)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice of a matrix; gradient scatters back into place."""
    out = x.data[start:stop].copy()

    def rule(g):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _record((x,), out, rule)


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Tile a [1 x D] row to [n x D]; gradient sums back over the copies."""
    if x.data.ndim != 2 or x.data.shape[0] != 1:
        raise DimensionError(f"repeat_rows expects [1 x D], got shape {x.data.shape}")
    out = np.repeat(x.data, n, axis=0)

    def rule(g):
        return (g.sum(axis=0, keepdims=True) if x.requires_grad else None,)

    return _record((x,), out, rule)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {a.data.shape} x {b.data.shape}"
        )
    out = a.data @ b.data

    def rule(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record((a, b), out, rule)


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis of a matrix, stabilized by row-max shift."""
    if x.data.ndim != 2:
        raise DimensionError(f"row_softmax expects a matrix, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        if not x.requires_grad:
            return (None,)
        dot = np.sum(g * out, axis=1, keepdims=True)
        return (out * (g - dot),)

    return _record((x,), out, rule)


# ---------------------------------------------------------------------------
# image ops
# ---------------------------------------------------------------------------

def _conv_out_size(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    num_h = h + 2 * padding - k
    num_w = w + 2 * padding - k
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ConfigurationError(
            f"conv2d output size is not integral for input {h}x{w}, "
            f"kernel {k}, stride {stride}, padding {padding}"
        )
    return num_h // stride + 1, num_w // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """[C, Hp, Wp] -> [C*k*k, oh*ow] patch matrix (copies k*k strided views)."""
    c = xp.shape[0]
    cols = np.empty((c, k, k, oh, ow), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
    return cols.reshape(c * k * k, oh * ow)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [C,H,W] input with [F,C,k,k] kernel."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects [C,H,W] and [F,C,k,k], got {x.data.shape} and {kernel.data.shape}"
        )
    c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if ck != c or kh != kw:
        raise DimensionError(
            f"conv2d kernel {kernel.data.shape} does not match input channels {c}"
        )
    k = kh
    if k % 2 == 0:
        raise ConfigurationError(f"conv2d kernel size must be odd, got {k}")
    oh, ow = _conv_out_size(h, w, k, stride, padding)

    if padding:
        xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
        xp[:, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    wmat = kernel.data.reshape(f, c * k * k)
    out = (wmat @ _im2col(xp, k, stride, oh, ow)).reshape(f, oh, ow)

    # the patch matrix is recomputed in the rule rather than captured;
    # keeping it would pin k*k times the input per recorded conv
    def rule(g):
        gmat = g.reshape(f, oh * ow)
        gk = None
        if kernel.requires_grad:
            gk = (gmat @ _im2col(xp, k, stride, oh, ow).T).reshape(kernel.data.shape)
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(c, k, k, oh, ow)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += dcols[:, ki, kj]
            gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _record((x, kernel), out, rule)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient goes to the first max per window."""
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    windows = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(
        c, h // 2, w // 2, 4
    )
    idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        if not x.requires_grad:
            return (None,)
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        return (gx,)

    return _record((x,), out, rule)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; gradient sums each 2x2 block."""
    c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def rule(g):
        if not x.requires_grad:
            return (None,)
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _record((x,), out, rule)


def gather_pixels(fmap: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Sample a [C,H,W] feature map at integer pixel (row, col) pairs -> [n,C]."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    c, h, w = fmap.data.shape
    if rows.min(initial=0) < 0 or cols.min(initial=0) < 0 or \
       rows.max(initial=0) >= h or cols.max(initial=0) >= w:
        raise ContractError("gather_pixels index outside the feature map")
    out = np.ascontiguousarray(fmap.data[:, rows, cols].T)

    def rule(g):
        if not fmap.requires_grad:
            return (None,)
        gf = np.zeros_like(fmap.data)
        np.add.at(gf, (slice(None), rows, cols), g.T)
        return (gf,)

    return _record((fmap,), out, rule)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BNState:
    """Running mean/variance for one batchnorm layer (biased variance)."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim, dtype=np.float64)
        self.var = np.ones(dim, dtype=np.float64)

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.mean = (1.0 - BN_MOMENTUM) * self.mean + BN_MOMENTUM * mean
        self.var = (1.0 - BN_MOMENTUM) * self.var + BN_MOMENTUM * var


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState, mode: str) -> Tensor:
    """Per-feature standardization of [N x D] rows with learned affine.

    Train mode normalizes with batch statistics (N >= 2) and folds them into
    the running state; eval mode applies the stored statistics.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"batchnorm expects [N x D], got shape {x.data.shape}")
    if mode == "train":
        if x.data.shape[0] < 2:
            raise DegenerateBatchError(
                f"batchnorm in train mode needs N >= 2, got N={x.data.shape[0]}"
            )
        mu = tmean(x, axis=0)
        centered = sub(x, mu)
        var = tmean(square(centered), axis=0)
        state.update(mu.data, var.data)
        std = sqrt(add(var, Tensor(np.float64(BN_EPS))))
        xhat = div(centered, std)
    elif mode == "eval":
        mu = Tensor(state.mean)
        std = Tensor(np.sqrt(state.var + BN_EPS))
        xhat = div(sub(x, mu), std)
    else:
        raise ContractError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    return add(mul(xhat, gamma), beta)
