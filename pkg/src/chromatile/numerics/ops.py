"""Differentiable operations over Tensors.

Every public function here computes its forward result with plain numpy and,
when an active tape exists and some input requires gradients, records a
backward closure on that tape.  Backward closures never mutate the incoming
gradient array.  Forward results are bit-deterministic for identical inputs:
summation orders are fixed by the numpy reduction/matmul calls used.

Convolution layout: activations are (N, C, H, W); conv weights are
(out_channels, in_channels, kh, kw); transposed-conv weights are
(in_channels, out_channels, kh, kw).  Convolution is cross-correlation (no
kernel flip).  ``conv_transpose2d`` is the exact adjoint of ``conv2d`` with
the same stride/padding, which makes the inner-product identity
<conv2d(x, w), y> == <x, conv_transpose2d(y, w)> hold by construction.
"""

from dataclasses import dataclass, field

import numpy as np

from chromatile.errors import UsageError
from chromatile.numerics.tensor import Tensor, active_tape


def _as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if isinstance(like, Tensor) else None
    if isinstance(value, (int, float)):
        return Tensor(np.asarray(value, dtype=dtype or np.float64))
    return Tensor(value)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    if isinstance(b, Tensor):
        return _as_tensor(a, b), b
    return _as_tensor(a), _as_tensor(b)


def _record(out_data, inputs, backward_fn):
    """Wrap ``out_data``; record ``backward_fn`` if tracking applies.

    ``inputs`` is a sequence of Tensors (or None for constant slots);
    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input slot, in order.
    """
    tape = active_tape()
    track = tape is not None and any(
        t is not None and t.requires_grad for t in inputs
    )
    out = Tensor(out_data, requires_grad=track)
    if track:
        input_ids = [
            tape._register_leaf(t) if (t is not None and t.requires_grad) else None
            for t in inputs
        ]
        out.node_id = tape._record(input_ids, backward_fn)
        out.tape = tape
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)
    da, db = a.data, b.data

    def backward(g):
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

    return _record(da * db, (a, b), backward)


def abs_(a):
    a = _as_tensor(a)
    sign = np.sign(a.data)  # subgradient 0 at 0

    def backward(g):
        return (g * sign,)

    return _record(np.abs(a.data), (a,), backward)


def sum_(a):
    a = _as_tensor(a)
    shape = a.data.shape

    def backward(g):
        return (np.broadcast_to(g, shape),)

    return _record(np.sum(a.data), (a,), backward)


def mean_(a):
    a = _as_tensor(a)
    shape = a.data.shape
    n = a.data.size

    def backward(g):
        return (np.broadcast_to(g / n, shape),)

    return _record(np.mean(a.data), (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _record(a.data.reshape(shape), (a,), backward)


def matmul(a, b):
    """2-D matrix product (n, d) @ (d, k)."""
    a, b = _pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise UsageError("matmul expects 2-D operands")
    da, db = a.data, b.data

    def backward(g):
        return g @ db.T, da.T @ g

    return _record(da @ db, (a, b), backward)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight + bias`` for (n, d) inputs and (d, k) weight."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ------------------------------------------------------------- nonlinearities


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient 0 at 0

    def backward(g):
        return (g * mask,)

    return _record(np.maximum(a.data, 0), (a,), backward)


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on a raw array."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    ex = np.exp(x[~positive])
    out[~positive] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    s = sigmoid_array(a.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _record(s, (a,), backward)


def softplus(a):
    """log(1 + exp(x)) computed as max(x, 0) + log1p(exp(-|x|))."""
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    s = sigmoid_array(x)

    def backward(g):
        return (g * s,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------- convolution


def _check_conv_geometry(extent, kernel, stride, padding, label):
    span = extent + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise UsageError(
            f"{label}: extent {extent} with kernel {kernel}, stride {stride}, "
            f"padding {padding} does not tile evenly"
        )
    return span // stride + 1


def _pad_spatial(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp, kh, kw, stride):
    """(N, C, Hp, Wp) -> (N, C*kh*kw, Ho*Wo) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(dcols, n, c, hp, wp, kh, kw, stride, ho, wo):
    """Adjoint of ``_im2col``: scatter-add patch columns back onto the grid."""
    d6 = dcols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d6[
                :, :, i, j
            ]
    return out


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    """Strided 2-D cross-correlation.

    x: (N, Cin, H, W); weight: (Cout, Cin, kh, kw); bias: (Cout,) or None.
    Output extent (H + 2*padding - kh)/stride + 1 must be a positive integer.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight, x)
    bias = _as_tensor(bias, x) if bias is not None else None
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise UsageError("conv2d expects 4-D input and weight")
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise UsageError(
            f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}"
        )
    if bias is not None and bias.data.shape != (cout,):
        raise UsageError("conv2d bias must have shape (out_channels,)")
    ho = _check_conv_geometry(h, kh, stride, padding, "conv2d height")
    wo = _check_conv_geometry(w, kw, stride, padding, "conv2d width")

    xp = _pad_spatial(x.data, padding)
    cols, _, _ = _im2col(xp, kh, kw, stride)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1)
    out = out.reshape(n, cout, ho, wo)

    need_x = x.requires_grad
    need_w = weight.requires_grad
    need_b = bias is not None and bias.requires_grad
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        dw = db = dx = None
        if need_w:
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            dw = dw.reshape(cout, cin, kh, kw)
        if need_b:
            db = g.sum(axis=(0, 2, 3))
        if need_x:
            dcols = np.matmul(w2.T, g2)
            dxp = _col2im(dcols, n, cin, hp, wp, kh, kw, stride, ho, wo)
            dx = (
                dxp[:, :, padding : hp - padding, padding : wp - padding]
                if padding
                else dxp
            )
        return dx, dw, db

    return _record(out, (x, weight, bias), backward)


def conv_transpose2d(x, weight, stride: int = 1, padding: int = 0):
    """Adjoint of ``conv2d`` with the same stride/padding (fractional stride).

    x: (N, Cin, H, W); weight: (Cin, Cout, kh, kw).
    Output extent is (H - 1)*stride - 2*padding + kh, which must be >= 1.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight, x)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise UsageError("conv_transpose2d expects 4-D input and weight")
    n, cin, h, w = x.data.shape
    cin_w, cout, kh, kw = weight.data.shape
    if cin != cin_w:
        raise UsageError(
            f"conv_transpose2d channel mismatch: input has {cin}, weight expects {cin_w}"
        )
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise UsageError(
            f"conv_transpose2d output extent {ho}x{wo} is not positive"
        )

    w2 = weight.data.reshape(cin, cout * kh * kw)
    x2 = x.data.reshape(n, cin, h * w)
    dcols = np.matmul(w2.T, x2)
    hp, wp = ho + 2 * padding, wo + 2 * padding
    full = _col2im(dcols, n, cout, hp, wp, kh, kw, stride, h, w)
    out = full[:, :, padding : hp - padding, padding : wp - padding] if padding else full

    need_x = x.requires_grad
    need_w = weight.requires_grad

    def backward(g):
        gp = _pad_spatial(g, padding)
        cols_g, _, _ = _im2col(gp, kh, kw, stride)
        dx = dw = None
        if need_x:
            dx = np.matmul(w2, cols_g).reshape(n, cin, h, w)
        if need_w:
            dw = np.matmul(x2, cols_g.transpose(0, 2, 1)).sum(axis=0)
            dw = dw.reshape(cin, cout, kh, kw)
        return dx, dw

    return _record(out, (x, weight), backward)


# ------------------------------------------------------------------- pooling


def max_pool2d(x, kernel: int, stride: int):
    """Max pooling; ties within a window route gradient to the first maximum
    in row-major order.  (H - kernel) must be divisible by stride."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise UsageError("max_pool2d expects a 4-D input")
    n, c, h, w = x.data.shape
    ho = _check_conv_geometry(h, kernel, stride, 0, "max_pool2d height")
    wo = _check_conv_geometry(w, kernel, stride, 0, "max_pool2d width")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)  # first maximum wins on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        ai, aj = np.divmod(arg, kernel)
        ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=True)
        rows = hi * stride + ai
        cols = wi * stride + aj
        flat_idx = (((ni * c + ci) * h + rows) * w + cols).ravel()
        dx = np.zeros(n * c * h * w, dtype=g.dtype)
        np.add.at(dx, flat_idx, g.ravel())
        return (dx.reshape(n, c, h, w),)

    return _record(out, (x,), backward)


def global_avg_pool(x):
    """Spatial mean: (N, C, H, W) -> (N, C)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise UsageError("global_avg_pool expects a 4-D input")
    n, c, h, w = x.data.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)),)

    return _record(x.data.mean(axis=(2, 3)), (x,), backward)


def upsample_nearest(x, factor: int = 2):
    """Nearest-neighbour spatial upsampling by an integer factor."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise UsageError("upsample_nearest expects a 4-D input")
    if factor < 1:
        raise UsageError("upsample_nearest factor must be >= 1")
    if factor == 1:
        def backward_id(g):
            return (g,)

        return _record(x.data.copy(), (x,), backward_id)
    n, c, h, w = x.data.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _record(out, (x,), backward)


# -------------------------------------------------------------- normalization


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (updated in train mode)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            mean=np.zeros(channels, dtype=dtype),
            var=np.ones(channels, dtype=dtype),
        )

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy())


def batch_norm2d(
    x,
    gamma,
    beta,
    state: BatchNormState,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with biased batch statistics and folds them into
    the running state as ``running = (1 - momentum)*running + momentum*batch``
    (the running variance is the biased batch variance as well).  Eval mode
    normalizes with the running state and leaves it untouched.  Train mode
    requires at least two values per channel, otherwise the variance is
    meaningless.
    """
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, x)
    beta = _as_tensor(beta, x)
    if x.data.ndim != 4:
        raise UsageError("batch_norm2d expects a 4-D input")
    if mode not in ("train", "eval"):
        raise UsageError(f"batch_norm2d mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.data.shape
    m = n * h * w

    if mode == "train":
        if m < 2:
            raise UsageError(
                "batch_norm2d train mode needs at least 2 values per channel"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.mean[...] = (1.0 - momentum) * state.mean + momentum * mean
        state.var[...] = (1.0 - momentum) * state.var + momentum * var
    else:
        mean = state.mean
        var = state.var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    gamma_data = gamma.data
    train = mode == "train"

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma_data[None, :, None, None]
        if train:
            sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (
                inv_std[None, :, None, None]
                / m
                * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
            )
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), backward)
