"""Differentiable operations on Tensors.

Layout convention is NCHW for images and BEV rasters. All ops are pure; the
backward closures accumulate into ``.grad`` buffers via ``accumulate_grad``.

The stride-1 conv kernel avoids im2col entirely: with a zero-filled border,
a k x k convolution is nine (or k*k) skinny GEMMs on *contiguous* spans of
the flattened padded image. Shifted spans may run past one batch image into
the next image's top padding, which is zero, so no cross-contamination
occurs. This keeps the hot path allocation-free and BLAS-bound.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, accumulate_grad, make_op

__all__ = [
    "add",
    "mul",
    "scale",
    "matmul",
    "relu",
    "sigmoid",
    "softmax",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "conv2d",
    "max_pool2x2",
    "upsample2x",
    "batch_norm",
    "bce_with_logits",
]


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        accumulate_grad(a, _unbroadcast(g, a.shape))
        accumulate_grad(b, _unbroadcast(g, b.shape))

    return make_op(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        accumulate_grad(a, _unbroadcast(g * b.data, a.shape))
        accumulate_grad(b, _unbroadcast(g * a.data, b.shape))

    return make_op(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    out = a.data * s

    def backward(g):
        accumulate_grad(a, g * s)

    return make_op(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner dims disagree: {a.shape[-1]} (lhs) vs {b.shape[-2]} (rhs)"
        )
    out = a.data @ b.data

    def backward(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        accumulate_grad(a, _unbroadcast(g @ bt, a.shape))
        accumulate_grad(b, _unbroadcast(at @ g, b.shape))

    return make_op(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        accumulate_grad(x, g * (x.data > 0))

    return make_op(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        accumulate_grad(x, g * out * (1.0 - out))

    return make_op(out, (x,), backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.ndim}")
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        accumulate_grad(x, y * (g - dot))

    return make_op(y, (x,), backward)


def sum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            accumulate_grad(x, np.broadcast_to(g, x.shape).copy())
        else:
            accumulate_grad(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return make_op(out, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        accumulate_grad(x, g.reshape(x.shape))

    return make_op(out, (x,), backward)


def transpose(x: Tensor, perm) -> Tensor:
    perm = tuple(perm)
    out = np.ascontiguousarray(x.data.transpose(perm))
    inv = np.argsort(perm)

    def backward(g):
        accumulate_grad(x, np.ascontiguousarray(g.transpose(inv)))

    return make_op(out, (x,), backward)


def concat(xs, axis: int) -> Tensor:
    xs = list(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    sizes = [t.shape[axis] for t in xs]
    offs = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(xs, offs[:-1], offs[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accumulate_grad(t, g[tuple(idx)])

    return make_op(out, tuple(xs), backward)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[B,Cin,H,W] with w[Cout,Cin,kh,kw].

    Output spatial size is floor((H + 2*padding - k)/stride) + 1 per axis.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be [B,Cin,H,W], got rank {x.ndim}")
    if w.ndim != 4:
        raise ValueError(f"conv2d weight must be [Cout,Cin,kh,kw], got rank {w.ndim}")
    B, Cin, H, W = x.shape
    Cout, Cw, kh, kw = w.shape
    if Cw != Cin:
        raise ValueError(f"conv2d channel mismatch: input Cin={Cin}, weight Cin={Cw}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}"
        )
    if b is not None and b.shape != (Cout,):
        raise ValueError(f"conv2d bias must be [Cout]={Cout}, got {b.shape}")
    if stride == 1:
        return _conv2d_shiftflat(x, w, b, padding)
    return _conv2d_im2col(x, w, b, stride, padding)


def _conv2d_shiftflat(x: Tensor, w: Tensor, b: Tensor | None, padding: int) -> Tensor:
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    OH, OW = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1
    PH, PW = H + 2 * padding, W + 2 * padding
    span = (OH - 1) * PW + OW  # flat length covering all valid outputs for one tap

    xp = np.zeros((B, Cin, PH, PW), x.dtype)
    if padding:
        xp[:, :, padding : padding + H, padding : padding + W] = x.data
    else:
        xp[...] = x.data
    xf = xp.reshape(B, Cin, PH * PW)

    acc = np.zeros((B, Cout, span), x.dtype)
    tmp = np.empty_like(acc)
    taps = [(ki, kj) for ki in range(kh) for kj in range(kw)]
    for ki, kj in taps:
        off = ki * PW + kj
        np.matmul(np.ascontiguousarray(w.data[:, :, ki, kj]), xf[:, :, off : off + span], out=tmp)
        acc += tmp
    # drop the wrap garbage between rows
    out = np.ascontiguousarray(
        np.lib.stride_tricks.as_strided(
            acc,
            (B, Cout, OH, OW),
            (acc.strides[0], acc.strides[1], PW * acc.strides[2], acc.strides[2]),
        )
    )
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        # dy placed in a full padded-size buffer; wrap and pad positions stay
        # zero, so shifted reads never pick up a neighbouring row's values and
        # both flats below share the same per-image stride.
        gf = np.zeros((B, Cout, PH * PW), g.dtype)
        gv = np.lib.stride_tricks.as_strided(
            gf, (B, Cout, OH, OW), (gf.strides[0], gf.strides[1], PW * gf.strides[2], gf.strides[2])
        )
        gv[...] = g
        if w.requires_grad or w._backward is not None:
            # channel-major flats allow one contiguous GEMM per tap; shifted
            # reads that cross into the next image hit its top padding (zero)
            gcm = np.ascontiguousarray(gf.transpose(1, 0, 2)).reshape(Cout, B * PH * PW)
            xcm = np.ascontiguousarray(xf.transpose(1, 0, 2)).reshape(Cin, B * PH * PW)
            dw = np.empty_like(w.data)
            for ki, kj in taps:
                off = ki * PW + kj
                n = B * PH * PW - off
                dw[:, :, ki, kj] = gcm[:, :n] @ xcm[:, off : off + n].T
            accumulate_grad(w, dw)
        if x.requires_grad or x._backward is not None:
            dxf = np.zeros((B, Cin, PH * PW), g.dtype)
            t2 = np.empty((B, Cin, span), g.dtype)
            for ki, kj in taps:
                off = ki * PW + kj
                np.matmul(np.ascontiguousarray(w.data[:, :, ki, kj].T), gf[:, :, :span], out=t2)
                dxf[:, :, off : off + span] += t2
            dxp = dxf.reshape(B, Cin, PH, PW)
            if padding:
                dx = dxp[:, :, padding : padding + H, padding : padding + W]
            else:
                dx = dxp
            accumulate_grad(x, np.ascontiguousarray(dx))
        if b is not None:
            accumulate_grad(b, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, backward)


def _conv2d_im2col(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: int) -> Tensor:
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    OH = (H + 2 * padding - kh) // stride + 1
    OW = (W + 2 * padding - kw) // stride + 1

    xp = np.zeros((B, Cin, H + 2 * padding, W + 2 * padding), x.dtype)
    xp[:, :, padding : padding + H, padding : padding + W] = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # B,Cin,OH,OW,kh,kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * OH * OW, Cin * kh * kw)
    wmat = w.data.reshape(Cout, Cin * kh * kw)
    out = (cols @ wmat.T).reshape(B, OH, OW, Cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * OH * OW, Cout)
        if w.requires_grad or w._backward is not None:
            accumulate_grad(w, (g2.T @ cols).reshape(w.shape))
        if x.requires_grad or x._backward is not None:
            dxp = np.zeros_like(xp)
            gb = g2.reshape(B, OH, OW, Cout)
            for ki in range(kh):
                for kj in range(kw):
                    piece = np.tensordot(gb, w.data[:, :, ki, kj], axes=([3], [0]))
                    dxp[:, :, ki : ki + stride * OH : stride, kj : kj + stride * OW : stride] += (
                        piece.transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, padding : padding + H, padding : padding + W]
            accumulate_grad(x, np.ascontiguousarray(dx))
        if b is not None:
            accumulate_grad(b, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, backward)


# ---------------------------------------------------------------------------
# Pooling / resampling
# ---------------------------------------------------------------------------


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route gradient to the first element."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2x2 needs even spatial dims, got {H}x{W}")
    xr = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(xr).reshape(B, C, H // 2, W // 2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        accumulate_grad(x, np.ascontiguousarray(dx).reshape(B, C, H, W))

    return make_op(np.ascontiguousarray(out), (x,), backward)


def _up2_taps(n: int):
    """Bilinear x2 taps with half-pixel centers: out[2i] <- (.25, i-1)+(.75, i),
    out[2i+1] <- (.75, i)+(.25, i+1), borders clamped."""
    lo = np.maximum(np.arange(n) - 1, 0)
    hi = np.minimum(np.arange(n) + 1, n - 1)
    return lo, hi


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear upsampling by 2 on the last two axes (NCHW)."""
    B, C, H, W = x.shape
    d = x.data
    loH, hiH = _up2_taps(H)
    loW, hiW = _up2_taps(W)
    t = np.empty((B, C, 2 * H, W), d.dtype)
    t[:, :, 0::2] = 0.75 * d + 0.25 * d[:, :, loH]
    t[:, :, 1::2] = 0.75 * d + 0.25 * d[:, :, hiH]
    out = np.empty((B, C, 2 * H, 2 * W), d.dtype)
    out[:, :, :, 0::2] = 0.75 * t + 0.25 * t[:, :, :, loW]
    out[:, :, :, 1::2] = 0.75 * t + 0.25 * t[:, :, :, hiW]

    def backward(g):
        # adjoint of the two 1-D interpolation passes, applied in reverse
        gw = 0.75 * (g[:, :, :, 0::2] + g[:, :, :, 1::2])
        np.add.at(gw, (slice(None), slice(None), slice(None), loW), 0.25 * g[:, :, :, 0::2])
        np.add.at(gw, (slice(None), slice(None), slice(None), hiW), 0.25 * g[:, :, :, 1::2])
        gh = 0.75 * (gw[:, :, 0::2] + gw[:, :, 1::2])
        np.add.at(gh, (slice(None), slice(None), loH), 0.25 * gw[:, :, 0::2])
        np.add.at(gh, (slice(None), slice(None), hiH), 0.25 * gw[:, :, 1::2])
        accumulate_grad(x, gh)

    return make_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# Normalization / losses
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (B,H,W) of an NCHW tensor.

    Running statistics are plain arrays updated in place in training mode.
    """
    B, C, H, W = x.shape
    d = x.data
    if training:
        mu = d.mean(axis=(0, 2, 3))
        var = d.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(d.dtype)
        var = running_var.astype(d.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
        accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        gx = g * gamma.data[None, :, None, None]
        if training:
            n = B * H * W
            s1 = gx.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gx * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (gx - s1 / n - xhat * s2 / n) * inv[None, :, None, None]
        else:
            dx = gx * inv[None, :, None, None]
        accumulate_grad(x, dx)

    return make_op(out, (x, gamma, beta), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, stable for large |z|."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ValueError(f"bce targets shape {y.shape} != logits shape {z.shape}")
    out = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        # d/dz = sigmoid(z) - y
        s = np.empty_like(z)
        pos = z >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        s[~pos] = ez / (1.0 + ez)
        accumulate_grad(logits, g * (s - y))

    return make_op(out, (logits,), backward)
