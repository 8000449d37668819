"""Dense / convolution / pooling / normalization kernels on Tensor.

All convolutions are stride 1 with "same" zero padding and odd kernel sides;
pooling is 2x2 with stride 2 (trailing odd row/column dropped). Layouts:
images are (B, C, H, W), dense activations (B, K).
"""

import numpy as np

from .tensor import ShapeError, Tensor, _result, add, clip_min, log, mul, tsum

PROB_FLOOR = 1e-12


def bias_add(x, b):
    """Add a per-feature bias: (B, K) + (K,) or (B, C, H, W) + (C,)."""
    if x.data.ndim == 4:
        if b.data.shape != (x.data.shape[1],):
            raise ShapeError(f"bias_add: bias {b.data.shape} does not match channels of {x.data.shape}")
        return add(x, b.reshape(-1, 1, 1))
    if x.data.ndim == 2:
        if b.data.shape != (x.data.shape[1],):
            raise ShapeError(f"bias_add: bias {b.data.shape} does not match features of {x.data.shape}")
        return add(x, b)
    raise ShapeError(f"bias_add: unsupported input shape {x.data.shape}")


def conv2d(x, w):
    """Cross-correlate (B, Cin, H, W) with filters (Cout, Cin, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and filters, got {x.data.shape} and {w.data.shape}")
    B, Cin, H, W = x.data.shape
    Cout, Cin_w, kh, kw = w.data.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv2d: input channels {x.data.shape} do not match filters {w.data.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel sides must be odd for same padding, got {w.data.shape}")
    ph, pw = kh // 2, kw // 2

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, Cin * kh * kw)
    w2 = w.data.reshape(Cout, Cin * kh * kw)
    y = (cols @ w2.T).reshape(B, H, W, Cout).transpose(0, 3, 1, 2)
    cols_saved = cols if w.requires_grad else None

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * H * W, Cout)
        if w.requires_grad:
            w.accumulate_grad((g2.T @ cols_saved).reshape(w.data.shape))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(B, H, W, Cin, kh, kw)
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + H, kj:kj + W] += dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            x.accumulate_grad(dxp[:, :, ph:ph + H, pw:pw + W])

    return _result(y, (x, w), "conv2d", backward)


def max_pool2d(x):
    """2x2 max pooling with stride 2; odd trailing row/column is dropped."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: need 4-d input, got {x.data.shape}")
    B, C, H, W = x.data.shape
    H2, W2 = H // 2, W // 2
    if H2 == 0 or W2 == 0:
        raise ShapeError(f"max_pool2d: spatial dims too small in {x.data.shape}")
    xc = x.data[:, :, :H2 * 2, :W2 * 2]
    blocks = xc.reshape(B, C, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H2, W2, 4)
    winner = blocks.argmax(axis=-1)  # first max wins ties, deterministically
    y = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        gblocks = np.zeros_like(blocks)
        np.put_along_axis(gblocks, winner[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :H2 * 2, :W2 * 2] = (
            gblocks.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H2 * 2, W2 * 2)
        )
        x.accumulate_grad(gx)

    return _result(y, (x,), "max_pool2d", backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (B, C, H, W).

    In training mode normalizes with batch statistics and updates the running
    buffers in place (biased variance throughout). In inference mode it is a
    fixed affine map of the running statistics; gradients never flow through
    the buffers themselves.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: need 4-d input, got {x.data.shape}")
    C = x.data.shape[1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(f"batch_norm: scale/shift {gamma.data.shape} do not match channels of {x.data.shape}")
    axes = (0, 2, 3)

    def per_channel(v):
        return v.reshape(1, C, 1, 1)

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - per_channel(mean)) * per_channel(inv_std)
    y = per_channel(gamma.data) * xhat + per_channel(beta.data)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if x.requires_grad:
            scale = per_channel(gamma.data * inv_std)
            if training:
                n = x.data.size // C
                gsum = per_channel(g.sum(axis=axes))
                gxhat = per_channel((g * xhat).sum(axis=axes))
                x.accumulate_grad(scale * (g - gsum / n - xhat * gxhat / n))
            else:
                x.accumulate_grad(scale * g)

    return _result(y, (x, gamma, beta), "batch_norm", backward)


def softmax(x):
    """Row-wise softmax of 2-d logits (B, K)."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax: need 2-d logits, got {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * s).sum(axis=1, keepdims=True)
            x.accumulate_grad(s * (g - inner))

    return _result(s, (x,), "softmax", backward)


def cross_entropy(probs, weights):
    """Weighted negative log likelihood, -sum(weights * log(probs)), with
    probabilities floored at 1e-12. ``weights`` may be one-hot rows or any
    non-negative target mixture; the result is a scalar sum over the batch."""
    if probs.data.shape != np.asarray(weights.data if isinstance(weights, Tensor) else weights).shape:
        raise ShapeError(f"cross_entropy: weights {np.shape(weights.data if isinstance(weights, Tensor) else weights)} "
                         f"do not match probabilities {probs.data.shape}")
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=probs.dtype))
    return mul(tsum(mul(w, log(clip_min(probs, PROB_FLOOR)))), -1.0)


def upsample2d(x, factor):
    """Nearest-neighbour upsampling by an integer factor (or (fy, fx) pair)."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2d: need 4-d input, got {x.data.shape}")
    fy, fx = (factor, factor) if isinstance(factor, int) else factor
    if fy < 1 or fx < 1:
        raise ShapeError(f"upsample2d: factors must be positive integers, got {(fy, fx)}")
    B, C, H, W = x.data.shape
    y = np.repeat(np.repeat(x.data, fy, axis=2), fx, axis=3)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(B, C, H, fy, W, fx).sum(axis=(3, 5)))

    return _result(y, (x,), "upsample2d", backward)
