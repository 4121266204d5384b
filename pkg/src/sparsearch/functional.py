"""Differentiable primitives over Tensor.

Each primitive computes its output with vectorized numpy (convolutions via
sliding-window views), then records a VJP closure on the active tape.

VJP contract: returned arrays are freshly allocated, or views (detected via
.base and copied by the tape before accumulation); a vjp may hand back the
incoming adjoint itself for at most one input.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, needs_grad, record


def _out(data):
    assert np.isfinite(data).all(), "non-finite values in forward pass"
    return Tensor(data)


def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    out = _out(a.data + b.data)
    return record(out, (a, b), lambda g: (g, g.copy()))


def mul(a, b):
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    out = _out(a.data * b.data)
    return record(out, (a, b), lambda g: (g * b.data, g * a.data))


def relu(x):
    out = _out(np.maximum(x.data, 0.0))
    mask = x.data > 0
    return record(out, (x,), lambda g: (g * mask,))


def sum_all(x):
    out = _out(np.asarray(x.data.sum()))
    shape = x.data.shape
    return record(out, (x,), lambda g: (np.broadcast_to(g, shape) * 1.0,))


def _conv1x1(x, w):
    # pure channel mixing: one BLAS contraction
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    wmat = w.data.reshape(cout, cin)
    out = _out(np.tensordot(x.data, wmat, axes=([1], [1])).transpose(0, 3, 1, 2).copy())
    wg = needs_grad(w)

    def vjp(g):
        dw = (np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3])).reshape(w.shape)
              if wg else None)
        dx = np.tensordot(g, wmat, axes=([1], [0])).transpose(0, 3, 1, 2).copy()
        return (dx, dw)

    return record(out, (x, w), vjp)


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,kh,kw], zero padding."""
    n, cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    if cin != cin2:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin2}")
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, w)
    s, p = stride, padding
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output size would be {ho}x{wo}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # im2col: one contiguous copy, then BLAS does the heavy lifting
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = _out((cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2).copy())
    wg = needs_grad(w)

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        dw = (gmat.T @ cols).reshape(w.shape) if wg else None
        dcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j]
        dx = dxp[:, :, p : p + h, p : p + wd]
        return (dx.copy() if p else dx, dw)

    return record(out, (x, w), vjp)


def depthwise_conv2d(x, w):
    """Per-channel conv of [N,C,H,W] with [C,kh,kw], stride 1, same padding."""
    n, c, h, wd = x.shape
    c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"depthwise channel mismatch: input {c}, kernel {c2}")
    p = kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    # k^2 shifted multiply-adds beat windowed contractions at these sizes
    acc = np.zeros_like(x.data)
    for i in range(kh):
        for j in range(kw):
            acc += w.data[:, i, j][None, :, None, None] * xp[:, :, i : i + h, j : j + wd]
    out = _out(acc)
    wg = needs_grad(w)

    def vjp(g):
        dw = np.empty_like(w.data) if wg else None
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                if dw is not None:
                    dw[:, i, j] = np.einsum("nchw,nchw->c", g,
                                            xp[:, :, i : i + h, j : j + wd])
                dxp[:, :, i : i + h, j : j + wd] += g * w.data[:, i, j][None, :, None, None]
        return (dxp[:, :, p : p + h, p : p + wd].copy(), dw)

    return record(out, (x, w), vjp)


def _pool_counts(h, w, k, dtype):
    # number of in-bounds elements per window, for border averaging
    ones = np.ones((h, w), dtype=dtype)
    op = np.pad(ones, k // 2)
    return sliding_window_view(op, (k, k)).sum(axis=(-2, -1))


def avg_pool3x3(x):
    """3x3 mean pool, stride 1, same padding; borders average valid cells only."""
    n, c, h, w = x.shape
    k, p = 3, 1
    counts = _pool_counts(h, w, k, x.data.dtype)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    acc = np.zeros_like(x.data)
    for i in range(k):
        for j in range(k):
            acc += xp[:, :, i : i + h, j : j + w]
    out = _out(acc / counts)

    def vjp(g):
        gc = g / counts
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + h, j : j + w] += gc
        return (dxp[:, :, p : p + h, p : p + w].copy(),)

    return record(out, (x,), vjp)


def max_pool3x3(x):
    """3x3 max pool, stride 1, same padding; ties route grad to the first max."""
    n, c, h, w = x.shape
    k, p = 3, 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    flat = win.reshape(n, c, h, w, k * k)
    arg = flat.argmax(axis=-1)
    out = _out(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def vjp(g):
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
        nn, cc, hh, ww = np.indices((n, c, h, w), sparse=True)
        np.add.at(dxp, (nn, cc, hh + arg // k, ww + arg % k), g)
        return (dxp[:, :, p : p + h, p : p + w].copy(),)

    return record(out, (x,), vjp)


def batch_norm_train(x, scale, bias, eps=1e-5):
    """Normalize over (N,H,W) per channel with batch statistics.

    Returns (out, batch_mean, batch_var); the stats are plain arrays for the
    caller's running-average update and are not on the tape.
    """
    n, c, h, w = x.shape
    m = n * h * w
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = _out(scale.data[None, :, None, None] * xhat + bias.data[None, :, None, None])
    sg, bg = needs_grad(scale), needs_grad(bias)

    def vjp(g):
        dbias = g.sum(axis=(0, 2, 3)) if bg else None
        dscale = np.einsum("nchw,nchw->c", g, xhat) if sg else None
        dx = g * scale.data[None, :, None, None]  # dxhat, reused in place
        s1 = dx.sum(axis=(0, 2, 3))
        s2 = np.einsum("nchw,nchw->c", dx, xhat)
        dx *= m
        dx -= s1[None, :, None, None]
        dx -= xhat * s2[None, :, None, None]
        dx *= (inv / m)[None, :, None, None]
        return (dx, dscale, dbias)

    return record(out, (x, scale, bias), vjp), mean, var


def batch_norm_eval(x, scale, bias, running_mean, running_var, eps=1e-5):
    """Normalize with stored running statistics; batch-composition independent."""
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]
    out = _out(scale.data[None, :, None, None] * xhat + bias.data[None, :, None, None])

    sg, bg = needs_grad(scale), needs_grad(bias)

    def vjp(g):
        dbias = g.sum(axis=(0, 2, 3)) if bg else None
        dscale = (g * xhat).sum(axis=(0, 2, 3)) if sg else None
        dx = g * (scale.data * inv)[None, :, None, None]
        return (dx, dscale, dbias)

    return record(out, (x, scale, bias), vjp)


def global_avg_pool(x):
    n, c, h, w = x.shape
    out = _out(x.data.mean(axis=(2, 3)))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None], (n, c, h, w)) / (h * w),)

    return record(out, (x,), vjp)


def linear(x, w, b):
    """[N,C] @ [K,C]^T + [K]."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"linear feature mismatch: {x.shape[1]} vs {w.shape[1]}")
    out = _out(x.data @ w.data.T + b.data)

    wg, bg = needs_grad(w), needs_grad(b)

    def vjp(g):
        return (g @ w.data,
                g.T @ x.data if wg else None,
                g.sum(axis=0) if bg else None)

    return record(out, (x, w, b), vjp)


def concat_channels(xs):
    if len(xs) == 0:
        raise ValueError("concat of zero tensors")
    sizes = [t.shape[1] for t in xs]
    out = _out(np.concatenate([t.data for t in xs], axis=1))
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(xs)))

    return record(out, tuple(xs), vjp)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits) at the integer label."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    out = _out(np.asarray((lse - z[np.arange(n), labels]).mean()))

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return record(out, (logits,), vjp)


def scale_by_index(x, lam, idx):
    """x scaled by the idx-th entry of the 1-D factor vector lam."""
    out = _out(x.data * lam.data[idx])

    lg = needs_grad(lam)

    def vjp(g):
        if lg:
            dlam = np.zeros_like(lam.data)
            dlam[idx] = (g * x.data).sum()
        else:
            dlam = None
        return (g * lam.data[idx], dlam)

    return record(out, (x, lam), vjp)


def edge_weighted_sum(xs, lam, idxs):
    """Sum of xs[k] scaled by lam[idxs[k]]; the input aggregation of a DAG node."""
    if len(xs) != len(idxs) or len(xs) == 0:
        raise ValueError("edge_weighted_sum needs matching, nonempty inputs")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ValueError(f"summand shape mismatch: {list(t.shape)} vs {list(shape)}")
    acc = np.zeros_like(xs[0].data)
    for t, i in zip(xs, idxs):
        acc += lam.data[i] * t.data
    out = _out(acc)

    lg = needs_grad(lam)

    def vjp(g):
        if lg:
            dlam = np.zeros_like(lam.data)
            for t, i in zip(xs, idxs):
                dlam[i] += (g * t.data).sum()
        else:
            dlam = None
        return tuple(g * lam.data[i] for i in idxs) + (dlam,)

    return record(out, tuple(xs) + (lam,), vjp)


def take_channels(w, idx):
    """Gather input-channel slices idx of a [Cout,Cin,kh,kw] kernel."""
    idx = np.asarray(idx, dtype=np.intp)
    out = _out(w.data[:, idx])

    wg = needs_grad(w)

    def vjp(g):
        if not wg:
            return (None,)
        dw = np.zeros_like(w.data)
        np.add.at(dw, (slice(None), idx), g)
        return (dw,)

    return record(out, (w,), vjp)
