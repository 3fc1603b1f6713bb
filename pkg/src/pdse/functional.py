"""Spatial primitives on NCHW tensors, each with an exact reverse-mode rule.

Every function takes and returns :class:`~pdse.tensor.Tensor`; weights are
tensors too, so gradients flow into them. Convolutions use zero padding, and
out-of-range bilinear samples read zero, so all sampling is total.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _accum


def _nchw(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected NCHW input, got shape {x.shape}")


def _out_extent(n: int, k: int, stride: int, pad: int, op: str) -> int:
    out = (n + 2 * pad - k) // stride + 1
    if out <= 0:
        raise ShapeError(f"{op}: non-positive output extent for input {n}, kernel {k}, stride {stride}, pad {pad}")
    return out


def _windows(data: np.ndarray, k: int, stride: int, pad: int, pad_value: float = 0.0) -> np.ndarray:
    """Return sliding windows (N, C, Ho, Wo, k, k) over a padded NCHW array."""
    if pad:
        data = np.pad(data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=pad_value)
    win = sliding_window_view(data, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of NCHW input with OIkk weights, zero padding.

    Output spatial size is floor((H + 2*pad - k) / stride) + 1; the map is
    linear in both input and weights.
    """
    _nchw(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: expected OIkk weight, got shape {weight.shape}")
    n, c, h, w = x.shape
    o, i, k, _ = weight.shape
    if i != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {i}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size {k} must be odd")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    ho = _out_extent(h, k, stride, padding, "conv2d")
    wo = _out_extent(w, k, stride, padding, "conv2d")

    cols = _windows(x.data, k, stride, padding)              # (N,C,Ho,Wo,k,k)
    cols = np.ascontiguousarray(cols.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)
    wm = weight.data.reshape(o, c * k * k)
    out = np.matmul(wm[None], cols).reshape(n, o, ho, wo)
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gr = g.reshape(n, o, ho * wo)
        if weight.requires_grad:
            gw = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(weight, gw.reshape(o, c, k, k))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(wm.T[None], gr).reshape(n, c, k, k, ho, wo)
            hp, wp = h + 2 * padding, w + 2 * padding
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for u in range(k):
                for v in range(k):
                    dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += dcols[:, :, u, v]
            _accum(x, dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp)

    return Tensor._result(out, parents, backward_fn, "conv2d")


def max_pool2d(x: Tensor, kernel_size: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling; padding (if any) uses -inf so padded cells never win."""
    _nchw(x, "max_pool2d")
    k = kernel_size
    s = stride or k
    n, c, h, w = x.shape
    ho = _out_extent(h, k, s, padding, "max_pool2d")
    wo = _out_extent(w, k, s, padding, "max_pool2d")
    win = _windows(x.data, k, s, padding, pad_value=-np.inf).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if not x.requires_grad:
            return
        hp, wp = h + 2 * padding, w + 2 * padding
        iy = (np.arange(ho) * s)[None, None, :, None] + arg // k
        ix = (np.arange(wo) * s)[None, None, None, :] + arg % k
        flat = ((np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * hp + iy) * wp + ix
        dxp = np.bincount(flat.ravel(), weights=g.ravel(), minlength=n * c * hp * wp)
        dxp = dxp.reshape(n, c, hp, wp).astype(g.dtype)
        _accum(x, dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp)

    return Tensor._result(np.ascontiguousarray(out), (x,), backward_fn, "max_pool2d")


def avg_pool2d(x: Tensor, kernel_size: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Average pooling over k*k windows (padding counts toward the mean)."""
    _nchw(x, "avg_pool2d")
    k = kernel_size
    s = stride or k
    n, c, h, w = x.shape
    ho = _out_extent(h, k, s, padding, "avg_pool2d")
    wo = _out_extent(w, k, s, padding, "avg_pool2d")
    win = _windows(x.data, k, s, padding)
    out = win.mean(axis=(4, 5))

    def backward_fn(g):
        if not x.requires_grad:
            return
        gk = g / float(k * k)
        hp, wp = h + 2 * padding, w + 2 * padding
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for u in range(k):
            for v in range(k):
                dxp[:, :, u:u + s * ho:s, v:v + s * wo:s] += gk
        _accum(x, dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp)

    return Tensor._result(np.ascontiguousarray(out), (x,), backward_fn, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dimensions: (N,C,H,W) -> (N,C)."""
    _nchw(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        if x.requires_grad:
            _accum(x, np.broadcast_to(g[:, :, None, None] / float(h * w), x.shape).copy())

    return Tensor._result(out, (x,), backward_fn, "global_avg_pool")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling by replication."""
    _nchw(x, "upsample_nearest2x")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        if x.requires_grad:
            _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor._result(out, (x,), backward_fn, "upsample_nearest2x")


def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate tensors along ``axis`` (default: channel axis)."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(a != b for i, (a, b) in enumerate(zip(base, other)) if i != axis):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {tensors[0].shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, np.ascontiguousarray(g[tuple(idx)]))

    return Tensor._result(out, tuple(tensors), backward_fn, "concat")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization with affine scale/shift.

    Training mode normalizes with batch statistics over (N,H,W) and updates
    the running buffers in place (running = momentum*running + (1-m)*batch);
    eval mode normalizes with the running buffers.
    """
    _nchw(x, "batch_norm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    m = n * h * w

    def backward_fn(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gxh = g * gamma.data[None, :, None, None]
        if not training:
            _accum(x, gxh * inv_std[None, :, None, None])
            return
        # Standard batch-norm input gradient with batch statistics.
        sum_gxh = gxh.sum(axis=(0, 2, 3), keepdims=True)
        sum_gxh_xhat = (gxh * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (gxh - sum_gxh / m - xhat * sum_gxh_xhat / m) * inv_std[None, :, None, None]
        _accum(x, dx)

    return Tensor._result(out, (x, gamma, beta), backward_fn, "batch_norm2d")


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2D tensor; backward scatter-adds into the source."""
    if x.ndim != 2:
        raise ShapeError(f"take_rows: expected 2D input, got shape {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    out = x.data[idx]

    def backward_fn(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.add.at(dx, idx, g)
            _accum(x, dx)

    return Tensor._result(np.ascontiguousarray(out), (x,), backward_fn, "take_rows")


def bilinear_sample(fmap: Tensor, y, x) -> Tensor:
    """Bilinearly interpolate a C,H,W map at fractional (y, x).

    Out-of-range neighbors read zero, so coordinates fully outside
    [-1, H] x [-1, W] return exactly zero and the function is total.
    Gradients are defined w.r.t. the map values and, when (y, x) are
    tensors, w.r.t. the coordinates (right-continuous at integer points).
    """
    if fmap.ndim != 3:
        raise ShapeError(f"bilinear_sample: expected CHW map, got shape {fmap.shape}")
    c, h, w = fmap.shape
    yt = y if isinstance(y, Tensor) else None
    xt = x if isinstance(x, Tensor) else None
    yv = float(yt.data.reshape(-1)[0]) if yt is not None else float(y)
    xv = float(xt.data.reshape(-1)[0]) if xt is not None else float(x)

    y0, x0 = int(np.floor(yv)), int(np.floor(xv))
    wy1, wx1 = yv - y0, xv - x0
    wy0, wx0 = 1.0 - wy1, 1.0 - wx1

    def read(yy, xx):
        if 0 <= yy < h and 0 <= xx < w:
            return fmap.data[:, yy, xx]
        return np.zeros(c, dtype=fmap.dtype)

    v00, v01 = read(y0, x0), read(y0, x0 + 1)
    v10, v11 = read(y0 + 1, x0), read(y0 + 1, x0 + 1)
    out = wy0 * (wx0 * v00 + wx1 * v01) + wy1 * (wx0 * v10 + wx1 * v11)

    parents = tuple(t for t in (fmap, yt, xt) if t is not None)

    def backward_fn(g):
        if fmap.requires_grad:
            dm = np.zeros_like(fmap.data)
            for yy, xx, wgt in ((y0, x0, wy0 * wx0), (y0, x0 + 1, wy0 * wx1),
                                (y0 + 1, x0, wy1 * wx0), (y0 + 1, x0 + 1, wy1 * wx1)):
                if 0 <= yy < h and 0 <= xx < w:
                    dm[:, yy, xx] += wgt * g
            _accum(fmap, dm)
        if yt is not None and yt.requires_grad:
            dy = float(np.dot(g, wx0 * (v10 - v00) + wx1 * (v11 - v01)))
            _accum(yt, np.full_like(yt.data, dy))
        if xt is not None and xt.requires_grad:
            dx = float(np.dot(g, wy0 * (v01 - v00) + wy1 * (v11 - v10)))
            _accum(xt, np.full_like(xt.data, dx))

    return Tensor._result(out.astype(fmap.dtype), parents, backward_fn, "bilinear_sample")


def deform_conv2d(
    x: Tensor,
    weight: Tensor,
    offsets: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 1,
) -> Tensor:
    """3x3 convolution whose sampling grid is displaced by learned offsets.

    For output position p and kernel tap t at nominal grid offset g_t, the
    contribution samples the input bilinearly at ``p*stride - pad + g_t +
    delta_t(p)``. ``offsets`` has 2*3*3 = 18 channels at output resolution:
    channel 2t holds delta-y of tap t and channel 2t+1 delta-x, taps in
    row-major kernel order. Zero offsets reduce to plain zero-padded conv2d.
    Differentiable w.r.t. input, weights, bias, and offsets.
    """
    _nchw(x, "deform_conv2d")
    n, c, h, w = x.shape
    o, i, k, k2 = weight.shape
    if k != 3 or k2 != 3:
        raise ShapeError(f"deform_conv2d: only 3x3 kernels are supported, got {k}x{k2}")
    if i != c:
        raise ShapeError(f"deform_conv2d: input has {c} channels but weight expects {i}")
    ho = _out_extent(h, k, stride, padding, "deform_conv2d")
    wo = _out_extent(w, k, stride, padding, "deform_conv2d")
    if offsets.shape != (n, 2 * k * k, ho, wo):
        raise ShapeError(
            f"deform_conv2d: offsets shape {offsets.shape} must be {(n, 2 * k * k, ho, wo)} "
            "(2 offset channels per kernel tap)"
        )

    taps = k * k
    dy = offsets.data[:, 0::2]                                # (N,9,Ho,Wo)
    dx = offsets.data[:, 1::2]
    tap_y = np.repeat(np.arange(k), k).astype(x.dtype)        # row-major taps
    tap_x = np.tile(np.arange(k), k).astype(x.dtype)
    base_y = (np.arange(ho) * stride - padding).astype(x.dtype)
    base_x = (np.arange(wo) * stride - padding).astype(x.dtype)
    ys = base_y[None, None, :, None] + tap_y[None, :, None, None] + dy
    xs = base_x[None, None, None, :] + tap_x[None, :, None, None] + dx

    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy1 = ys - y0
    wx1 = xs - x0
    wy0 = 1.0 - wy1
    wx0 = 1.0 - wx1
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)

    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))   # (N,H,W,C), channels-last gather
    nidx = np.arange(n)[:, None, None, None]

    def gather(yi, xi):
        mask = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = xt[nidx, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        vals *= mask[..., None]
        return vals, mask

    v00, m00 = gather(y0i, x0i)
    v01, m01 = gather(y0i, x0i + 1)
    v10, m10 = gather(y0i + 1, x0i)
    v11, m11 = gather(y0i + 1, x0i + 1)

    patches = (wy0[..., None] * (wx0[..., None] * v00 + wx1[..., None] * v01)
               + wy1[..., None] * (wx0[..., None] * v10 + wx1[..., None] * v11))   # (N,9,Ho,Wo,C)

    pm = np.ascontiguousarray(patches.transpose(0, 2, 3, 1, 4)).reshape(n, ho * wo, taps * c)
    wm = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(o, taps * c)
    out = np.matmul(pm, wm.T).transpose(0, 2, 1).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = [x, weight, offsets] + ([bias] if bias is not None else [])

    def backward_fn(g):
        gr = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n, ho * wo, o)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = gr.reshape(-1, o).T @ pm.reshape(-1, taps * c)
            _accum(weight, np.ascontiguousarray(gw.reshape(o, k, k, c).transpose(0, 3, 1, 2)))
        need_x = x.requires_grad
        need_off = offsets.requires_grad
        if not (need_x or need_off):
            return
        dpatches = np.matmul(gr, wm).reshape(n, ho, wo, taps, c).transpose(0, 3, 1, 2, 4)  # (N,9,Ho,Wo,C)
        if need_x:
            dxt = np.zeros(n * h * w * c, dtype=g.dtype)
            ch = np.arange(c, dtype=np.int64)
            for yi, xi, mask, wgt in (
                (y0i, x0i, m00, wy0 * wx0), (y0i, x0i + 1, m01, wy0 * wx1),
                (y0i + 1, x0i, m10, wy1 * wx0), (y0i + 1, x0i + 1, m11, wy1 * wx1),
            ):
                base = (nidx * h + np.clip(yi, 0, h - 1)) * w + np.clip(xi, 0, w - 1)
                flat = (base[..., None] * c + ch).ravel()
                contrib = (dpatches * (wgt * mask)[..., None]).ravel()
                dxt += np.bincount(flat, weights=contrib, minlength=dxt.size)
            _accum(x, np.ascontiguousarray(dxt.reshape(n, h, w, c).transpose(0, 3, 1, 2)).astype(g.dtype))
        if need_off:
            dval_dy = wx0[..., None] * (v10 - v00) + wx1[..., None] * (v11 - v01)
            dval_dx = wy0[..., None] * (v01 - v00) + wy1[..., None] * (v11 - v10)
            goff = np.empty((n, 2 * taps, ho, wo), dtype=g.dtype)
            goff[:, 0::2] = (dpatches * dval_dy).sum(axis=-1)
            goff[:, 1::2] = (dpatches * dval_dx).sum(axis=-1)
            _accum(offsets, goff)

    return Tensor._result(out, tuple(parents), backward_fn, "deform_conv2d")
