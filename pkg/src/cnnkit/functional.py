"""Differentiable neural-network operations on NCHW tensors."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Parameter, Tensor, make_result

BN_EPS = 1e-5


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv_padding(padding, kh: int, kw: int, stride: int, h: int, w: int) -> tuple[int, int, int, int]:
    """Resolve a padding spec to ``(top, bottom, left, right)``.

    ``None`` pads ``k // 2`` on every side; ``"same"`` follows the
    ``ceil(size / stride)`` rule and puts the odd pixel at the bottom/right.
    """
    if padding is None:
        return kh // 2, kh // 2, kw // 2, kw // 2
    if padding == "valid":
        return 0, 0, 0, 0
    if padding == "same":
        def split(n, k):
            total = max((math.ceil(n / stride) - 1) * stride + k - n, 0)
            return total // 2, total - total // 2
        return (*split(h, kh), *split(w, kw))
    if isinstance(padding, int):
        return padding, padding, padding, padding
    padding = tuple(padding)
    if len(padding) == 2:
        return padding[0], padding[0], padding[1], padding[1]
    if len(padding) == 4:
        return padding
    raise ValueError(f"unsupported padding {padding!r}")


def conv_output_size(n: int, k: int, stride: int, pad_total: int) -> int:
    return (n + pad_total - k) // stride + 1


def _pad(x: np.ndarray, pads, mode="constant", value=0.0) -> np.ndarray:
    pt, pb, pl, pr = pads
    if not (pt or pb or pl or pr):
        return x
    if mode == "constant":
        return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=value)
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), mode=mode)


def _dense_forward(xp: np.ndarray, w: np.ndarray, s: int):
    n, c, hp, wp = xp.shape
    cout, _, kh, kw = w.shape
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    if kh == 1 and kw == 1:
        cols = xp[:, :, : s * (ho - 1) + 1: s, : s * (wo - 1) + 1: s].transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wm = w.reshape(cout, -1)
    out = (cols @ wm.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _dense_backward(g: np.ndarray, cols: np.ndarray, w: np.ndarray, xp_shape, s: int,
                    need_x: bool, need_w: bool):
    n, c, hp, wp = xp_shape
    cout, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    go = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (go.T @ cols).reshape(w.shape) if need_w else None
    dxp = None
    if need_x:
        dcols = go @ w.reshape(cout, -1)
        dxp = np.zeros(xp_shape, dtype=g.dtype)
        if kh == 1 and kw == 1:
            dxp[:, :, : s * (ho - 1) + 1: s, : s * (wo - 1) + 1: s] = \
                dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
        else:
            dcols = dcols.reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i: i + s * (ho - 1) + 1: s, j: j + s * (wo - 1) + 1: s] += dcols[i, j]
    return dxp, dw


def _depthwise_forward(xp: np.ndarray, w: np.ndarray, s: int) -> np.ndarray:
    n, c, hp, wp = xp.shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(xp, w))
    for i in range(kh):
        for j in range(kw):
            out += w[:, 0, i, j][None, :, None, None] * \
                xp[:, :, i: i + s * (ho - 1) + 1: s, j: j + s * (wo - 1) + 1: s]
    return out


def _depthwise_backward(g, xp, w, s, need_x, need_w):
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros_like(xp) if need_x else None
    dw = np.zeros_like(w) if need_w else None
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
            if need_w:
                dw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
            if need_x:
                dxp[sl] += g * w[:, 0, i, j][None, :, None, None]
    return dxp, dw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding=None, groups: int = 1) -> Tensor:
    """Cross-correlation of an NCHW input with an ``(Cout, Cin/groups, Kh, Kw)`` kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got input {x.shape} and weight {weight.shape}")
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = weight.shape
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if groups < 1 or cin % groups or cout % groups or cg * groups != cin:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} incompatible with weight "
                         f"{weight.shape} at groups={groups}")
    pads = conv_padding(padding, kh, kw, stride, h, wd)
    if h + pads[0] + pads[1] < kh or wd + pads[2] + pads[3] < kw:
        raise ValueError(f"conv2d kernel larger than padded input: input {x.shape}, weight {weight.shape}")
    xp = _pad(x.data, pads)
    w = weight.data
    s = stride
    depthwise = groups == cin and cg == 1 and cout == cin and groups > 1

    if groups == 1:
        out, cols = _dense_forward(xp, w, s)
    elif depthwise:
        out, cols = _depthwise_forward(xp, w, s), None
    else:
        cog = cout // groups
        outs, cols = [], []
        for gi in range(groups):
            o, c_ = _dense_forward(xp[:, gi * cg:(gi + 1) * cg], w[gi * cog:(gi + 1) * cog], s)
            outs.append(o)
            cols.append(c_)
        out = np.concatenate(outs, axis=1)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    pt, _, pl, _ = pads

    def bw(g):
        nx, nw = x.requires_grad, weight.requires_grad
        if groups == 1:
            dxp, dw = _dense_backward(g, cols, w, xp.shape, s, nx, nw)
        elif depthwise:
            dxp, dw = _depthwise_backward(g, xp, w, s, nx, nw)
        else:
            cog = cout // groups
            dxs, dws = [], []
            for gi in range(groups):
                shape = (xp.shape[0], cg, xp.shape[2], xp.shape[3])
                a, b = _dense_backward(np.ascontiguousarray(g[:, gi * cog:(gi + 1) * cog]), cols[gi],
                                       w[gi * cog:(gi + 1) * cog], shape, s, nx, nw)
                dxs.append(a)
                dws.append(b)
            dxp = np.concatenate(dxs, axis=1) if nx else None
            dw = np.concatenate(dws, axis=0) if nw else None
        dx = np.ascontiguousarray(dxp[:, :, pt:pt + h, pl:pl + wd]) if nx else None
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", out, inputs, bw)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, momentum: float = 0.9, training: bool = True,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over every axis but 1.

    In training mode the running statistics are updated in place as
    ``running <- momentum * running + (1 - momentum) * batch`` (the running
    variance uses the unbiased batch estimate).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batch_norm expects per-channel parameters of shape ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    g_ = gamma.data.reshape(bshape)
    if training:
        m = xd.size // c
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.reshape(c)
        unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
        running_var *= momentum
        running_var += (1.0 - momentum) * unbiased
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(bshape)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(bshape)) * inv
    out = xhat * g_ + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * g_
            if training:
                mm = xd.size // c
                dx = inv / mm * (mm * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                 - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            else:
                dx = dxhat * inv
        return dx, dgamma, dbeta

    return make_result("batch_norm", out, (x, gamma, beta), bw)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return make_result("relu", xd * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (x,), bw)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of ``-sum_k t_k log softmax(z)_k`` for soft targets ``t``."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    if t.shape != z.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {z.shape}")
    n = z.shape[0]
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    loss = -(t * logp).sum() / n
    p = np.exp(logp)

    def bw(g):
        return (g * (p * t.sum(axis=1, keepdims=True) - t) / n,)

    return make_result("softmax_cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), bw)


# --------------------------------------------------------------------------
# pooling and resampling
# --------------------------------------------------------------------------

def _pool_out(n: int, k: int, s: int, p: int, ceil_mode: bool) -> int:
    if ceil_mode:
        o = -(-(n + 2 * p - k) // s) + 1
        if (o - 1) * s >= n + p:
            o -= 1
        return o
    return (n + 2 * p - k) // s + 1


def pool2d(x: Tensor, kind: str = "max", k: int = 2, stride: int | None = None,
           padding: int = 0, ceil_mode: bool = False) -> Tensor:
    """Window pooling; ``global_avg`` reduces to ``N x C x 1 x 1``.

    Average pooling excludes padded cells from the divisor.
    """
    if kind == "global_avg":
        xd = x.data
        hw = xd.shape[2] * xd.shape[3]
        out = xd.mean(axis=(2, 3), keepdims=True)
        shape = xd.shape
        return make_result("global_avg_pool", out, (x,),
                           lambda g: (np.broadcast_to(g / hw, shape).copy(),))
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    s = stride or k
    n, c, h, w = x.shape
    ho, wo = _pool_out(h, k, s, padding, ceil_mode), _pool_out(w, k, s, padding, ceil_mode)
    if ho < 1 or wo < 1:
        raise ValueError(f"pool window {k} larger than input {x.shape}")
    pb = max((ho - 1) * s + k - h - padding, 0)
    pr = max((wo - 1) * s + k - w - padding, 0)
    pads = (padding, pb, padding, pr)
    fill = -np.inf if kind == "max" else 0.0
    xp = _pad(x.data, pads, value=fill)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    if kind == "avg":
        ones = _pad(np.ones((1, 1, h, w), dtype=x.dtype), pads)
        counts = sliding_window_view(ones, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo].sum(axis=(-1, -2))
        out = win.sum(axis=(-1, -2)) / counts

        def bw(g):
            gd = g / counts
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i: i + s * (ho - 1) + 1: s, j: j + s * (wo - 1) + 1: s] += gd
            return (np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w]),)

        return make_result("avg_pool", out, (x,), bw)

    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i: i + s * (ho - 1) + 1: s, j: j + s * (wo - 1) + 1: s] += g * (arg == i * k + j)
        return (np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w]),)

    return make_result("max_pool", np.ascontiguousarray(out), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    return pool2d(x, "global_avg")


def _fold_reflect(g: np.ndarray, axis: int, before: int, after: int, n: int) -> np.ndarray:
    core = np.take(g, np.arange(before, before + n), axis=axis).copy()
    idx = [slice(None)] * g.ndim
    for r in range(before):
        src = before - r
        idx[axis] = src
        dst = tuple(idx)
        idx[axis] = r
        core[dst] += g[tuple(idx)]
    for q in range(after):
        src = n - 2 - q
        idx[axis] = src
        dst = tuple(idx)
        idx[axis] = before + n + q
        core[dst] += g[tuple(idx)]
    return core


def pad2d(x: Tensor, pads, mode: str = "constant") -> Tensor:
    """Pad the two spatial axes by ``(top, bottom, left, right)``; mode ``constant`` or ``reflect``."""
    pt, pb, pl, pr = pads
    h, w = x.shape[2], x.shape[3]
    if mode == "reflect" and (max(pt, pb) >= h or max(pl, pr) >= w):
        raise ValueError(f"reflection padding {pads} needs spatial extents larger than the pad, got {x.shape}")
    out = _pad(x.data, pads, mode=mode)

    def bw(g):
        if mode == "reflect":
            g = _fold_reflect(g, 2, pt, pb, h)
            return (np.ascontiguousarray(_fold_reflect(g, 3, pl, pr, w)),)
        return (np.ascontiguousarray(g[:, :, pt:pt + h, pl:pl + w]),)

    return make_result(f"pad_{mode}", out, (x,), bw)


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    a = np.zeros((n_out, n_in), dtype=dtype)
    a[np.arange(n_out), i0] += 1.0 - frac
    a[np.arange(n_out), i1] += frac
    return a


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling with half-pixel centers (``align_corners=False``)."""
    _, _, h, w = x.shape
    ah = _interp_matrix(out_h, h, x.dtype)
    aw = _interp_matrix(out_w, w, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return make_result("resize_bilinear", out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),))


# --------------------------------------------------------------------------
# dense layers and reductions used by heads
# --------------------------------------------------------------------------

def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ W + b`` for ``x`` of shape (N, D) and ``W`` of shape (D, K)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"fully_connected shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = [g @ wd.T if x.requires_grad else None,
                 xd.T @ g if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0) if bias.requires_grad else None)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("fully_connected", out, inputs, bw)


def l2_normalize(x: Tensor, axis: int = 1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True) + eps)
    out = xd / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_result("l2_normalize", out, (x,), bw)


def gem(x: Tensor, p) -> Tensor:
    """Generalized mean over the spatial axes: ``(mean x^p)^(1/p)`` -> (N, C).

    ``p`` is a float or a scalar :class:`Parameter`; inputs must be non-negative.
    """
    xd = x.data
    p_is_tensor = isinstance(p, Tensor)
    pv = float(p.data.reshape(-1)[0]) if p_is_tensor else float(p)
    if pv < 1:
        raise ValueError(f"GeM exponent must be >= 1, got {pv}")
    if (xd < 0).any() and not float(pv).is_integer():
        raise ValueError("GeM with non-integer exponent requires non-negative activations")
    hw = xd.shape[2] * xd.shape[3]
    xp = xd ** pv
    m = xp.mean(axis=(2, 3))
    out = m ** (1.0 / pv)

    def bw(g):
        safe_m = np.where(m > 0, m, 1.0)
        dx = None
        if x.requires_grad:
            coef = np.where(m > 0, safe_m ** (1.0 / pv - 1.0), 0.0) * g / hw
            dx = coef[:, :, None, None] * xd ** (pv - 1.0)
        grads = [dx]
        if p_is_tensor:
            if p.requires_grad:
                xlogx = np.where(xd > 0, xp * np.log(np.where(xd > 0, xd, 1.0)), 0.0).mean(axis=(2, 3))
                dp = out * (-np.log(safe_m) / pv ** 2 + xlogx / (pv * safe_m))
                dp = np.where(m > 0, dp, 0.0)
                grads.append(np.asarray((g * dp).sum()).reshape(p.shape).astype(p.dtype))
            else:
                grads.append(None)
        return grads

    inputs = (x, p) if p_is_tensor else (x,)
    return make_result("gem", out, inputs, bw)


__all__ = [
    "conv2d", "batch_norm", "relu", "sigmoid", "softmax", "log_softmax", "softmax_cross_entropy",
    "pool2d", "global_avg_pool", "pad2d", "resize_bilinear", "fully_connected", "l2_normalize",
    "gem", "conv_padding", "conv_output_size", "Parameter",
]
