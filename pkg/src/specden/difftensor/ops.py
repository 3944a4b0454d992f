"""Differentiable layer operations on (batch, channels, height, width) tensors.

Convolutions run on a channel-major, zero-padded, flattened layout: with the
padded image stored as a ``(C, B*Hp*Wp)`` matrix, every kernel tap is a
constant column offset, so a tap contributes one BLAS matmul against a
strided view and no im2col buffer is ever built.  Output columns that land
in the padding margin are computed and then discarded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, make_result

LOG_VAR_RANGE = (-20.0, 20.0)


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution layer."""

    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    dilation: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: str = "same"
    depthwise_separable: bool = False

    def __post_init__(self):
        for field in ("kernel", "dilation", "stride"):
            value = getattr(self, field)
            if isinstance(value, int):
                object.__setattr__(self, field, (value, value))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if min(self.dilation) < 1 or min(self.stride) < 1:
            raise ValueError("dilation and stride must be >= 1")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.padding == "same" and any(k % 2 == 0 for k in self.kernel):
            raise ValueError("'same' padding needs odd kernel sizes")

    def weight_shapes(self):
        kh, kw = self.kernel
        if self.depthwise_separable:
            return {
                "dw_weight": (self.in_channels, 1, kh, kw),
                "dw_bias": (self.in_channels,),
                "pw_weight": (self.out_channels, self.in_channels, 1, 1),
                "pw_bias": (self.out_channels,),
            }
        return {
            "weight": (self.out_channels, self.in_channels, kh, kw),
            "bias": (self.out_channels,),
        }


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _check4(x, what="input"):
    if x.ndim != 4:
        raise ValueError(f"{what} must be 4-D (batch, channels, height, width), got shape {x.shape}")


class _PaddedLayout:
    """Geometry of a stride-1 correlation on the flattened padded grid."""

    def __init__(self, shape, kernel, dilation, padding):
        b, c, h, w = shape
        kh, kw = kernel
        dh, dw = dilation
        if padding == "same":
            self.ph, self.pw = dh * (kh - 1) // 2, dw * (kw - 1) // 2
        else:
            self.ph = self.pw = 0
        self.b, self.c, self.h, self.w = b, c, h, w
        self.hp, self.wp = h + 2 * self.ph, w + 2 * self.pw
        self.ho = self.hp - dh * (kh - 1)
        self.wo = self.wp - dw * (kw - 1)
        if self.ho < 1 or self.wo < 1:
            raise ValueError(f"kernel {kernel} with dilation {dilation} does not fit input {h}x{w}")
        self.n = b * self.hp * self.wp
        self.taps = [(i, j, i * dh * self.wp + j * dw) for i in range(kh) for j in range(kw)]
        self.span = self.n - max(off for _, _, off in self.taps)

    def pack(self, x):
        """(B, C, H, W) -> zero-padded (C, B*Hp*Wp)."""
        xp = np.zeros((self.c, self.b, self.hp, self.wp), dtype=x.dtype)
        xp[:, :, self.ph:self.ph + self.h, self.pw:self.pw + self.w] = x.transpose(1, 0, 2, 3)
        return xp.reshape(self.c, self.n)

    def unpack_input(self, flat):
        """(C, B*Hp*Wp) -> interior (B, C, H, W)."""
        grid = flat.reshape(self.c, self.b, self.hp, self.wp)
        return np.ascontiguousarray(
            grid[:, :, self.ph:self.ph + self.h, self.pw:self.pw + self.w].transpose(1, 0, 2, 3))

    def unpack_output(self, cols):
        """(O, span) -> (B, O, Ho, Wo)."""
        o = cols.shape[0]
        full = np.zeros((o, self.n), dtype=cols.dtype)
        full[:, :self.span] = cols
        grid = full.reshape(o, self.b, self.hp, self.wp)[:, :, :self.ho, :self.wo]
        return np.ascontiguousarray(grid.transpose(1, 0, 2, 3))

    def pack_output_grad(self, g):
        """(B, O, Ho, Wo) -> (O, span) with zeros on discarded columns."""
        o = g.shape[1]
        full = np.zeros((o, self.b, self.hp, self.wp), dtype=g.dtype)
        full[:, :, :self.ho, :self.wo] = g.transpose(1, 0, 2, 3)
        return full.reshape(o, self.n)[:, :self.span]


def _subsample(y, stride):
    sh, sw = stride
    if (sh, sw) == (1, 1):
        return y
    return np.ascontiguousarray(y[:, :, ::sh, ::sw])


def _upsample_grad(g, stride, full_shape):
    sh, sw = stride
    if (sh, sw) == (1, 1):
        return g
    full = np.zeros(full_shape, dtype=g.dtype)
    full[:, :, ::sh, ::sw] = g
    return full


def conv2d(x, weight, bias=None, stride=1, dilation=1, padding="same"):
    """Dense 2-D cross-correlation.

    ``weight`` has shape (out_channels, in_channels, kh, kw).  With
    ``padding="same"`` and stride 1 the spatial size is preserved; a dilation
    ``d`` spreads the taps so the effective extent is ``k + (k-1)(d-1)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check4(x)
    stride, dilation = _pair(stride), _pair(dilation)
    o, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ValueError(f"input has {x.shape[1]} channels but weight expects {c}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ValueError(f"bias shape {bias.shape} does not match {o} output channels")
    if padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
        raise ValueError("'same' padding needs odd kernel sizes")

    layout = _PaddedLayout(x.shape, (kh, kw), dilation, padding)
    xf = layout.pack(x.data)
    w = weight.data
    span = layout.span
    cols = np.zeros((o, span), dtype=x.dtype)
    tap = np.empty_like(cols)
    for i, j, off in layout.taps:
        np.matmul(np.ascontiguousarray(w[:, :, i, j]), xf[:, off:off + span], out=tap)
        cols += tap
    full = layout.unpack_output(cols)
    out = _subsample(full, stride)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        g1 = _upsample_grad(g, stride, full.shape)
        gf = layout.pack_output_grad(g1)
        gx = gw = gb = None
        if x.requires_grad:
            dxf = np.zeros_like(xf)
            tap = np.empty((c, span), dtype=xf.dtype)
            for i, j, off in layout.taps:
                np.matmul(np.ascontiguousarray(w[:, :, i, j].T), gf, out=tap)
                dxf[:, off:off + span] += tap
            gx = layout.unpack_input(dxf)
        if weight.requires_grad:
            gw = np.empty_like(w)
            for i, j, off in layout.taps:
                gw[:, :, i, j] = gf @ xf[:, off:off + span].T
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def depthwise_conv2d(x, weight, bias=None, dilation=1, padding="same"):
    """Per-channel spatial correlation; ``weight`` is (channels, 1, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check4(x)
    dilation = _pair(dilation)
    c = x.shape[1]
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ValueError(f"depthwise weight {weight.shape} does not match {c} channels")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c,):
            raise ValueError(f"bias shape {bias.shape} does not match {c} channels")
    kh, kw = weight.shape[2:]
    if padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
        raise ValueError("'same' padding needs odd kernel sizes")

    layout = _PaddedLayout(x.shape, (kh, kw), dilation, padding)
    xf = layout.pack(x.data)
    w = weight.data
    span = layout.span
    cols = np.zeros((c, span), dtype=x.dtype)
    for i, j, off in layout.taps:
        cols += w[:, 0, i, j][:, None] * xf[:, off:off + span]
    out = layout.unpack_output(cols)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gf = layout.pack_output_grad(g)
        gx = gw = gb = None
        if x.requires_grad:
            dxf = np.zeros_like(xf)
            for i, j, off in layout.taps:
                dxf[:, off:off + span] += w[:, 0, i, j][:, None] * gf
            gx = layout.unpack_input(dxf)
        if weight.requires_grad:
            gw = np.empty_like(w)
            for i, j, off in layout.taps:
                gw[:, 0, i, j] = np.einsum("cl,cl->c", gf, xf[:, off:off + span])
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def depthwise_separable_conv(x, dw_weight, pw_weight, dw_bias=None, pw_bias=None,
                             dilation=1, padding="same"):
    """Depthwise k x k stage followed by a pointwise 1 x 1 channel mix."""
    h = depthwise_conv2d(x, dw_weight, dw_bias, dilation=dilation, padding=padding)
    return conv2d(h, pw_weight, pw_bias, padding="valid")


def conv2d_transposed(x, weight, bias=None, stride=2):
    """Transposed convolution whose kernel equals its stride (default 2 x 2 / 2).

    ``weight`` is (in_channels, out_channels, kh, kw).  Every output pixel is
    written by exactly one input pixel, so the output is ``stride`` times the
    input in each spatial dimension.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check4(x)
    c, o, kh, kw = weight.shape
    if _pair(stride) != (kh, kw):
        raise ValueError("only kernel == stride transposed convolutions are supported")
    if x.shape[1] != c:
        raise ValueError(f"input has {x.shape[1]} channels but weight expects {c}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ValueError(f"bias shape {bias.shape} does not match {o} output channels")
    b, _, h, w = x.shape

    xm = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(c, b * h * w)
    wm = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(kh * kw * o, c)
    y = (wm @ xm).reshape(kh, kw, o, b, h, w)
    out = np.ascontiguousarray(y.transpose(3, 2, 4, 0, 5, 1)).reshape(b, o, h * kh, w * kw)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gm = np.ascontiguousarray(
            g.reshape(b, o, h, kh, w, kw).transpose(3, 5, 1, 0, 2, 4)).reshape(kh * kw * o, b * h * w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wm.T @ gm).reshape(c, b, h, w).transpose(1, 0, 2, 3))
        if weight.requires_grad:
            gw = np.ascontiguousarray((gm @ xm.T).reshape(kh, kw, o, c).transpose(3, 2, 0, 1))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def maxpool2(x):
    """2 x 2 max-pooling with stride 2; ties resolve to the first element in row-major order."""
    x = as_tensor(x)
    _check4(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even height and width, got {h}x{w}")
    windows = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((b, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return make_result(out, (x,), backward)


class RunningStats:
    """Per-channel running mean/variance for batch normalization (mutated in train mode)."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm2d(x, gamma, beta, running_stats, mode="train", momentum=0.1, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check4(x)
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("gamma/beta must have one entry per channel")
    if mode == "train":
        count = b * h * w
        if count < 2:
            raise ValueError("batchnorm in train mode needs batch*height*width >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running_stats is not None:
            running_stats.mean[...] = (1 - momentum) * running_stats.mean + momentum * mean
            running_stats.var[...] = (1 - momentum) * running_stats.var + momentum * var * count / (count - 1)
    elif mode == "eval":
        mean, var = running_stats.mean, running_stats.var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = x.data - mean.astype(x.dtype)[None, :, None, None]
    xhat *= inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None]
    out += beta.data[None, :, None, None]

    def backward(g):
        gx = None
        dgamma = np.einsum("bchw,bchw->c", g, xhat)
        dbeta = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            scale_g = (gamma.data * inv_std)[None, :, None, None]
            gx = g * scale_g
            if mode == "train":
                n = b * h * w
                # dx = gamma*inv_std * (g - mean(g) - xhat * mean(g*xhat))
                gx -= (scale_g * dbeta[None, :, None, None] / n)
                gx -= xhat * (scale_g * dgamma[None, :, None, None] / n)
        return gx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward)


def prelu(x, slope):
    """Parametric ReLU with one learnable negative slope per channel."""
    x, slope = as_tensor(x), as_tensor(slope)
    _check4(x)
    if slope.shape != (x.shape[1],):
        raise ValueError("prelu needs one slope per channel")
    a = slope.data[None, :, None, None]
    neg = np.minimum(x.data, 0)
    out = np.maximum(x.data, 0)
    out += neg * a

    def backward(g):
        gx = None
        if x.requires_grad:
            gx = g * (neg < 0)
            gx *= a - 1
            gx += g
        ga = np.einsum("bchw,bchw->c", g, neg) if slope.requires_grad else None
        return gx, ga

    return make_result(out, (x, slope), backward)


def concat_channels(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check4(a, "first operand")
    _check4(b, "second operand")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return make_result(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def clamp(x, low, high):
    x = as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)

    def backward(g):
        return (np.where(inside, g, 0).astype(g.dtype),)

    return make_result(np.clip(x.data, low, high), (x,), backward)


@dataclass
class LatentStats:
    """Mean and log-variance of the approximate posterior; log-variance is clamped on construction."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.log_var = clamp(as_tensor(self.log_var), *LOG_VAR_RANGE)
        if self.mu.shape != self.log_var.shape:
            raise ValueError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ in shape")


def reparameterize(stats, rng_seed=None, noise=None):
    """Draw z = mu + exp(log_var / 2) * eps with eps ~ N(0, I).

    ``noise`` overrides the draw; otherwise it comes from a generator seeded
    with ``rng_seed``.  Gradients reach mu and log_var, never eps.
    """
    mu, log_var = stats.mu, stats.log_var
    if noise is None:
        noise = np.random.default_rng(rng_seed).standard_normal(mu.shape).astype(mu.dtype)
    else:
        noise = np.asarray(noise, dtype=mu.dtype)
        if noise.shape != mu.shape:
            raise ValueError("noise shape must match mu")
    sigma = np.exp(0.5 * log_var.data)
    out = mu.data + sigma * noise

    def backward(g):
        return g, g * noise * 0.5 * sigma

    return make_result(out, (mu, log_var), backward)


def kl_standard_normal(stats):
    """KL(N(mu, sigma^2) || N(0, 1)) summed over latent elements, averaged over the batch."""
    mu, log_var = stats.mu, stats.log_var
    batch = mu.shape[0] if mu.ndim else 1
    var = np.exp(log_var.data)
    value = 0.5 * np.sum(mu.data ** 2 + var - log_var.data - 1.0) / batch

    def backward(g):
        return g * mu.data / batch, g * 0.5 * (var - 1.0) / batch

    return make_result(np.asarray(value, dtype=mu.dtype), (mu, log_var), backward)


def mse(pred, target):
    """Mean squared error over all elements."""
    pred = as_tensor(pred)
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    value = np.asarray(np.sum(diff * diff) / n, dtype=pred.dtype)

    def backward(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return make_result(value, (pred, target), backward)
