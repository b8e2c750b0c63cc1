"""Forward kernels and their vector-Jacobian products for the MCT architecture."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _record, as_tensor, concat, tmean

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class GroupError(ShapeError):
    pass


class UninitializedStatsError(RuntimeError):
    pass


# ---------------------------------------------------------------- affine

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is din x dout."""
    din, dout = weight.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear expects trailing extent {din}, got input shape {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ wd.T).reshape(*lead, din) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out.reshape(*lead, dout), inputs, vjp, "linear")


# ---------------------------------------------------------------- convolution

def _out_len(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


def _conv3d_single(x: Tensor, weight: Tensor, bias: Tensor | None, stride) -> Tensor:
    """Valid 3-D cross-correlation, one group, batched input N x C x D x H x W."""
    n, cin, d, h, w = x.shape
    cout, cin_w, kd, kh, kw = weight.shape
    sd, sh, sw = stride
    if cin_w != cin:
        raise ShapeError(f"conv3d weight expects {cin_w} input channels, got {cin}")
    if kd > d or kh > h or kw > w:
        raise ShapeError(f"conv3d kernel {(kd, kh, kw)} larger than input extent {(d, h, w)}")
    od, oh, ow = _out_len(d, kd, sd), _out_len(h, kh, sh), _out_len(w, kw, sw)
    win = sliding_window_view(x.data, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    k = cin * kd * kh * kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(-1, k)
    wmat = weight.data.reshape(cout, k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, od, oh, ow, cout).transpose(0, 4, 1, 2, 3))
    xshape, dtype = x.shape, x.dtype

    def vjp(g):
        gm = g.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, od, oh, ow, cin, kd, kh, kw)
            dcols = dcols.transpose(0, 4, 1, 2, 3, 5, 6, 7)
            gx = np.zeros(xshape, dtype=dtype)
            # fixed loop order keeps the accumulation deterministic
            for i in range(kd):
                for j in range(kh):
                    for l in range(kw):
                        gx[:, :, i:i + sd * (od - 1) + 1:sd, j:j + sh * (oh - 1) + 1:sh,
                           l:l + sw * (ow - 1) + 1:sw] += dcols[..., i, j, l]
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, inputs, vjp, "conv3d")


def conv3d_grouped(x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1,
                   stride=(1, 1, 1)) -> Tensor:
    """Grouped valid 3-D convolution.

    ``x`` is Cin x D x H x W or N x Cin x D x H x W; ``weight`` is
    Cout x (Cin/G) x kd x kh x kw. Output group ``g`` depends only on input
    group ``g``: the call is literally the per-group convolutions
    concatenated along the channel axis.
    """
    unbatched = x.ndim == 4
    if unbatched:
        x = x.reshape(1, *x.shape)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    cin, cout = x.shape[1], weight.shape[0]
    if groups < 1 or cin % groups or cout % groups:
        raise GroupError(f"channels (in={cin}, out={cout}) not divisible by groups={groups}")
    if weight.shape[1] != cin // groups:
        raise GroupError(f"weight has {weight.shape[1]} input channels per group, expected {cin // groups}")
    stride = tuple(stride) if not isinstance(stride, int) else (stride,) * 3
    if groups == 1:
        out = _conv3d_single(x, weight, bias, stride)
    else:
        ci, co = cin // groups, cout // groups
        parts = []
        for g in range(groups):
            parts.append(_conv3d_single(
                x[:, g * ci:(g + 1) * ci],
                weight[g * co:(g + 1) * co],
                None if bias is None else bias[g * co:(g + 1) * co],
                stride,
            ))
        out = concat(parts, axis=1)
    return out.reshape(out.shape[1:]) if unbatched else out


# ---------------------------------------------------------------- normalisation

class BatchNormStats:
    """Running statistics for one batch-norm layer (not trainable)."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.momentum = momentum
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.tracked = 0

    def state(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.mean, "running_var": self.var,
                "tracked": np.array([self.tracked], dtype=np.float64)}

    def load(self, state: dict[str, np.ndarray]) -> None:
        self.mean = np.array(state["running_mean"], dtype=np.float64)
        self.var = np.array(state["running_var"], dtype=np.float64)
        self.tracked = int(np.asarray(state["tracked"]).ravel()[0])


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats | None = None,
                eps: float = 1e-5, training: bool = True) -> Tensor:
    """Per-channel normalisation of N x C x D x H x W over (N, D, H, W)."""
    if x.ndim != 5:
        raise ShapeError(f"batchnorm3d expects N x C x D x H x W, got {x.shape}")
    c = x.shape[1]
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    xd = x.data
    m = xd.size // c
    if training:
        if m < 2:
            raise ShapeError(f"batchnorm3d training needs >= 2 values per channel, got {m}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if stats is not None:
            mom = stats.momentum
            stats.mean = (1 - mom) * stats.mean + mom * mu
            stats.var = (1 - mom) * stats.var + mom * var * m / (m - 1)
            stats.tracked += 1
    else:
        if stats is None or stats.tracked == 0:
            raise UninitializedStatsError("batchnorm3d eval mode before any running statistics were recorded")
        mu = stats.mean.astype(xd.dtype)
        var = stats.var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def vjp(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                gx = inv.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(bshape)
        return gx, gg, gbeta

    return _record(out.astype(xd.dtype, copy=False), (x, gamma, beta), vjp, "batchnorm3d")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each token over its last axis, then scale and shift."""
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gbeta

    return _record(out, (x, gamma, beta), vjp, "layernorm")


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    inner = GELU_C * (xd + GELU_A * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _record(out, (x,), vjp, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), vjp, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), vjp, "log_softmax")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- pooling / losses

def mean_pool(x: Tensor, axis: int = -2) -> Tensor:
    """Arithmetic mean over the token axis."""
    return tmean(x, axis=axis)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared componentwise differences."""
    target = as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def vjp(g):
        gp = g * 2.0 * diff / n
        return gp, -gp

    return _record(out, (pred, target), vjp, "mse")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``; labels are 0-based."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    single = logits.ndim == 1
    ld = logits.data.reshape(1, -1) if single else logits.data
    nb, c = ld.shape
    if labels.shape[0] != nb:
        raise ShapeError(f"{labels.shape[0]} labels for {nb} logit rows")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(nb)
    out = np.asarray(-logp[rows, labels].mean(), dtype=ld.dtype)

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        gl = g * p / nb
        return (gl.reshape(logits.shape),)

    return _record(out, (logits,), vjp, "cross_entropy")

