"""Neural-network operations with fused forward/backward rules.

Image-shaped inputs use the frame-major layout ``[F, C, H, W]`` where ``F``
enumerates (batch, frame) pairs.  Everything here is frame-local, which is
what makes pseudo-3D networks causal in time.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, as_tensor, make_op, unbroadcast

GN_EPS = 1e-5
LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


# ---------------------------------------------------------------------------
# activations


def softmax_lastdim(x, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax over the last axis.

    ``mask`` is boolean with True marking allowed positions; disallowed
    logits are replaced by -inf before normalisation and get exactly zero
    weight.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last dimension, got {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("attention mask has a fully masked row")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_op(y, (x,), bw, "softmax")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s

    def bw(g):
        return (g * (s + out * (1.0 - s)),)

    return make_op(out, (x,), bw, "silu")


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v * v * v)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)

    return make_op(out, (x,), bw, "gelu")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    out = as_tensor(x) @ weight
    if bias is not None:
        out = out + bias
    return out


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ContractError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


# ---------------------------------------------------------------------------
# convolutions


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    """``[F, C, H, W]`` -> ``[F, C*9, H*W]`` patch columns (zero padding 1)."""
    f, c, h, w = x.shape
    cols = np.zeros((f, c, 3, 3, h, w))
    for dy in range(3):
        ys, yd = slice(max(0, 1 - dy), min(h, h + 1 - dy)), slice(max(0, dy - 1), min(h, h + dy - 1))
        for dx in range(3):
            xs, xd = slice(max(0, 1 - dx), min(w, w + 1 - dx)), slice(max(0, dx - 1), min(w, w + dx - 1))
            cols[:, :, dy, dx, ys, xs] = x[:, :, yd, xd]
    return cols.reshape(f, c * 9, h * w)


def conv2d(x, weight, bias=None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, on ``[F, C, H, W]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects [F, C, H, W], got {x.shape}")
    cout, cin, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ConfigurationError(f"only 3x3 kernels are supported, got {kh}x{kw}")
    if cin != x.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    f, _, h, w = x.shape
    cols = _im2col3x3(x.data)
    wmat = np.ascontiguousarray(weight.data.reshape(cout, cin * 9))
    out = np.matmul(wmat, cols).reshape(f, cout, h, w)  # one gemm per frame
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        inputs.append(bias)

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(f, cout, h * w)
        gx = None
        if x.requires_grad:
            # stride-1 transposed conv == conv with the flipped, channel-swapped kernel
            wflip = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(cin, cout * 9)
            gx = np.matmul(wflip, _im2col3x3(g2.reshape(f, cout, h, w))).reshape(x.shape)
        gw = None
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_op(out, inputs, bw, "conv2d")


def pseudo3d_conv(x, weight, bias=None) -> Tensor:
    """Inflated 1x3x3 convolution on video ``[B, C, m, H, W]``.

    Each output frame is a 3x3 spatial convolution of the matching input frame
    only; time is never mixed.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 5:
        raise DimensionError(f"pseudo3d_conv weight must be [C', C, 1, 3, 3], got {weight.shape}")
    if weight.shape[2] != 1:
        raise ConfigurationError(
            f"temporal kernel extent must be 1, got {weight.shape[2]}"
        )
    if x.ndim != 5:
        raise DimensionError(f"pseudo3d_conv expects [B, C, m, H, W], got {x.shape}")
    b, c, m, h, w = x.shape
    frames = x.transpose(0, 2, 1, 3, 4).reshape(b * m, c, h, w)
    w2 = weight.reshape(weight.shape[0], weight.shape[1], 3, 3)
    y = conv2d(frames, w2, bias)
    return y.reshape(b, m, -1, h, w).transpose(0, 2, 1, 3, 4)


def conv1x1(x, weight, bias=None) -> Tensor:
    """Channel mixing on ``[F, C, H, W]`` with ``weight`` as ``[C', C]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    f, c, h, w = x.shape
    if weight.shape[1] != c:
        raise DimensionError(f"conv1x1 channel mismatch: input {x.shape}, weight {weight.shape}")
    out = weight @ x.reshape(f, c, h * w)
    if bias is not None:
        out = out + as_tensor(bias).reshape(-1, 1)
    return out.reshape(f, weight.shape[0], h, w)


# ---------------------------------------------------------------------------
# normalisation


def group_norm(x, groups: int, scale, shift) -> Tensor:
    """GroupNorm over axis 1; statistics per leading index and channel group.

    For ``[F, C, H, W]`` frame-major input the statistics are per frame, so
    the op stays frame-local.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ConfigurationError(f"{c} channels are not divisible into {groups} groups")
    rest = x.shape[2:]
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + GN_EPS)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * len(rest)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def bw(g):
        red = (0,) + tuple(range(2, x.ndim))
        gscale = (g * xhat).sum(axis=red)
        gshift = g.sum(axis=red)
        gx = None
        if x.requires_grad:
            gh = (g * scale.data.reshape(bshape)).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xh * (gh * xh).mean(axis=-1, keepdims=True)
            )
            gx = gx.reshape(x.shape)
        return gx, gscale.reshape(scale.shape), gshift.reshape(shift.shape)

    return make_op(out, (x, scale, shift), bw, "group_norm")


def layer_norm(x, scale, shift) -> Tensor:
    """LayerNorm over the last axis."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    out = xhat * scale.data + shift.data

    def bw(g):
        red = tuple(range(x.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * scale.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_op(out, (x, scale, shift), bw, "layer_norm")


# ---------------------------------------------------------------------------
# spatial resampling (time untouched)


def avg_pool2(x) -> Tensor:
    """Stride-2 2x2 average pooling on ``[F, C, H, W]``."""
    x = as_tensor(x)
    f, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(f, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (up * 0.25,)

    return make_op(out, (x,), bw, "avg_pool2")


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling on ``[F, C, H, W]``."""
    x = as_tensor(x)
    f, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(f, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_op(out, (x,), bw, "upsample2")


# ---------------------------------------------------------------------------
# lookups


def take_rows(table, ids) -> Tensor:
    """Embedding lookup ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return make_op(out, (table,), bw, "take_rows")


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Fixed sinusoidal features of integer timesteps, shape ``[len(t), dim]``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=-1)
    return emb


__all__ = [
    "softmax_lastdim",
    "silu",
    "gelu",
    "linear",
    "mse",
    "conv2d",
    "pseudo3d_conv",
    "conv1x1",
    "group_norm",
    "layer_norm",
    "avg_pool2",
    "upsample2",
    "take_rows",
    "sinusoidal_embedding",
    "unbroadcast",
]
