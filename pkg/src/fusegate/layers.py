"""Network layer primitives: 2-d convolution, batch norm, pooling, linear,
cross-entropy and the temporal channel shift.

Convolution is cross-correlation (no kernel flip). Weight layout is
(out_channels, k, k, in_channels). All layers are thin parameter containers
around recorded primitives, so the whole stack is differentiable end to end.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, make_op


def conv_out_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv output collapses: input {h}x{w}, k={k}, "
                             f"stride={stride}, padding={padding}")
    return oh, ow


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Strided window view of a padded (n, c, hp, wp) input.

    Returns (n*oh*ow, k*k*c) with the (i, j, c) axes flattened last, matching
    the (out, k, k, in) weight layout.
    """
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, k, k, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return win.reshape(n * oh * ow, k * k * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlate x[n,c,h,w] with weight[c',k,k,c] plus bias[c']."""
    n, c, h, w = x.shape
    co, k, k2, ci = weight.shape
    if k != k2:
        raise DimensionError(f"non-square kernel {k}x{k2}")
    if ci != c:
        raise DimensionError(
            f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if bias.shape != (co,):
        raise DimensionError(f"bias shape {bias.shape}, expected ({co},)")
    oh, ow = conv_out_hw(h, w, k, stride, padding)

    def padded(arr):
        if padding == 0:
            return arr
        return np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    xp = padded(x.data)
    cols = _im2col(xp, k, stride, oh, ow)
    wflat = weight.data.reshape(co, k * k * c)
    out = cols @ wflat.T + bias.data
    out = out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
        dw = (g2.T @ cols).reshape(co, k, k, c)
        db = g2.sum(axis=0)
        dcols = (g2 @ wflat).reshape(n, oh, ow, k, k, c)
        hp, wp = h + 2 * padding, w + 2 * padding
        dxp = np.zeros((n, c, hp, wp))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                    dcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
        dx = dxp if padding == 0 else dxp[:, :, padding:-padding, padding:-padding]
        return [dx, dw, db]

    return make_op("conv2d", (x, weight, bias), np.ascontiguousarray(out), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x[n,in] -> x @ weight.T + bias with weight[out,in]."""
    if x.data.ndim != 2:
        raise DimensionError(f"linear expects 2-d input, got {x.shape}")
    out_f, in_f = weight.shape
    if x.shape[1] != in_f:
        raise DimensionError(
            f"linear feature mismatch: input {x.shape[1]}, weight expects {in_f}")
    if bias.shape != (out_f,):
        raise DimensionError(f"bias shape {bias.shape}, expected ({out_f},)")
    xd, wd = x.data, weight.data

    def bwd(g):
        return [g @ wd, g.T @ xd, g.sum(axis=0)]

    return make_op("linear", (x, weight, bias), xd @ wd.T + bias.data, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial dims: (n, c, h, w) -> (n, c)."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape

    def bwd(g):
        return [np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy()]

    return make_op("global_avg_pool", (x,), x.data.mean(axis=(2, 3)), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the label index, max-stabilized."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (n, K) logits, got {logits.shape}")
    n, num_classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape}, expected ({n},)")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(
            f"label out of range [0, {num_classes}): {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def bwd(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return [g * d / n]

    return make_op("cross_entropy", (logits,), np.asarray(loss), bwd)


def temporal_shift(x: Tensor, frames: int, fraction: float = 0.125) -> Tensor:
    """Shift a leading channel slice one frame forward and the next slice one
    frame back, zero-filling at clip boundaries. Pure data movement.
    """
    lead, c = x.shape[0], x.shape[1]
    if lead % frames != 0:
        raise ContractError(
            f"batch axis {lead} is not divisible by frame count {frames}")
    fold = int(fraction * c)
    if 2 * fold > c:
        raise ContractError(f"shift fraction {fraction} covers more than all "
                            f"{c} channels")
    if fold == 0:
        return make_op("temporal_shift", (x,), x.data.copy(), lambda g: [g])
    xv = x.data.reshape((lead // frames, frames) + x.shape[1:])
    out = xv.copy()
    out[:, :, :fold] = 0.0
    out[:, 1:, :fold] = xv[:, :-1, :fold]
    out[:, :, fold:2 * fold] = 0.0
    out[:, :-1, fold:2 * fold] = xv[:, 1:, fold:2 * fold]

    def bwd(g):
        gv = g.reshape(xv.shape)
        dx = gv.copy()
        dx[:, :, :2 * fold] = 0.0
        dx[:, :-1, :fold] = gv[:, 1:, :fold]
        dx[:, 1:, fold:2 * fold] = gv[:, :-1, fold:2 * fold]
        return [dx.reshape(x.shape)]

    return make_op("temporal_shift", (x,), out.reshape(x.shape), bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over the (n, h, w) axes of a 4-d map.

    Training mode normalizes with biased batch statistics and updates the
    running buffers in place (layer state, not op inputs). Eval mode is a
    deterministic per-channel affine using the running statistics.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm expects 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batch_norm parameter shape mismatch for {c} channels")
    axes = (0, 2, 3)
    gd = gamma.data.reshape(1, c, 1, 1)

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gd * xhat + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            m1 = dxhat.mean(axis=axes, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            dx = inv_std.reshape(1, c, 1, 1) * (dxhat - m1 - xhat * m2)
        else:
            dx = dxhat * inv_std.reshape(1, c, 1, 1)
        return [dx, dgamma, dbeta]

    return make_op("batch_norm", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# parameter containers


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2dLayer:
    """Convolution parameters plus its analytic cost bookkeeping."""

    def __init__(self, in_channels: int, out_channels: int, k: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        fan_in = k * k * in_channels
        self.weight = Tensor(kaiming_uniform(rng, (out_channels, k, k, in_channels),
                                             fan_in))
        self.bias = Tensor(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    @property
    def in_channels(self) -> int:
        return self.weight.shape[3]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[1]

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return conv_out_hw(h, w, self.k, self.stride, self.padding)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.weight, f"{prefix}.b": self.bias}


class BatchNormLayer:
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels))
        self.beta = Tensor(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, training, self.momentum, self.eps)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.running_mean": self.running_mean,
                f"{prefix}.running_var": self.running_var}


class LinearLayer:
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, zero_init: bool = False):
        if zero_init:
            self.weight = Tensor(np.zeros((out_features, in_features)))
        else:
            rng = rng or np.random.default_rng(0)
            self.weight = Tensor(kaiming_uniform(rng, (out_features, in_features),
                                                 in_features))
        self.bias = Tensor(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.weight, f"{prefix}.b": self.bias}
