"""Layer vocabulary: convolution, batch normalisation, pooling, dense, and
softmax cross-entropy, each with a vectorised forward and a fused backward
rule recorded on the gradient tape."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import (
    DEFAULT_DTYPE,
    ShapeMismatch,
    Tensor,
    grad_needed,
    record,
    relu,  # noqa: F401  (re-exported as part of the layer vocabulary)
)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Fan-in-scaled normal init for relu networks."""
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def conv_output_extent(in_extent: int, kernel: int, stride: int, padding: int) -> int:
    return (in_extent + 2 * padding - kernel) // stride + 1


class Conv2d:
    """2-d cross-correlation with zero padding.

    Weight layout is [out, in, kh, kw]; convs that feed a batch-norm layer
    are built without bias.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_h = self.kernel_w = kernel
        self.stride = stride
        self.padding = padding
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def parameters(self):
        params = [("weight", self.weight)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        return params

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self)


def conv2d(x: Tensor, spec: Conv2d) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatch(f"conv2d expects [batch, C, H, W], got {x.shape}")
    batch, channels, h, w = x.shape
    if channels != spec.in_channels:
        raise ShapeMismatch(f"conv2d: input has {channels} channels, spec expects {spec.in_channels}")
    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    hp, wp = h + 2 * p, w + 2 * p
    if kh > hp or kw > wp:
        raise ShapeMismatch(f"conv2d: {kh}x{kw} window exceeds padded input {hp}x{wp}")
    oh = (hp - kh) // s + 1
    ow = (wp - kw) // s + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    out = np.tensordot(windows, spec.weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if spec.bias is not None:
        out += spec.bias.data.reshape(1, -1, 1, 1)

    inputs = (x, spec.weight) if spec.bias is None else (x, spec.weight, spec.bias)
    need_x = grad_needed(x)
    wdata = spec.weight.data

    def bwd(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if need_x:
            gx_pad = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    part = np.tensordot(g, wdata[:, :, i, j], axes=([1], [0]))
                    gx_pad[:, :, i:i + s * oh:s, j:j + s * ow:s] += part.transpose(0, 3, 1, 2)
            gx = gx_pad[:, :, p:p + h, p:p + w] if p else gx_pad
        if spec.bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record(inputs, out, bwd, "conv2d")


class BatchNorm:
    """Batch normalisation over the channel axis of [B, C, H, W] or [B, C]
    inputs.  Train mode normalises by batch statistics and updates the
    running estimates; infer mode reads running statistics and mutates
    nothing."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9, dtype=DEFAULT_DTYPE):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def set_buffers(self, running_mean: np.ndarray, running_var: np.ndarray) -> None:
        self.running_mean = running_mean.astype(self.running_mean.dtype)
        self.running_var = running_var.astype(self.running_var.dtype)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batchnorm(x, self, train)


def _bn_axes(shape) -> tuple:
    if len(shape) == 4:
        return (0, 2, 3)
    if len(shape) == 2:
        return (0,)
    raise ShapeMismatch(f"batchnorm expects [B, C, H, W] or [B, C], got {list(shape)}")


def batchnorm(x: Tensor, state: BatchNorm, train: bool) -> Tensor:
    axes = _bn_axes(x.shape)
    if x.shape[1] != state.channels:
        raise ShapeMismatch(f"batchnorm: {x.shape[1]} channels vs state {state.channels}")
    pshape = (1, state.channels) + (1,) * (len(x.shape) - 2)
    gamma = state.gamma.data.reshape(pshape)
    beta = state.beta.data.reshape(pshape)

    if train:
        n = int(np.prod([x.shape[a] for a in axes]))
        if n < 2:
            raise ValueError("batchnorm train mode needs at least 2 elements per channel")
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean) * inv
        out = gamma * xhat + beta
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1.0 - m) * mean.reshape(-1)).astype(state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1.0 - m) * var.reshape(-1)).astype(state.running_var.dtype)

        need_x = grad_needed(x)

        def bwd(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            gx = None
            if need_x:
                dxhat = g * gamma
                gx = (inv / n) * (n * dxhat
                                  - dxhat.sum(axis=axes, keepdims=True)
                                  - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
                gx = gx.astype(x.data.dtype)
            return gx, dgamma.astype(state.gamma.data.dtype), dbeta.astype(state.beta.data.dtype)

        return record((x, state.gamma, state.beta), out.astype(x.data.dtype), bwd, "batchnorm")

    inv = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean.reshape(pshape)) * inv.reshape(pshape)
    out = gamma * xhat + beta
    need_x = grad_needed(x)

    def bwd_infer(g):
        gx = (g * gamma * inv.reshape(pshape)).astype(x.data.dtype) if need_x else None
        return gx, (g * xhat).sum(axis=axes).astype(state.gamma.data.dtype), g.sum(axis=axes).astype(state.beta.data.dtype)

    return record((x, state.gamma, state.beta), out.astype(x.data.dtype), bwd_infer, "batchnorm")


class Pool2d:
    """Max or average pooling; windows that do not fully fit are dropped.

    Max backward routes the gradient to the window's argmax with
    lowest-flat-index tie-break; average backward distributes uniformly.
    """

    def __init__(self, kind: str, pool_h: int, pool_w: int | None = None, stride: int = 1):
        if kind not in ("max", "average"):
            raise ValueError(f"pool kind must be 'max' or 'average', got {kind!r}")
        self.kind = kind
        self.pool_h = pool_h
        self.pool_w = pool_w if pool_w is not None else pool_h
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return pool2d(x, self)


def pool2d(x: Tensor, spec: Pool2d) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatch(f"pool2d expects [batch, C, H, W], got {x.shape}")
    batch, channels, h, w = x.shape
    ph, pw, s = spec.pool_h, spec.pool_w, spec.stride
    if ph > h or pw > w:
        raise ShapeMismatch(f"pool2d: {ph}x{pw} window overruns {h}x{w} input")
    oh = (h - ph) // s + 1
    ow = (w - pw) // s + 1
    windows = sliding_window_view(x.data, (ph, pw), axis=(2, 3))[:, :, ::s, ::s]

    if spec.kind == "average":
        out = windows.mean(axis=(4, 5))

        def bwd(g):
            gx = np.zeros_like(x.data)
            share = g / (ph * pw)
            for i in range(ph):
                for j in range(pw):
                    gx[:, :, i:i + s * oh:s, j:j + s * ow:s] += share
            return (gx,)

        return record((x,), out, bwd, "avgpool2d")

    flat = windows.reshape(batch, channels, oh, ow, ph * pw)
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    def bwd_max(g):
        gx = np.zeros_like(x.data)
        b_idx, c_idx, oh_idx, ow_idx = np.indices(arg.shape)
        ih = oh_idx * s + arg // pw
        iw = ow_idx * s + arg % pw
        np.add.at(gx, (b_idx, c_idx, ih, iw), g)
        return (gx,)

    return record((x,), out, bwd_max, "maxpool2d")


class Dense:
    """Fully connected layer: input @ weight.T + bias."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(he_normal(rng, (out_features, in_features), in_features, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self)


def dense(x: Tensor, spec: Dense) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatch(f"dense expects [batch, features], got {x.shape}")
    if x.shape[1] != spec.in_features:
        raise ShapeMismatch(f"dense: input width {x.shape[1]} vs spec {spec.in_features}")
    out = x.data @ spec.weight.data.T + spec.bias.data
    need_x = grad_needed(x)

    def bwd(g):
        gx = g @ spec.weight.data if need_x else None
        return gx, g.T @ x.data, g.sum(axis=0)

    return record((x, spec.weight, spec.bias), out, bwd, "dense")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax of a plain array, stabilised by max subtraction."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer class targets."""
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"softmax_cross_entropy expects [batch, classes], got {logits.shape}")
    batch, n_classes = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != batch:
        raise ShapeMismatch(f"{t.shape[0]} targets for batch of {batch}")
    if t.min() < 0 or t.max() >= n_classes:
        raise ValueError(f"target id out of range [0, {n_classes})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = np.asarray((log_norm - z[np.arange(batch), t]).mean())
    probs = softmax(logits.data)

    def bwd(g):
        grad = probs.copy()
        grad[np.arange(batch), t] -= 1.0
        return ((g * grad / batch).astype(logits.data.dtype),)

    return record((logits,), loss.astype(logits.data.dtype), bwd, "softmax_cross_entropy")
