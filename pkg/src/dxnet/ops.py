"""Differentiable primitives on NCHW tensors.

Every op returns a :class:`~dxnet.autodiff.Variable` and registers a backward
closure. Convolution is cross-correlation with zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from dxnet.autodiff import Variable, as_variable, make_result

GATES = ("sigmoid", "gaussian")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if self.padding < 0 or self.stride < 1:
            raise ValueError("padding must be >= 0 and stride >= 1")

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def output_hw(self, h: int, w: int) -> tuple:
        ho = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        return ho, wo

    @classmethod
    def same(cls, cin: int, cout: int, k: int, groups: int = 1, bias: bool = False) -> "ConvSpec":
        return cls(cin, cout, k, k, 1, k // 2, groups, bias)


def _window(a: np.ndarray, i: int, j: int, ho: int, wo: int, s: int) -> np.ndarray:
    return a[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]


def _use_fft(kh: int, kw: int, stride: int) -> bool:
    # large stride-1 depthwise kernels are cheaper as circular FFT products;
    # the padded frame is large enough that no output wraps around
    return stride == 1 and kh * kw >= 25


def _conv_fwd(xp, w, ho, wo, s, groups):
    n = xp.shape[0]
    o, cg, kh, kw = w.shape
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(xp, w))
    if groups == xp.shape[1] == o and cg == 1:
        if _use_fft(kh, kw, s):
            full = np.fft.irfft2(np.fft.rfft2(xp) * np.conj(np.fft.rfft2(w[:, 0], s=xp.shape[2:])), s=xp.shape[2:])
            return full[:, :, :ho, :wo].astype(out.dtype)
        for i in range(kh):
            for j in range(kw):
                out += _window(xp, i, j, ho, wo, s) * w[:, 0, i, j][None, :, None, None]
        return out
    og = o // groups
    for g in range(groups):
        xg = xp[:, g * cg : (g + 1) * cg]
        acc = out[:, g * og : (g + 1) * og]
        for i in range(kh):
            for j in range(kw):
                # (og, cg) x (n, cg, ho, wo) -> (og, n, ho, wo)
                t = np.tensordot(w[g * og : (g + 1) * og, :, i, j], _window(xg, i, j, ho, wo, s), axes=([1], [1]))
                acc += t.transpose(1, 0, 2, 3)
    return out


def _conv_bwd(xp, w, gout, s, groups, need_x, need_w):
    o, cg, kh, kw = w.shape
    ho, wo = gout.shape[2:]
    gxp = np.zeros_like(xp) if need_x else None
    gw = np.zeros_like(w) if need_w else None
    if groups == xp.shape[1] == o and cg == 1:
        if _use_fft(kh, kw, s):
            size = xp.shape[2:]
            gf = np.fft.rfft2(gout, s=size)
            if need_x:
                gxp[...] = np.fft.irfft2(gf * np.fft.rfft2(w[:, 0], s=size)[None], s=size)
            if need_w:
                corr = np.fft.irfft2((np.conj(gf) * np.fft.rfft2(xp)).sum(axis=0), s=size)
                gw[:, 0] = corr[:, :kh, :kw]
            return gxp, gw
        for i in range(kh):
            for j in range(kw):
                if need_w:
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", gout, _window(xp, i, j, ho, wo, s))
                if need_x:
                    _window(gxp, i, j, ho, wo, s)[...] += gout * w[:, 0, i, j][None, :, None, None]
        return gxp, gw
    og = o // groups
    for g in range(groups):
        xg = xp[:, g * cg : (g + 1) * cg]
        gg = gout[:, g * og : (g + 1) * og]
        for i in range(kh):
            for j in range(kw):
                if need_w:
                    gw[g * og : (g + 1) * og, :, i, j] = np.tensordot(
                        gg, _window(xg, i, j, ho, wo, s), axes=([0, 2, 3], [0, 2, 3])
                    )
                if need_x:
                    # (n, og, ho, wo) x (og, cg) -> (n, ho, wo, cg)
                    t = np.tensordot(gg, w[g * og : (g + 1) * og, :, i, j], axes=([1], [0]))
                    _window(gxp[:, g * cg : (g + 1) * cg], i, j, ho, wo, s)[...] += t.transpose(0, 3, 1, 2)
    return gxp, gw


def conv2d(x: Variable, w: Variable, b: Optional[Variable], spec: ConvSpec) -> Variable:
    x, w = as_variable(x), as_variable(w)
    if x.data.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"conv2d input shape {x.shape} does not match in_channels={spec.in_channels}")
    if w.shape != spec.weight_shape:
        raise ValueError(f"conv2d weight shape {w.shape}, expected {spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise ValueError(f"conv2d bias shape {b.shape}, expected ({spec.out_channels},)")
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output size {ho}x{wo} is not positive")
    p, s = spec.padding, spec.stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    out = _conv_fwd(xp, w.data, ho, wo, s, spec.groups)
    if b is not None:
        out += b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(g):
        gxp, gw = _conv_bwd(xp, w.data, g, s, spec.groups, x.requires_grad, w.requires_grad)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, parents, backward_fn, "conv2d")


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics."""

    gamma: Variable
    beta: Variable
    running_mean: Optional[np.ndarray]
    running_var: Optional[np.ndarray]
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32, name: str = "bn") -> "BatchNormState":
        return cls(
            gamma=Variable(np.ones(channels, dtype), requires_grad=True, name=f"{name}.gamma"),
            beta=Variable(np.zeros(channels, dtype), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Variable, state: BatchNormState) -> Variable:
    x = as_variable(x)
    c = state.channels
    if x.data.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"batch_norm input {x.shape} does not have {c} channels")
    gamma, beta = state.gamma, state.beta
    shape = (1, c, 1, 1)
    if state.mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m == 0:
            raise ValueError("batch_norm in train mode needs a non-empty batch")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
    elif state.mode == "eval":
        if state.running_mean is None or state.running_var is None:
            raise ValueError("batch_norm in eval mode with uninitialized running statistics")
        mean, var, m = state.running_mean, state.running_var, None
    else:
        raise ValueError(f"unknown batch_norm mode {state.mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    out = out.astype(x.dtype, copy=False)

    def backward_fn(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if m is None:
                gx = gxhat * inv_std.reshape(shape)
            else:
                gx = (inv_std.reshape(shape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward_fn, "batch_norm")


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation(x: Variable, kind: str) -> Variable:
    x = as_variable(x)
    z = x.data
    if kind == "relu":
        mask = z > 0
        out = z * mask

        def backward_fn(g):
            return (g * mask,)

    elif kind == "sigmoid":
        out = _sigmoid(z)

        def backward_fn(g):
            return (g * out * (1.0 - out),)

    elif kind in ("gaussian_gate", "gaussian"):
        out = np.exp(-z * z)

        def backward_fn(g):
            return (g * (-2.0) * z * out,)

    else:
        raise ValueError(f"unknown activation {kind!r}")
    return make_result(out, (x,), backward_fn, kind)


def relu(x: Variable) -> Variable:
    return activation(x, "relu")


def gate(x: Variable, kind: str) -> Variable:
    if kind not in GATES:
        raise ValueError(f"unknown gate {kind!r}; expected one of {GATES}")
    return activation(x, "sigmoid" if kind == "sigmoid" else "gaussian_gate")


def pool(x: Variable, kind: str) -> Variable:
    x = as_variable(x)
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise ValueError("pool on empty spatial dims")
    if kind == "global_avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def backward_fn(g):
            return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    elif kind == "avg2x2":
        h2, w2 = h // 2, w // 2
        if h2 == 0 or w2 == 0:
            raise ValueError(f"avg2x2 needs at least 2x2 input, got {h}x{w}")
        # odd trailing row/column is dropped
        xc = x.data[:, :, : 2 * h2, : 2 * w2]
        out = xc.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))

        def backward_fn(g):
            gx = np.zeros_like(x.data)
            up = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
            gx[:, :, : 2 * h2, : 2 * w2] = up
            return (gx,)

    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return make_result(out, (x,), backward_fn, kind)


def concat_channels(xs: Sequence[Variable]) -> Variable:
    xs = [as_variable(v) for v in xs]
    if not xs:
        raise ValueError("concat_channels needs at least one input")
    ref = xs[0].shape
    for v in xs[1:]:
        if v.data.ndim != 4 or (v.shape[0], v.shape[2], v.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"concat_channels spatial mismatch: {ref} vs {v.shape}")
    out = np.concatenate([v.data for v in xs], axis=1)
    bounds = np.cumsum([0] + [v.shape[1] for v in xs])

    def backward_fn(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs))]

    return make_result(out, xs, backward_fn, "concat")


def hadamard(x: Variable, g: Variable) -> Variable:
    x, g = as_variable(x), as_variable(g)
    if x.shape != g.shape:
        raise ValueError(f"hadamard shape mismatch: {x.shape} vs {g.shape}")
    out = x.data * g.data

    def backward_fn(gout):
        return gout * g.data, gout * x.data

    return make_result(out, (x, g), backward_fn, "hadamard")


def add(a: Variable, b: Variable) -> Variable:
    a, b = as_variable(a), as_variable(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(x: Variable, factor: float) -> Variable:
    x = as_variable(x)
    return make_result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def sum_all(x: Variable) -> Variable:
    x = as_variable(x)

    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(x.data.sum()), (x,), backward_fn, "sum")


def reshape(x: Variable, shape: tuple) -> Variable:
    x = as_variable(x)
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def linear(x: Variable, w: Variable, b: Optional[Variable] = None) -> Variable:
    """``x @ w.T + b`` with ``w`` of shape (out_features, in_features)."""
    x, w = as_variable(x), as_variable(w)
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result(out, parents, backward_fn, "linear")


def pixel_shuffle(x: Variable, r: int) -> Variable:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r)."""
    x = as_variable(x)
    n, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"pixel_shuffle needs channels divisible by {r * r}, got {c}")
    co = c // (r * r)
    out = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def backward_fn(g):
        return (g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return make_result(out, (x,), backward_fn, "pixel_shuffle")


def dropout(x: Variable, rate: float, rng: np.random.Generator) -> Variable:
    x = as_variable(x)
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def compute_loss(kind: str, pred: Variable, target) -> Variable:
    """Scalar mean loss. ``softmax_ce`` takes integer class indices as target."""
    pred = as_variable(pred)
    t = np.asarray(target)
    p = pred.data
    if kind == "mse":
        if t.shape != p.shape:
            raise ValueError(f"mse shape mismatch: {p.shape} vs {t.shape}")
        r = p - t
        out = np.asarray((r * r).mean(), dtype=p.dtype)

        def backward_fn(g):
            return (g * 2.0 * r / r.size,)

    elif kind == "mae":
        if t.shape != p.shape:
            raise ValueError(f"mae shape mismatch: {p.shape} vs {t.shape}")
        r = p - t
        out = np.asarray(np.abs(r).mean(), dtype=p.dtype)

        def backward_fn(g):
            return (g * np.sign(r) / r.size,)

    elif kind == "softmax_ce":
        if p.ndim != 2 or t.shape != (p.shape[0],):
            raise ValueError(f"softmax_ce expects logits (N, K) and N labels, got {p.shape}, {t.shape}")
        k = p.shape[1]
        if not np.issubdtype(t.dtype, np.integer) or t.min(initial=0) < 0 or t.max(initial=0) >= k:
            raise ValueError(f"class indices must be integers in [0, {k})")
        shifted = p - p.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        rows = np.arange(p.shape[0])
        out = np.asarray(-logp[rows, t].mean(), dtype=p.dtype)

        def backward_fn(g):
            d = np.exp(logp)
            d[rows, t] -= 1.0
            return (g * d / p.shape[0],)

    else:
        raise ValueError(f"unknown loss {kind!r}")
    return make_result(out, (pred,), backward_fn, kind)
