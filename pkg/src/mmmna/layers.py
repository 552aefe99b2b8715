"""3D network layers, parameter initialisation and the Adam optimiser."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError
from .tensor import Tensor, make_op, matmul, swap_last


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(e) for e in v)
    if len(v) != 3:
        raise DimensionError(f"expected 3 values, got {v}")
    return v


# im2col buffer size (elements) above which conv3d falls back to per-offset accumulation
_IM2COL_LIMIT = 5e7


def conv_output_extent(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


# -- functional ops -------------------------------------------------------

def _window(arr, offset, stride, out_shape):
    kd, kh, kw = offset
    sd, sh, sw = stride
    do, ho, wo = out_shape
    return arr[:, :, kd:kd + sd * (do - 1) + 1:sd,
               kh:kh + sh * (ho - 1) + 1:sh,
               kw:kw + sw * (wo - 1) + 1:sw]


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0):
    """Zero-padded 3D cross-correlation, ``x`` is ``N x C x D x H x W``.

    Uses a single im2col matmul when the column buffer is small enough and
    otherwise accumulates one ``tensordot`` per kernel offset, keeping peak
    memory at the size of the output.
    """
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise DimensionError(f"conv3d: expected rank-5 input and weight, got {x.shape}, {weight.shape}")
    n, c = x.shape[:2]
    oc, ic, *ks = weight.shape
    if c != ic:
        raise DimensionError(f"conv3d: input has {c} channels, weight {weight.shape} expects {ic}")
    out_sp = tuple(conv_output_extent(x.shape[2 + i], ks[i], stride[i], padding[i]) for i in range(3))
    if min(out_sp) < 1:
        raise DimensionError(f"conv3d: kernel {tuple(ks)} larger than padded input {x.shape[2:]}")
    pd, ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if any(padding) else x.data
    w = weight.data
    offsets = [(a, b, d) for a in range(ks[0]) for b in range(ks[1]) for d in range(ks[2])]
    cols = None
    if c * len(offsets) * n * int(np.prod(out_sp)) <= _IM2COL_LIMIT:
        win = sliding_window_view(xp, tuple(ks), axis=(2, 3, 4))[
            :, :, ::stride[0], ::stride[1], ::stride[2]]
        cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(-1, c * len(offsets))
        acc = (cols @ w.reshape(oc, -1).T).reshape((n,) + out_sp + (oc,)).transpose(4, 0, 1, 2, 3)
    else:
        acc = np.zeros((oc, n) + out_sp, dtype=x.dtype)
        for off in offsets:
            acc += np.tensordot(w[:, :, off[0], off[1], off[2]], _window(xp, off, stride, out_sp),
                                axes=([1], [1]))
    if bias is not None:
        acc += bias.data.reshape(oc, 1, 1, 1, 1)
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4))

    def bw(g):
        gt = g.transpose(1, 0, 2, 3, 4)
        gw = None
        if weight.requires_grad:
            if cols is not None:
                gw = (g.transpose(0, 2, 3, 4, 1).reshape(-1, oc).T @ cols).reshape(w.shape)
            else:
                gw = np.zeros_like(w)
                for off in offsets:
                    gw[:, :, off[0], off[1], off[2]] = np.tensordot(
                        gt, _window(xp, off, stride, out_sp), axes=([1, 2, 3, 4], [0, 2, 3, 4]))
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for off in offsets:
                _window(gxp, off, stride, out_sp)[...] += np.tensordot(
                    w[:, :, off[0], off[1], off[2]], gt, axes=([0], [0])).transpose(1, 0, 2, 3, 4)
            gx = gxp[:, :, pd:pd + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4]]
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_op("conv3d", out, inputs, bw)


def maxpool3d(x: Tensor, kernel, stride=None, padding=0):
    """Windowed maximum. Ties send the gradient to the first element in scan order."""
    kernel = _triple(kernel)
    stride = _triple(stride if stride is not None else kernel)
    padding = _triple(padding)
    out_sp = tuple(conv_output_extent(x.shape[2 + i], kernel[i], stride[i], padding[i]) for i in range(3))
    if min(out_sp) < 1:
        raise DimensionError(f"maxpool3d: window {kernel} exceeds input {x.shape[2:]}")
    pd, ph, pw = padding
    xp = x.data
    if any(padding):
        xp = np.pad(xp, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)), constant_values=-np.inf)
    offsets = [(a, b, d) for a in range(kernel[0]) for b in range(kernel[1]) for d in range(kernel[2])]
    best = None
    arg = np.zeros(x.shape[:2] + out_sp, dtype=np.int32)
    for k, off in enumerate(offsets):
        win = _window(xp, off, stride, out_sp)
        if best is None:
            best = win.copy()
            continue
        better = win > best
        best[better] = win[better]
        arg[better] = k

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k, off in enumerate(offsets):
            _window(gxp, off, stride, out_sp)[...] += g * (arg == k)
        return (gxp[:, :, pd:pd + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4]],)

    return make_op("maxpool3d", best, (x,), bw)


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
                training: bool, momentum=0.1, eps=1e-5):
    """Per-channel normalisation of ``N x C x D x H x W``.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` (plain ndarrays) are updated in place.
    """
    if x.ndim != 5:
        raise DimensionError(f"batchnorm3d: expected rank-5 input, got {x.shape}")
    c = x.shape[1]
    axes = (0, 2, 3, 4)
    shape = (1, c, 1, 1, 1)
    if training:
        if x.shape[0] < 2:
            raise ContractError("batchnorm3d: training mode needs batch size >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(shape)
        if training:
            m = x.size // c
            gx = (inv.reshape(shape) / m) * (
                m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv.reshape(shape)
        return gx, gg, gb

    return make_op("batchnorm3d", out, (x, gamma, beta), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None):
    """``x @ weight.T + bias`` with ``weight`` shaped ``out x in``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    y = matmul(x, swap_last(weight))
    return y + bias if bias is not None else y


# -- initialisation -------------------------------------------------------

def kaiming_normal(shape, fan_in, rng, dtype=np.float32):
    if fan_in <= 0:
        raise ContractError("kaiming_normal: fan_in must be positive")
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def init_parameters(kind, shape, seed, dtype=np.float32):
    """Initial values for a named parameter role.

    ``kind`` is one of ``"conv"``, ``"linear"`` (Kaiming normal), ``"bias"``,
    ``"beta"`` (zeros) or ``"gamma"`` (ones). Deterministic per ``seed``.
    """
    shape = tuple(shape)
    if kind in ("conv", "linear"):
        fan_in = int(np.prod(shape[1:]))
        return kaiming_normal(shape, fan_in, np.random.default_rng(seed), dtype)
    if kind in ("bias", "beta"):
        return np.zeros(shape, dtype=dtype)
    if kind == "gamma":
        return np.ones(shape, dtype=dtype)
    raise ContractError(f"init_parameters: unknown kind {kind!r}")


# -- modules --------------------------------------------------------------

class Module:
    """Parameter container. Tensor attributes with ``requires_grad`` are parameters."""

    training = True

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        state = {k: p.data.copy() for k, p in self.named_parameters()}
        state.update({k: b.copy() for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        targets = {k: p.data for k, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = set(targets) - set(state)
        if missing:
            raise ContractError(f"load_state_dict: missing entries {sorted(missing)}")
        for k, arr in targets.items():
            src = np.asarray(state[k])
            if src.shape != arr.shape:
                raise DimensionError(f"load_state_dict: {k} has shape {src.shape}, expected {arr.shape}")
            arr[...] = src


class Conv3d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, seed=0, dtype=np.float32):
        k = _triple(kernel)
        self.stride = _triple(stride)
        self.padding = _triple(padding)
        self.weight = Tensor(init_parameters("conv", (out_ch, in_ch) + k, seed, dtype), requires_grad=True)
        self.bias = Tensor(init_parameters("bias", (out_ch,), seed, dtype), requires_grad=True) if bias else None

    def output_shape(self, spatial):
        k = self.weight.shape[2:]
        return tuple(conv_output_extent(spatial[i], k[i], self.stride[i], self.padding[i]) for i in range(3))

    def __call__(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm3d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(init_parameters("gamma", (channels,), 0, dtype), requires_grad=True)
        self.beta = Tensor(init_parameters("beta", (channels,), 0, dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        return batchnorm3d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features, out_features, seed=0, dtype=np.float32):
        self.weight = Tensor(init_parameters("linear", (out_features, in_features), seed, dtype),
                             requires_grad=True)
        self.bias = Tensor(init_parameters("bias", (out_features,), seed, dtype), requires_grad=True)

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


# -- optimiser ------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params, grads):
    """One Adam update with decoupled weight decay, in place on ``params``.

    ``grads`` maps ``node_id`` to a gradient Tensor (as returned by
    :func:`mmmna.tensor.backward`). Moments are keyed by position in ``params``.
    """
    for p in params:
        if p.node_id not in grads:
            raise ContractError(f"adam_step: no gradient for parameter {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for i, p in enumerate(params):
        g = grads[p.node_id].data.astype(np.float64)
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros(p.shape)
            state.v[i] = np.zeros(p.shape)
        v = state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = p.data.astype(np.float64)
        if state.weight_decay:
            upd -= state.lr * state.weight_decay * upd
        upd -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data[...] = upd
    return params, state


class Adam:
    def __init__(self, params, lr=1e-4, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def step(self, grads):
        adam_step(self.state, self.params, grads)
