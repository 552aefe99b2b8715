"""Non-local attention fusion of the four modality feature maps.

Modality maps are flattened into one token sequence (modality-major, then
D, H, W scan order), shifted by a sinusoidal position table, passed through
single-head self-attention and split back into four maps that are added to
the module input. Two attention variants are provided: the quadratic
non-local block and the low-rank variant that projects keys and values from
length ``n`` down to ``k`` with learnable ``E`` and ``F``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import Module, init_parameters
from .tensor import Tensor, add, concat, matmul, mul, reshape, softmax, split, swap_last

MODALITIES = ("flair", "t1", "t1ce", "t2")
VARIANTS = ("full", "linformer")


def default_rank(n):
    """Projection rank used when none is configured: ``n // 8``, at least 4, at most ``n``."""
    return min(n, max(4, n // 8))


@dataclass(frozen=True)
class FusionModuleConfig:
    d_model: int
    n: int
    k: int | None = None
    variant: str = "linformer"
    scale_qk: bool = True
    use_pe: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant {self.variant!r}")
        if self.n <= 0 or self.n % 4:
            raise ConfigError(f"sequence length {self.n} must be a positive multiple of 4")
        if self.d_model <= 0:
            raise ConfigError("d_model must be positive")
        if self.k is None:
            object.__setattr__(self, "k", default_rank(self.n))
        if not 1 <= self.k <= self.n:
            raise ConfigError(f"projection rank k={self.k} must lie in [1, {self.n}]")
        if self.use_pe and self.d_model % 2:
            raise ConfigError(f"positional encoding needs an even d_model, got {self.d_model}")


@dataclass
class AttentionWorkspace:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    weights: Tensor


@lru_cache(maxsize=32)
def _pe_table(n, d_model):
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    pe = np.empty((n, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


def positional_encoding(n, d_model):
    """Fixed sinusoidal table of shape ``n x d_model`` (float64, read-only)."""
    if d_model <= 0 or d_model % 2:
        raise ConfigError(f"positional encoding needs an even d_model, got {d_model}")
    return _pe_table(int(n), int(d_model))


def flatten_concat(features):
    """Four ``[N x] C x D x H x W`` maps -> ``[N x] n x C`` tokens, ``n = 4*D*H*W``."""
    if len(features) != 4:
        raise DimensionError(f"expected 4 modality feature maps, got {len(features)}")
    ref = features[0].shape
    for f in features[1:]:
        if f.shape != ref:
            raise DimensionError(f"modality feature shapes differ: {ref} vs {f.shape}")
    lead, (c, d, h, w) = ref[:-4], ref[-4:]
    tokens = []
    for f in features:
        flat = reshape(f, lead + (c, d * h * w))
        tokens.append(swap_last(flat))
    return concat(tokens, axis=-2)


def split_reshape(tokens: Tensor, spatial):
    """Inverse of :func:`flatten_concat` for maps with the given ``(D, H, W)``."""
    lead = tokens.shape[:-2]
    c = tokens.shape[-1]
    out = []
    for part in split(tokens, 4, axis=tokens.ndim - 2):
        out.append(reshape(swap_last(part), lead + (c,) + tuple(spatial)))
    return out


def _project(f2, wq, wk, wv):
    return matmul(f2, wq), matmul(f2, wk), matmul(f2, wv)


def full_attention(f2: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, scale_qk=True, return_weights=False):
    """Quadratic self-attention over all ``n`` tokens."""
    q, k, v = _project(f2, wq, wk, wv)
    logits = matmul(q, swap_last(k))
    if scale_qk:
        logits = mul(logits, 1.0 / math.sqrt(f2.shape[-1]))
    p = softmax(logits, axis=-1)
    out = matmul(p, v)
    return (out, p) if return_weights else out


def linformer_attention(f2: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, e: Tensor, f: Tensor,
                        scale_qk=True, return_weights=False):
    """Self-attention with keys and values projected to rank ``k``.

    ``e`` and ``f`` are ``k x n``; the weight matrix is ``n x k``.
    """
    n = f2.shape[-2]
    if e.shape[-1] != n or f.shape[-1] != n or e.shape != f.shape:
        raise ConfigError(f"projections {e.shape}/{f.shape} do not match sequence length {n}")
    q, k, v = _project(f2, wq, wk, wv)
    k_red = matmul(e, k)
    v_red = matmul(f, v)
    logits = matmul(q, swap_last(k_red))
    if scale_qk:
        logits = mul(logits, 1.0 / math.sqrt(f2.shape[-1]))
    p = softmax(logits, axis=-1)
    out = matmul(p, v_red)
    return (out, p) if return_weights else out


class MNAFFM(Module):
    """Attention fusion block for one scale, with residual output."""

    def __init__(self, config: FusionModuleConfig, seed=0, dtype=np.float32):
        self.config = config
        d, n, k = config.d_model, config.n, config.k
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        ss = root.spawn(5)
        self.wq = Tensor(init_parameters("linear", (d, d), ss[0], dtype), requires_grad=True)
        self.wk = Tensor(init_parameters("linear", (d, d), ss[1], dtype), requires_grad=True)
        self.wv = Tensor(init_parameters("linear", (d, d), ss[2], dtype), requires_grad=True)
        if config.variant == "linformer":
            std = 1.0 / math.sqrt(n)
            self.e = Tensor((np.random.default_rng(ss[3]).standard_normal((k, n)) * std).astype(dtype),
                            requires_grad=True)
            self.f = Tensor((np.random.default_rng(ss[4]).standard_normal((k, n)) * std).astype(dtype),
                            requires_grad=True)
        else:
            self.e = self.f = None

    def attention(self, f2, return_weights=False):
        cfg = self.config
        if cfg.variant == "full":
            return full_attention(f2, self.wq, self.wk, self.wv, cfg.scale_qk, return_weights)
        return linformer_attention(f2, self.wq, self.wk, self.wv, self.e, self.f, cfg.scale_qk,
                                   return_weights)

    def __call__(self, features):
        """Fuse four maps; returns ``(outputs, workspace)``."""
        cfg = self.config
        c, d, h, w = features[0].shape[-4:]
        if c != cfg.d_model or 4 * d * h * w != cfg.n:
            raise ConfigError(
                f"module configured for d_model={cfg.d_model}, n={cfg.n}; got C={c}, n={4 * d * h * w}")
        f1 = flatten_concat(features)
        if cfg.use_pe:
            pe = Tensor(positional_encoding(cfg.n, cfg.d_model).astype(f1.dtype))
            f2 = add(f1, pe)
        else:
            f2 = f1
        f3, p = self.attention(f2, return_weights=True)
        parts = split_reshape(f3, (d, h, w))
        outputs = [add(a, b) for a, b in zip(parts, features)]
        return outputs, AttentionWorkspace(f1=f1, f2=f2, f3=f3, weights=p)


def mnaffm_forward(features, config: FusionModuleConfig, params: MNAFFM):
    """Functional entry point: ``params`` is an :class:`MNAFFM` built for ``config``."""
    if params.config != config:
        raise ConfigError("parameters were built for a different fusion config")
    return params(features)
