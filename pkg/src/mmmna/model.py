"""Network assembly: shared 3D ResNet18 backbone, multi-scale fusion, heads, losses."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .fusion import MODALITIES, MNAFFM, FusionModuleConfig, default_rank
from .layers import BatchNorm3d, Conv3d, Linear, Module, conv_output_extent, maxpool3d
from .tensor import (Tensor, add, clip, concat, log, matmul, mean, mul, power, relu, reshape,
                     softmax, split, sub, swap_last, tsum)

BRANCHES = ("fusion",) + MODALITIES
N_NONIMAGE = 5
SEG_LABELS = (0, 1, 2, 4)


@dataclass
class MMMNAConfig:
    input_shape: tuple = (16, 32, 32)
    base_channels: int = 8
    num_classes: int = 3
    lam: float = 0.25
    alpha: float = 0.25
    gamma: float = 2.0
    variant: str = "linformer"
    ranks: tuple | None = None
    single_scale: bool = False
    baseline_concat: bool = False
    scale_qk: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if len(self.input_shape) != 3 or any(s <= 0 or s % 16 for s in self.input_shape):
            raise ConfigError(f"input extents must be positive multiples of 16, got {self.input_shape}")
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError("base_channels must be an even integer >= 2")
        if self.num_classes != 3:
            raise ConfigError("only 3 survival classes are supported")
        if self.ranks is not None:
            self.ranks = tuple(int(k) for k in self.ranks)
            if len(self.ranks) != 4:
                raise ConfigError("ranks needs one entry per scale")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def scale_shapes(self):
        """Spatial extents of the four stage outputs (where fusion is inserted)."""
        stem = [conv_output_extent(s, 7, st, 3) for s, st in zip(self.input_shape, (1, 2, 2))]
        shape = tuple(conv_output_extent(s, 3, 2, 1) for s in stem)
        out = [shape]
        for _ in range(3):
            shape = tuple(conv_output_extent(s, 3, 2, 1) for s in shape)
            out.append(shape)
        return out

    def stage_channels(self):
        return [self.base_channels * m for m in (1, 2, 4, 8)]

    def fusion_configs(self):
        cfgs = []
        for i, (c, sp) in enumerate(zip(self.stage_channels(), self.scale_shapes())):
            n = 4 * int(np.prod(sp))
            k = self.ranks[i] if self.ranks is not None else default_rank(n)
            cfgs.append(FusionModuleConfig(d_model=c, n=n, k=min(k, n), variant=self.variant,
                                           scale_qk=self.scale_qk))
        return cfgs


class ModalityInput(NamedTuple):
    volume: np.ndarray
    seg: np.ndarray


@dataclass
class NonImageFeatures:
    s1: float
    s2: float
    s4: float
    s_total: float
    s_age: float

    def as_array(self):
        return np.array([self.s1, self.s2, self.s4, self.s_total, self.s_age])


@dataclass
class BranchOutputs:
    fusion: Tensor
    flair: Tensor | None = None
    t1: Tensor | None = None
    t1ce: Tensor | None = None
    t2: Tensor | None = None
    workspaces: list = field(default_factory=list, repr=False)

    def items(self):
        for name in BRANCHES:
            val = getattr(self, name)
            if val is not None:
                yield name, val


# -- inputs ---------------------------------------------------------------

def normalize_intensity(volume):
    """z-score over non-zero voxels; background stays zero."""
    vol = np.asarray(volume, dtype=np.float64)
    mask = vol != 0
    if not mask.any():
        return vol.astype(np.float32)
    vals = vol[mask]
    sd = vals.std()
    out = np.zeros_like(vol)
    out[mask] = (vals - vals.mean()) / (sd if sd > 0 else 1.0)
    return out.astype(np.float32)


def modality_channels(item: ModalityInput):
    """Stack a normalised volume with its label map scaled by 1/4 -> ``2 x D x H x W``."""
    return np.stack([normalize_intensity(item.volume),
                     np.asarray(item.seg, dtype=np.float32) / 4.0]).astype(np.float32)


def substitution_sources(available):
    """Index of the modality that fills each of the four slots."""
    available = set(available)
    unknown = available - set(MODALITIES)
    if unknown:
        raise ConfigError(f"unknown modalities {sorted(unknown)}")
    if "flair" not in available:
        raise ContractError("FLAIR must be available to substitute missing modalities")
    return [i if m in available else 0 for i, m in enumerate(MODALITIES)]


def substitute_missing(inputs, available):
    """Fill every unavailable modality slot with the FLAIR input.

    ``inputs`` maps modality name to :class:`ModalityInput` (missing ones may
    be absent or ``None``); returns the four inputs in canonical order.
    """
    src = substitution_sources(available)
    if inputs.get("flair") is None:
        raise ContractError("FLAIR input is missing")
    return [inputs[MODALITIES[j]] for j in src]


def build_nonimage_features(seg, volume, age):
    seg = np.asarray(seg)
    bad = set(np.unique(seg).tolist()) - set(SEG_LABELS)
    if bad:
        raise ContractError(f"segmentation has labels outside {{0,1,2,4}}: {sorted(bad)}")
    nonzero = int(np.count_nonzero(volume))
    if nonzero == 0:
        raise ContractError("volume has no non-zero voxels")
    counts = {lab: int(np.count_nonzero(seg == lab)) for lab in (1, 2, 4)}
    total = sum(counts.values())
    if total == 0:
        return NonImageFeatures(0.0, 0.0, 0.0, 0.0, age / 100.0)
    return NonImageFeatures(counts[1] / total, counts[2] / total, counts[4] / total,
                            total / nonzero, age / 100.0)


# -- backbone -------------------------------------------------------------

class _Seeds:
    def __init__(self, seed):
        self._root = np.random.SeedSequence(seed)

    def next(self):
        return self._root.spawn(1)[0]


class BasicBlock(Module):
    def __init__(self, in_ch, out_ch, stride, seeds, dtype):
        self.conv1 = Conv3d(in_ch, out_ch, 3, stride, 1, bias=False, seed=seeds.next(), dtype=dtype)
        self.bn1 = BatchNorm3d(out_ch, dtype=dtype)
        self.conv2 = Conv3d(out_ch, out_ch, 3, 1, 1, bias=False, seed=seeds.next(), dtype=dtype)
        self.bn2 = BatchNorm3d(out_ch, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.down = Conv3d(in_ch, out_ch, 1, stride, 0, bias=False, seed=seeds.next(), dtype=dtype)
            self.down_bn = BatchNorm3d(out_ch, dtype=dtype)
        else:
            self.down = self.down_bn = None

    def __call__(self, x):
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        short = self.down_bn(self.down(x)) if self.down is not None else x
        return relu(add(y, short))


class Backbone(Module):
    """3D ResNet18 with a ``1x2x2``-strided 7x7x7 stem."""

    def __init__(self, in_channels, base, seeds, dtype):
        self.stem = Conv3d(in_channels, base, 7, (1, 2, 2), 3, bias=False, seed=seeds.next(), dtype=dtype)
        self.stem_bn = BatchNorm3d(base, dtype=dtype)
        self.stages = []
        ch = base
        for i, out_ch in enumerate(base * m for m in (1, 2, 4, 8)):
            stride = 1 if i == 0 else 2
            self.stages.append(_Stage([BasicBlock(ch, out_ch, stride, seeds, dtype),
                                       BasicBlock(out_ch, out_ch, 1, seeds, dtype)]))
            ch = out_ch

    def stem_forward(self, x):
        return maxpool3d(relu(self.stem_bn(self.stem(x))), 3, 2, 1)

    def __call__(self, x):
        """Per-scale stage outputs, no fusion."""
        feats = []
        x = self.stem_forward(x)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def __call__(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def backbone_forward(x, params: Backbone):
    if x.shape[1] != params.stem.weight.shape[1]:
        raise DimensionError(f"backbone expects {params.stem.weight.shape[1]} channels, got {x.shape[1]}")
    sp = x.shape[2:]
    if any(s % 16 for s in sp):
        raise ConfigError(f"spatial extents {sp} must be multiples of 16")
    return params(x if isinstance(x, Tensor) else Tensor(x))


# -- pooling and losses ---------------------------------------------------

def branch_weighted_pool(feature: Tensor, weights: Tensor):
    """``out[..., c] = sum_v feature[..., c, v] * w[v]`` over flattened positions.

    ``feature`` is ``[N x] C x D x H x W`` or ``[N x] C x P``.
    """
    p = weights.shape[0]
    if feature.ndim >= 4 and int(np.prod(feature.shape[-3:])) == p:
        lead = feature.shape[:-3]
    elif feature.shape[-1] == p:
        lead = feature.shape[:-1]
    else:
        raise DimensionError(f"pool weights of length {p} do not match feature {feature.shape}")
    flat = reshape(feature, lead + (1, p))
    return reshape(matmul(flat, reshape(weights, (p, 1))), lead)


def _check_onehot(y, shape):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != shape:
        raise ContractError(f"targets shaped {y.shape}, logits {shape}")
    if not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=-1) == 1):
        raise ContractError("targets must be one-hot")
    return y


def focal_terms(p: Tensor, y, alpha=0.25, gamma=2.0, eps=1e-7):
    """Elementwise binary focal terms for probabilities ``p`` and 0/1 targets ``y``.

    ``-a*y*(1-p)^g*log(p) - (1-a)*(1-y)*p^g*log(1-p)``, with ``p`` clamped to ``[eps, 1-eps]``.
    """
    y = np.asarray(y, dtype=p.dtype)
    p = clip(p, eps, 1.0 - eps)
    q = sub(1.0, p)
    pos = mul(Tensor(-alpha * y), mul(power(q, gamma), log(p)))
    neg = mul(Tensor(-(1.0 - alpha) * (1.0 - y)), mul(power(p, gamma), log(q)))
    return add(pos, neg)


def focal_loss(logits: Tensor, y, alpha=0.25, gamma=2.0, eps=1e-7):
    """One-vs-rest focal loss on ``softmax(logits)``, summed over classes, averaged over the batch."""
    y = _check_onehot(y, logits.shape)
    total = tsum(focal_terms(softmax(logits, axis=-1), y, alpha, gamma, eps))
    batch = logits.shape[0] if logits.ndim == 2 else 1
    return mul(total, 1.0 / batch)


def total_loss(losses, lam):
    """``lam * (L_T1 + L_T1Ce + L_T2 + L_FLAIR) + L_fusion``."""
    missing = set(BRANCHES) - set(losses)
    if missing:
        raise ContractError(f"missing branch losses {sorted(missing)}")
    side = losses["t1"] + losses["t1ce"] + losses["t2"] + losses["flair"]
    return side * lam + losses["fusion"]


# -- networks -------------------------------------------------------------

def _stack_modalities(parts, batch):
    c, d, h, w = parts[0].shape[-4:]
    parts = [reshape(p, (batch, 1, c, d, h, w)) for p in parts]
    return reshape(concat(parts, axis=1), (batch * 4, c, d, h, w))


def _split_modalities(x, batch):
    c, d, h, w = x.shape[-4:]
    parts = split(reshape(x, (batch, 4, c, d, h, w)), 4, axis=1)
    return [reshape(p, (batch, c, d, h, w)) for p in parts]


class MMMNANet(Module):
    """Shared backbone over the four modality inputs with attention fusion at each scale."""

    def __init__(self, config: MMMNAConfig):
        if config.baseline_concat:
            raise ConfigError("use ConcatBaseline for baseline_concat configs")
        self.config = config
        dtype = config.np_dtype
        seeds = _Seeds(config.seed)
        self.backbone = Backbone(2, config.base_channels, seeds, dtype)
        fusion_seeds = [seeds.next() for _ in range(4)]
        self.fusers = [MNAFFM(cfg, seed=s, dtype=dtype)
                       if (i == 3 or not config.single_scale) else None
                       for i, (cfg, s) in enumerate(zip(config.fusion_configs(), fusion_seeds))]
        c_last = config.stage_channels()[-1]
        sp_last = int(np.prod(config.scale_shapes()[-1]))
        for name in BRANCHES:
            length = 4 * sp_last if name == "fusion" else sp_last
            setattr(self, f"pool_{name}", Tensor(np.full(length, 1.0 / length, dtype=dtype), requires_grad=True))
        for name in BRANCHES:
            setattr(self, f"head_{name}", Linear(c_last + N_NONIMAGE, config.num_classes,
                                                 seed=seeds.next(), dtype=dtype))

    def backbone_parameters(self):
        return self.backbone.parameters()

    def __call__(self, inputs, nonimage):
        """``inputs``: ``B x 4 x 2 x D x H x W``; ``nonimage``: ``B x 5``."""
        cfg = self.config
        inputs = np.asarray(inputs)
        if inputs.ndim != 6 or inputs.shape[1:3] != (4, 2) or inputs.shape[3:] != cfg.input_shape:
            raise DimensionError(f"inputs must be B x 4 x 2 x {cfg.input_shape}, got {inputs.shape}")
        batch = inputs.shape[0]
        nonimage = np.asarray(nonimage, dtype=cfg.np_dtype).reshape(batch, N_NONIMAGE)
        x = Tensor(inputs.reshape((batch * 4, 2) + cfg.input_shape).astype(cfg.np_dtype))
        x = self.backbone.stem_forward(x)
        workspaces = []
        parts = None
        for stage, fuser in zip(self.backbone.stages, self.fusers):
            x = stage(x)
            if fuser is None:
                workspaces.append(None)
                continue
            parts, ws = fuser(_split_modalities(x, batch))
            workspaces.append(ws)
            x = _stack_modalities(parts, batch)
        ws = workspaces[-1]
        extra = Tensor(nonimage)
        fused = swap_last(add(ws.f1, ws.f3))
        out = {}
        for name in BRANCHES:
            feat = fused if name == "fusion" else parts[MODALITIES.index(name)]
            pooled = branch_weighted_pool(feat, getattr(self, f"pool_{name}"))
            out[name] = getattr(self, f"head_{name}")(concat([pooled, extra], axis=1))
        return BranchOutputs(workspaces=workspaces, **out)

    def loss(self, outputs: BranchOutputs, y):
        cfg = self.config
        losses = {name: focal_loss(logits, y, cfg.alpha, cfg.gamma) for name, logits in outputs.items()}
        return total_loss(losses, cfg.lam), losses


class ConcatBaseline(Module):
    """Single-stream comparison model: all modalities and masks as 8 input channels."""

    def __init__(self, config: MMMNAConfig):
        self.config = config
        dtype = config.np_dtype
        seeds = _Seeds(config.seed)
        self.backbone = Backbone(8, config.base_channels, seeds, dtype)
        self.head_fusion = Linear(config.stage_channels()[-1], config.num_classes, seed=seeds.next(), dtype=dtype)

    def __call__(self, inputs, nonimage=None):
        cfg = self.config
        inputs = np.asarray(inputs)
        if inputs.ndim != 6 or inputs.shape[1:3] != (4, 2) or inputs.shape[3:] != cfg.input_shape:
            raise DimensionError(f"inputs must be B x 4 x 2 x {cfg.input_shape}, got {inputs.shape}")
        batch = inputs.shape[0]
        x = Tensor(inputs.reshape((batch, 8) + cfg.input_shape).astype(cfg.np_dtype))
        feat = self.backbone(x)[-1]
        pooled = mean(reshape(feat, feat.shape[:2] + (-1,)), axis=2)
        return BranchOutputs(fusion=self.head_fusion(pooled))

    def loss(self, outputs: BranchOutputs, y):
        cfg = self.config
        lf = focal_loss(outputs.fusion, y, cfg.alpha, cfg.gamma)
        return lf, {"fusion": lf}


def build_model(config: MMMNAConfig):
    return ConcatBaseline(config) if config.baseline_concat else MMMNANet(config)


def mmmna_forward(inputs, nonimage, config: MMMNAConfig, params):
    if params.config != config:
        raise ConfigError("parameters were built for a different model config")
    return params(inputs, nonimage)


def config_from_dict(values):
    known = {f.name for f in fields(MMMNAConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown model config keys {sorted(unknown)}")
    return MMMNAConfig(**values)
