"""Central-difference gradient checks for every differentiable component."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fusion import MNAFFM, FusionModuleConfig
from .layers import batchnorm3d, conv3d, linear, maxpool3d
from .model import MMMNAConfig, MMMNANet, branch_weighted_pool, focal_loss
from .tensor import Tensor, finite_diff_check, finite_diff_check_params

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float
    tol: float = TOLERANCE

    @property
    def passed(self):
        return self.error < self.tol


def _projector(shape, rng):
    """Fixed random weights that reduce an output to a scalar."""
    r = Tensor(rng.standard_normal(shape))
    return lambda out: T.tsum(T.mul(out, r))


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _checks(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 5)
    proj = _projector((3, 5), rng)
    yield "matmul/a", lambda: finite_diff_check(lambda t: proj(T.matmul(t, Tensor(b))), a)
    yield "matmul/b", lambda: finite_diff_check(lambda t: proj(T.matmul(Tensor(a), t)), b)

    ab = _rand(rng, 2, 3, 4)
    proj_b = _projector((2, 3, 5), rng)
    yield "matmul/batched-shared", lambda: finite_diff_check(lambda t: proj_b(T.matmul(Tensor(ab), t)), b)

    s = _rand(rng, 3, 5) * 3
    proj_s = _projector((3, 5), rng)
    yield "softmax", lambda: finite_diff_check(lambda t: proj_s(T.softmax(t, axis=-1)), s)

    parts = _rand(rng, 4, 2, 3)
    proj_c = _projector((1, 2, 12), rng)
    yield "concat+split", lambda: finite_diff_check(
        lambda t: proj_c(T.concat(T.split(t, 4, axis=0)[::-1], axis=2)), parts)

    pos = np.abs(_rand(rng, 2, 3)) + 0.5
    proj_e = _projector((2, 3), rng)
    yield "elementwise", lambda: finite_diff_check(
        lambda t: proj_e(T.div(T.mul(T.exp(t * 0.3), T.log(t)), T.power(t, 1.5) + 1.0) - t), pos)

    x = _rand(rng, 1, 2, 4, 4, 4)
    w = _rand(rng, 3, 2, 3, 3, 3) * 0.3
    bias = _rand(rng, 3)
    proj_v = _projector((1, 3, 4, 2, 2), rng)
    yield "conv3d/input", lambda: finite_diff_check(
        lambda t: proj_v(conv3d(t, Tensor(w), Tensor(bias), (1, 2, 2), 1)), x)
    yield "conv3d/weight", lambda: finite_diff_check(
        lambda t: proj_v(conv3d(Tensor(x), t, Tensor(bias), (1, 2, 2), 1)), w)
    yield "conv3d/bias", lambda: finite_diff_check(
        lambda t: proj_v(conv3d(Tensor(x), Tensor(w), t, (1, 2, 2), 1)), bias)

    xp = _rand(rng, 2, 2, 4, 4, 4)
    proj_p = _projector((2, 2, 2, 2, 2), rng)
    yield "maxpool3d/k2s2", lambda: finite_diff_check(lambda t: proj_p(maxpool3d(t, 2, 2)), xp)
    yield "maxpool3d/k3s2p1", lambda: finite_diff_check(lambda t: proj_p(maxpool3d(t, 3, 2, 1)), xp)

    xb = _rand(rng, 3, 2, 2, 3, 2) * 2 + 1
    gamma, beta = _rand(rng, 2), _rand(rng, 2)
    proj_n = _projector(xb.shape, rng)

    def bn(t, g, bt, training):
        return proj_n(batchnorm3d(t, g, bt, np.zeros(2), np.ones(2), training))

    yield "batchnorm3d/input", lambda: finite_diff_check(lambda t: bn(t, Tensor(gamma), Tensor(beta), True), xb)
    yield "batchnorm3d/gamma", lambda: finite_diff_check(lambda t: bn(Tensor(xb), t, Tensor(beta), True), gamma)
    yield "batchnorm3d/beta", lambda: finite_diff_check(lambda t: bn(Tensor(xb), Tensor(gamma), t, True), beta)
    yield "batchnorm3d/eval", lambda: finite_diff_check(lambda t: bn(t, Tensor(gamma), Tensor(beta), False), xb)

    xl, wl, bl = _rand(rng, 4, 5), _rand(rng, 3, 5), _rand(rng, 3)
    proj_l = _projector((4, 3), rng)
    yield "linear/input", lambda: finite_diff_check(lambda t: proj_l(linear(t, Tensor(wl), Tensor(bl))), xl)
    yield "linear/weight", lambda: finite_diff_check(lambda t: proj_l(linear(Tensor(xl), t, Tensor(bl))), wl)
    yield "linear/bias", lambda: finite_diff_check(lambda t: proj_l(linear(Tensor(xl), Tensor(wl), t)), bl)

    feat, pw = _rand(rng, 2, 3, 2, 2, 2), _rand(rng, 8)
    proj_w = _projector((2, 3), rng)
    yield "weighted_pool/feature", lambda: finite_diff_check(
        lambda t: proj_w(branch_weighted_pool(t, Tensor(pw))), feat)
    yield "weighted_pool/weights", lambda: finite_diff_check(
        lambda t: proj_w(branch_weighted_pool(Tensor(feat), t)), pw)

    logits = _rand(rng, 4, 3) * 2
    y = np.eye(3)[rng.integers(0, 3, size=4)]
    yield "focal_loss", lambda: finite_diff_check(lambda t: focal_loss(t, y, 0.25, 2.0), logits)
    yield "focal_loss/gamma0", lambda: finite_diff_check(lambda t: focal_loss(t, y, 0.5, 0.0), logits)

    for variant in ("linformer", "full"):
        yield from _fusion_checks(rng, variant)

    yield "mmmna/end-to-end", lambda: _end_to_end(rng)
    yield "mmmna/end-to-end-fusion-heads", lambda: _end_to_end(rng, heads_only=True)


def _fusion_checks(rng, variant):
    cfg = FusionModuleConfig(d_model=4, n=4 * 8, k=6 if variant == "linformer" else None, variant=variant)
    module = MNAFFM(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    feats = _rand(rng, 4, 2, 4, 2, 2, 2)
    proj = _projector((8, 4, 2, 2, 2), rng)

    def run(t):
        outs, _ = module([T.reshape(p, p.shape[1:]) for p in T.split(t, 4, axis=0)])
        return proj(T.concat(outs, axis=0))

    yield f"mnaffm[{variant}]/inputs", lambda: finite_diff_check(run, feats)
    yield f"mnaffm[{variant}]/params", lambda: finite_diff_check_params(
        lambda: run(Tensor(feats)), module.parameters())


def _end_to_end(rng, samples=10, heads_only=False):
    cfg = MMMNAConfig(input_shape=(16, 32, 32), base_channels=8, dtype="float64",
                      seed=int(rng.integers(1 << 30)))
    model = MMMNANet(cfg)
    x = rng.standard_normal((2, 4, 2) + cfg.input_shape)
    ni = rng.random((2, 5))
    y = np.eye(3)[[0, 2]]

    def loss():
        model.train()
        return model.loss(model(x, ni), y)[0]

    params = model.parameters()
    if heads_only:
        params = [p for name, p in model.named_parameters() if not name.startswith("backbone.")]
    return finite_diff_check_params(loss, params, samples=samples, rng=rng)


def run_gradient_suite(seed=0, only=None):
    """Run every check; ``only`` filters by name prefix."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn in _checks(rng):
        if only is not None and not name.startswith(only):
            continue
        t0 = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, float(err), time.perf_counter() - t0))
    return results
