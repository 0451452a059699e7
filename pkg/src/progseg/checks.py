"""Finite-difference gradient suite over every primitive, layer and the full model.

Each case builds a scalar function of one input tensor. Vector-valued ops are
reduced with a fixed random projection so every output element carries its
own weight. Checks run in float64; inputs that land near a kink (|x| small for
abs/relu, near a clamp bound, and so on) are resampled.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import (BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, batchnorm_forward,
                 concat_channels, init_params)
from .progan import (Architecture, Discriminator, Generator, GrowthState, mask_activation)
from .tensor import Rng, Tensor, grad_check
from .train import ObjectiveConfig, discriminator_loss, generator_loss

F64 = np.float64
PRIMITIVE_TOL = 1e-3
MODEL_TOL = 5e-3
# central differences at h=1e-6 on an O(1) loss carry ~1e-10 of rounding noise;
# below this magnitude gradients are compared absolutely
MODEL_FLOOR = 1e-6
KINK_MARGIN = 1e-3


@dataclass
class CaseResult:
    name: str
    instances: int
    checked: int
    max_rel_err: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return (f"{tag} {self.name:<24} n={self.instances:<3} checked={self.checked:<6} "
                f"max_rel_err={self.max_rel_err:.2e} tol={self.tolerance:.0e} "
                f"({self.seconds:.1f}s)")


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=F64), dtype=F64)


def _away(rng: Rng, shape, kinks=(0.0,), lo=-2.0, hi=2.0) -> np.ndarray:
    """Uniform samples, each redrawn until it is KINK_MARGIN away from every kink."""
    x = rng.uniform(lo, hi, shape).astype(F64)
    for _ in range(100):
        bad = np.zeros(x.shape, dtype=bool)
        for k in kinks:
            bad |= np.abs(x - k) < KINK_MARGIN
        if not bad.any():
            return x
        x[bad] = rng.uniform(lo, hi, int(bad.sum()))
    return x


def _proj(out: Tensor, rng: Rng) -> Tensor:
    r = _t(rng.normal(0.0, 1.0, out.shape))
    return T.reduce_sum(T.mul(out, r))


def _shape(rng: Rng, ndim: int, lo=1, hi=4) -> tuple:
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


# -- case builders: rng -> list of (function, input tensor) -----------------------

def _unary(op, kinks=(0.0,), lo=-2.0, hi=2.0):
    def build(rng):
        x = _t(_away(rng, _shape(rng, 2), kinks, lo, hi))
        r = rng.spawn("proj")
        return [(lambda a: _proj(op(a), r.spawn("w")), x)]
    return build


def _binary(op, b_lo=-2.0, b_hi=2.0, broadcast=True):
    def build(rng):
        shape = _shape(rng, 3)
        bshape = shape[1:] if broadcast and rng.uniform() < 0.5 else shape
        a = _t(rng.uniform(-2, 2, shape))
        b = _t(_away(rng, bshape, (0.0,), b_lo, b_hi))
        r = rng.spawn("proj")
        return [(lambda x: _proj(op(x, b), r.spawn("w")), a),
                (lambda x: _proj(op(a, x), r.spawn("w")), b)]
    return build


def _matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 6, 3))
    a, b = _t(rng.normal(size=(m, k))), _t(rng.normal(size=(k, n)))
    r = rng.spawn("proj")
    return [(lambda x: _proj(T.matmul(x, b), r.spawn("w")), a),
            (lambda x: _proj(T.matmul(a, x), r.spawn("w")), b)]


def _reduce(op):
    def build(rng):
        shape = _shape(rng, 3)
        axes = tuple(int(i) for i in np.flatnonzero(rng.uniform(size=3) < 0.5))
        keep = bool(rng.uniform() < 0.5)
        x = _t(rng.normal(size=shape))
        r = rng.spawn("proj")
        return [(lambda a: _proj(op(a, axes or None, keep), r.spawn("w")), x)]
    return build


def _reshape(rng):
    shape = _shape(rng, 3)
    x = _t(rng.normal(size=shape))
    r = rng.spawn("proj")
    return [(lambda a: _proj(T.reshape(a, (shape[0], -1)), r.spawn("w")), x),
            (lambda a: _proj(T.transpose(a, (2, 0, 1)), r.spawn("w")), x)]


def _concat(rng):
    shape = _shape(rng, 4)
    other = (shape[0], int(rng.integers(1, 4))) + shape[2:]
    a, b = _t(rng.normal(size=shape)), _t(rng.normal(size=other))
    r = rng.spawn("proj")
    return [(lambda x: _proj(concat_channels(x, b), r.spawn("w")), a),
            (lambda x: _proj(concat_channels(a, x), r.spawn("w")), b)]


def _narrow(rng):
    shape = _shape(rng, 3, 2, 4)
    start = int(rng.integers(0, shape[0]))
    length = int(rng.integers(1, shape[0] - start + 1))
    x = _t(rng.normal(size=shape))
    r = rng.spawn("proj")
    return [(lambda a: _proj(T.narrow(a, 0, start, length), r.spawn("w")), x)]


def _resample(rng):
    b, c, h = (int(v) for v in rng.integers(1, 4, 3))
    x = _t(rng.normal(size=(b, c, 2 * h, 2 * h)))
    y = _t(rng.normal(size=(b, c, h, h)))
    r = rng.spawn("proj")
    return [(lambda a: _proj(T.downsample_nearest2(a), r.spawn("w")), x),
            (lambda a: _proj(T.upsample_nearest2(a), r.spawn("w")), y)]


def _conv_geometry(rng):
    k = int(rng.integers(1, 5))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, k))
    return k, s, p


def _conv(rng):
    k, s, p = _conv_geometry(rng)
    b, c, oc = (int(v) for v in rng.integers(1, 4, 3))
    h = max(k, int(rng.integers(3, 7)))
    x = _t(rng.normal(size=(b, c, h, h)))
    w = _t(rng.normal(size=(oc, c, k, k)))
    bias = _t(rng.normal(size=(oc,)))
    r = rng.spawn("proj")
    f = lambda x_, w_, b_: _proj(T.conv2d(x_, w_, b_, s, p), r.spawn("w"))  # noqa: E731
    return [(lambda a: f(a, w, bias), x), (lambda a: f(x, a, bias), w),
            (lambda a: f(x, w, a), bias)]


def _conv_t(rng):
    k, s, p = _conv_geometry(rng)
    b, c, oc = (int(v) for v in rng.integers(1, 4, 3))
    h = int(rng.integers(2, 5))
    while (h - 1) * s - 2 * p + k <= 0:
        h += 1
    x = _t(rng.normal(size=(b, c, h, h)))
    w = _t(rng.normal(size=(c, oc, k, k)))
    bias = _t(rng.normal(size=(oc,)))
    r = rng.spawn("proj")
    f = lambda x_, w_, b_: _proj(T.conv_transpose2d(x_, w_, b_, s, p), r.spawn("w"))  # noqa: E731
    return [(lambda a: f(a, w, bias), x), (lambda a: f(x, a, bias), w),
            (lambda a: f(x, w, a), bias)]


def _bn_train(rng):
    b, c, h = int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = _t(rng.normal(1.0, 2.0, (b, c, h, h)))
    g = _t(rng.uniform(0.5, 1.5, (c,)))
    be = _t(rng.normal(size=(c,)))
    r = rng.spawn("proj")
    f = lambda x_, g_, b_: _proj(T.batch_norm_train(x_, g_, b_, 1e-5)[0], r.spawn("w"))  # noqa: E731
    return [(lambda a: f(a, g, be), x), (lambda a: f(x, a, be), g), (lambda a: f(x, g, a), be)]


def _bn_eval(rng):
    b, c, h = (int(v) for v in rng.integers(1, 4, 3))
    x = _t(rng.normal(size=(b, c, h, h)))
    g, be = _t(rng.uniform(0.5, 1.5, (c,))), _t(rng.normal(size=(c,)))
    mean, var = rng.normal(size=c).astype(F64), rng.uniform(0.5, 2.0, c).astype(F64)
    r = rng.spawn("proj")
    f = lambda x_, g_, b_: _proj(T.batch_norm(x_, g_, b_, mean, var, 1e-9), r.spawn("w"))  # noqa: E731
    return [(lambda a: f(a, g, be), x), (lambda a: f(x, a, be), g), (lambda a: f(x, g, a), be)]


def _with_fixed_noise(layer_rng: Rng, fn):
    """Replay the same random stream on every call so a dropout mask is fixed."""
    state = layer_rng.get_state()

    def run(a):
        layer_rng.set_state(state)
        return fn(a)
    return run


def _layer_case(make, in_shape, rng, train=True):
    layer = make()
    init_params(layer, rng.spawn("init"), std=0.5)
    layer.astype(F64)
    layer.train(train)
    x = _t(rng.normal(size=in_shape))
    r = rng.spawn("proj")
    drops = [m for m in layer.modules() if isinstance(m, Dropout)]

    def f(a):
        return _proj(layer(a), r.spawn("w"))
    if drops:
        f = _with_fixed_noise(drops[0].rng, f)
    cases = [(f, x)]
    for _, p in layer.named_parameters():
        cases.append((lambda _a, f=f: f(x), p))
    return cases


def _layer_conv(rng):
    c, oc = (int(v) for v in rng.integers(1, 4, 2))
    return _layer_case(lambda: Conv2d(c, oc, 4, 2, 1), (2, c, 4, 4), rng)


def _layer_conv_t(rng):
    c, oc = (int(v) for v in rng.integers(1, 4, 2))
    return _layer_case(lambda: ConvTranspose2d(c, oc, 4, 2, 1), (2, c, 2, 2), rng)


def _layer_bn(rng):
    c = int(rng.integers(1, 4))
    return _layer_case(lambda: BatchNorm2d(c, 0.9, 1e-5), (3, c, 2, 2), rng)


def _layer_dropout(rng):
    c = int(rng.integers(1, 4))
    return _layer_case(lambda: Dropout(0.5, rng.spawn("mask")), (2, c, 3, 3), rng)


def _bn_layer_eval(rng):
    c = int(rng.integers(1, 4))
    return _layer_case(lambda: BatchNorm2d(c, 0.9, 1e-5), (2, c, 2, 2), rng, train=False)


def _losses(rng):
    shape = (int(rng.integers(2, 5)), 1)
    d_real = _t(rng.uniform(0.05, 0.95, shape))
    d_fake = _t(rng.uniform(0.05, 0.95, shape))
    y = _t((rng.uniform(size=(shape[0], 1, 2, 2)) < 0.5).astype(F64))
    y_hat = _t(np.clip(y.data + _away(rng, y.shape, (0.0,), -0.9, 0.9), 0.01, 0.99))
    cases = [(lambda a: discriminator_loss(a, d_fake), d_real),
             (lambda a: discriminator_loss(d_real, a), d_fake)]
    for mode in ("non_saturating", "minimax"):
        cfg = ObjectiveConfig(100.0, mode)
        cases.append((lambda a, cfg=cfg: generator_loss(a, y_hat, y, cfg)[0], d_fake))
        cases.append((lambda a, cfg=cfg: generator_loss(d_fake, a, y, cfg)[0], y_hat))
    return cases


def _mask_head(rng):
    x = _t(rng.normal(size=_shape(rng, 4)))
    r = rng.spawn("proj")
    return [(lambda a: _proj(mask_activation(a), r.spawn("w")), x)]


PRIMITIVES = {
    "add": _binary(T.add), "sub": _binary(T.sub), "mul": _binary(T.mul),
    "div": _binary(T.div, 0.5, 2.0),
    "neg": _unary(T.neg), "scale": _unary(lambda a: T.scale(a, -1.7)),
    "power": _unary(lambda a: T.power(a, 3.0), lo=0.2, hi=2.0),
    "exp": _unary(T.exp), "log": _unary(T.log, lo=0.1, hi=3.0),
    "sqrt": _unary(T.sqrt, lo=0.1, hi=3.0), "abs": _unary(T.abs),
    "clamp": _unary(lambda a: T.clamp(a, -0.5, 0.5), kinks=(-0.5, 0.5)),
    "relu": _unary(T.relu), "leaky_relu": _unary(lambda a: T.leaky_relu(a, 0.2)),
    "sigmoid": _unary(T.sigmoid, lo=-6, hi=6), "tanh": _unary(T.tanh),
    "matmul": _matmul,
    "reduce_sum": _reduce(T.reduce_sum), "reduce_mean": _reduce(T.reduce_mean),
    "reshape_transpose": _reshape, "concat_channels": _concat, "narrow": _narrow,
    "up_downsample": _resample, "conv2d": _conv, "conv_transpose2d": _conv_t,
    "batch_norm_train": _bn_train, "batch_norm_eval": _bn_eval,
    "mask_activation": _mask_head, "losses": _losses,
}

LAYERS = {
    "Conv2d": _layer_conv, "ConvTranspose2d": _layer_conv_t, "BatchNorm2d.train": _layer_bn,
    "BatchNorm2d.eval": _bn_layer_eval, "Dropout.train": _layer_dropout,
}


def run_case(name: str, build, instances: int = 20, seed: int = 0,
             tolerance: float = PRIMITIVE_TOL) -> CaseResult:
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    base = Rng(seed, f"gradcheck/{name}")
    for i in range(instances):
        for f, x in build(base.spawn(str(i))):
            rep = grad_check(f, x, tolerance)
            worst = max(worst, rep.max_rel_err)
            checked += rep.n_checked
    return CaseResult(name, instances, checked, worst, tolerance, time.perf_counter() - t0)


# -- full model -------------------------------------------------------------------

def _small_arch(**kw) -> Architecture:
    return Architecture(full_res=8, base_res=2, widths=(3, 4, 4), **kw)


def model_check(which: str = "generator", alpha: float = 1.0, n_params: int = 50,
                seed: int = 0, tolerance: float = MODEL_TOL, instance: int = 0) -> CaseResult:
    """Generator + L1 (or discriminator loss) on an 8×8 input at the final stage,
    checked on ``n_params`` randomly chosen scalar parameters."""
    t0 = time.perf_counter()
    rng = Rng(seed, f"model-check/{which}/{alpha}/{instance}")
    arch = _small_arch()
    g = Generator(arch, rng.spawn("G"))
    d = Discriminator(arch, rng.spawn("D"))
    for _ in range(arch.max_stages - 1):
        g.grow()
        d.grow()
    for m in (g, d):
        init_params(m, rng.spawn("reinit"), std=0.3)
        # zero biases would park every pixel of a binary mask on a leaky-relu kink
        for layer in m.modules():
            if isinstance(layer, (Conv2d, ConvTranspose2d)) and layer.bias is not None:
                layer.bias.data = rng.normal(0.0, 0.3, layer.bias.shape)
        m.astype(F64)
        m.train()
    gs = GrowthState(arch.max_stages, arch.full_res, alpha, 0)
    x = _t(rng.uniform(0, 1, (2, 3, 8, 8)))
    y = _t((rng.uniform(size=(2, 1, 8, 8)) < 0.4).astype(F64))
    noise = g.noise.get_state()

    if which == "generator":
        model = g

        def f(_p):
            g.noise.set_state(noise)
            y_hat = g(x, gs)
            return T.reduce_mean(T.abs(T.sub(y, y_hat)))
    else:
        model = d
        fake = _t(rng.uniform(0.05, 0.95, y.shape))

        def f(_p):
            scores = d(T.concat([y, fake], axis=0), gs)
            return discriminator_loss(T.narrow(scores, 0, 0, 2), T.narrow(scores, 0, 2, 2))

    params = [p for _, p in model.named_parameters()]
    sizes = np.array([p.size for p in params])
    flat = rng.permutation(int(sizes.sum()))[:n_params]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, checked = 0.0, 0
    for pi, p in enumerate(params):
        sel = flat[(flat >= offsets[pi]) & (flat < offsets[pi + 1])] - offsets[pi]
        if sel.size == 0:
            continue
        rep = grad_check(f, p, tolerance, indices=np.sort(sel), floor=MODEL_FLOOR)
        worst = max(worst, rep.max_rel_err)
        checked += rep.n_checked
    return CaseResult(f"model.{which}(alpha={alpha:g})", 1, checked, worst, tolerance,
                      time.perf_counter() - t0)


def run_suite(instances: int = 20, seed: int = 0, log=None) -> list:
    results = []
    for table in (PRIMITIVES, LAYERS):
        for name, build in table.items():
            results.append(run_case(name, build, instances, seed))
            if log:
                log(results[-1].line())
    for which, alpha in (("generator", 1.0), ("generator", 0.5), ("discriminator", 1.0)):
        t0 = time.perf_counter()
        runs = [model_check(which, alpha, seed=seed, instance=i) for i in range(instances)]
        results.append(CaseResult(runs[0].name, instances, sum(r.checked for r in runs),
                                  max(r.max_rel_err for r in runs), MODEL_TOL,
                                  time.perf_counter() - t0))
        if log:
            log(results[-1].line())
    return results
