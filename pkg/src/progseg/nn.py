"""Layers and the Adam optimizer built on :mod:`progseg.tensor`."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Rng, Tensor

relu = T.relu
leaky_relu = T.leaky_relu
sigmoid = T.sigmoid
tanh = T.tanh

INIT_STD = 0.02


class Module:
    """Parameter container. Tensors, buffers and sub-modules are registered on
    attribute assignment, in assignment order (names are stable across runs)."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in self._buffers:
            raise KeyError(name)
        self.register_buffer(name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for mname, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{mname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for mname, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{mname}.")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast parameters and buffers in place (used by float64 gradient checks)."""
        for m in self.modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
            for name, b in list(m._buffers.items()):
                m.register_buffer(name, b.astype(dtype))
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        owners = {}
        for m_prefix, m in self._named_modules():
            for bname in m._buffers:
                owners[m_prefix + bname] = (m, bname)
        expected = set(params) | set(owners)
        missing = expected - set(state)
        if missing:
            raise ContractError(f"state is missing {sorted(missing)[:5]}")
        for name, arr in state.items():
            if name in params:
                p = params[name]
                if p.shape != tuple(arr.shape):
                    raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
                p.data = np.array(arr, dtype=p.dtype)
            elif name in owners:
                m, bname = owners[name]
                m.set_buffer(bname, np.array(arr, dtype=np.asarray(m._buffers[bname]).dtype))

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, m in self._modules.items():
            yield from m._named_modules(f"{prefix}{name}.")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        name = str(len(self._items))
        self._items.append(m)
        self._modules[name] = m

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def _param(shape, dtype=T.DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 4, stride: int = 2,
                 padding: int = 1, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = _param((out_ch, in_ch, kernel, kernel))
        self.bias = _param((out_ch,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_forward(x, self)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 4, stride: int = 2,
                 padding: int = 1, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = _param((in_ch, out_ch, kernel, kernel))
        self.bias = _param((out_ch,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d_forward(x, self)


class BatchNorm2d(Module):
    """Per-channel batch normalization.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``,
    so ``momentum`` is the weight kept on the old value. Frameworks that weight
    the new batch statistic instead would write this layer's default as 0.1.
    The batch variance is the biased (1/N) estimate in both places.
    """

    def __init__(self, ch: int, momentum: float = 0.9, eps: float = 1e-9):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(ch, dtype=T.DTYPE), requires_grad=True)
        self.beta = _param((ch,))
        self.register_buffer("running_mean", np.zeros(ch, dtype=T.DTYPE))
        self.register_buffer("running_var", np.ones(ch, dtype=T.DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm_forward(x, self)


class Dropout(Module):
    """Inverted dropout. ``active`` overrides the train/eval switch, which lets
    the generator keep its noise source on at inference."""

    def __init__(self, p: float = 0.5, rng: Rng | None = None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ContractError(f"dropout p must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else Rng(0, "dropout")
        self.active = None

    def forward(self, x: Tensor) -> Tensor:
        return dropout_forward(x, self)


def conv2d_forward(x: Tensor, layer: Conv2d) -> Tensor:
    return T.conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)


def conv_transpose2d_forward(x: Tensor, layer: ConvTranspose2d) -> Tensor:
    return T.conv_transpose2d(x, layer.weight, layer.bias, layer.stride, layer.padding)


def batchnorm_forward(x: Tensor, layer: BatchNorm2d) -> Tensor:
    if x.ndim != 4 or x.shape[1] != layer.gamma.shape[0]:
        raise ShapeError(f"batchnorm: input {x.shape} vs {layer.gamma.shape[0]} channels")
    if not layer.training:
        return T.batch_norm(x, layer.gamma, layer.beta, layer.running_mean,
                            layer.running_var, layer.eps)
    if x.shape[0] < 2:
        raise ContractError("batchnorm in train mode needs a batch of at least 2")
    out, mu, var = T.batch_norm_train(x, layer.gamma, layer.beta, layer.eps)
    m = layer.momentum
    dt = layer.running_mean.dtype
    layer.set_buffer("running_mean", (m * layer.running_mean + (1 - m) * mu).astype(dt))
    layer.set_buffer("running_var", (m * layer.running_var + (1 - m) * var).astype(dt))
    return out


def dropout_forward(x: Tensor, layer: Dropout) -> Tensor:
    active = layer.training if layer.active is None else layer.active
    if not active or layer.p == 0.0:
        return x
    keep = layer.rng.uniform(size=x.shape) >= layer.p
    mask = (keep / (1.0 - layer.p)).astype(x.dtype)
    return T.mul(x, Tensor(mask, dtype=x.dtype))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: {a.shape} vs {b.shape}")
    return T.concat([a, b], axis=1)


def init_params(layer: Module, rng: Rng, std: float = INIT_STD) -> None:
    """Weights ~ Normal(0, std), biases 0, batch-norm gamma 1 / beta 0.

    Sub-modules are initialized in registration order, so a fixed seed gives
    identical weights.
    """
    for m in layer.modules():
        if isinstance(m, (Conv2d, ConvTranspose2d)):
            w = m.weight
            w.data = rng.normal(0.0, std, w.shape).astype(w.dtype)
            if m.bias is not None:
                m.bias.data = np.zeros(m.bias.shape, dtype=m.bias.dtype)
        elif isinstance(m, BatchNorm2d):
            m.gamma.data = np.ones(m.gamma.shape, dtype=m.gamma.dtype)
            m.beta.data = np.zeros(m.beta.shape, dtype=m.beta.dtype)


class AdamState:
    """Adam moments keyed by parameter name.

    ``step`` counts calls to :func:`adam_step`; ``t`` counts updates per
    parameter and drives bias correction, so layers added mid-run start with
    a fresh correction instead of inheriting the global count.
    """

    def __init__(self, lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.v: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.t: "OrderedDict[str, int]" = OrderedDict()


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update over ``(name, tensor)`` pairs; clears grads.

    Raises ContractError before touching anything if a gradient is missing.
    """
    params = list(params)
    for name, p in params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
        p.grad = None
