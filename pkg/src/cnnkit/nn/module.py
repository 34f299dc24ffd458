"""Module containers and the basic layers."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .. import functional as F
from ..tensor import DEFAULT_DTYPE, Parameter, Tensor


@dataclass
class CostTrace:
    """Accumulates multiply-accumulates per labelled section during :meth:`Module.trace`."""

    flops: dict[str, int] = field(default_factory=dict)
    section: str = "model"

    def add(self, macs: int) -> None:
        self.flops[self.section] = self.flops.get(self.section, 0) + int(macs)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._modules[name] = module
        object.__setattr__(self, name, module)

    # -- traversal ---------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mname, m in self.named_modules(prefix):
            for pname, p in m._params.items():
                yield (f"{mname}.{pname}" if mname else pname), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mname, m in self.named_modules(prefix):
            for bname, b in m._buffers.items():
                yield (f"{mname}.{bname}" if mname else bname), b

    def children(self) -> list["Module"]:
        return list(self._modules.values())

    # -- mode / state --------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def name_parameters(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def initialize(self, seed: int = 0) -> None:
        """Re-draw every parameter from its declared initializer.

        Each parameter's generator is keyed on ``(seed, crc32(name))`` so the
        drawn values do not depend on construction order.
        """
        self.name_parameters()
        for name, p in self.named_parameters():
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            p.assign(draw_init(p.init, p.shape, rng))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param:{n}": p.data for n, p in self.named_parameters()}
        state.update({f"buffer:{n}": b for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = {}
        for mname, m in self.named_modules():
            for bname in m._buffers:
                buffers[f"{mname}.{bname}" if mname else bname] = (m, bname)
        seen = set()
        for key, arr in state.items():
            kind, _, name = key.partition(":")
            if kind == "param" and name in params:
                params[name].assign(arr)
            elif kind == "buffer" and name in buffers:
                m, bname = buffers[name]
                cur = m._buffers[bname]
                if cur.shape != arr.shape:
                    raise ValueError(f"buffer {name}: shape {arr.shape} != {cur.shape}")
                cur[...] = arr
            elif strict:
                raise KeyError(f"unexpected state entry {key!r}")
            seen.add(key)
        if strict:
            missing = [k for k in self.state_dict() if k not in seen]
            if missing:
                raise KeyError(f"missing state entries: {missing[:5]}")

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for _, m in self.named_modules():
            for bname, b in list(m._buffers.items()):
                m.register_buffer(bname, b.astype(dtype))
        return self

    # -- execution -----------------------------------------------------------
    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def trace(self, shape: tuple[int, ...], acc: CostTrace) -> tuple[int, ...]:
        """Propagate an input shape, adding this module's MACs to ``acc``."""
        raise NotImplementedError(f"{type(self).__name__} does not support cost tracing")

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())


def _zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=DEFAULT_DTYPE)


def draw_init(init: str | None, shape, rng: np.random.Generator) -> np.ndarray:
    if init in (None, "zeros"):
        return np.zeros(shape)
    if init == "ones":
        return np.ones(shape)
    kind, _, arg = init.partition(":")
    if kind == "he_normal":
        fan = float(arg)
        return rng.normal(0.0, math.sqrt(2.0 / fan), size=shape)
    if kind == "normal":
        return rng.normal(0.0, float(arg), size=shape)
    if kind == "uniform":
        a = float(arg)
        return rng.uniform(-a, a, size=shape)
    if kind == "const":
        return np.full(shape, float(arg))
    raise ValueError(f"unknown initializer {init!r}")


class Sequential(Module):
    def __init__(self, *layers: Module, names: list[str] | None = None):
        super().__init__()
        names = names or [str(i) for i in range(len(layers))]
        self._order = list(names)
        for n, layer in zip(names, layers):
            self.add_module(n, layer)

    def __iter__(self):
        return (self._modules[n] for n in self._order)

    def __len__(self):
        return len(self._order)

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x

    def trace(self, shape, acc):
        for layer in self:
            shape = layer.trace(shape, acc)
        return shape


class Identity(Module):
    def forward(self, x):
        return x

    def trace(self, shape, acc):
        return shape


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)

    def trace(self, shape, acc):
        return shape


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding=None,
                 groups: int = 1, bias: bool = False):
        super().__init__()
        self.cin, self.cout, self.kernel, self.stride = cin, cout, kernel, stride
        self.padding, self.groups = padding, groups
        fan_out = cout * kernel * kernel // groups
        self.weight = Parameter(_zeros((cout, cin // groups, kernel, kernel)), kind="weight",
                                init=f"he_normal:{fan_out}")
        self.bias = Parameter(_zeros(cout), kind="bias", init="zeros") if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def trace(self, shape, acc):
        n, c, h, w = shape
        if c != self.cin:
            raise ValueError(f"conv expects {self.cin} input channels, traced shape {shape}")
        pt, pb, pl, pr = F.conv_padding(self.padding, self.kernel, self.kernel, self.stride, h, w)
        ho = F.conv_output_size(h, self.kernel, self.stride, pt + pb)
        wo = F.conv_output_size(w, self.kernel, self.stride, pl + pr)
        acc.add(ho * wo * self.cout * (self.cin // self.groups) * self.kernel * self.kernel)
        return n, self.cout, ho, wo


class BatchNorm2d(Module):
    """Batch normalization over (N, H, W); also accepts (N, C) inputs."""

    def __init__(self, channels: int, momentum: float = 0.9, zero_init: bool = False):
        super().__init__()
        self.channels, self.momentum = channels, momentum
        self.zero_init = zero_init
        self.gamma = Parameter(_zeros(channels), kind="bn_gamma", init="zeros" if zero_init else "ones")
        self.beta = Parameter(_zeros(channels), kind="bn_beta", init="zeros")
        self.register_buffer("running_mean", _zeros(channels))
        self.register_buffer("running_var", _zeros(channels) + 1)

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.momentum, self.training)

    def trace(self, shape, acc):
        return shape


class Linear(Module):
    """``y = x W + b`` with ``W`` stored as (in, out)."""

    def __init__(self, din: int, dout: int, bias: bool = True, init_std: float | None = None):
        super().__init__()
        self.din, self.dout = din, dout
        init = f"normal:{init_std}" if init_std is not None else f"uniform:{1.0 / math.sqrt(din)}"
        self.weight = Parameter(_zeros((din, dout)), kind="weight", init=init)
        self.bias = Parameter(_zeros(dout), kind="bias", init="zeros") if bias else None

    def forward(self, x):
        return F.fully_connected(x, self.weight, self.bias)

    def trace(self, shape, acc):
        acc.add(shape[0] * self.din * self.dout if shape[0] else self.din * self.dout)
        return shape[0], self.dout


class MaxPool2d(Module):
    def __init__(self, k: int = 3, stride: int = 2, padding: int = 1):
        super().__init__()
        self.k, self.stride, self.padding = k, stride, padding

    def forward(self, x):
        return F.pool2d(x, "max", self.k, self.stride, self.padding)

    def trace(self, shape, acc):
        n, c, h, w = shape
        o = lambda s: (s + 2 * self.padding - self.k) // self.stride + 1  # noqa: E731
        return n, c, o(h), o(w)


class AvgPool2d(Module):
    """Average pooling with ceil-mode output size and padding-excluding counts."""

    def __init__(self, k: int = 2, stride: int = 2):
        super().__init__()
        self.k, self.stride = k, stride

    def forward(self, x):
        return F.pool2d(x, "avg", self.k, self.stride, 0, ceil_mode=True)

    def trace(self, shape, acc):
        n, c, h, w = shape
        return n, c, F._pool_out(h, self.k, self.stride, 0, True), F._pool_out(w, self.k, self.stride, 0, True)


class GlobalAvgPool(Module):
    def forward(self, x):
        return F.pool2d(x, "global_avg").reshape(x.shape[0], x.shape[1])

    def trace(self, shape, acc):
        return shape[0], shape[1]
