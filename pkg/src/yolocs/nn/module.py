"""Layer base class, shape-only tracing and the leaf layers.

A block's ``forward`` works on real arrays or on :class:`Meta` placeholders.
Feeding placeholders runs the same wiring without arithmetic and tallies
FLOPs, so static shape inference cannot drift from the runtime path.
"""

from collections.abc import Iterator
from dataclasses import dataclass, field
import math

import numpy as np

from yolocs import tensor as T
from yolocs.errors import DimensionMismatchError
from yolocs.tensor.types import BN_EPS, BN_MOMENTUM, BatchNormParams, ConvParams, ConvSpec


@dataclass
class FlopCounter:
    total: int = 0
    by_kind: dict = field(default_factory=dict)

    def add(self, kind: str, flops: int) -> None:
        self.total += int(flops)
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(flops)


@dataclass(frozen=True)
class Meta:
    """Shape-only stand-in for a feature map during static tracing."""

    shape: tuple
    counter: FlopCounter

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def is_meta(x) -> bool:
    return isinstance(x, Meta) or (isinstance(x, (list, tuple)) and bool(x) and isinstance(x[0], Meta))


class Module:
    kind = "Module"

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        self.grads: dict[str, np.ndarray] = {}
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self._params[name] = value
        object.__setattr__(self, name, value)
        return value

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        object.__setattr__(self, name, value)
        return value

    def set_param(self, name: str, value: np.ndarray) -> None:
        """Replace a parameter array in place (keeps shape and dtype)."""
        self._params[name][...] = value

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._modules.items())

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = ""):
        for mod_name, m in self.named_modules(prefix):
            for name, p in m._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def named_grads(self, prefix: str = ""):
        for mod_name, m in self.named_modules(prefix):
            for name, p in m._params.items():
                g = m.grads.get(name)
                if g is None:
                    g = np.zeros_like(p)
                yield (f"{mod_name}.{name}" if mod_name else name), g

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for _, m in self.named_modules():
            m.grads = {}

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _accumulate(self, name: str, g: np.ndarray) -> None:
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = g

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def trace(self, in_shape, counter: FlopCounter | None = None):
        """Static pass: returns ``(out_shape, flops)`` for the given input shape(s)."""
        counter = counter or FlopCounter()
        if isinstance(in_shape, list):
            x = [Meta(tuple(s), counter) for s in in_shape]
        else:
            x = Meta(tuple(in_shape), counter)
        out = self.forward(x)
        if isinstance(out, list):
            return [o.shape for o in out], counter.total
        return out.shape, counter.total

    def descriptor(self):
        return None

    def __repr__(self):
        return f"{type(self).__name__}()"


def _kaiming_uniform(rng, shape, dtype):
    fan_in = shape[1] * shape[2] * shape[3]
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    kind = "Conv"

    def __init__(self, c1, c2, k=1, s=1, p=None, bias=False, *, rng=None, dtype=np.float32):
        super().__init__()
        self.spec = ConvSpec(c1, c2, k, s, p, bias)
        shape = self.spec.weight_shape()
        w = _kaiming_uniform(rng, shape, dtype) if rng is not None else np.zeros(shape, dtype)
        self.register_param("weight", w)
        if bias:
            self.register_param("bias", np.zeros(c2, dtype))
        self._x = None

    @property
    def conv_params(self) -> ConvParams:
        return ConvParams(self.weight, self._params.get("bias"))

    def _out_shape(self, shape):
        n, c, h, w = shape
        if c != self.spec.in_channels:
            raise DimensionMismatchError(f"expected {self.spec.in_channels} input channels, got {c}", repr(self))
        ho, wo = self.spec.out_hw(h, w)
        if ho < 1 or wo < 1:
            raise DimensionMismatchError(f"input {h}x{w} too small", repr(self))
        return (n, self.spec.out_channels, ho, wo)

    def forward(self, x):
        if isinstance(x, Meta):
            out = self._out_shape(x.shape)
            k = self.spec.kernel_size
            outs = math.prod(out)
            flops = 2 * k * k * self.spec.in_channels * outs + (outs if self.spec.has_bias else 0)
            x.counter.add("conv", flops)
            return Meta(out, x.counter)
        self._x = x
        return T.conv2d_forward(x, self.spec, self.conv_params, layer=repr(self))

    def backward(self, grad_out):
        gi, gw, gb = T.conv2d_backward(self._x, self.spec, self.conv_params, grad_out, layer=repr(self))
        self._accumulate("weight", gw)
        if gb is not None:
            self._accumulate("bias", gb)
        return gi

    def __repr__(self):
        s = self.spec
        return f"Conv2d({s.in_channels}, {s.out_channels}, k={s.kernel_size}, s={s.stride})"


class BatchNorm2d(Module):
    kind = "BatchNorm"

    def __init__(self, c, eps=BN_EPS, momentum=BN_MOMENTUM, *, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.register_param("gamma", np.ones(c, dtype))
        self.register_param("beta", np.zeros(c, dtype))
        self.register_buffer("running_mean", np.zeros(c, dtype))
        self.register_buffer("running_var", np.ones(c, dtype))
        self._cache = None

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def bn_params(self) -> BatchNormParams:
        return BatchNormParams(self.gamma, self.beta, self.running_mean, self.running_var,
                               self.eps, self.momentum)

    def forward(self, x):
        if isinstance(x, Meta):
            if x.shape[1] != self.channels:
                raise DimensionMismatchError(f"expected {self.channels} channels, got {x.shape[1]}", repr(self))
            x.counter.add("bn", 2 * x.size)
            return Meta(x.shape, x.counter)
        mode = "train" if self.training else "eval"
        out, self._cache, new = T.batchnorm_forward(x, self.bn_params(), mode, layer=repr(self))
        self._buffers["running_mean"][...] = new.running_mean
        self._buffers["running_var"][...] = new.running_var
        return out

    def backward(self, grad_out):
        gi, gg, gb = T.batchnorm_backward(grad_out, self._cache)
        self._accumulate("gamma", gg)
        self._accumulate("beta", gb)
        return gi

    def __repr__(self):
        return f"BatchNorm2d({self.channels})"


class SiLU(Module):
    kind = "SiLU"

    def forward(self, x):
        if isinstance(x, Meta):
            x.counter.add("act", 2 * x.size)
            return Meta(x.shape, x.counter)
        self._x = x
        return T.silu(x)

    def backward(self, grad_out):
        return T.silu_backward(self._x, grad_out)


class MaxPool2d(Module):
    kind = "MaxPool"

    def __init__(self, k=5):
        super().__init__()
        self.k = k

    def forward(self, x):
        if isinstance(x, Meta):
            x.counter.add("pool", x.size)
            return Meta(x.shape, x.counter)
        out, self._arg = T.maxpool2d(x, self.k, 1, self.k // 2)
        return out

    def backward(self, grad_out):
        return T.maxpool2d_backward(grad_out, self._arg)


class Upsample(Module):
    kind = "Upsample"

    def forward(self, x):
        if isinstance(x, Meta):
            n, c, h, w = x.shape
            out = (n, c, 2 * h, 2 * w)
            x.counter.add("upsample", math.prod(out))
            return Meta(out, x.counter)
        return T.upsample_nearest_2x(x)

    def backward(self, grad_out):
        return T.upsample_nearest_2x_backward(grad_out)


class Concat(Module):
    kind = "Concat"

    def forward(self, xs):
        xs = list(xs)
        if isinstance(xs[0], Meta):
            n, _, h, w = xs[0].shape
            for m in xs[1:]:
                if m.shape[0] != n or m.shape[2:] != (h, w):
                    raise DimensionMismatchError(f"cannot concat {m.shape} with {xs[0].shape}", repr(self))
            return Meta((n, sum(m.shape[1] for m in xs), h, w), xs[0].counter)
        self._sizes = [x.shape[1] for x in xs]
        return T.concat_channels(xs, layer=repr(self))

    def backward(self, grad_out):
        return T.split_channels(grad_out, self._sizes)


def add(a, b):
    """Residual add on arrays or placeholders (elementwise cost = one FLOP per element)."""
    if isinstance(a, Meta):
        if a.shape != b.shape:
            raise DimensionMismatchError(f"cannot add {a.shape} and {b.shape}")
        a.counter.add("add", a.size)
        return Meta(a.shape, a.counter)
    return T.add(a, b)


class Sequential(Module):
    kind = "Sequential"

    def __init__(self, *layers):
        super().__init__()
        self.layers = []
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
            self.layers.append(layer)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out
