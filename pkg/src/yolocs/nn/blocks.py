"""Backbone and neck blocks: CBS, the CSP bottleneck family, DCFS and SPPF."""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from yolocs.nn.module import BatchNorm2d, Concat, Conv2d, MaxPool2d, Meta, Module, SiLU, Sequential, add


class DCFSVariant(str, Enum):
    OCJ = "OCJ"
    PER_BRANCH_BN_3X3 = "PerBranchBN3x3"
    CONV_1X1 = "Conv1x1"

    @classmethod
    def parse(cls, value) -> "DCFSVariant":
        if isinstance(value, cls):
            return value
        aliases = {"ocj": cls.OCJ, "3x3": cls.PER_BRANCH_BN_3X3, "perbranchbn3x3": cls.PER_BRANCH_BN_3X3,
                   "1x1": cls.CONV_1X1, "conv1x1": cls.CONV_1X1}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown DCFS variant {value!r}") from None


@dataclass(frozen=True)
class BlockDescriptor:
    kind: str
    in_channels: int
    out_channels: int
    repeats: int = 1
    shortcut: bool = False
    variant: DCFSVariant | None = None

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.kind == "DCFS" and self.out_channels % 2:
            raise ValueError("DCFS out_channels must be even")


class CBS(Sequential):
    """Conv (with bias) -> BatchNorm -> SiLU with same padding unless ``p`` is given."""

    kind = "CBS"

    def __init__(self, c1, c2, k=1, s=1, p=None, *, rng=None, dtype=np.float32):
        super().__init__(Conv2d(c1, c2, k, s, p, bias=True, rng=rng, dtype=dtype), BatchNorm2d(c2, dtype=dtype), SiLU())
        self.c1, self.c2 = c1, c2

    @property
    def conv(self) -> Conv2d:
        return self.layers[0]

    @property
    def bn(self) -> BatchNorm2d:
        return self.layers[1]

    def descriptor(self):
        return BlockDescriptor("CBS", self.c1, self.c2)

    def __repr__(self):
        s = self.conv.spec
        return f"CBS({self.c1}, {self.c2}, k={s.kernel_size}, s={s.stride})"


class Bottleneck(Module):
    """1x1 CBS then 3x3 CBS at constant width, optional residual add."""

    kind = "BottleneckV5"

    def __init__(self, c, shortcut=True, *, rng=None, dtype=np.float32):
        super().__init__()
        self.c = c
        self.shortcut = shortcut
        self.cv1 = CBS(c, c, 1, rng=rng, dtype=dtype)
        self.cv2 = CBS(c, c, 3, rng=rng, dtype=dtype)

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return add(x, y) if self.shortcut else y

    def backward(self, grad_out):
        g = self.cv1.backward(self.cv2.backward(grad_out))
        return g + grad_out if self.shortcut else g

    def descriptor(self):
        return BlockDescriptor(self.kind, self.c, self.c, 1, self.shortcut)


class C3(Module):
    """Baseline CSP block: two 1x1 branches, bottleneck chain on one, 1x1 merge."""

    kind = "CSP_C3"

    def __init__(self, c1, c2, n=1, shortcut=True, *, rng=None, dtype=np.float32):
        super().__init__()
        c_ = c2 // 2
        self.c1, self.c2, self.n, self.shortcut = c1, c2, n, shortcut
        self.cv1 = CBS(c1, c_, 1, rng=rng, dtype=dtype)
        self.cv2 = CBS(c1, c_, 1, rng=rng, dtype=dtype)
        self.m = Sequential(*(Bottleneck(c_, shortcut, rng=rng, dtype=dtype) for _ in range(n)))
        self.cat = Concat()
        self.cv3 = CBS(2 * c_, c2, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.cv3(self.cat([self.m(self.cv1(x)), self.cv2(x)]))

    def backward(self, grad_out):
        ga, gb = self.cat.backward(self.cv3.backward(grad_out))
        return self.cv1.backward(self.m.backward(ga)) + self.cv2.backward(gb)

    def descriptor(self):
        return BlockDescriptor(self.kind, self.c1, self.c2, self.n, self.shortcut)


class DCFS(Module):
    """Dense channel-compression block.

    Wiring, with ``h = c2 // 2``:

    * bypass: 1x1 conv ``c1 -> h``
    * main: 1x1 CBS ``c1 -> h`` followed by ``n`` bottleneck units at width ``h``
    * every unit output is tapped by a 3x3 conv ``h -> tap_width``
    * ``concat[bypass, tap_1..tap_n]`` goes through one shared BatchNorm + SiLU
      and a final 1x1 CBS back to ``c2``

    ``tap_width`` is ``c2 // 4`` by default; ``tap_ratio=0.5`` selects the
    wider ``c2 // 2`` taps. Variants change only the branch/fusion layers:

    * ``OCJ``: raw-conv branches, shared normalization over the concat
    * ``PerBranchBN3x3``: every branch is a full CBS and the shared
      normalization is replaced by a width-preserving 1x1 CBS
    * ``Conv1x1``: every branch is a CBS and taps are 1x1; concat feeds the
      output CBS directly
    """

    kind = "DCFS"

    def __init__(self, c1, c2, n=3, shortcut=True, variant="OCJ", tap_ratio=0.25,
                 *, rng=None, dtype=np.float32):
        super().__init__()
        variant = DCFSVariant.parse(variant)
        if n < 1:
            raise ValueError("DCFS needs at least one bottleneck unit")
        if c2 % 2:
            raise ValueError(f"DCFS out_channels must be even, got {c2}")
        tap = c2 * tap_ratio
        if tap < 1 or tap != int(tap):
            raise ValueError(f"DCFS out_channels {c2} does not split into taps of ratio {tap_ratio}")
        tap = int(tap)
        hidden = c2 // 2
        self.c1, self.c2, self.n, self.shortcut, self.variant = c1, c2, n, shortcut, variant
        self.hidden, self.tap_width = hidden, tap
        self.cat_width = hidden + n * tap

        if variant is DCFSVariant.OCJ:
            self.bypass = Conv2d(c1, hidden, 1, rng=rng, dtype=dtype)
            taps = [Conv2d(hidden, tap, 3, rng=rng, dtype=dtype) for _ in range(n)]
            self.fuse = Sequential(BatchNorm2d(self.cat_width, dtype=dtype), SiLU())
        else:
            k = 3 if variant is DCFSVariant.PER_BRANCH_BN_3X3 else 1
            self.bypass = CBS(c1, hidden, 1, rng=rng, dtype=dtype)
            taps = [CBS(hidden, tap, k, rng=rng, dtype=dtype) for _ in range(n)]
            if variant is DCFSVariant.PER_BRANCH_BN_3X3:
                self.fuse = CBS(self.cat_width, self.cat_width, 1, rng=rng, dtype=dtype)
            else:
                self.fuse = Sequential()
        self.cv1 = CBS(c1, hidden, 1, rng=rng, dtype=dtype)
        self.m = Sequential(*(Bottleneck(hidden, shortcut, rng=rng, dtype=dtype) for _ in range(n)))
        self.taps = Sequential(*taps)
        self.cat = Concat()
        self.cv2 = CBS(self.cat_width, c2, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        branches = [self.bypass(x)]
        h = self.cv1(x)
        for unit, tap in zip(self.m.layers, self.taps.layers):
            h = unit(h)
            branches.append(tap(h))
        return self.cv2(self.fuse(self.cat(branches)))

    def forward_main_path(self, x):
        """Entry conv and bottleneck chain only (no taps, no fusion)."""
        return self.m(self.cv1(x))

    def backward(self, grad_out):
        grads = self.cat.backward(self.fuse.backward(self.cv2.backward(grad_out)))
        gx = self.bypass.backward(grads[0])
        gh = None
        for i in range(self.n - 1, -1, -1):
            g = self.taps.layers[i].backward(grads[i + 1])
            if gh is not None:
                g = g + gh
            gh = self.m.layers[i].backward(g)
        return gx + self.cv1.backward(gh)

    def descriptor(self):
        return BlockDescriptor(self.kind, self.c1, self.c2, self.n, self.shortcut, self.variant)


class SPPF(Module):
    """1x1 CBS to half width, three chained 5x5 max pools, concat of four stages, 1x1 CBS."""

    kind = "SPPF"

    def __init__(self, c1, c2, k=5, *, rng=None, dtype=np.float32):
        super().__init__()
        c_ = c1 // 2
        self.c1, self.c2 = c1, c2
        self.cv1 = CBS(c1, c_, 1, rng=rng, dtype=dtype)
        self.pools = Sequential(MaxPool2d(k), MaxPool2d(k), MaxPool2d(k))
        self.cat = Concat()
        self.cv2 = CBS(4 * c_, c2, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        y = [self.cv1(x)]
        for pool in self.pools.layers:
            y.append(pool(y[-1]))
        return self.cv2(self.cat(y))

    def backward(self, grad_out):
        g = self.cat.backward(self.cv2.backward(grad_out))
        carry = g[3]
        for i in (2, 1, 0):
            carry = g[i] + self.pools.layers[i].backward(carry)
        return self.cv1.backward(carry)

    def descriptor(self):
        return BlockDescriptor(self.kind, self.c1, self.c2)
